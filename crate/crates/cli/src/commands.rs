//! The six commands. Each writes into its own subdirectory of the run
//! directory:
//!
//! ```text
//! OUT/dataset/   manifest.json, images, config.json
//! OUT/pretrain/  checkpoint.json, metrics.jsonl, config.json
//! OUT/adapt/     metrics.jsonl, checkpoints/epoch_XXX.json, checkpoints/index.json,
//!                final.json, config.json; abort_state.json + abort_checkpoint.json on divergence
//! OUT/eval/      report.json, config.json
//! OUT/analyze/   shift_report.json, embeddings.csv, config.json
//! OUT/ablate/    <grid>.csv, config.json
//! ```
//!
//! A command that fails leaves a `FAILED` file holding the error message.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use frest_core::analysis::{self, AblationRow, CellConfig, EvalSummary, FeatureCompare, ShiftReport};
use frest_core::checkpoint::Checkpoint;
use frest_core::data::{build_dataset, Dataset};
use frest_core::dataset_io;
use frest_core::model::Model;
use frest_core::seed::derive_seed;
use frest_core::trainer::{adapt, pretrain_source, AdaptEvent, TrainState};
use frest_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const FAILED: &str = "FAILED";
pub const THREADS_ENV: &str = "FREST_KIT_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    Pretrain,
    Adapt,
    Eval,
    Analyze,
    Ablate,
}

impl Command {
    pub fn dir_name(self) -> &'static str {
        match self {
            Command::Synth => "dataset",
            Command::Pretrain => "pretrain",
            Command::Adapt => "adapt",
            Command::Eval => "eval",
            Command::Analyze => "analyze",
            Command::Ablate => "ablate",
        }
    }
}

pub fn stage_dir(cfg: &RunConfig, cmd: Command) -> PathBuf {
    cfg.out.join(cmd.dir_name())
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Append-only JSON-lines writer.
struct Jsonl {
    path: PathBuf,
    w: BufWriter<File>,
}

impl Jsonl {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Jsonl { w: BufWriter::new(f), path })
    }

    fn push<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.w, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Runs `cmd`: snapshots the resolved config, clears any stale failure
/// marker, and writes a new one if the command fails.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<String> {
    let dir = stage_dir(cfg, cmd);
    create_dir(&dir)?;
    let marker = dir.join(FAILED);
    if marker.exists() {
        std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let res = cfg.save(&dir.join("config.json")).and_then(|_| match cmd {
        Command::Synth => synth(cfg, &dir),
        Command::Pretrain => pretrain(cfg, &dir),
        Command::Adapt => adapt_cmd(cfg, &dir),
        Command::Eval => eval(cfg, &dir),
        Command::Analyze => analyze(cfg, &dir),
        Command::Ablate => ablate(cfg, &dir),
    });
    if let Err(e) = &res {
        // Best effort: the original error matters more than a marker failure.
        let _ = std::fs::write(&marker, format!("{e}\n"));
    }
    res
}

fn synth(cfg: &RunConfig, dir: &Path) -> Result<String> {
    let ds = build_dataset(&cfg.data, cfg.seed)?;
    let m = dataset_io::export_dataset(&ds, &cfg.data, cfg.seed, dir)?;
    Ok(format!("wrote {} entries to {}", m.len(), dir.display()))
}

/// Loads the run's dataset and checks it was built from this config.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = stage_dir(cfg, Command::Synth);
    let (m, ds) = dataset_io::import_dataset(&dir)?;
    if m.config != cfg.data || m.seed != cfg.seed {
        return Err(Error::Dataset(format!(
            "{} was generated with a different data config or seed; re-run synth",
            dir.display()
        )));
    }
    Ok(ds)
}

fn load_model(path: &Path) -> Result<Model> {
    Checkpoint::load(path)?.to_model()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLine {
    pub epoch: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal_miou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adverse_miou: Option<f64>,
}

fn pretrain(cfg: &RunConfig, dir: &Path) -> Result<String> {
    let ds = load_dataset(cfg)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let epochs = pretrain_source(&mut model, &ds.source, &cfg.pretrain, cfg.seed, |e, _| {
        log::info!("pretrain epoch {} loss {:.5}", e.epoch, e.loss);
    })?;
    let ev = analysis::evaluate(&model, &ds.val, false)?;
    let mut log = Jsonl::create(dir.join("metrics.jsonl"))?;
    let last = epochs.len().saturating_sub(1);
    for (k, e) in epochs.iter().enumerate() {
        let (normal_miou, adverse_miou) = if k == last { (Some(ev.normal_miou), Some(ev.adverse_miou)) } else { (None, None) };
        log.push(&PretrainLine { epoch: e.epoch, loss: e.loss, normal_miou, adverse_miou })?;
    }
    log.finish()?;
    Checkpoint::from_model(&model).save(&dir.join("checkpoint.json"))?;
    Ok(format!("pretrained {} epochs; normal-val mIoU {:.4}, adverse-val mIoU {:.4}", epochs.len(), ev.normal_miou, ev.adverse_miou))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub index: usize,
    pub iteration: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbortState {
    pub iteration: usize,
    pub error: String,
    pub queue_len: usize,
    pub checkpoint: String,
}

fn adapt_cmd(cfg: &RunConfig, dir: &Path) -> Result<String> {
    let ds = load_dataset(cfg)?;
    let model = load_model(&stage_dir(cfg, Command::Pretrain).join("checkpoint.json"))?;
    let ck_dir = dir.join("checkpoints");
    create_dir(&ck_dir)?;
    for stale in ["final.json", "abort_state.json", "abort_checkpoint.json"] {
        let p = dir.join(stale);
        if p.exists() {
            std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    let mut state = TrainState::new(model, cfg.hp.clone(), cfg.adapt.optimizer, cfg.seed)?;
    let mut log = Jsonl::create(dir.join("metrics.jsonl"))?;
    let mut index = Vec::new();
    let res = adapt(&mut state, &ds.train, &cfg.adapt, |ev| match ev {
        AdaptEvent::Iteration(rec) => log.push(rec),
        AdaptEvent::Snapshot { index: k, iteration, model } => {
            let file = format!("epoch_{k:03}.json");
            Checkpoint::from_model(model).save(&ck_dir.join(&file))?;
            index.push(SnapshotEntry { index: k, iteration, file });
            Ok(())
        }
    });
    log.finish()?;
    write_json(&ck_dir.join("index.json"), &index)?;
    if let Err(e) = res {
        let checkpoint = "abort_checkpoint.json".to_string();
        Checkpoint::from_model(&state.model).save(&dir.join(&checkpoint))?;
        let dump = AbortState { iteration: state.iteration, error: e.to_string(), queue_len: state.queue.len(), checkpoint };
        write_json(&dir.join("abort_state.json"), &dump)?;
        return Err(e);
    }
    Checkpoint::from_model(&state.model).save(&dir.join("final.json"))?;
    Ok(format!("adapted {} iterations, {} snapshots", state.iteration, index.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub checkpoint: String,
    pub adverse_miou: f64,
    pub normal_miou: f64,
    pub per_condition: BTreeMap<String, f64>,
    pub feature_compare: FeatureCompare,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: EvalEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapted: Option<EvalEntry>,
}

fn eval_entry(path: &Path, ds: &Dataset) -> Result<EvalEntry> {
    let model = load_model(path)?;
    let EvalSummary { adverse_miou, normal_miou, per_condition } = analysis::evaluate(&model, &ds.val, false)?;
    Ok(EvalEntry {
        checkpoint: path.display().to_string(),
        adverse_miou,
        normal_miou,
        per_condition: per_condition.into_iter().map(|(c, v)| (c.name().to_string(), v)).collect(),
        feature_compare: analysis::inference_feature_compare(&model, &ds.val)?,
    })
}

fn eval(cfg: &RunConfig, dir: &Path) -> Result<String> {
    let ds = load_dataset(cfg)?;
    let source = eval_entry(&stage_dir(cfg, Command::Pretrain).join("checkpoint.json"), &ds)?;
    let final_path = stage_dir(cfg, Command::Adapt).join("final.json");
    let adapted = if final_path.exists() { Some(eval_entry(&final_path, &ds)?) } else { None };
    let mut msg = format!("source: adverse {:.4} normal {:.4}", source.adverse_miou, source.normal_miou);
    if let Some(a) = &adapted {
        msg += &format!("; adapted: adverse {:.4} normal {:.4}", a.adverse_miou, a.normal_miou);
    }
    write_json(&dir.join("report.json"), &EvalReport { source, adapted })?;
    Ok(msg)
}

fn analyze(cfg: &RunConfig, dir: &Path) -> Result<String> {
    let ds = load_dataset(cfg)?;
    let adapt_dir = stage_dir(cfg, Command::Adapt);
    let index: Vec<SnapshotEntry> = read_json(&adapt_dir.join("checkpoints").join("index.json"))?;
    let models: Vec<(usize, Model)> = index
        .iter()
        .map(|e| Ok((e.iteration, load_model(&adapt_dir.join("checkpoints").join(&e.file))?)))
        .collect::<Result<_>>()?;
    let refs: Vec<(usize, &Model)> = models.iter().map(|(i, m)| (*i, m)).collect();
    let report: ShiftReport =
        analysis::shift_report(&refs, &ds.val, cfg.analyze.subsample, derive_seed(cfg.seed, "shift-subsample"))?;
    write_json(&dir.join("shift_report.json"), &report)?;
    let last = &models.last().ok_or_else(|| Error::EmptySet("snapshots".into()))?.1;
    let rows = analysis::export_embeddings(last, &ds.val, cfg.hp.conf_threshold, &dir.join("embeddings.csv"))?;
    Ok(format!("{} snapshots analyzed, {rows} embedding rows", models.len()))
}

/// Worker count from `FREST_KIT_THREADS`, else the machine's parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

pub fn write_rows(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn ablate(cfg: &RunConfig, dir: &Path) -> Result<String> {
    let ds = load_dataset(cfg)?;
    let model = load_model(&stage_dir(cfg, Command::Pretrain).join("checkpoint.json"))?;
    let mut adapt = cfg.adapt.clone();
    if let Some(n) = cfg.ablate.total_iters {
        adapt.total_iters = n;
    }
    adapt.inject_nan_at = None;
    let base = CellConfig { hp: cfg.hp.clone(), adapt };
    let threads = thread_count();
    let mut summary = Vec::new();
    for grid in &cfg.ablate.grids {
        let cells = analysis::named_grid(grid)?;
        let rows = analysis::ablation_run(grid, &cells, &base, &cfg.ablate.seeds, &model, &ds.train, &ds.val, threads)?;
        for c in &cells {
            let ok: Vec<f64> = rows.iter().filter(|r| r.cell == c.name).filter_map(|r| r.adverse_miou).collect();
            let mean = ok.iter().sum::<f64>() / ok.len().max(1) as f64;
            log::info!(
                "{grid}/{}: adverse mIoU {:.4} over {} seeds (full-scale reference {:?})",
                c.name,
                mean,
                ok.len(),
                c.reference_miou
            );
        }
        write_rows(&dir.join(format!("{grid}.csv")), &rows)?;
        let failed = rows.iter().filter(|r| r.error.is_some()).count();
        summary.push(format!("{grid}: {} rows ({failed} failed)", rows.len()));
    }
    Ok(summary.join("; "))
}
