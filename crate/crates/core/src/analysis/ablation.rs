//! Named sweep grids and the cell runner.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{PairedSample, TrainPair};
use crate::error::{Error, Result};
use crate::losses::Hyperparams;
use crate::model::Model;
use crate::overrides;
use crate::trainer::{adapt, AdaptConfig, TrainState};

use super::evaluate;

pub const GRIDS: [&str; 4] = ["selection", "conf_threshold", "queue_length", "loss_toggles"];

/// The part of a run configuration a cell may override.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub hp: Hyperparams,
    pub adapt: AdaptConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub overrides: Vec<(String, Value)>,
    /// Full-scale mIoU reported for this setting, for side-by-side logging.
    pub reference_miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub grid: String,
    pub cell: String,
    pub overrides: String,
    pub seed: u64,
    pub adverse_miou: Option<f64>,
    pub normal_miou: Option<f64>,
    pub reference_miou: Option<f64>,
    pub status: String,
    pub error: Option<String>,
}

fn cell(name: &str, overrides: &[(&str, Value)], reference: f64) -> AblationCell {
    AblationCell {
        name: name.to_string(),
        overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        reference_miou: Some(reference),
    }
}

/// Cells of a named grid. Queue lengths are the full-scale sweep
/// (50K..80K around 65K) rescaled so the default 4096 sits in the middle.
pub fn named_grid(name: &str) -> Result<Vec<AblationCell>> {
    let s = |v: &str| Value::String(v.to_string());
    let b = Value::Bool;
    Ok(match name {
        "selection" => vec![
            cell("highest", &[("hp.selection", s("highest"))], 68.6),
            cell("random", &[("hp.selection", s("random"))], 62.4),
            cell("lowest", &[("hp.selection", s("lowest"))], 56.6),
        ],
        "conf_threshold" => [67.5, 68.2, 68.6, 68.0, 67.7, 67.3, 67.4]
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let t = i as f64 / 10.0;
                cell(&format!("{t:.1}"), &[("hp.conf_threshold", Value::from(t))], r)
            })
            .collect(),
        "queue_length" => [50, 55, 60, 65, 70, 75, 80]
            .iter()
            .zip([68.3, 68.0, 68.4, 68.6, 68.1, 68.2, 67.9])
            .map(|(&k, r)| {
                let q = (4096.0 * k as f64 / 65.0).round() as u64;
                cell(&q.to_string(), &[("hp.queue_length", Value::from(q))], r)
            })
            .collect(),
        "loss_toggles" => vec![
            cell("step1_none", &[("hp.losses.self_step1", b(false)), ("hp.losses.spec", b(false))], 64.3),
            cell("step1_self", &[("hp.losses.spec", b(false))], 64.8),
            cell("step1_self_spec", &[], 68.6),
            cell("step2_none", &[("hp.losses.resto", b(false)), ("hp.losses.dis", b(false))], 62.7),
            cell("step2_resto", &[("hp.losses.dis", b(false))], 67.2),
            cell("step2_resto_dis", &[], 68.6),
        ],
        other => return Err(Error::Config(format!("unknown grid {other:?}; expected one of {GRIDS:?}"))),
    })
}

fn describe(overrides: &[(String, Value)]) -> String {
    overrides.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

fn run_cell(base: &CellConfig, cell: &AblationCell, seed: u64, model: &Model, train: &[TrainPair], val: &[PairedSample]) -> Result<(f64, f64)> {
    let cfg = overrides::apply(base, &cell.overrides)?;
    cfg.hp.validate()?;
    let mut state = TrainState::new(model.clone(), cfg.hp, cfg.adapt.optimizer, seed)?;
    adapt(&mut state, train, &cfg.adapt, |_| Ok(()))?;
    let ev = evaluate(&state.model, val, false)?;
    Ok((ev.adverse_miou, ev.normal_miou))
}

/// Adapts `model` once per (cell, seed) and scores the result. Cells run
/// on up to `threads` workers; a failing cell is recorded and the rest
/// continue. Rows come back ordered by cell, then seed.
pub fn ablation_run(
    grid: &str,
    cells: &[AblationCell],
    base: &CellConfig,
    seeds: &[u64],
    model: &Model,
    train: &[TrainPair],
    val: &[PairedSample],
    threads: usize,
) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(&AblationCell, u64)> = cells.iter().flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, seed)| {
                let res = run_cell(base, c, seed, model, train, val);
                if let Err(e) = &res {
                    log::warn!("ablation {grid}/{} seed {seed} failed: {e}", c.name);
                }
                let (adverse_miou, normal_miou, error) = match res {
                    Ok((a, n)) => (Some(a), Some(n), None),
                    Err(e) => (None, None, Some(e.to_string())),
                };
                AblationRow {
                    grid: grid.to_string(),
                    cell: c.name.clone(),
                    overrides: describe(&c.overrides),
                    seed,
                    adverse_miou,
                    normal_miou,
                    reference_miou: c.reference_miou,
                    status: if error.is_none() { "ok" } else { "failed" }.to_string(),
                    error,
                }
            })
            .collect()
    });
    Ok(rows)
}
