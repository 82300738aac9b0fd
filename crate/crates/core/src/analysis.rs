//! Segmentation metrics, feature-shift diagnostics, and embedding export.

use std::io::Write;
use std::path::Path;

use frest_autograd::Mat;
use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Condition, PairedSample, IGNORE};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seed::derive_seed;

mod ablation;
pub use ablation::{ablation_run, named_grid, AblationCell, AblationRow, CellConfig, GRIDS};

/// Accumulated pixel confusion counts, `counts[gt][pred]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    counts: Array2<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion { counts: Array2::zeros((classes, classes)) }
    }

    pub fn add(&mut self, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape { expected: format!("{:?}", gt.dim()), actual: format!("{:?}", pred.dim()) });
        }
        let c = self.counts.nrows();
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE {
                continue;
            }
            if g as usize >= c || p as usize >= c {
                return Err(Error::InvalidLabel { label: g.max(p), num_classes: c });
            }
            self.counts[[g as usize, p as usize]] += 1;
        }
        Ok(())
    }

    /// Per-class IoU (`None` when the class is absent from both maps) and
    /// the mean over present classes.
    pub fn iou(&self) -> (Vec<Option<f64>>, f64) {
        let c = self.counts.nrows();
        let per: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.counts[[k, k]];
                let gt_k: u64 = self.counts.row(k).sum();
                let pred_k: u64 = self.counts.column(k).sum();
                let union = gt_k + pred_k - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per.iter().flatten().copied().collect();
        let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        (per, mean)
    }
}

pub fn miou(pred: &Array2<u8>, gt: &Array2<u8>, classes: usize) -> Result<(Vec<Option<f64>>, f64)> {
    let mut conf = Confusion::new(classes);
    conf.add(pred, gt)?;
    Ok(conf.iou())
}

fn cosine_distance(a: ArrayView1<f64>, b: ArrayView1<f64>, na: f64, nb: f64) -> f64 {
    1.0 - a.dot(&b) / (na * nb)
}

/// Symmetric Hausdorff distance between row sets under cosine distance.
pub fn hausdorff_cosine(a: &Mat, b: &Mat) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::EmptySet("hausdorff input".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape { expected: format!("dim {}", a.ncols()), actual: format!("dim {}", b.ncols()) });
    }
    let norms = |m: &Mat| -> Result<Vec<f64>> {
        m.rows()
            .into_iter()
            .map(|r| {
                let n = r.dot(&r).sqrt();
                if n == 0.0 {
                    Err(Error::ZeroNorm)
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let (na, nb) = (norms(a)?, norms(b)?);
    let mut row_min = vec![f64::INFINITY; a.nrows()];
    let mut col_min = vec![f64::INFINITY; b.nrows()];
    for (i, ra) in a.rows().into_iter().enumerate() {
        for (j, rb) in b.rows().into_iter().enumerate() {
            // Identical vectors are exactly 0 apart; rounding elsewhere is
            // clamped so no distance is negative.
            let mut d = cosine_distance(ra, rb, na[i], nb[j]).max(0.0);
            if d < 1e-12 && ra == rb {
                d = 0.0;
            }
            row_min[i] = row_min[i].min(d);
            col_min[j] = col_min[j].min(d);
        }
    }
    let directed = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    Ok(directed(&row_min).max(directed(&col_min)))
}

/// Inter- and intra-domain feature shift across snapshots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub iterations: Vec<usize>,
    pub d_inter: Vec<f64>,
    pub d_adv: Vec<f64>,
    pub d_normal: Vec<f64>,
    pub subsample: usize,
    pub subsample_seed: u64,
}

/// Final-layer restored features of every image, stacked by rows.
fn stacked_features<'a>(model: &Model, images: impl Iterator<Item = &'a crate::data::Image>) -> Result<Mat> {
    let mut blocks = Vec::new();
    for img in images {
        let mut f = model.features(img, false)?;
        blocks.push(f.pop().ok_or_else(|| Error::EmptySet("encoder layers".into()))?);
    }
    if blocks.is_empty() {
        return Err(Error::EmptySet("feature images".into()));
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
}

fn subsample(m: Mat, limit: usize, seed: u64) -> Mat {
    if m.nrows() <= limit {
        return m;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, m.nrows(), limit).into_vec();
    idx.sort_unstable();
    m.select(Axis(0), &idx)
}

/// `snapshots` are `(iteration, model)` with the starting point first.
/// Features come from the final encoder layer without the strainer.
pub fn shift_report(snapshots: &[(usize, &Model)], eval: &[PairedSample], limit: usize, seed: u64) -> Result<ShiftReport> {
    if snapshots.len() < 2 {
        return Err(Error::Config("shift_report needs at least two snapshots".into()));
    }
    if eval.is_empty() {
        return Err(Error::EmptySet("evaluation pairs".into()));
    }
    let features = |m: &Model| -> Result<(Mat, Mat)> {
        let adv = stacked_features(m, eval.iter().map(|p| &p.pair.adverse))?;
        let norm = stacked_features(m, eval.iter().map(|p| &p.pair.normal))?;
        // Same row subset at every snapshot so intra distances compare like with like.
        Ok((subsample(adv, limit, derive_seed(seed, "adverse")), subsample(norm, limit, derive_seed(seed, "normal"))))
    };
    let (adv0, norm0) = features(snapshots[0].1)?;
    let mut report = ShiftReport {
        iterations: Vec::new(),
        d_inter: Vec::new(),
        d_adv: Vec::new(),
        d_normal: Vec::new(),
        subsample: limit,
        subsample_seed: seed,
    };
    for (k, &(it, m)) in snapshots.iter().enumerate() {
        let (adv, norm) = if k == 0 { (adv0.clone(), norm0.clone()) } else { features(m)? };
        report.iterations.push(it);
        report.d_inter.push(hausdorff_cosine(&adv, &norm)?);
        report.d_adv.push(hausdorff_cosine(&adv, &adv0)?);
        report.d_normal.push(hausdorff_cosine(&norm, &norm0)?);
    }
    Ok(report)
}

/// Writes gated condition embeddings of both images of every pair as CSV
/// rows `image,condition,patch,confidence,z0..z{d-1}`. Returns the row count.
pub fn export_embeddings(model: &Model, pairs: &[PairedSample], threshold: f64, path: &Path) -> Result<usize> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let d = model.config().proj_dim;
    let header: Vec<String> = ["image", "condition", "patch", "confidence"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..d).map(|k| format!("z{k}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
    let mut rows = 0;
    for (i, p) in pairs.iter().enumerate() {
        let gated = crate::losses::gated_patches(&p.pair.confidence, threshold);
        let conf: Vec<f64> = p.pair.confidence.iter().copied().collect();
        for (tag, img) in [(p.pair.condition.name(), &p.pair.adverse), ("normal", &p.pair.normal)] {
            let z = model.embeddings(img, true)?;
            for &j in &gated {
                let vals: Vec<String> = z.row(j).iter().map(|v| format!("{v:.17e}")).collect();
                writeln!(w, "{i},{tag},{j},{},{}", conf[j], vals.join(",")).map_err(|e| Error::io(path, e))?;
                rows += 1;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

/// mIoU on adverse and normal images of the evaluation pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub adverse_miou: f64,
    pub normal_miou: f64,
    pub per_condition: Vec<(Condition, f64)>,
}

/// Scores `model` on `pairs`. Normal images are the clean scenes, so their
/// labels align exactly; adverse images share the scene's labels.
pub fn evaluate(model: &Model, pairs: &[PairedSample], use_strainer: bool) -> Result<EvalSummary> {
    let c = model.config().num_classes;
    let mut adverse = Confusion::new(c);
    let mut normal = Confusion::new(c);
    let mut per: Vec<(Condition, Confusion)> = Condition::ALL.iter().map(|&k| (k, Confusion::new(c))).collect();
    for p in pairs {
        let pred = model.predict(&p.pair.adverse, use_strainer)?;
        adverse.add(&pred, &p.labels)?;
        per.iter_mut().find(|(k, _)| *k == p.pair.condition).expect("known condition").1.add(&pred, &p.labels)?;
        normal.add(&model.predict(&p.clean, use_strainer)?, &p.labels)?;
    }
    Ok(EvalSummary {
        adverse_miou: adverse.iou().1,
        normal_miou: normal.iou().1,
        per_condition: per.into_iter().map(|(k, m)| (k, m.iou().1)).collect(),
    })
}

/// Adverse mIoU decoding from restored features (strainer off) and from
/// condition-infused features (strainer on).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCompare {
    pub restored: f64,
    pub condition_infused: f64,
}

pub fn inference_feature_compare(model: &Model, pairs: &[PairedSample]) -> Result<FeatureCompare> {
    Ok(FeatureCompare {
        restored: evaluate(model, pairs, false)?.adverse_miou,
        condition_infused: evaluate(model, pairs, true)?.adverse_miou,
    })
}
