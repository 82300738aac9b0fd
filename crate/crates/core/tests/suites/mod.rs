//! Randomized oracle suites shared by the integration tests and the
//! acceptance target. Each returns a one-line summary on success and a
//! description of the first mismatch on failure.
#![allow(dead_code)]

use std::collections::VecDeque;

use frest_core::analysis;
use frest_core::autograd::{Graph, Mat};
use frest_core::data::IGNORE;
use frest_core::losses::{self, DiscriminatingKind, Positive, Selection};
use frest_core::model::{FeaturePack, Model, ModelConfig};
use frest_core::params::Session;
use frest_core::queue::PositiveQueue;
use frest_core::trainer::pseudo_labels_from_logits;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracles;

pub const LOSS_TOL: f64 = 1e-6;
/// Accumulation-order slack for the closed-form special values.
pub const SPECIAL_TOL: f64 = 1e-12;
pub const HAUSDORFF_TOL: f64 = 1e-9;
pub const MIOU_TOL: f64 = 1e-12;

pub type Outcome = Result<String, String>;

pub fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
}

fn unit_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    let mut m = random_mat(rng, r, c, 1.0);
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-3);
        row.mapv_inplace(|v| v / n);
    }
    m
}

fn close(what: &str, case: usize, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what} case {case}: got {got}, oracle {want}"))
    }
}

/// Every loss against its brute-force oracle on `instances` random inputs.
pub fn loss_oracles(instances: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut track = |got: f64, want: f64| worst = worst.max((got - want).abs());

    for case in 0..instances {
        // Contrastive loss, all four selection strategies.
        let n = rng.random_range(0..6);
        let d = rng.random_range(2..6);
        let qlen = rng.random_range(1..10);
        let tau = rng.random_range(0.1..1.0);
        let a = unit_mat(&mut rng, n, d);
        let neg = unit_mat(&mut rng, n, d);
        let mut queue = PositiveQueue::new(16, d);
        queue.push_rows(unit_mat(&mut rng, qlen, d).view());
        let qrows = rows(&queue.to_matrix());
        let (ar, nr) = (rows(&a), rows(&neg));
        for strategy in [Selection::Highest, Selection::Lowest, Selection::Random, Selection::All] {
            let mut g = Graph::new();
            let av = g.variable(a.clone());
            let nv = g.variable(neg.clone());
            let mut lib_rng = ChaCha8Rng::seed_from_u64(case as u64);
            let term = losses::condition_specific_loss(&mut g, av, nv, &queue, tau, strategy, &mut lib_rng)
                .map_err(|e| format!("contrastive case {case}: {e}"))?;
            let got = g.item(term.var);
            let mut draw = ChaCha8Rng::seed_from_u64(case as u64);
            let want = match strategy {
                Selection::All => {
                    if n == 0 {
                        0.0
                    } else {
                        oracles::contrastive_all(&ar, &qrows, &nr, tau)
                    }
                }
                _ => {
                    let pos: Vec<Vec<f64>> = ar
                        .iter()
                        .map(|x| {
                            let k = match strategy {
                                Selection::Highest => oracles::argmax_sim(x, &qrows),
                                Selection::Lowest => oracles::argmin_sim(x, &qrows),
                                _ => draw.random_range(0..qrows.len()),
                            };
                            qrows[k].clone()
                        })
                        .collect();
                    oracles::contrastive(&ar, &pos, &nr, tau)
                }
            };
            close(&format!("contrastive {strategy:?}"), case, got, want, LOSS_TOL)?;
            track(got, want);
        }

        // Restoration.
        let n = rng.random_range(0..8);
        let d = rng.random_range(1..6);
        let p = random_mat(&mut rng, n, d, 1.0);
        let t = random_mat(&mut rng, n, d, 1.0);
        let mut g = Graph::new();
        let pv = g.variable(p.clone());
        let tv = g.constant(t.clone());
        let v = losses::restoration_loss(&mut g, pv, tv).unwrap().var;
        let got = g.item(v);
        let want = oracles::restoration(&rows(&p), &rows(&t));
        close("restoration", case, got, want, LOSS_TOL)?;
        track(got, want);

        // Discriminator loss from probabilities, including saturated ones.
        let layers = rng.random_range(1..5);
        let n = rng.random_range(1..8);
        let sample = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| if rng.random_bool(0.1) { rng.random_range(0..2) as f64 } else { rng.random_range(0.0..1.0) }).collect()
        };
        let pf: Vec<Vec<f64>> = (0..layers).map(|_| sample(&mut rng)).collect();
        let pc: Vec<Vec<f64>> = (0..layers).map(|_| sample(&mut rng)).collect();
        let mut g = Graph::new();
        let to_vars = |g: &mut Graph, ps: &[Vec<f64>]| -> Vec<_> {
            ps.iter().map(|p| g.variable(Array2::from_shape_vec((n, 1), p.clone()).unwrap())).collect()
        };
        let vf = to_vars(&mut g, &pf);
        let vc = to_vars(&mut g, &pc);
        let v = losses::discriminating_loss_from_probs(&mut g, &vf, &vc).unwrap();
        let got = g.item(v);
        let want = oracles::discriminating(&pf, &pc);
        close("discriminating", case, got, want, LOSS_TOL)?;
        track(got, want);

        // Distance variants over random feature packs.
        let layers = rng.random_range(1..4);
        let n = rng.random_range(1..6);
        let d = rng.random_range(1..5);
        let f: Vec<Mat> = (0..layers).map(|_| random_mat(&mut rng, n, d, 2.0)).collect();
        let c: Vec<Mat> = (0..layers).map(|_| random_mat(&mut rng, n, d, 2.0)).collect();
        let fr: Vec<_> = f.iter().map(rows).collect();
        let cr: Vec<_> = c.iter().map(rows).collect();
        for kind in [DiscriminatingKind::FeatureDistance, DiscriminatingKind::FeatureStatsDistance] {
            let mut g = Graph::new();
            let fp = FeaturePack { per_layer: f.iter().map(|m| g.variable(m.clone())).collect() };
            let cp = FeaturePack { per_layer: c.iter().map(|m| g.constant(m.clone())).collect() };
            let v = losses::discriminating_variant(&mut g, &fp, &cp, kind).unwrap();
            let got = g.item(v);
            let want = match kind {
                DiscriminatingKind::FeatureDistance => oracles::feature_distance(&fr, &cr),
                _ => oracles::feature_stats_distance(&fr, &cr),
            };
            close(&format!("{kind:?}"), case, got, want, LOSS_TOL)?;
            track(got, want);
        }

        // Self-training cross-entropy and entropy.
        let pixels = rng.random_range(1..20);
        let classes = rng.random_range(2..6);
        let logits = random_mat(&mut rng, pixels, classes, 4.0);
        let labels: Vec<u8> = (0..pixels)
            .map(|_| if rng.random_bool(0.3) { IGNORE } else { rng.random_range(0..classes as u8) })
            .collect();
        let mut g = Graph::new();
        let lv = g.variable(logits.clone());
        let lab = Array2::from_shape_vec((1, pixels), labels.clone()).unwrap();
        let v = losses::self_training_loss(&mut g, lv, &lab).unwrap().var;
        let got = g.item(v);
        let opt: Vec<Option<usize>> = labels.iter().map(|&l| (l != IGNORE).then_some(l as usize)).collect();
        let want = oracles::cross_entropy(&rows(&logits), &opt);
        close("self-training", case, got, want, LOSS_TOL)?;
        track(got, want);
        let e = losses::entropy_loss(&mut g, lv);
        let got = g.item(e);
        let want = oracles::entropy(&rows(&logits));
        close("entropy", case, got, want, LOSS_TOL)?;
        track(got, want);

        // Class-balanced pseudo labels.
        let side = rng.random_range(2..6);
        let logits = random_mat(&mut rng, side * side, classes, 3.0);
        let keep = rng.random_range(0.05..=1.0);
        let got = pseudo_labels_from_logits(&logits, side, keep).unwrap();
        let probs: Vec<Vec<f64>> = rows(&logits)
            .into_iter()
            .map(|r| {
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = r.iter().map(|v| (v - m).exp()).sum();
                r.iter().map(|v| (v - m).exp() / z).collect()
            })
            .collect();
        let want: Vec<u8> = oracles::class_balanced_mask(&probs, keep)
            .into_iter()
            .map(|c| c.map_or(IGNORE, |c| c as u8))
            .collect();
        if got.iter().copied().collect::<Vec<_>>() != want {
            return Err(format!("pseudo labels case {case}: {got:?} vs {want:?}"));
        }
    }

    // Discriminator loss computed through the model's own heads.
    let cfg = ModelConfig { embed_dim: 8, num_heads: 2, disc_hidden: 6, strainer_bottleneck: 2, ..Default::default() };
    for case in 0..instances {
        let model = Model::new(cfg.clone(), case as u64).unwrap();
        let n = rng.random_range(1..6);
        let f: Vec<Mat> = (0..cfg.num_layers).map(|_| random_mat(&mut rng, n, cfg.embed_dim, 1.5)).collect();
        let c: Vec<Mat> = (0..cfg.num_layers).map(|_| random_mat(&mut rng, n, cfg.embed_dim, 1.5)).collect();
        let mut s = Session::frozen(&model.params);
        let fp = FeaturePack { per_layer: f.iter().map(|m| s.graph.constant(m.clone())).collect() };
        let cp = FeaturePack { per_layer: c.iter().map(|m| s.graph.constant(m.clone())).collect() };
        let v = losses::discriminating_loss(&mut s, &model, &fp, &cp).unwrap();
        let got = s.graph.item(v);
        let weights = |l: usize, k: usize| {
            let w = &model.params.get(model.params.find(&format!("discriminator.layer{l}.fc{k}.weight")).unwrap()).value;
            let b = &model.params.get(model.params.find(&format!("discriminator.layer{l}.fc{k}.bias")).unwrap()).value;
            (rows(w), b.iter().copied().collect::<Vec<f64>>())
        };
        let probs = |feats: &[Mat]| -> Vec<Vec<f64>> {
            (0..cfg.num_layers)
                .map(|l| {
                    let (w1, b1) = weights(l, 1);
                    let (w2, b2) = weights(l, 2);
                    rows(&feats[l]).iter().map(|x| oracles::sigmoid(oracles::mlp(x, &w1, &b1, &w2, &b2)[0])).collect()
                })
                .collect()
        };
        let want = oracles::discriminating(&probs(&f), &probs(&c));
        close("discriminating via model", case, got, want, LOSS_TOL)?;
        track(got, want);
    }
    Ok(format!("{instances} instances per loss, worst |diff| {worst:.2e} (tol {LOSS_TOL:e})"))
}

/// Closed-form values: ln 2, 8·ln 2, ln C, and 0.
pub fn special_values() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let mut out = Vec::new();

    let mut g = Graph::new();
    let a = g.variable(Array2::from_shape_vec((2, 2), vec![0.6, 0.8, 1.0, 0.0]).unwrap());
    let n = g.constant(Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 0.0, 1.0]).unwrap());
    let mut q = PositiveQueue::new(4, 2);
    q.push_rows(Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap().view());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let v = losses::condition_specific_loss(&mut g, a, n, &q, 0.7, Selection::Highest, &mut rng).unwrap().var;
    let got = g.item(v);
    close("symmetric contrastive", 0, got, ln2, SPECIAL_TOL)?;
    out.push(format!("contrastive {got:.15}"));

    let cfg = ModelConfig::default();
    let mut model = Model::new(cfg.clone(), 0).unwrap();
    model.zero_discriminator_output();
    let mut s = Session::frozen(&model.params);
    let mut grng = ChaCha8Rng::seed_from_u64(1);
    let feats: Vec<_> =
        (0..cfg.num_layers).map(|_| s.graph.constant(random_mat(&mut grng, 5, cfg.embed_dim, 1.0))).collect();
    let pack = FeaturePack { per_layer: feats };
    let v = losses::discriminating_loss(&mut s, &model, &pack, &pack).unwrap();
    let got = s.graph.item(v);
    if cfg.num_layers != 4 {
        return Err(format!("default model has {} layers, expected 4", cfg.num_layers));
    }
    close("discriminator at one half", 0, got, 8.0 * ln2, SPECIAL_TOL)?;
    out.push(format!("discriminator {got:.15}"));

    for c in [2usize, 4, 19] {
        let mut g = Graph::new();
        let l = g.variable(Array2::from_elem((7, c), 0.3));
        let e = losses::entropy_loss(&mut g, l);
        let got = g.item(e);
        close("uniform entropy", c, got, (c as f64).ln(), SPECIAL_TOL)?;
        out.push(format!("entropy(C={c}) {got:.15}"));
    }

    let mut g = Graph::new();
    let x = random_mat(&mut grng, 6, 5, 1.0);
    let p = g.variable(x.clone());
    let t = g.constant(x);
    let v = losses::restoration_loss(&mut g, p, t).unwrap().var;
    let got = g.item(v);
    if got != 0.0 {
        return Err(format!("identical restoration inputs give {got}"));
    }
    out.push("restoration 0".into());
    Ok(out.join(", "))
}

/// FIFO order and capacity against a `VecDeque` model, and HIGHEST/LOWEST
/// selection against linear scans, with ties forced by a coarse value grid.
pub fn queue_properties(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selections = 0;
    for case in 0..cases {
        let cap = rng.random_range(1..24);
        let dim = rng.random_range(1..4);
        let mut q = PositiveQueue::new(cap, dim);
        let mut model: VecDeque<Vec<f64>> = VecDeque::new();
        for _ in 0..rng.random_range(1..12) {
            let n = rng.random_range(0..9);
            let batch = Array2::from_shape_fn((n, dim), |_| rng.random_range(-2..=2) as f64);
            q.push_rows(batch.view());
            for r in rows(&batch) {
                model.push_back(r);
                if model.len() > cap {
                    model.pop_front();
                }
            }
            if q.len() > cap {
                return Err(format!("case {case}: length {} exceeds capacity {cap}", q.len()));
            }
            let got = rows(&q.to_matrix());
            if got != model.iter().cloned().collect::<Vec<_>>() {
                return Err(format!("case {case}: FIFO contents diverge"));
            }
            if q.is_empty() {
                continue;
            }
            let anchor: Vec<f64> = (0..dim).map(|_| rng.random_range(-2..=2) as f64).collect();
            let av = ndarray::Array1::from(anchor.clone());
            let mut r = ChaCha8Rng::seed_from_u64(0);
            for (strategy, want) in [
                (Selection::Highest, oracles::argmax_sim(&anchor, &got)),
                (Selection::Lowest, oracles::argmin_sim(&anchor, &got)),
            ] {
                let pick = losses::select_positive(av.view(), &q, strategy, &mut r).unwrap();
                if pick != Positive::Single(want) {
                    return Err(format!("case {case}: {strategy:?} picked {pick:?}, oracle {want}"));
                }
                selections += 1;
            }
        }
    }
    Ok(format!("{cases} queues, {selections} selections checked"))
}

/// mIoU against the confusion-matrix oracle and Hausdorff distance against
/// the double loop.
pub fn metric_oracles(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 4;
    for case in 0..200 {
        let pred = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..classes as u8));
        let gt = Array2::from_shape_fn((8, 8), |_| {
            if rng.random_bool(0.1) {
                IGNORE
            } else {
                rng.random_range(0..classes as u8)
            }
        });
        let (per, mean) = analysis::miou(&pred, &gt, classes).map_err(|e| e.to_string())?;
        let pv: Vec<u8> = pred.iter().copied().collect();
        let gv: Vec<u8> = gt.iter().copied().collect();
        let want = oracles::iou_per_class(&pv, &gv, classes, IGNORE);
        for (c, (a, b)) in per.iter().zip(&want).enumerate() {
            match (a, b) {
                (None, None) => {}
                (Some(a), Some(b)) => close(&format!("IoU class {c}"), case, *a, *b, MIOU_TOL)?,
                _ => return Err(format!("case {case}: class {c} presence differs ({a:?} vs {b:?})")),
            }
        }
        let present: Vec<f64> = want.iter().flatten().copied().collect();
        close("mIoU", case, mean, present.iter().sum::<f64>() / present.len() as f64, MIOU_TOL)?;
    }
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let d = rng.random_range(2..9);
        let (na, nb) = (rng.random_range(1..30), rng.random_range(1..30));
        let a = random_mat(&mut rng, na, d, 1.0);
        let b = random_mat(&mut rng, nb, d, 1.0);
        let got = analysis::hausdorff_cosine(&a, &b).map_err(|e| e.to_string())?;
        let back = analysis::hausdorff_cosine(&b, &a).map_err(|e| e.to_string())?;
        let want = oracles::hausdorff_cosine(&rows(&a), &rows(&b));
        close("hausdorff", case, got, want, HAUSDORFF_TOL)?;
        if got != back {
            return Err(format!("hausdorff case {case} not symmetric: {got} vs {back}"));
        }
        if analysis::hausdorff_cosine(&a, &a).map_err(|e| e.to_string())? != 0.0 {
            return Err(format!("hausdorff case {case}: identical sets not at 0"));
        }
        worst = worst.max((got - want).abs());
    }
    Ok(format!("200 label maps, 50 set pairs, worst Hausdorff |diff| {worst:.2e}"))
}
