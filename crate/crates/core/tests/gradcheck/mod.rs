//! Central-difference gradient checks of every loss on a tiny model.
#![allow(dead_code)]

use frest_core::autograd::{Mat, Var};
use frest_core::data::IGNORE;
use frest_core::losses::{self, DiscriminatingKind, Selection};
use frest_core::model::{Model, ModelConfig};
use frest_core::params::{GroupMask, ParamGroup, ParamId, Session};
use frest_core::queue::PositiveQueue;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
/// Relative error is `|a - n| / max(|a|, |n|, FLOOR)`.
pub const FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
pub const PROBES: usize = 20;

pub const LOSSES: [&str; 7] =
    ["spec", "resto", "dis_classifier", "dis_feature_distance", "dis_feature_stats", "self", "ent"];

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        image_size: 4,
        patch_size: 2,
        embed_dim: 4,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2,
        num_classes: 4,
        decoder_dim: 4,
        strainer_bottleneck: 2,
        proj_dim: 4,
        disc_hidden: 4,
    }
}

/// Toy model with every parameter jittered, so zero-initialized strainer
/// weights and biases also carry gradient.
pub fn toy_model(seed: u64) -> Model {
    let mut m = Model::new(toy_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let ids: Vec<ParamId> = m.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        m.params.get_mut(id).value.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
    }
    m
}

pub struct Inputs {
    adverse: Array3<f64>,
    normal: Array3<f64>,
    target: Mat,
    labels: Array2<u8>,
    queue: PositiveQueue,
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let mut m: Mat = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0));
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|v| v / n);
    }
    m
}

pub fn inputs(seed: u64) -> Inputs {
    let cfg = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = cfg.image_size;
    let img = |rng: &mut ChaCha8Rng| Array3::from_shape_fn((side, side, 3), |_| rng.random_range(0.0..1.0));
    let adverse = img(&mut rng);
    let normal = img(&mut rng);
    let target = unit_rows(&mut rng, cfg.num_patches(), cfg.proj_dim);
    let labels = Array2::from_shape_fn((side, side), |_| {
        if rng.random_bool(0.25) {
            IGNORE
        } else {
            rng.random_range(0..cfg.num_classes as u8)
        }
    });
    let mut queue = PositiveQueue::new(8, cfg.proj_dim);
    queue.push_rows(unit_rows(&mut rng, 6, cfg.proj_dim).view());
    Inputs { adverse, normal, target, labels, queue }
}

/// Builds the named loss on a fully trainable session.
fn build(s: &mut Session, model: &Model, x: &Inputs, loss: &str) -> Var {
    let all: Vec<usize> = (0..model.config().num_patches()).collect();
    match loss {
        "spec" => {
            let c_adv = model.encoder_forward(s, &x.adverse, true).unwrap();
            let c_norm = model.encoder_forward(s, &x.normal, true).unwrap();
            let za = model.project(s, c_adv.final_layer()).unwrap();
            let zn = model.project(s, c_norm.final_layer()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            losses::condition_specific_loss(&mut s.graph, za, zn, &x.queue, 0.7, Selection::Highest, &mut rng)
                .unwrap()
                .var
        }
        "resto" => {
            let f = model.encoder_forward(s, &x.adverse, false).unwrap();
            let fa = s.graph.gather_rows(f.final_layer(), &all);
            let p = model.project(s, fa).unwrap();
            let t = s.graph.constant(x.target.clone());
            losses::restoration_loss(&mut s.graph, p, t).unwrap().var
        }
        "dis_classifier" | "dis_feature_distance" | "dis_feature_stats" => {
            let f = model.encoder_forward(s, &x.adverse, false).unwrap();
            let c = model.encoder_forward(s, &x.adverse, true).unwrap();
            match loss {
                "dis_classifier" => losses::discriminating_loss(s, model, &f, &c).unwrap(),
                "dis_feature_distance" => {
                    losses::discriminating_variant(&mut s.graph, &f, &c, DiscriminatingKind::FeatureDistance).unwrap()
                }
                _ => losses::discriminating_variant(&mut s.graph, &f, &c, DiscriminatingKind::FeatureStatsDistance)
                    .unwrap(),
            }
        }
        "self" | "ent" => {
            let f = model.encoder_forward(s, &x.adverse, false).unwrap();
            let logits = model.decode(s, &f).unwrap();
            if loss == "self" {
                losses::self_training_loss(&mut s.graph, logits, &x.labels).unwrap().var
            } else {
                losses::entropy_loss(&mut s.graph, logits)
            }
        }
        other => panic!("unknown loss {other}"),
    }
}

fn value(model: &Model, x: &Inputs, loss: &str) -> f64 {
    let mut s = Session::frozen(&model.params);
    let v = build(&mut s, model, x, loss);
    s.graph.item(v)
}

pub struct Probe {
    pub param: String,
    pub group: ParamGroup,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Samples `probes` scalar parameters among those the loss depends on and
/// compares the tape gradient with a central difference.
pub fn check(loss: &str, seed: u64, probes: usize) -> Vec<Probe> {
    let model = toy_model(seed);
    let x = inputs(seed.wrapping_add(1));
    let mut s = Session::new(&model.params, GroupMask::all());
    let v = build(&mut s, &model, &x, loss);
    let mut gr = s.graph.backward(v);
    let grads = s.param_grads(&mut gr);
    drop(s);

    let candidates: Vec<(usize, usize)> = grads
        .iter()
        .enumerate()
        .filter_map(|(i, g)| g.as_ref().map(|g| (i, g.len())))
        .flat_map(|(i, n)| (0..n).map(move |k| (i, k)))
        .collect();
    assert!(!candidates.is_empty(), "{loss}: no parameter receives gradient");
    let ids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(loss.len() as u64));
    (0..probes)
        .map(|_| {
            let (i, k) = candidates[rng.random_range(0..candidates.len())];
            let id = ids[i];
            let analytic = grads[i].as_ref().unwrap().iter().nth(k).copied().unwrap();
            let mut plus = model.clone();
            let mut minus = model.clone();
            *plus.params.get_mut(id).value.iter_mut().nth(k).unwrap() += STEP;
            *minus.params.get_mut(id).value.iter_mut().nth(k).unwrap() -= STEP;
            let numeric = (value(&plus, &x, loss) - value(&minus, &x, loss)) / (2.0 * STEP);
            let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
            let p = model.params.get(id);
            Probe { param: format!("{}[{k}]", p.name), group: p.group, analytic, numeric, rel_error }
        })
        .collect()
}

pub fn max_rel_error(probes: &[Probe]) -> f64 {
    probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
}
