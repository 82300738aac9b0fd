//! Training objectives for both alternating steps.
//!
//! Every function builds onto the caller's graph and returns a `1×1` node so
//! the trainer can weight and combine terms before a single backward pass.
//! Terms averaged over the confidence-gated patch set report `empty = true`
//! (and evaluate to zero) when that set is empty.

use frest_autograd::{Graph, Mat, Var};
use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::IGNORE;
use crate::error::{Error, Result};
use crate::model::{FeaturePack, Model};
use crate::params::Session;
use crate::queue::PositiveQueue;

/// Lower/upper clamp applied to discriminator outputs before the log.
pub const PROB_CLAMP: f64 = 1e-7;
const STD_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Highest,
    Random,
    Lowest,
    /// Every queue entry is a positive (multi-positive contrastive form).
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatingKind {
    /// Binary classification of encoder vs. condition-infused features.
    Classifier,
    FeatureDistance,
    FeatureStatsDistance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelSource {
    Ema,
    Student,
}

/// On/off switches for each loss term, used by ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossToggles {
    pub spec: bool,
    pub self_step1: bool,
    pub resto: bool,
    pub dis: bool,
    pub self_step2: bool,
    pub ent: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles { spec: true, self_step1: true, resto: true, dis: true, self_step2: true, ent: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub tau: f64,
    pub lambda_spec: f64,
    pub lambda_ent: f64,
    pub lambda_dis: f64,
    pub conf_threshold: f64,
    pub queue_length: usize,
    pub ema_decay: f64,
    /// Fraction of each predicted class kept by class-balanced pseudo-labeling.
    pub keep_fraction: f64,
    pub selection: Selection,
    pub discriminating: DiscriminatingKind,
    /// Flip the sign of the discriminating term in the step-2 objective.
    pub negate_dis: bool,
    pub pseudo_labels: PseudoLabelSource,
    pub losses: LossToggles,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            tau: 0.7,
            lambda_spec: 1e-2,
            lambda_ent: 1e-2,
            lambda_dis: 5e-5,
            conf_threshold: 0.2,
            queue_length: 4096,
            ema_decay: 0.9999,
            keep_fraction: 0.5,
            selection: Selection::Highest,
            discriminating: DiscriminatingKind::Classifier,
            negate_dis: false,
            pseudo_labels: PseudoLabelSource::Ema,
            losses: LossToggles::default(),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::Config(format!("conf_threshold {} outside [0, 1]", self.conf_threshold)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config(format!("keep_fraction {} outside (0, 1]", self.keep_fraction)));
        }
        if self.queue_length == 0 {
            return Err(Error::Config("queue_length must be positive".into()));
        }
        Ok(())
    }
}

/// A scalar loss node plus the empty-set warning flag.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub var: Var,
    pub empty: bool,
}

impl LossTerm {
    fn empty(g: &mut Graph, what: &str) -> Self {
        log::warn!("{what}: empty index set, contributing zero");
        LossTerm { var: g.scalar(0.0), empty: true }
    }
}

/// Indices of patches with confidence at or above `threshold`.
pub fn gated_patches(confidence: &Array2<f64>, threshold: f64) -> Vec<usize> {
    confidence.iter().enumerate().filter(|(_, &c)| c >= threshold).map(|(i, _)| i).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Positive {
    /// Oldest-first queue index of the chosen entry.
    Single(usize),
    All,
}

/// Chooses the representative positive for `anchor`. Argmax/argmin keep the
/// first (oldest) entry on ties.
pub fn select_positive<R: Rng + ?Sized>(
    anchor: ArrayView1<f64>,
    queue: &PositiveQueue,
    strategy: Selection,
    rng: &mut R,
) -> Result<Positive> {
    if queue.is_empty() {
        return Err(Error::EmptyQueue);
    }
    let pick = |better: fn(f64, f64) -> bool| {
        let mut best = 0;
        let mut best_sim = anchor.dot(&queue.get(0));
        for k in 1..queue.len() {
            let sim = anchor.dot(&queue.get(k));
            if better(sim, best_sim) {
                best = k;
                best_sim = sim;
            }
        }
        best
    };
    Ok(match strategy {
        Selection::Highest => Positive::Single(pick(|a, b| a > b)),
        Selection::Lowest => Positive::Single(pick(|a, b| a < b)),
        Selection::Random => Positive::Single(rng.random_range(0..queue.len())),
        Selection::All => Positive::All,
    })
}

/// Contrastive condition-specific loss averaged over the gated patches.
///
/// `anchors` and `negatives` are `|W|×d` unit embeddings, row-aligned. For
/// each anchor `a` with positive `p` and negative `n` the per-patch term is
/// `-log(e^{a·p/τ} / (e^{a·p/τ} + e^{a·n/τ})) = softplus((a·n - a·p)/τ)`.
pub fn condition_specific_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    anchors: Var,
    negatives: Var,
    queue: &PositiveQueue,
    tau: f64,
    strategy: Selection,
    rng: &mut R,
) -> Result<LossTerm> {
    if queue.is_empty() {
        return Err(Error::EmptyQueue);
    }
    let (rows, dim) = g.shape(anchors);
    if g.shape(negatives) != (rows, dim) || dim != queue.dim() {
        return Err(Error::Shape {
            expected: format!("anchors/negatives {rows}x{} matching queue dim", queue.dim()),
            actual: format!("{:?} / {:?}", g.shape(anchors), g.shape(negatives)),
        });
    }
    if rows == 0 {
        return Ok(LossTerm::empty(g, "condition-specific loss"));
    }

    let an = g.mul(anchors, negatives);
    let sn = g.sum_cols(an);
    let sn = g.scale(sn, 1.0 / tau);

    let var = if strategy == Selection::All {
        let q = g.constant(queue.to_matrix());
        let sp = g.matmul_nt(anchors, q);
        let sp = g.scale(sp, 1.0 / tau);
        let ones = g.constant(Array2::ones((1, queue.len())));
        let sn_wide = g.matmul(sn, ones);
        let diff = g.sub(sn_wide, sp);
        let terms = g.softplus(diff);
        g.mean(terms)
    } else {
        let av = g.value(anchors).clone();
        let mut positives = Mat::zeros((rows, dim));
        for (i, a) in av.rows().into_iter().enumerate() {
            let Positive::Single(k) = select_positive(a, queue, strategy, rng)? else {
                unreachable!("single-positive strategy")
            };
            positives.row_mut(i).assign(&queue.get(k));
        }
        let p = g.constant(positives);
        let ap = g.mul(anchors, p);
        let sp = g.sum_cols(ap);
        let sp = g.scale(sp, 1.0 / tau);
        let diff = g.sub(sn, sp);
        let terms = g.softplus(diff);
        g.mean(terms)
    };
    Ok(LossTerm { var, empty: false })
}

/// ℓ1 restoration loss: per-patch absolute-difference sums averaged over the
/// gated patches. `target` must be a detached node.
pub fn restoration_loss(g: &mut Graph, projected: Var, target: Var) -> Result<LossTerm> {
    if g.shape(projected) != g.shape(target) {
        return Err(Error::Shape {
            expected: format!("{:?}", g.shape(projected)),
            actual: format!("{:?}", g.shape(target)),
        });
    }
    let rows = g.shape(projected).0;
    if rows == 0 {
        return Ok(LossTerm::empty(g, "restoration loss"));
    }
    let d = g.sub(projected, target);
    let d = g.abs(d);
    let s = g.sum(d);
    Ok(LossTerm { var: g.scale(s, 1.0 / rows as f64), empty: false })
}

/// Discriminator cross-entropy from per-layer probabilities (`N×1` each):
/// `-(1/N) Σ_j Σ_l [log D(f) + log(1 - D(c))]`, probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn discriminating_loss_from_probs(g: &mut Graph, probs_f: &[Var], probs_c: &[Var]) -> Result<Var> {
    if probs_f.len() != probs_c.len() || probs_f.is_empty() {
        return Err(Error::Shape {
            expected: "matching non-empty layer lists".into(),
            actual: format!("{} vs {}", probs_f.len(), probs_c.len()),
        });
    }
    let n = g.shape(probs_f[0]).0;
    let mut total: Option<Var> = None;
    for (&pf, &pc) in probs_f.iter().zip(probs_c) {
        let pf = g.clamp(pf, PROB_CLAMP, 1.0 - PROB_CLAMP);
        let lf = g.log(pf);
        let pc = g.clamp(pc, PROB_CLAMP, 1.0 - PROB_CLAMP);
        let one_minus = g.neg(pc);
        let one_minus = g.add_scalar(one_minus, 1.0);
        let lc = g.log(one_minus);
        let both = g.add(lf, lc);
        let s = g.sum(both);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s),
        });
    }
    Ok(g.scale(total.expect("non-empty"), -1.0 / n as f64))
}

/// Runs the per-layer discriminators on both packs and returns the
/// classification loss.
pub fn discriminating_loss(
    s: &mut Session,
    model: &Model,
    f_adv: &FeaturePack,
    c_adv: &FeaturePack,
) -> Result<Var> {
    if f_adv.len() != c_adv.len() {
        return Err(Error::Shape {
            expected: format!("{} layers", f_adv.len()),
            actual: format!("{}", c_adv.len()),
        });
    }
    let mut pf = Vec::with_capacity(f_adv.len());
    let mut pc = Vec::with_capacity(c_adv.len());
    for l in 0..f_adv.len() {
        pf.push(model.discriminate(s, f_adv.per_layer[l], l + 1)?);
        pc.push(model.discriminate(s, c_adv.per_layer[l], l + 1)?);
    }
    discriminating_loss_from_probs(&mut s.graph, &pf, &pc)
}

/// Distance-maximizing alternatives to the classifier. Both are `≤ 0`.
///
/// - `FeatureDistance`: `-mean |f - c|` over every element of every layer.
/// - `FeatureStatsDistance`: `-Σ_l (mean_k |μ_k(f) - μ_k(c)| + mean_k |σ_k(f) - σ_k(c)|)`
///   with per-channel mean and population std over patches.
pub fn discriminating_variant(
    g: &mut Graph,
    f_adv: &FeaturePack,
    c_adv: &FeaturePack,
    kind: DiscriminatingKind,
) -> Result<Var> {
    if f_adv.len() != c_adv.len() || f_adv.is_empty() {
        return Err(Error::Shape {
            expected: "matching non-empty feature packs".into(),
            actual: format!("{} vs {}", f_adv.len(), c_adv.len()),
        });
    }
    let layers = f_adv.len() as f64;
    let mut total: Option<Var> = None;
    for (&f, &c) in f_adv.per_layer.iter().zip(&c_adv.per_layer) {
        let term = match kind {
            DiscriminatingKind::FeatureDistance => {
                let d = g.sub(f, c);
                let d = g.abs(d);
                let m = g.mean(d);
                g.scale(m, 1.0 / layers)
            }
            DiscriminatingKind::FeatureStatsDistance => {
                let (mf, sf) = column_stats(g, f);
                let (mc, sc) = column_stats(g, c);
                let dm = g.sub(mf, mc);
                let dm = g.abs(dm);
                let dm = g.mean(dm);
                let ds = g.sub(sf, sc);
                let ds = g.abs(ds);
                let ds = g.mean(ds);
                g.add(dm, ds)
            }
            DiscriminatingKind::Classifier => {
                return Err(Error::Config("classifier is not a distance variant".into()));
            }
        };
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term),
        });
    }
    Ok(g.neg(total.expect("non-empty")))
}

/// Per-column mean and population std (`1×D` each).
fn column_stats(g: &mut Graph, x: Var) -> (Var, Var) {
    let mean = g.mean_rows(x);
    let neg_mean = g.neg(mean);
    let centered = g.add_row(x, neg_mean);
    let sq = g.square(centered);
    let var = g.mean_rows(sq);
    let var = g.add_scalar(var, STD_EPS);
    (mean, g.sqrt(var))
}

/// Mean pixel cross-entropy over non-ignored pixels of `(H·W)×C` logits.
pub fn self_training_loss(g: &mut Graph, logits: Var, labels: &Array2<u8>) -> Result<LossTerm> {
    let (pixels, classes) = g.shape(logits);
    if labels.len() != pixels {
        return Err(Error::Shape { expected: format!("{pixels} labels"), actual: format!("{}", labels.len()) });
    }
    let mut picks = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        if l as usize >= classes {
            return Err(Error::InvalidLabel { label: l, num_classes: classes });
        }
        picks.push((i, l as usize));
    }
    if picks.is_empty() {
        return Ok(LossTerm::empty(g, "self-training loss"));
    }
    let logp = g.log_softmax_rows(logits);
    let picked = g.select_elems(logp, &picks);
    let m = g.mean(picked);
    Ok(LossTerm { var: g.neg(m), empty: false })
}

/// Mean per-pixel Shannon entropy of the softmax.
pub fn entropy_loss(g: &mut Graph, logits: Var) -> Var {
    let pixels = g.shape(logits).0;
    let p = g.softmax_rows(logits);
    let logp = g.log_softmax_rows(logits);
    let plogp = g.mul(p, logp);
    let s = g.sum(plogp);
    g.scale(s, -1.0 / pixels as f64)
}

fn finite(component: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { component: component.to_string(), value })
    }
}

/// `λ_spec·L_spec + L_self`.
pub fn step1_total(spec: f64, self_training: f64, hp: &Hyperparams) -> Result<f64> {
    Ok(hp.lambda_spec * finite("spec", spec)? + finite("self", self_training)?)
}

/// `L_resto + λ_dis·L_dis + L_self + λ_ent·L_ent`.
pub fn step2_total(resto: f64, dis: f64, self_training: f64, ent: f64, hp: &Hyperparams) -> Result<f64> {
    Ok(finite("resto", resto)?
        + hp.lambda_dis * finite("dis", dis)?
        + finite("self", self_training)?
        + hp.lambda_ent * finite("ent", ent)?)
}
