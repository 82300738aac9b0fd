//! Source pretraining and the alternating two-step adaptation loop.

use frest_autograd::{Graph, Mat};
use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Scene, TrainPair, IGNORE};
use crate::error::{Error, Result};
use crate::losses::{self, DiscriminatingKind, Hyperparams, PseudoLabelSource};
use crate::model::{FeaturePack, Model};
use crate::optim::{lr_at, AdamW, AdamWConfig, GroupRates, LrConfig};
use crate::params::{GroupMask, ParamGroup, Session};
use crate::queue::PositiveQueue;
use crate::seed::derive_seed;

pub const STEP1_GROUPS: [ParamGroup; 2] = [ParamGroup::Strainer, ParamGroup::Projection];
pub const STEP2_GROUPS: [ParamGroup; 3] = [ParamGroup::Encoder, ParamGroup::Decoder, ParamGroup::Discriminator];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub flip: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 12, lr: 1e-3, weight_decay: 1e-2, flip: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub total_iters: usize,
    /// Leading fraction of iterations that run step 1 only.
    pub warm_start_fraction: f64,
    pub lr: LrConfig,
    pub optimizer: AdamWConfig,
    /// Horizontal flip applied identically to both images of a pair.
    pub flip: bool,
    /// Iterations between snapshots; 0 means one per pass over the train set.
    pub snapshot_every: usize,
    /// Fault injection: poison the restoration loss at this iteration.
    pub inject_nan_at: Option<usize>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            total_iters: 3000,
            warm_start_fraction: 0.2,
            lr: LrConfig::default(),
            optimizer: AdamWConfig::default(),
            flip: true,
            snapshot_every: 0,
            inject_nan_at: None,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::Config("total_iters must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warm_start_fraction) {
            return Err(Error::Config("warm_start_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn warm_start_iters(&self) -> usize {
        (self.warm_start_fraction * self.total_iters as f64).floor() as usize
    }
}

/// Mean pixel cross-entropy per epoch of source pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
}

fn flip_image(image: &Image) -> Image {
    image.slice(s![.., ..;-1, ..]).to_owned()
}

fn flip_grid<T: Clone>(grid: &Array2<T>) -> Array2<T> {
    grid.slice(s![.., ..;-1]).to_owned()
}

/// Trains encoder and decoder with pixel cross-entropy on labeled normal
/// scenes. Strainer, projection, and discriminator never enter the graph.
pub fn pretrain_source(
    model: &mut Model,
    source: &[Scene],
    cfg: &PretrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&PretrainEpoch, &Model),
) -> Result<Vec<PretrainEpoch>> {
    if source.is_empty() {
        return Err(Error::EmptySet("source scenes".into()));
    }
    let mask = GroupMask::of(&[ParamGroup::Encoder, ParamGroup::Decoder]);
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() }, model.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pretrain"));
    let total = cfg.epochs * source.len();
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut it = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &i in &order {
            let scene = &source[i];
            let (image, labels) = if cfg.flip && rng.random_bool(0.5) {
                (flip_image(&scene.image), flip_grid(&scene.labels))
            } else {
                (scene.image.clone(), scene.labels.clone())
            };
            let grads = {
                let mut s = Session::new(&model.params, mask);
                let pack = model.encoder_forward(&mut s, &image, false)?;
                let logits = model.decode(&mut s, &pack)?;
                let loss = losses::self_training_loss(&mut s.graph, logits, &labels)?;
                let value = s.graph.item(loss.var);
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        iteration: it,
                        source: Box::new(Error::NonFinite { component: "pretrain".into(), value }),
                    });
                }
                sum += value;
                let mut g = s.graph.backward(loss.var);
                s.param_grads(&mut g)
            };
            // Cosine-free linear decay keeps the schedule trivially reproducible.
            let lr = cfg.lr * (1.0 - it as f64 / total as f64);
            opt.step(&mut model.params, &grads, mask, |_| lr);
            it += 1;
        }
        let rec = PretrainEpoch { epoch, loss: sum / source.len() as f64 };
        log::info!("pretrain epoch {epoch}: loss {:.4}", rec.loss);
        on_epoch(&rec, model);
        log.push(rec);
    }
    Ok(log)
}

/// Class-balanced pseudo labels from `(H·W)×C` logits: per predicted class,
/// keep the most confident `keep_fraction` of its pixels, IGNORE the rest.
pub fn pseudo_labels_from_logits(logits: &Mat, side: usize, keep_fraction: f64) -> Result<Array2<u8>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!("keep_fraction {keep_fraction} outside (0, 1]")));
    }
    let classes = logits.ncols();
    let mut preds = Vec::with_capacity(logits.nrows());
    for row in logits.rows() {
        let mut best = 0;
        for c in 1..classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        let z: f64 = row.iter().map(|v| (v - row[best]).exp()).sum();
        preds.push((best, 1.0 / z));
    }
    let mut thresholds = vec![f64::INFINITY; classes];
    for (c, t) in thresholds.iter_mut().enumerate() {
        let mut confs: Vec<f64> = preds.iter().filter(|p| p.0 == c).map(|p| p.1).collect();
        if confs.is_empty() {
            continue;
        }
        confs.sort_by(f64::total_cmp);
        let keep = ((keep_fraction * confs.len() as f64).ceil() as usize).clamp(1, confs.len());
        *t = confs[confs.len() - keep];
    }
    let labels: Vec<u8> =
        preds.iter().map(|&(c, p)| if p >= thresholds[c] { c as u8 } else { IGNORE }).collect();
    Ok(Array2::from_shape_vec((side, side), labels).expect("label count matches grid"))
}

pub fn generate_pseudo_labels(teacher: &Model, adverse: &Image, keep_fraction: f64) -> Result<Array2<u8>> {
    let logits = teacher.logits(adverse, false)?;
    pseudo_labels_from_logits(&logits, teacher.config().image_size, keep_fraction)
}

/// One iteration's inputs, after augmentation.
#[derive(Clone, Debug)]
pub struct Batch {
    pub pair_index: usize,
    pub flipped: bool,
    pub adverse: Image,
    pub normal: Image,
    /// Gated patch indices `W`, row-major over the patch grid.
    pub gated: Vec<usize>,
    pub pseudo_labels: Array2<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step1Record {
    pub spec: f64,
    pub self_training: f64,
    pub total: f64,
    pub gated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step2Record {
    pub resto: f64,
    pub dis: f64,
    pub self_training: f64,
    pub ent: f64,
    pub total: f64,
}

/// One line of the adaptation metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub pair: usize,
    pub warm_start: bool,
    pub step1: Step1Record,
    pub step2: Option<Step2Record>,
    pub lrs: GroupRates,
    pub queue_len: usize,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    /// Shadow of the encoder and decoder. Other groups are never read.
    pub ema: Model,
    pub optimizer: AdamW,
    pub iteration: usize,
    pub queue: PositiveQueue,
    pub hp: Hyperparams,
    pub seed: u64,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: Model, hp: Hyperparams, optimizer: AdamWConfig, seed: u64) -> Result<Self> {
        hp.validate()?;
        let ema = model.clone();
        let queue = PositiveQueue::new(hp.queue_length, model.config().proj_dim);
        let optimizer = AdamW::new(optimizer, model.params.len());
        Ok(TrainState {
            model,
            ema,
            optimizer,
            iteration: 0,
            queue,
            hp,
            seed,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "adapt")),
        })
    }

    /// Augments pair `index` and attaches gated patches and pseudo labels.
    pub fn prepare_batch(&mut self, pair: &TrainPair, index: usize, flip: bool) -> Result<Batch> {
        let flipped = flip && self.rng.random_bool(0.5);
        let (adverse, normal, confidence) = if flipped {
            (flip_image(&pair.adverse), flip_image(&pair.normal), flip_grid(&pair.confidence))
        } else {
            (pair.adverse.clone(), pair.normal.clone(), pair.confidence.clone())
        };
        let gated = losses::gated_patches(&confidence, self.hp.conf_threshold);
        let teacher = match self.hp.pseudo_labels {
            PseudoLabelSource::Ema => &self.ema,
            PseudoLabelSource::Student => &self.model,
        };
        let pseudo_labels = generate_pseudo_labels(teacher, &adverse, self.hp.keep_fraction)?;
        Ok(Batch { pair_index: index, flipped, adverse, normal, gated, pseudo_labels })
    }

    /// Condition-embedding step: trains only the strainer and projection head.
    pub fn step1(&mut self, batch: &Batch, rates: &GroupRates) -> Result<Step1Record> {
        let mask = GroupMask::of(&STEP1_GROUPS);
        let hp = &self.hp;
        let model = &self.model;
        let mut s = Session::new(&model.params, mask);
        let c_adv = model.encoder_forward(&mut s, &batch.adverse, true)?;

        let mut spec_value = 0.0;
        let mut spec_var = None;
        let mut z_adv_value = None;
        if hp.losses.spec && !batch.gated.is_empty() {
            let c_norm = model.encoder_forward(&mut s, &batch.normal, true)?;
            let fa = s.graph.gather_rows(c_adv.final_layer(), &batch.gated);
            let fnm = s.graph.gather_rows(c_norm.final_layer(), &batch.gated);
            let z_adv = model.project(&mut s, fa)?;
            let z_norm = model.project(&mut s, fnm)?;
            if self.queue.is_empty() {
                self.queue.push_rows(s.graph.value(z_adv).view());
            }
            let term = losses::condition_specific_loss(
                &mut s.graph,
                z_adv,
                z_norm,
                &self.queue,
                hp.tau,
                hp.selection,
                &mut self.rng,
            )?;
            spec_value = s.graph.item(term.var);
            spec_var = Some(term.var);
            z_adv_value = Some(s.graph.value(z_adv).clone());
        }

        let mut self_value = 0.0;
        let mut self_var = None;
        if hp.losses.self_step1 {
            let logits = model.decode(&mut s, &c_adv)?;
            let term = losses::self_training_loss(&mut s.graph, logits, &batch.pseudo_labels)?;
            self_value = s.graph.item(term.var);
            self_var = Some(term.var);
        }

        let total = losses::step1_total(spec_value, self_value, hp)
            .map_err(|e| Error::Diverged { iteration: self.iteration, source: Box::new(e) })?;

        let parts: Vec<_> =
            spec_var.map(|v| (v, hp.lambda_spec)).into_iter().chain(self_var.map(|v| (v, 1.0))).collect();
        let grads = weighted_sum(&mut s.graph, &parts).filter(|&l| s.graph.requires_grad(l)).map(|l| {
            let mut gr = s.graph.backward(l);
            s.param_grads(&mut gr)
        });
        drop(s);

        if let Some(grads) = grads {
            self.optimizer.step(&mut self.model.params, &grads, mask, |grp| rates.get(grp));
        }
        if let Some(z) = z_adv_value {
            self.queue.push_rows(z.view());
        }
        Ok(Step1Record { spec: spec_value, self_training: self_value, total, gated: batch.gated.len() })
    }

    /// Restoration step: trains encoder, decoder, and discriminator, then
    /// moves the EMA shadow.
    pub fn step2(&mut self, batch: &Batch, rates: &GroupRates, poison: bool) -> Result<Step2Record> {
        let mask = GroupMask::of(&STEP2_GROUPS);
        let hp = &self.hp;
        let model = &self.model;
        let t = &hp.losses;
        let need_c = (t.resto && !batch.gated.is_empty()) || t.dis;
        let (c_adv, c_norm) = if need_c {
            (model.features(&batch.adverse, true)?, Some(model.features(&batch.normal, true)?))
        } else {
            (Vec::new(), None)
        };

        let mut s = Session::new(&model.params, mask);
        let f_adv = model.encoder_forward(&mut s, &batch.adverse, false)?;
        let mut parts = Vec::new();

        let mut resto = 0.0;
        if t.resto && !batch.gated.is_empty() {
            let c_norm = c_norm.as_ref().expect("computed above");
            let target_in = s.graph.constant(c_norm.last().expect("layers").select(Axis(0), &batch.gated));
            let term = restoration_term(&mut s, model, f_adv.final_layer(), target_in, &batch.gated)?;
            resto = s.graph.item(term.var);
            parts.push((term.var, 1.0));
        }
        if poison {
            resto = f64::NAN;
        }

        let mut dis = 0.0;
        if t.dis {
            let c_pack = FeaturePack { per_layer: c_adv.iter().map(|m| s.graph.constant(m.clone())).collect() };
            let var = match hp.discriminating {
                DiscriminatingKind::Classifier => losses::discriminating_loss(&mut s, model, &f_adv, &c_pack)?,
                kind => losses::discriminating_variant(&mut s.graph, &f_adv, &c_pack, kind)?,
            };
            dis = s.graph.item(var);
            let sign = if hp.negate_dis { -1.0 } else { 1.0 };
            if hp.negate_dis {
                dis = -dis;
            }
            parts.push((var, sign * hp.lambda_dis));
        }

        let mut self_training = 0.0;
        let mut ent = 0.0;
        if t.self_step2 || t.ent {
            let logits = model.decode(&mut s, &f_adv)?;
            if t.self_step2 {
                let term = losses::self_training_loss(&mut s.graph, logits, &batch.pseudo_labels)?;
                self_training = s.graph.item(term.var);
                parts.push((term.var, 1.0));
            }
            if t.ent {
                let e = losses::entropy_loss(&mut s.graph, logits);
                ent = s.graph.item(e);
                parts.push((e, hp.lambda_ent));
            }
        }

        let total = losses::step2_total(resto, dis, self_training, ent, hp)
            .map_err(|e| Error::Diverged { iteration: self.iteration, source: Box::new(e) })?;

        let grads = weighted_sum(&mut s.graph, &parts).filter(|&l| s.graph.requires_grad(l)).map(|l| {
            let mut gr = s.graph.backward(l);
            s.param_grads(&mut gr)
        });
        drop(s);

        if let Some(grads) = grads {
            self.optimizer.step(&mut self.model.params, &grads, mask, |grp| rates.get(grp));
        }
        self.update_ema();
        Ok(Step2Record { resto, dis, self_training, ent, total })
    }

    /// `θ_ema ← d·θ_ema + (1 − d)·θ` over encoder and decoder.
    pub fn update_ema(&mut self) {
        let d = self.hp.ema_decay;
        for (id, p) in self.model.params.iter() {
            if p.group.is_inference() {
                let shadow = &mut self.ema.params.get_mut(id).value;
                ndarray::Zip::from(shadow).and(&p.value).for_each(|e, &w| *e = d * *e + (1.0 - d) * w);
            }
        }
    }
}

/// Restoration loss between projected encoder features of the gated patches
/// and the detached projection of `c_norm_gated` (already restricted to the
/// gated rows). Nothing flows back into `c_norm_gated`.
pub fn restoration_term(
    s: &mut Session,
    model: &Model,
    f_adv_final: frest_autograd::Var,
    c_norm_gated: frest_autograd::Var,
    gated: &[usize],
) -> Result<losses::LossTerm> {
    let z_norm = model.project(s, c_norm_gated)?;
    let z_norm = s.graph.detach(z_norm);
    let fa = s.graph.gather_rows(f_adv_final, gated);
    let proj = model.project(s, fa)?;
    losses::restoration_loss(&mut s.graph, proj, z_norm)
}

fn weighted_sum(g: &mut Graph, parts: &[(frest_autograd::Var, f64)]) -> Option<frest_autograd::Var> {
    let mut acc = None;
    for &(v, w) in parts {
        let term = if w == 1.0 { v } else { g.scale(v, w) };
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    acc
}

/// Things the adaptation loop reports as it goes.
pub enum AdaptEvent<'a> {
    Iteration(&'a IterationRecord),
    /// Parameters after `iteration` iterations (`0` is the starting point).
    Snapshot { index: usize, iteration: usize, model: &'a Model },
}

/// Deterministic pair order: a fresh shuffle per pass over the train set.
fn pair_order(seed: u64, n: usize, total: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pair-order"));
    let mut out = Vec::with_capacity(total);
    let mut perm: Vec<usize> = (0..n).collect();
    while out.len() < total {
        perm.shuffle(&mut rng);
        out.extend(perm.iter().take(total - out.len()));
    }
    out
}

/// Warm start (step 1 only) followed by step 1; step 2 every iteration.
/// A non-finite loss aborts with [`Error::Diverged`]. If step 2 is the one
/// that fails, the step-1 update of that iteration has already been applied;
/// `state.iteration` still names the failing iteration.
pub fn adapt(
    state: &mut TrainState,
    train: &[TrainPair],
    cfg: &AdaptConfig,
    mut on_event: impl FnMut(AdaptEvent) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySet("train pairs".into()));
    }
    let order = pair_order(state.seed, train.len(), cfg.total_iters);
    let warm = cfg.warm_start_iters();
    let every = if cfg.snapshot_every == 0 { train.len() } else { cfg.snapshot_every };
    let mut snapshot = 0;
    on_event(AdaptEvent::Snapshot { index: snapshot, iteration: 0, model: &state.model })?;
    while state.iteration < cfg.total_iters {
        let t = state.iteration;
        let idx = order[t];
        let batch = state.prepare_batch(&train[idx], idx, cfg.flip)?;
        let rates = lr_at(t, &cfg.lr, cfg.total_iters);
        let warm_start = t < warm;
        let step1 = state.step1(&batch, &rates)?;
        let step2 = if warm_start { None } else { Some(state.step2(&batch, &rates, cfg.inject_nan_at == Some(t))?) };
        let rec = IterationRecord { t, pair: idx, warm_start, step1, step2, lrs: rates, queue_len: state.queue.len() };
        state.iteration += 1;
        on_event(AdaptEvent::Iteration(&rec))?;
        if state.iteration % every == 0 || state.iteration == cfg.total_iters {
            snapshot += 1;
            on_event(AdaptEvent::Snapshot { index: snapshot, iteration: state.iteration, model: &state.model })?;
        }
    }
    Ok(())
}
