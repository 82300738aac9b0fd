//! Decoupled-weight-decay Adam and the warmup/decay learning-rate schedule.

use frest_autograd::Mat;
use serde::{Deserialize, Serialize};

use crate::params::{GroupMask, ParamGroup, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Mat,
    v: Mat,
    steps: i32,
}

/// Per-parameter moment state, created on a parameter's first update.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        AdamW { config, state: vec![None; num_params] }
    }

    /// Applies one update to every parameter in `mask` that has a gradient.
    /// Parameters outside the mask are never written, even if `grads` holds a
    /// value for them.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Mat>], mask: GroupMask, lr: impl Fn(ParamGroup) -> f64) {
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let Some(g) = grads.get(id.index()).and_then(|g| g.as_ref()) else { continue };
            let param = store.get_mut(id);
            if !mask.contains(param.group) {
                continue;
            }
            let rate = lr(param.group);
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: Mat::zeros(g.raw_dim()),
                v: Mat::zeros(g.raw_dim()),
                steps: 0,
            });
            st.steps += 1;
            let c1 = 1.0 - beta1.powi(st.steps);
            let c2 = 1.0 - beta2.powi(st.steps);
            ndarray::Zip::from(&mut param.value).and(&mut st.m).and(&mut st.v).and(g).for_each(|w, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= rate * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *w);
            });
        }
    }
}

/// Base rates and schedule shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrConfig {
    /// Encoder, decoder, and discriminator base rate.
    pub encoder: f64,
    /// Strainer and projection base rate.
    pub strainer: f64,
    /// Multiplier on both bases.
    pub scale: f64,
    pub warmup_max_iters: usize,
    pub warmup_fraction: f64,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig { encoder: 1e-5, strainer: 5e-4, scale: 1.0, warmup_max_iters: 1500, warmup_fraction: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub encoder: f64,
    pub decoder: f64,
    pub strainer: f64,
    pub projection: f64,
    pub discriminator: f64,
}

impl GroupRates {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Decoder => self.decoder,
            ParamGroup::Strainer => self.strainer,
            ParamGroup::Projection => self.projection,
            ParamGroup::Discriminator => self.discriminator,
        }
    }
}

pub fn warmup_iters(cfg: &LrConfig, total_iters: usize) -> usize {
    let frac = (cfg.warmup_fraction * total_iters as f64).floor() as usize;
    cfg.warmup_max_iters.min(frac)
}

/// Linear warmup from 0 to the base rate, then linear decay to 0 at
/// `total_iters`.
pub fn lr_at(iteration: usize, cfg: &LrConfig, total_iters: usize) -> GroupRates {
    let warm = warmup_iters(cfg, total_iters);
    let factor = if iteration >= total_iters {
        0.0
    } else if iteration < warm {
        iteration as f64 / warm as f64
    } else {
        (total_iters - iteration) as f64 / (total_iters - warm) as f64
    };
    let enc = cfg.encoder * cfg.scale * factor;
    let st = cfg.strainer * cfg.scale * factor;
    GroupRates { encoder: enc, decoder: enc, strainer: st, projection: st, discriminator: enc }
}
