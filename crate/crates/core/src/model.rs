//! Patch-transformer segmentation network with condition strainers, a
//! projection head into the condition embedding space, and per-layer
//! adverse-condition discriminators.
//!
//! Forward passes are written against a [`Session`], which decides per
//! parameter group whether leaves are trainable. Inference helpers at the
//! bottom wrap a frozen session.

use frest_autograd::{Mat, Var};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore, Session};

pub const CHANNELS: usize = 3;
const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub decoder_dim: usize,
    pub strainer_bottleneck: usize,
    pub proj_dim: usize,
    pub disc_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4,
            num_classes: 4,
            decoder_dim: 64,
            strainer_bottleneck: 8,
            proj_dim: 32,
            disc_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.strainer_bottleneck == 0 || self.strainer_bottleneck >= self.embed_dim {
            return fail(format!(
                "strainer_bottleneck {} must be in 1..embed_dim ({})",
                self.strainer_bottleneck, self.embed_dim
            ));
        }
        if self.num_layers == 0 || self.num_classes < 2 || self.num_classes > 255 {
            return fail("num_layers must be >= 1 and num_classes in 2..=255".into());
        }
        if self.proj_dim == 0 || self.disc_hidden == 0 || self.decoder_dim == 0 || self.mlp_ratio == 0 {
            return fail("proj_dim, disc_hidden, decoder_dim and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn num_pixels(&self) -> usize {
        self.image_size * self.image_size
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv: Linear,
    attn_out: Linear,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1: Linear,
    fc2: Linear,
}

/// Bottleneck residual: up(gelu(down(x))).
#[derive(Clone, Copy, Debug)]
struct Adapter {
    down: Linear,
    up: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_embed: Linear,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    dec_lateral: Vec<Linear>,
    dec_head: Linear,
    /// `[attention, feed-forward]` strainer per block.
    strainers: Vec<[Adapter; 2]>,
    proj: [Linear; 2],
    disc: Vec<[Linear; 2]>,
}

/// Per-layer patch features of one image.
#[derive(Clone, Debug)]
pub struct FeaturePack {
    pub per_layer: Vec<Var>,
}

impl FeaturePack {
    pub fn final_layer(&self) -> Var {
        *self.per_layer.last().expect("feature pack has at least one layer")
    }

    pub fn len(&self) -> usize {
        self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }
}

/// The full bundle: encoder, decoder, strainer, projection, discriminator.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    seed: u64,
    pub params: ParamStore,
    layout: Layout,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Mat {
        Array2::from_shape_fn((rows, cols), |_| self.rng.random_range(-bound..bound))
    }

    fn xavier(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> Linear {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = self.uniform(fan_in, fan_out, bound);
        self.linear_from(name, group, w)
    }

    fn he(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> Linear {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = self.uniform(fan_in, fan_out, bound);
        self.linear_from(name, group, w)
    }

    fn zeros(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> Linear {
        self.linear_from(name, group, Array2::zeros((fan_in, fan_out)))
    }

    fn linear_from(&mut self, name: &str, group: ParamGroup, w: Mat) -> Linear {
        let out = w.ncols();
        let w = self.store.insert(format!("{name}.weight"), group, w);
        let b = self.store.insert(format!("{name}.bias"), group, Array2::zeros((1, out)));
        Linear { w, b }
    }

    fn filled(&mut self, name: String, group: ParamGroup, cols: usize, value: f64) -> ParamId {
        self.store.insert(name, group, Array2::from_elem((1, cols), value))
    }
}

impl Model {
    /// Freshly initialized model. Strainer down-projections and every
    /// strainer bias start at zero, so the strainer residual is exactly zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
        let d = config.embed_dim;
        let n = config.num_patches();
        let enc = ParamGroup::Encoder;

        let patch_embed = init.xavier("encoder.patch_embed", enc, config.patch_dim(), d);
        let pos = init.uniform(n, d, 0.02 * 3f64.sqrt());
        let pos_embed = init.store.insert("encoder.pos_embed", enc, pos);
        let mut blocks = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = format!("encoder.block{l}");
            let hidden = d * config.mlp_ratio;
            blocks.push(Block {
                ln1_g: init.filled(format!("{p}.ln1.gamma"), enc, d, 1.0),
                ln1_b: init.filled(format!("{p}.ln1.beta"), enc, d, 0.0),
                qkv: init.xavier(&format!("{p}.attn.qkv"), enc, d, 3 * d),
                attn_out: init.xavier(&format!("{p}.attn.out"), enc, d, d),
                ln2_g: init.filled(format!("{p}.ln2.gamma"), enc, d, 1.0),
                ln2_b: init.filled(format!("{p}.ln2.beta"), enc, d, 0.0),
                fc1: init.xavier(&format!("{p}.mlp.fc1"), enc, d, hidden),
                fc2: init.xavier(&format!("{p}.mlp.fc2"), enc, hidden, d),
            });
        }

        let dec = ParamGroup::Decoder;
        let dec_lateral = (0..config.num_layers)
            .map(|l| init.xavier(&format!("decoder.lateral{l}"), dec, d, config.decoder_dim))
            .collect();
        let head_out = config.patch_size * config.patch_size * config.num_classes;
        let dec_head = init.xavier("decoder.head", dec, config.decoder_dim, head_out);

        let st = ParamGroup::Strainer;
        let r = config.strainer_bottleneck;
        let strainers = (0..config.num_layers)
            .map(|l| {
                [0, 1].map(|k| {
                    let site = if k == 0 { "attn" } else { "mlp" };
                    let p = format!("strainer.block{l}.{site}");
                    Adapter {
                        down: init.zeros(&format!("{p}.down"), st, d, r),
                        up: init.he(&format!("{p}.up"), st, r, d),
                    }
                })
            })
            .collect();

        let pr = ParamGroup::Projection;
        let proj = [
            init.xavier("projection.fc1", pr, d, config.proj_dim),
            init.xavier("projection.fc2", pr, config.proj_dim, config.proj_dim),
        ];

        let ds = ParamGroup::Discriminator;
        let disc = (0..config.num_layers)
            .map(|l| {
                [
                    init.xavier(&format!("discriminator.layer{l}.fc1"), ds, d, config.disc_hidden),
                    init.xavier(&format!("discriminator.layer{l}.fc2"), ds, config.disc_hidden, 1),
                ]
            })
            .collect();

        let layout = Layout { patch_embed, pos_embed, blocks, dec_lateral, dec_head, strainers, proj, disc };
        Ok(Model { config, seed, params: store, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Exact number of scalar parameters in the named group.
    pub fn param_count(&self, group: &str) -> Result<usize> {
        let group: ParamGroup = group.parse()?;
        Ok(self.params.count(group))
    }

    /// Flattens an `H×W×3` image into `N×(p·p·3)` rows in raster patch order.
    pub fn patchify(&self, image: &Array3<f64>) -> Result<Mat> {
        let c = &self.config;
        let expected = (c.image_size, c.image_size, CHANNELS);
        if image.dim() != expected {
            return Err(Error::Shape {
                expected: format!("{expected:?}"),
                actual: format!("{:?}", image.dim()),
            });
        }
        let p = c.patch_size;
        let side = c.patches_per_side();
        Ok(Array2::from_shape_fn((c.num_patches(), c.patch_dim()), |(n, k)| {
            let (py, px) = (n / side, n % side);
            let ch = k % CHANNELS;
            let pix = k / CHANNELS;
            let (dy, dx) = (pix / p, pix % p);
            image[[py * p + dy, px * p + dx, ch]]
        }))
    }

    fn linear(&self, s: &mut Session, x: Var, lin: Linear) -> Var {
        let w = s.param(lin.w);
        let b = s.param(lin.b);
        let y = s.graph.matmul(x, w);
        s.graph.add_row(y, b)
    }

    fn adapter(&self, s: &mut Session, x: Var, a: Adapter) -> Var {
        let h = self.linear(s, x, a.down);
        let h = s.graph.gelu(h);
        self.linear(s, h, a.up)
    }

    fn affine_norm(&self, s: &mut Session, x: Var, g: ParamId, b: ParamId) -> Var {
        let y = s.graph.layer_norm(x, LN_EPS);
        let g = s.param(g);
        let b = s.param(b);
        let y = s.graph.mul_row(y, g);
        s.graph.add_row(y, b)
    }

    fn attention(&self, s: &mut Session, x: Var, block: &Block) -> Var {
        let d = self.config.embed_dim;
        let heads = self.config.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.linear(s, x, block.qkv);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = s.graph.slice_cols(qkv, h * dh, (h + 1) * dh);
            let k = s.graph.slice_cols(qkv, d + h * dh, d + (h + 1) * dh);
            let v = s.graph.slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh);
            let scores = s.graph.matmul_nt(q, k);
            let scores = s.graph.scale(scores, scale);
            let attn = s.graph.softmax_rows(scores);
            outs.push(s.graph.matmul(attn, v));
        }
        let cat = s.graph.concat_cols(&outs);
        self.linear(s, cat, block.attn_out)
    }

    /// Runs one encoder block. With strainers enabled, each sublayer adds
    /// its bottleneck residual computed from the sublayer input.
    fn block_forward(&self, s: &mut Session, x: Var, l: usize, use_strainer: bool) -> Var {
        let block = &self.layout.blocks[l];
        let h = self.affine_norm(s, x, block.ln1_g, block.ln1_b);
        let a = self.attention(s, h, block);
        let mut x1 = s.graph.add(x, a);
        if use_strainer {
            let r = self.adapter(s, x, self.layout.strainers[l][0]);
            x1 = s.graph.add(x1, r);
        }
        let h2 = self.affine_norm(s, x1, block.ln2_g, block.ln2_b);
        let m = self.linear(s, h2, block.fc1);
        let m = s.graph.gelu(m);
        let m = self.linear(s, m, block.fc2);
        let mut out = s.graph.add(x1, m);
        if use_strainer {
            let r = self.adapter(s, x1, self.layout.strainers[l][1]);
            out = s.graph.add(out, r);
        }
        out
    }

    /// Patch embedding plus learned positions, `N×D`.
    pub fn embed(&self, s: &mut Session, image: &Array3<f64>) -> Result<Var> {
        let patches = self.patchify(image)?;
        let x = s.graph.constant(patches);
        let x = self.linear(s, x, self.layout.patch_embed);
        let pos = s.param(self.layout.pos_embed);
        Ok(s.graph.add(x, pos))
    }

    /// All `L` block outputs. `use_strainer = false` yields the encoder
    /// features and never binds a strainer parameter; `true` yields the
    /// condition-infused features.
    pub fn encoder_forward(&self, s: &mut Session, image: &Array3<f64>, use_strainer: bool) -> Result<FeaturePack> {
        let mut x = self.embed(s, image)?;
        let mut per_layer = Vec::with_capacity(self.config.num_layers);
        for l in 0..self.config.num_layers {
            x = self.block_forward(s, x, l, use_strainer);
            per_layer.push(x);
        }
        Ok(FeaturePack { per_layer })
    }

    /// Block `l` (0-based) applied with strainers to a given input.
    pub fn strained_block(&self, s: &mut Session, input: Var, l: usize) -> Var {
        self.block_forward(s, input, l, true)
    }

    /// Unit-norm condition embeddings, one row per input row.
    pub fn project(&self, s: &mut Session, features: Var) -> Result<Var> {
        let (_, cols) = s.graph.shape(features);
        if cols != self.config.embed_dim {
            return Err(Error::Shape {
                expected: format!("feature dim {}", self.config.embed_dim),
                actual: format!("{cols}"),
            });
        }
        let h = self.linear(s, features, self.layout.proj[0]);
        let h = s.graph.gelu(h);
        let z = self.linear(s, h, self.layout.proj[1]);
        Ok(s.graph.l2_normalize_rows(z, NORM_EPS))
    }

    /// Probability (per row, `N×1`) that the features are encoder features
    /// rather than condition-infused ones. `layer` is 1-based.
    pub fn discriminate(&self, s: &mut Session, features: Var, layer: usize) -> Result<Var> {
        let num_layers = self.config.num_layers;
        if layer == 0 || layer > num_layers {
            return Err(Error::LayerOutOfRange { layer, num_layers });
        }
        let [fc1, fc2] = self.layout.disc[layer - 1];
        let h = self.linear(s, features, fc1);
        let h = s.graph.gelu(h);
        let logit = self.linear(s, h, fc2);
        Ok(s.graph.sigmoid(logit))
    }

    /// Per-pixel logits `(H·W)×C` in raster pixel order.
    pub fn decode(&self, s: &mut Session, features: &FeaturePack) -> Result<Var> {
        let c = &self.config;
        if features.len() != c.num_layers {
            return Err(Error::Shape {
                expected: format!("{} layers", c.num_layers),
                actual: format!("{}", features.len()),
            });
        }
        let mut fused = None;
        for (l, &f) in features.per_layer.iter().enumerate() {
            let y = self.linear(s, f, self.layout.dec_lateral[l]);
            fused = Some(match fused {
                None => y,
                Some(acc) => s.graph.add(acc, y),
            });
        }
        let h = s.graph.gelu(fused.expect("at least one layer"));
        let out = self.linear(s, h, self.layout.dec_head);
        let p = c.patch_size;
        let per_pixel = s.graph.reshape(out, c.num_patches() * p * p, c.num_classes);
        Ok(s.graph.gather_rows(per_pixel, &self.pixel_order()))
    }

    /// Row permutation from (patch, within-patch) order to raster order.
    fn pixel_order(&self) -> Vec<usize> {
        let c = &self.config;
        let p = c.patch_size;
        let side = c.patches_per_side();
        (0..c.num_pixels())
            .map(|i| {
                let (y, x) = (i / c.image_size, i % c.image_size);
                let patch = (y / p) * side + x / p;
                patch * p * p + (y % p) * p + (x % p)
            })
            .collect()
    }

    /// Mutable access to the final discriminator layer, for tests and probes.
    pub fn zero_discriminator_output(&mut self) {
        for [_, fc2] in self.layout.disc.clone() {
            self.params.get_mut(fc2.w).value.fill(0.0);
            self.params.get_mut(fc2.b).value.fill(0.0);
        }
    }

    /// Copies the encoder and decoder parameters of `other` into `self`.
    pub fn copy_inference_params_from(&mut self, other: &Model) {
        for (id, p) in other.params.iter() {
            if p.group.is_inference() {
                self.params.get_mut(id).value.assign(&p.value);
            }
        }
    }

    // ---- inference helpers over a frozen session ----

    /// Block outputs as plain matrices.
    pub fn features(&self, image: &Array3<f64>, use_strainer: bool) -> Result<Vec<Mat>> {
        let mut s = Session::frozen(&self.params);
        let pack = self.encoder_forward(&mut s, image, use_strainer)?;
        Ok(pack.per_layer.iter().map(|&v| s.graph.value(v).clone()).collect())
    }

    pub fn logits(&self, image: &Array3<f64>, use_strainer: bool) -> Result<Mat> {
        let mut s = Session::frozen(&self.params);
        let pack = self.encoder_forward(&mut s, image, use_strainer)?;
        let out = self.decode(&mut s, &pack)?;
        Ok(s.graph.value(out).clone())
    }

    /// Argmax label map `H×W`.
    pub fn predict(&self, image: &Array3<f64>, use_strainer: bool) -> Result<Array2<u8>> {
        let logits = self.logits(image, use_strainer)?;
        Ok(argmax_labels(&logits, self.config.image_size))
    }

    /// Condition embeddings of the final-layer features.
    pub fn embeddings(&self, image: &Array3<f64>, use_strainer: bool) -> Result<Mat> {
        let mut s = Session::frozen(&self.params);
        let pack = self.encoder_forward(&mut s, image, use_strainer)?;
        let z = self.project(&mut s, pack.final_layer())?;
        Ok(s.graph.value(z).clone())
    }
}

/// Row-wise argmax of `(H·W)×C` logits into an `H×W` label map. Ties pick the
/// lowest class id.
pub fn argmax_labels(logits: &Mat, side: usize) -> Array2<u8> {
    let labels: Vec<u8> = logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Array2::from_shape_vec((side, side), labels).expect("logits rows == side²")
}
