//! Procedural paired adverse/normal scenes.
//!
//! A base scene is composited from a handful of class-colored shapes. The
//! adverse view is the base scene under a parametric corruption; the normal
//! view is the clean base scene under a small affine jitter with optional
//! "dynamic objects" pasted in. Warp confidence is computed per patch from
//! the known jitter.
//!
//! All images are quantized to 8-bit levels (`k / 255`) so that PNG export
//! and re-import is lossless.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// `H×W×3` image with values in `[0, 1]`.
pub type Image = Array3<f64>;

/// Label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_ROAD: u8 = 1;
pub const CLASS_BLOB: u8 = 2;
pub const CLASS_BAR: u8 = 3;
pub const NUM_SCENE_CLASSES: usize = 4;

const CLASS_COLORS: [[f64; 3]; NUM_SCENE_CLASSES] = [
    [0.55, 0.62, 0.72],
    [0.30, 0.28, 0.30],
    [0.22, 0.55, 0.25],
    [0.85, 0.70, 0.20],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Fog,
    Night,
    Rain,
    Snow,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Fog, Condition::Night, Condition::Rain, Condition::Snow];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Fog => "fog",
            Condition::Night => "night",
            Condition::Rain => "rain",
            Condition::Snow => "snow",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownCondition(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub labels: Array2<u8>,
    pub seed: u64,
}

/// Unlabeled training pair. There is deliberately no label field.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub seed: u64,
    pub condition: Condition,
    pub severity: f64,
    pub adverse: Image,
    pub normal: Image,
    /// Per-patch warp confidence, `patches_per_side²`.
    pub confidence: Array2<f64>,
}

/// Evaluation pair: the training view plus labels and the clean base image.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub pair: TrainPair,
    pub labels: Array2<u8>,
    pub clean: Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub n_source: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub source_seed_start: u64,
    pub train_seed_start: u64,
    pub val_seed_start: u64,
    pub severity_min: f64,
    pub severity_max: f64,
    /// Round-robin order of target conditions.
    pub conditions: Vec<Condition>,
    pub max_translation_px: f64,
    pub max_rotation_deg: f64,
    pub max_dynamic_objects: usize,
    /// Mean displacement (px) at which warp confidence reaches zero.
    pub confidence_scale_px: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_size: 64,
            patch_size: 8,
            n_source: 200,
            n_train: 400,
            n_val: 100,
            source_seed_start: 0,
            train_seed_start: 100_000,
            val_seed_start: 200_000,
            severity_min: 0.7,
            severity_max: 1.0,
            conditions: Condition::ALL.to_vec(),
            max_translation_px: 2.0,
            max_rotation_deg: 1.0,
            max_dynamic_objects: 2,
            confidence_scale_px: 4.0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config("data image_size must be a multiple of patch_size".into()));
        }
        if self.n_source == 0 || self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("dataset split sizes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.severity_min)
            || !(0.0..=1.0).contains(&self.severity_max)
            || self.severity_min > self.severity_max
        {
            return Err(Error::Config("severity range must satisfy 0 <= min <= max <= 1".into()));
        }
        if self.conditions.is_empty() {
            return Err(Error::Config("at least one target condition is required".into()));
        }
        if self.confidence_scale_px <= 0.0 {
            return Err(Error::Config("confidence_scale_px must be positive".into()));
        }
        Ok(())
    }

    fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }
}

fn quantize(image: &mut Image) {
    image.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
}

fn normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
}

enum Shape {
    Band { top: f64, height: f64, slope: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Rect { y0: f64, x0: f64, h: f64, w: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64, size: f64) -> bool {
        match *self {
            Shape::Band { top, height, slope } => {
                let t = top + slope * (x - size / 2.0);
                y >= t && y < t + height
            }
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (dy, dx) = (y - cy, x - cx);
                let (s, c) = angle.sin_cos();
                let u = (dx * c + dy * s) / rx;
                let v = (-dx * s + dy * c) / ry;
                u * u + v * v <= 1.0
            }
            Shape::Rect { y0, x0, h, w } => y >= y0 && y < y0 + h && x >= x0 && x < x0 + w,
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, class: u8, size: f64) -> Shape {
    match class {
        CLASS_ROAD => Shape::Band {
            top: rng.random_range(0.5..0.8) * size,
            height: rng.random_range(0.12..0.3) * size,
            slope: rng.random_range(-0.15..0.15),
        },
        CLASS_BLOB => Shape::Ellipse {
            cy: rng.random_range(0.0..size),
            cx: rng.random_range(0.0..size),
            ry: rng.random_range(0.1..0.28) * size,
            rx: rng.random_range(0.1..0.28) * size,
            angle: rng.random_range(0.0..std::f64::consts::PI),
        },
        _ => Shape::Rect {
            y0: rng.random_range(0.0..0.6) * size,
            x0: rng.random_range(0.0..0.95) * size,
            h: rng.random_range(0.2..0.6) * size,
            w: rng.random_range(0.06..0.16f64).max(2.0 / size) * size,
        },
    }
}

/// Composites 4 to 8 shapes (background first) into a labeled scene.
pub fn generate_scene(seed: u64, size: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "scene"));
    let sz = size as f64;
    let n_shapes = rng.random_range(4..=8usize);
    let mut image = Image::zeros((size, size, 3));
    let mut labels = Array2::from_elem((size, size), CLASS_BACKGROUND);

    let bg = jitter_color(&mut rng, CLASS_COLORS[0]);
    let gradient = rng.random_range(-0.12..0.12);
    for y in 0..size {
        let shade = gradient * (y as f64 / sz - 0.5);
        for x in 0..size {
            for c in 0..3 {
                image[[y, x, c]] = bg[c] + shade;
            }
        }
    }

    for _ in 1..n_shapes {
        let class = rng.random_range(1..NUM_SCENE_CLASSES as u8);
        let shape = random_shape(&mut rng, class, sz);
        let color = jitter_color(&mut rng, CLASS_COLORS[class as usize]);
        for y in 0..size {
            for x in 0..size {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5, sz) {
                    labels[[y, x]] = class;
                    for c in 0..3 {
                        image[[y, x, c]] = color[c];
                    }
                }
            }
        }
    }

    image.mapv_inplace(|v| v + normal(&mut rng, 0.02));
    quantize(&mut image);
    Scene { image, labels, seed }
}

fn jitter_color(rng: &mut ChaCha8Rng, base: [f64; 3]) -> [f64; 3] {
    base.map(|v| v + rng.random_range(-0.06..0.06))
}

fn luminance(px: [f64; 3]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

pub fn mean_luminance(image: &Image) -> f64 {
    let (h, w, _) = image.dim();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            total += luminance([image[[y, x, 0]], image[[y, x, 1]], image[[y, x, 2]]]);
        }
    }
    total / (h * w) as f64
}

/// Applies a parametric corruption. Severity 0 returns the input unchanged;
/// outputs are clamped to `[0, 1]`.
pub fn apply_condition(image: &Image, condition: Condition, severity: f64, seed: u64) -> Result<Image> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::Config(format!("severity {severity} outside [0, 1]")));
    }
    if severity == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, condition.name()));
    let (h, w, _) = image.dim();
    let s = severity;
    let mut out = image.clone();
    match condition {
        Condition::Fog => {
            // Smooth haze: a few low-frequency sinusoids, denser toward the top.
            let waves: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.5..2.0),
                        rng.random_range(0.5..2.0),
                        rng.random_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
                    let haze: f64 = waves
                        .iter()
                        .map(|&(a, b, p)| (std::f64::consts::TAU * (a * fy + b * fx) + p).sin())
                        .sum::<f64>()
                        * 0.03;
                    let alpha = s * (0.55 + 0.3 * (1.0 - fy));
                    for c in 0..3 {
                        let gray = [0.76, 0.77, 0.80][c] + haze;
                        out[[y, x, c]] = (1.0 - alpha) * out[[y, x, c]] + alpha * gray;
                    }
                }
            }
        }
        Condition::Night => {
            let gamma = 1.0 + 1.5 * s;
            let gain = 1.0 - 0.55 * s;
            let tint = [1.0 - 0.25 * s, 1.0 - 0.05 * s, 1.0 + 0.15 * s];
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        let v = out[[y, x, c]].powf(gamma) * gain * tint[c] + 0.03 * s * (c == 2) as u8 as f64;
                        out[[y, x, c]] = v + normal(&mut rng, 0.03 * s);
                    }
                }
            }
        }
        Condition::Rain => {
            let streaks = (60.0 * s).round() as usize;
            let mut layer = Array2::<f64>::zeros((h, w));
            for _ in 0..streaks {
                let mut y = rng.random_range(0.0..h as f64);
                let mut x = rng.random_range(0.0..w as f64);
                let len = rng.random_range(6..15);
                for _ in 0..len {
                    let (iy, ix) = (y as isize, x as isize);
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        layer[[iy as usize, ix as usize]] = 1.0;
                    }
                    y += 1.0;
                    x += 0.3;
                }
            }
            let dim = 1.0 - 0.2 * s;
            let blurred = box_blur(&out);
            for y in 0..h {
                for x in 0..w {
                    let a = 0.6 * s * layer[[y, x]];
                    for c in 0..3 {
                        let base = (1.0 - 0.6 * s) * out[[y, x, c]] + 0.6 * s * blurred[[y, x, c]];
                        let base = base * dim;
                        out[[y, x, c]] = (1.0 - a) * base + a * [0.85, 0.87, 0.90][c];
                    }
                }
            }
        }
        Condition::Snow => {
            let density = 0.12 * s;
            for y in 0..h {
                for x in 0..w {
                    let flake = rng.random_bool(density);
                    for c in 0..3 {
                        let lifted = (out[[y, x, c]] - 0.5) * (1.0 - 0.35 * s) + 0.5 + 0.18 * s;
                        out[[y, x, c]] = if flake { 0.15 * lifted + 0.85 * 0.97 } else { lifted };
                    }
                }
            }
        }
    }
    quantize(&mut out);
    Ok(out)
}

fn box_blur(image: &Image) -> Image {
    let (h, w, ch) = image.dim();
    let mut out = Image::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            acc += image[[yy as usize, xx as usize, c]];
                            n += 1.0;
                        }
                    }
                }
                out[[y, x, c]] = acc / n;
            }
        }
    }
    out
}

/// Ground-truth misalignment between the adverse frame and the warped normal.
#[derive(Clone, Debug, PartialEq)]
pub struct MisalignmentParams {
    pub translation: (f64, f64),
    pub rotation_deg: f64,
    /// `(patch_row, patch_col)` of each injected dynamic object.
    pub objects: Vec<(usize, usize)>,
}

impl MisalignmentParams {
    pub fn identity() -> Self {
        MisalignmentParams { translation: (0.0, 0.0), rotation_deg: 0.0, objects: Vec::new() }
    }

    pub fn sample(cfg: &DataConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "misalign"));
        let t = cfg.max_translation_px;
        let r = cfg.max_rotation_deg;
        let translation = (
            if t > 0.0 { rng.random_range(-t..=t) } else { 0.0 },
            if t > 0.0 { rng.random_range(-t..=t) } else { 0.0 },
        );
        let rotation_deg = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let side = cfg.patches_per_side();
        let n_objects = rng.random_range(0..=cfg.max_dynamic_objects);
        let objects = (0..n_objects)
            .map(|_| (rng.random_range(0..side), rng.random_range(0..side)))
            .collect();
        MisalignmentParams { translation, rotation_deg, objects }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Misalignment {
    pub normal: Image,
    pub confidence: Array2<f64>,
    pub params: MisalignmentParams,
}

/// Confidence assigned to patches the warp cannot be trusted on.
const INVALID_CONFIDENCE: f64 = 0.05;

/// Warps the clean scene by the given jitter, pastes dynamic objects, and
/// derives per-patch confidence `1 - mean_displacement / scale`. Patches with
/// dynamic objects or out-of-frame samples are forced below 0.2.
pub fn simulate_misalignment_with(scene: &Scene, cfg: &DataConfig, params: &MisalignmentParams) -> Misalignment {
    let size = scene.image.dim().0;
    let p = cfg.patch_size;
    let side = size / p;
    let center = (size as f64 - 1.0) / 2.0;
    let (sin, cos) = params.rotation_deg.to_radians().sin_cos();
    let (ty, tx) = params.translation;

    let mut normal = Image::zeros((size, size, 3));
    let mut disp = Array2::<f64>::zeros((side, side));
    let mut invalid = Array2::<bool>::from_elem((side, side), false);
    let max_coord = size as f64 - 1.0;
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - center, x as f64 - center);
            let sy = center + sin * dx + cos * dy + ty;
            let sx = center + cos * dx - sin * dy + tx;
            let (py, px) = (y / p, x / p);
            disp[[py, px]] += ((sy - y as f64).powi(2) + (sx - x as f64).powi(2)).sqrt();
            if sy < -0.5 || sx < -0.5 || sy > max_coord + 0.5 || sx > max_coord + 0.5 {
                invalid[[py, px]] = true;
            }
            let (sy, sx) = (sy.clamp(0.0, max_coord), sx.clamp(0.0, max_coord));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(size - 1), (x0 + 1).min(size - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for c in 0..3 {
                let im = &scene.image;
                normal[[y, x, c]] = (1.0 - fy) * ((1.0 - fx) * im[[y0, x0, c]] + fx * im[[y0, x1, c]])
                    + fy * ((1.0 - fx) * im[[y1, x0, c]] + fx * im[[y1, x1, c]]);
            }
        }
    }

    let mut obj_rng = ChaCha8Rng::seed_from_u64(derive_seed(scene.seed, "objects"));
    for &(r, c) in &params.objects {
        let color = [
            obj_rng.random_range(0.0..1.0),
            obj_rng.random_range(0.0..1.0),
            obj_rng.random_range(0.0..1.0),
        ];
        for y in r * p..(r + 1) * p {
            for x in c * p..(c + 1) * p {
                for ch in 0..3 {
                    normal[[y, x, ch]] = color[ch];
                }
            }
        }
    }
    quantize(&mut normal);

    let per_patch = (p * p) as f64;
    let mut confidence = Array2::from_shape_fn((side, side), |(r, c)| {
        let conf = (1.0 - disp[[r, c]] / per_patch / cfg.confidence_scale_px).clamp(0.0, 1.0);
        if invalid[[r, c]] {
            INVALID_CONFIDENCE * conf
        } else {
            conf
        }
    });
    for &(r, c) in &params.objects {
        confidence[[r, c]] = 0.0;
    }
    // Stored as f32 so exported maps round-trip exactly.
    confidence.mapv_inplace(|v| v as f32 as f64);
    Misalignment { normal, confidence, params: params.clone() }
}

pub fn simulate_misalignment(scene: &Scene, cfg: &DataConfig, seed: u64) -> Misalignment {
    let params = MisalignmentParams::sample(cfg, seed);
    simulate_misalignment_with(scene, cfg, &params)
}

fn severity_for(cfg: &DataConfig, seed: u64) -> f64 {
    if cfg.severity_min == cfg.severity_max {
        return cfg.severity_min;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "severity"));
    rng.random_range(cfg.severity_min..=cfg.severity_max)
}

/// Builds the labeled pair for scene `seed` under `condition`.
pub fn make_pair(cfg: &DataConfig, seed: u64, condition: Condition) -> Result<PairedSample> {
    let scene = generate_scene(seed, cfg.image_size);
    let severity = severity_for(cfg, seed);
    let adverse = apply_condition(&scene.image, condition, severity, derive_seed(seed, "condition"))?;
    let mis = simulate_misalignment(&scene, cfg, seed);
    Ok(PairedSample {
        pair: TrainPair { seed, condition, severity, adverse, normal: mis.normal, confidence: mis.confidence },
        labels: scene.labels,
        clean: scene.image,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Labeled normal-condition scenes for source pretraining.
    pub source: Vec<Scene>,
    pub train: Vec<TrainPair>,
    pub val: Vec<PairedSample>,
}

fn seed_range(start: u64, n: usize, shift: u64) -> std::ops::Range<u64> {
    let s = start + shift;
    s..s + n as u64
}

/// Source, train, and validation splits over pairwise-disjoint seed ranges.
/// Conditions cycle round-robin through `cfg.conditions`.
pub fn build_dataset(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let shift = seed.checked_mul(1_000_000).ok_or_else(|| Error::Config("seed too large".into()))?;
    let ranges = [
        ("source", seed_range(cfg.source_seed_start, cfg.n_source, shift)),
        ("train", seed_range(cfg.train_seed_start, cfg.n_train, shift)),
        ("val", seed_range(cfg.val_seed_start, cfg.n_val, shift)),
    ];
    for i in 0..ranges.len() {
        for j in i + 1..ranges.len() {
            let (a, b) = (&ranges[i].1, &ranges[j].1);
            if a.start < b.end && b.start < a.end {
                return Err(Error::SeedOverlap(format!("{} {a:?} and {} {b:?}", ranges[i].0, ranges[j].0)));
            }
        }
    }
    let source = ranges[0].1.clone().map(|s| generate_scene(s, cfg.image_size)).collect();
    let cond = |i: usize| cfg.conditions[i % cfg.conditions.len()];
    let train = ranges[1]
        .1
        .clone()
        .enumerate()
        .map(|(i, s)| make_pair(cfg, s, cond(i)).map(|p| p.pair))
        .collect::<Result<_>>()?;
    let val = ranges[2].1.clone().enumerate().map(|(i, s)| make_pair(cfg, s, cond(i))).collect::<Result<_>>()?;
    Ok(Dataset { source, train, val })
}
