//! Brute-force scalar reference implementations.
//!
//! These are written directly from the loss and metric definitions with
//! plain loops over `f64` slices. They share no code with the library.
#![allow(dead_code)]

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-ln(e^{ap/τ} / (e^{ap/τ} + e^{an/τ}))` averaged over anchors.
pub fn contrastive(anchors: &[Vec<f64>], positives: &[Vec<f64>], negatives: &[Vec<f64>], tau: f64) -> f64 {
    if anchors.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..anchors.len() {
        let sp = dot(&anchors[i], &positives[i]) / tau;
        let sn = dot(&anchors[i], &negatives[i]) / tau;
        let m = sp.max(sn);
        let denom = (sp - m).exp() + (sn - m).exp();
        total += -((sp - m) - denom.ln());
    }
    total / anchors.len() as f64
}

/// Multi-positive form: mean over anchors and queue entries.
pub fn contrastive_all(anchors: &[Vec<f64>], queue: &[Vec<f64>], negatives: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..anchors.len() {
        for p in queue {
            let sp = dot(&anchors[i], p) / tau;
            let sn = dot(&anchors[i], &negatives[i]) / tau;
            total += (1.0 + (sn - sp).exp()).ln();
        }
    }
    total / (anchors.len() * queue.len()) as f64
}

/// Linear scan; strict comparison keeps the first occurrence.
pub fn argmax_sim(anchor: &[f64], queue: &[Vec<f64>]) -> usize {
    let mut best = 0;
    for k in 1..queue.len() {
        if dot(anchor, &queue[k]) > dot(anchor, &queue[best]) {
            best = k;
        }
    }
    best
}

pub fn argmin_sim(anchor: &[f64], queue: &[Vec<f64>]) -> usize {
    let mut best = 0;
    for k in 1..queue.len() {
        if dot(anchor, &queue[k]) < dot(anchor, &queue[best]) {
            best = k;
        }
    }
    best
}

pub fn restoration(projected: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
    if projected.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (p, t) in projected.iter().zip(target) {
        for (a, b) in p.iter().zip(t) {
            total += (a - b).abs();
        }
    }
    total / projected.len() as f64
}

/// Double loop over layers and patches; `probs[l][j]` are discriminator outputs.
pub fn discriminating(probs_f: &[Vec<f64>], probs_c: &[Vec<f64>]) -> f64 {
    let clamp = |p: f64| p.max(1e-7).min(1.0 - 1e-7);
    let n = probs_f[0].len();
    let mut total = 0.0;
    for j in 0..n {
        for l in 0..probs_f.len() {
            total += clamp(probs_f[l][j]).ln() + (1.0 - clamp(probs_c[l][j])).ln();
        }
    }
    -total / n as f64
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Two-layer MLP forward with explicit loops: `w1` is `in×hidden`, `w2` `hidden×out`.
pub fn mlp(x: &[f64], w1: &[Vec<f64>], b1: &[f64], w2: &[Vec<f64>], b2: &[f64]) -> Vec<f64> {
    let hidden: Vec<f64> = (0..b1.len())
        .map(|h| gelu((0..x.len()).map(|i| x[i] * w1[i][h]).sum::<f64>() + b1[h]))
        .collect();
    (0..b2.len()).map(|o| (0..hidden.len()).map(|h| hidden[h] * w2[h][o]).sum::<f64>() + b2[o]).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

/// `feats[l][j][k]`.
pub fn feature_distance(f: &[Vec<Vec<f64>>], c: &[Vec<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for l in 0..f.len() {
        for j in 0..f[l].len() {
            for k in 0..f[l][j].len() {
                total += (f[l][j][k] - c[l][j][k]).abs();
                count += 1.0;
            }
        }
    }
    -total / count
}

pub fn feature_stats_distance(f: &[Vec<Vec<f64>>], c: &[Vec<Vec<f64>>]) -> f64 {
    let stats = |x: &[Vec<f64>], k: usize| {
        let n = x.len() as f64;
        let mu = x.iter().map(|r| r[k]).sum::<f64>() / n;
        let var = x.iter().map(|r| (r[k] - mu).powi(2)).sum::<f64>() / n;
        (mu, (var + 1e-12).sqrt())
    };
    let mut total = 0.0;
    for l in 0..f.len() {
        let d = f[l][0].len();
        let (mut dm, mut ds) = (0.0, 0.0);
        for k in 0..d {
            let (mf, sf) = stats(&f[l], k);
            let (mc, sc) = stats(&c[l], k);
            dm += (mf - mc).abs();
            ds += (sf - sc).abs();
        }
        total += dm / d as f64 + ds / d as f64;
    }
    -total
}

/// Cross-entropy per pixel from raw logits rows; `None` labels are skipped.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[Option<usize>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0;
    for (row, label) in logits.iter().zip(labels) {
        let Some(y) = label else { continue };
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[*y];
        n += 1.0;
    }
    if n == 0.0 {
        0.0
    } else {
        total / n
    }
}

pub fn entropy(logits: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for row in logits {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for v in row {
            let p = (v - m).exp() / z;
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    total / logits.len() as f64
}

/// Per-class IoU via an explicit confusion matrix. `None` means the class
/// appears in neither map.
pub fn iou_per_class(pred: &[u8], gt: &[u8], classes: usize, ignore: u8) -> Vec<Option<f64>> {
    let mut conf = vec![vec![0usize; classes]; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if g == ignore {
            continue;
        }
        conf[g as usize][p as usize] += 1;
    }
    (0..classes)
        .map(|c| {
            let tp = conf[c][c];
            let fn_: usize = (0..classes).filter(|&k| k != c).map(|k| conf[c][k]).sum();
            let fp: usize = (0..classes).filter(|&k| k != c).map(|k| conf[k][c]).sum();
            let denom = tp + fp + fn_;
            if denom == 0 {
                None
            } else {
                Some(tp as f64 / denom as f64)
            }
        })
        .collect()
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

pub fn hausdorff_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let directed = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        let mut worst: f64 = 0.0;
        for p in x {
            let mut best = f64::INFINITY;
            for q in y {
                best = best.min(cosine_distance(p, q));
            }
            worst = worst.max(best);
        }
        worst
    };
    directed(a, b).max(directed(b, a))
}

/// Sorted-quantile brute force for class-balanced pseudo labels on
/// `probs[pixel][class]`: a pixel predicted `c` is kept when its confidence is
/// at least the `(1 - keep)` quantile (lower interpolation-free order
/// statistic) of class `c`'s confidences.
pub fn class_balanced_mask(probs: &[Vec<f64>], keep: f64) -> Vec<Option<usize>> {
    let preds: Vec<(usize, f64)> = probs
        .iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            (best, row[best])
        })
        .collect();
    let classes = probs[0].len();
    let mut thresholds = vec![f64::INFINITY; classes];
    for (c, t) in thresholds.iter_mut().enumerate() {
        let mut confs: Vec<f64> = preds.iter().filter(|p| p.0 == c).map(|p| p.1).collect();
        if confs.is_empty() {
            continue;
        }
        confs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let k = ((keep * confs.len() as f64).ceil() as usize).clamp(1, confs.len());
        *t = confs[k - 1];
    }
    preds.iter().map(|&(c, p)| if p >= thresholds[c] { Some(c) } else { None }).collect()
}
