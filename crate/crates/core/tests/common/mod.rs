//! Independent brute-force oracles shared by the integration tests and the
//! acceptance harness. Everything here works on flat slices with explicit
//! index arithmetic and never calls into the library's kernels.

#![allow(dead_code)]

pub mod gradcases;

use std::collections::HashMap;

use leafcam_core::model::ModelParams;
use leafcam_core::{AttentionKind, ModelSpec, Tensor};

/// Direct convolution: for every output pixel, sum `w*x` over input channel,
/// kernel row and kernel column (skipping padding), then add the bias.
/// `same` pads `(k-1)/2` on top/left and the rest on bottom/right.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, same: bool) -> Tensor {
    let [n, c, h, wd] = dims4(x);
    let [o, _, kh, kw] = dims4(w);
    let (oh, ow, pt, pl) = if same {
        let oh = h.div_ceil(stride);
        let ow = wd.div_ceil(stride);
        let ph = ((oh - 1) * stride + kh).saturating_sub(h);
        let pw = ((ow - 1) * stride + kw).saturating_sub(wd);
        (oh, ow, ph / 2, pw / 2)
    } else {
        ((h - kh) / stride + 1, (wd - kw) / stride + 1, 0, 0)
    };
    let (xs, ws, bs) = (x.data(), w.data(), b.data());
    let mut out = Vec::with_capacity(n * o * oh * ow);
    for ni in 0..n {
        for oi in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pt as isize;
                                let ix = (ox * stride + kj) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xs[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = ws[((oi * c + ci) * kh + ki) * kw + kj];
                                acc += wv * xv;
                            }
                        }
                    }
                    out.push(acc + bs[oi]);
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

/// Triple-loop `x W + b`.
pub fn matmul_bias(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (rows, inner) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[1];
    let mut out = Vec::with_capacity(rows * m);
    for i in 0..rows {
        for j in 0..m {
            let mut acc = 0.0f32;
            for k in 0..inner {
                acc += x.data()[i * inner + k] * w.data()[k * m + j];
            }
            out.push(acc + b.data()[j]);
        }
    }
    Tensor::new(vec![rows, m], out).unwrap()
}

pub fn logistic(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        v.exp() / (1.0 + v.exp())
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(logistic)
}

/// Row-wise `exp(x - max) / sum`.
pub fn softmax(x: &Tensor) -> Tensor {
    let k = x.shape()[1];
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(k) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| if b > a { b } else { a });
        let e: Vec<f32> = row.iter().map(|&v| (v - m).exp()).collect();
        let mut s = 0.0f32;
        for &v in &e {
            s += v;
        }
        out.extend(e.iter().map(|&v| v / s));
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// `N×C×H×W -> N×C` spatial mean.
pub fn gap(x: &Tensor) -> Tensor {
    let [n, c, h, w] = dims4(x);
    let mut out = Vec::with_capacity(n * c);
    for plane in x.data().chunks(h * w) {
        let mut s = 0.0f32;
        for &v in plane {
            s += v;
        }
        out.push(s / (h * w) as f32);
    }
    Tensor::new(vec![n, c], out).unwrap()
}

/// `N×C×H×W -> N×C` spatial max.
pub fn gmp(x: &Tensor) -> Tensor {
    let [n, c, ..] = dims4(x);
    let hw = x.numel() / (n * c);
    let out = x
        .data()
        .chunks(hw)
        .map(|p| p.iter().fold(f32::NEG_INFINITY, |a, &b| if b > a { b } else { a }))
        .collect();
    Tensor::new(vec![n, c], out).unwrap()
}

/// 2×2 stride-2 max pooling.
pub fn maxpool2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = dims4(x);
    let mut out = Vec::with_capacity(x.numel() / 4);
    for p in 0..n * c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let at = |di: usize, dj: usize| x.data()[(p * h + 2 * i + di) * w + 2 * j + dj];
                let mut m = at(0, 0);
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    if at(di, dj) > m {
                        m = at(di, dj);
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(vec![n, c, h / 2, w / 2], out).unwrap()
}

/// `x[n,c,:,:] * s[n,c]`.
pub fn scale_channels(x: &Tensor, s: &Tensor) -> Tensor {
    let [n, c, h, w] = dims4(x);
    let hw = h * w;
    let out = (0..x.numel()).map(|i| x.data()[i] * s.data()[i / hw]).collect();
    Tensor::new(vec![n, c, h, w], out).unwrap()
}

/// `x[n,c,y,x] * s[n,0,y,x]`.
pub fn scale_pixels(x: &Tensor, s: &Tensor) -> Tensor {
    let [n, c, h, w] = dims4(x);
    let hw = h * w;
    let out = (0..x.numel()).map(|i| x.data()[i] * s.data()[(i / (c * hw)) * hw + i % hw]).collect();
    Tensor::new(vec![n, c, h, w], out).unwrap()
}

/// Cross-channel mean and max stacked as two channels.
pub fn channel_mean_max(x: &Tensor) -> Tensor {
    let [n, c, h, w] = dims4(x);
    let hw = h * w;
    let mut out = Vec::with_capacity(n * 2 * hw);
    for ni in 0..n {
        let at = |ci: usize, p: usize| x.data()[(ni * c + ci) * hw + p];
        for p in 0..hw {
            let mut s = 0.0f32;
            for ci in 0..c {
                s += at(ci, p);
            }
            out.push(s / c as f32);
        }
        for p in 0..hw {
            let mut m = at(0, p);
            for ci in 1..c {
                if at(ci, p) > m {
                    m = at(ci, p);
                }
            }
            out.push(m);
        }
    }
    Tensor::new(vec![n, 2, h, w], out).unwrap()
}

pub fn mlp(v: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Tensor {
    matmul_bias(&relu(&matmul_bias(v, w1, b1)), w2, b2)
}

/// Attention parameters by suffix, as the model stores them.
pub struct Named<'a>(pub &'a dyn Fn(&str) -> Tensor);

/// GAP -> dense -> relu -> dense -> sigmoid -> scale.
pub fn se_block(x: &Tensor, p: &Named) -> Tensor {
    let z = mlp(&gap(x), &(p.0)("reduce.weight"), &(p.0)("reduce.bias"), &(p.0)("expand.weight"), &(p.0)("expand.bias"));
    scale_channels(x, &sigmoid(&z))
}

pub fn cbam_channel_weights(x: &Tensor, p: &Named) -> Tensor {
    let f = |v: &Tensor| {
        mlp(v, &(p.0)("mlp.fc1.weight"), &(p.0)("mlp.fc1.bias"), &(p.0)("mlp.fc2.weight"), &(p.0)("mlp.fc2.bias"))
    };
    let (a, m) = (f(&gap(x)), f(&gmp(x)));
    let sum = a.data().iter().zip(m.data()).map(|(a, b)| a + b).collect();
    sigmoid(&Tensor::new(a.shape().to_vec(), sum).unwrap())
}

pub fn cbam_spatial_weights(x: &Tensor, p: &Named) -> Tensor {
    sigmoid(&conv2d(&channel_mean_max(x), &(p.0)("spatial.weight"), &(p.0)("spatial.bias"), 1, true))
}

/// Channel stage, then spatial stage on the refined map.
pub fn cbam(x: &Tensor, p: &Named) -> Tensor {
    let refined = scale_channels(x, &cbam_channel_weights(x, p));
    scale_pixels(&refined, &cbam_spatial_weights(&refined, p))
}

/// Inference-mode probabilities of a whole model, one stage at a time.
pub fn model_forward(params: &ModelParams, spec: &ModelSpec, x: &Tensor) -> Tensor {
    let t = |name: &str| params.tensor(name).unwrap().clone();
    let mut h = x.clone();
    for i in 1..=spec.backbone.blocks().len() {
        let c = conv2d(&h, &t(&format!("backbone.conv{i}.weight")), &t(&format!("backbone.conv{i}.bias")), 1, true);
        h = maxpool2(&relu(&c));
    }
    let lookup = |s: &str| t(&format!("attention.{s}"));
    let h = match spec.attention {
        AttentionKind::None => h,
        AttentionKind::Se => se_block(&h, &Named(&lookup)),
        AttentionKind::Cbam => cbam(&h, &Named(&lookup)),
    };
    let hidden = relu(&matmul_bias(&gap(&h), &t("head.dense1.weight"), &t("head.dense1.bias")));
    softmax(&matmul_bias(&hidden, &t("head.dense2.weight"), &t("head.dense2.bias")))
}

/// One-vs-rest AUC by counting every positive/negative pair, ties worth 1/2.
pub fn auc_pairs(scores: &[f32], positive: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0f64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Confusion counts from a `(truth, pred)` dictionary.
pub fn confusion_counts(pred: &[usize], truth: &[usize], k: usize) -> Vec<Vec<u64>> {
    let mut tally: HashMap<(usize, usize), u64> = HashMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *tally.entry((t, p)).or_default() += 1;
    }
    (0..k)
        .map(|t| (0..k).map(|p| tally.get(&(t, p)).copied().unwrap_or(0)).collect())
        .collect()
}

/// Textbook bias-corrected Adam on a scalar: `m̂/(√v̂ + ε)` with
/// `ε = ε̂ / √(1-β2ᵗ)`, which is the same update as the `ε̂` form.
pub fn scalar_adam(theta0: f64, grads: &[f64], lr: f64, eps_hat: f64) -> Vec<f64> {
    let (b1, b2) = (0.9f64, 0.999f64);
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    let mut out = Vec::new();
    for (i, &g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        let eps = eps_hat / (1.0 - b2.powi(t)).sqrt();
        theta -= lr * m_hat / (v_hat.sqrt() + eps);
        out.push(theta);
    }
    out
}

/// Elementwise weighted mean of probability rows by direct summation.
pub fn mean_rows(members: &[Tensor], weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    (0..members[0].numel())
        .map(|i| {
            let mut s = 0.0f64;
            for (m, w) in members.iter().zip(weights) {
                s += w * m.data()[i] as f64;
            }
            s / total
        })
        .collect()
}

/// First index of the row maximum, by linear scan.
pub fn argmax_rows(p: &Tensor) -> Vec<usize> {
    let k = p.shape()[1];
    p.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn dims4(x: &Tensor) -> [usize; 4] {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected a rank-4 tensor, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}
