//! Shared helpers for the integration suites: seeded random tensors, a
//! finite-difference gradient checker, and brute-force loop oracles written
//! independently of the library kernels.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rcmnet::tensor::{finite_diff_grad, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(randn(rng, n), shape).unwrap()
}

pub fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(randn(rng, n), shape).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch: {} vs {}", a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Scalar loss sum_i probe_i * out_i: fixed random probe weights so that every
/// output element influences the scalar (a plain sum would hide gradients
/// that cancel under normalization).
pub fn probe_loss(out: &Tensor, probe: &[f64]) -> Tensor {
    let w = Tensor::from_vec(probe.to_vec(), out.shape()).unwrap();
    out.mul_bcast(&w).unwrap().sum().unwrap()
}

/// Compares reverse-mode gradients of `build()` (a scalar) against central
/// finite differences for every element of every listed parameter.
pub fn check_grads(
    label: &str,
    params: &[(&str, &Tensor)],
    build: &mut dyn FnMut() -> Tensor,
    tol: f64,
) {
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = build();
    loss.backward().unwrap();
    let analytic: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad()).collect();
    for ((name, p), a) in params.iter().zip(&analytic) {
        let numeric = finite_diff_grad(p, || build().item(), 1e-5);
        for i in 0..a.len() {
            let d = (a[i] - numeric[i]).abs();
            // the floor turns the test into an absolute bound of tol * 1e-3
            // for near-zero gradients, where central differences bottom out
            // on truncation noise
            let denom = a[i].abs().max(numeric[i].abs()).max(1e-3);
            assert!(
                d / denom <= tol,
                "{label} {name}[{i}]: analytic {} vs numeric {} (rel {})",
                a[i],
                numeric[i],
                d / denom
            );
        }
    }
}

// ---- brute-force oracles ----

/// Direct cross-correlation with zero padding, nested loops over output
/// pixels and kernel taps.
pub fn conv2d_oracle(
    x: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for bn in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((bn * cin + ci) * h + iy as usize) * w + ix as usize];
                                let wv = wt[((co * cin + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bn * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Direct windowed pooling; `max` selects max over in-bounds cells, otherwise
/// the average over in-bounds cells only.
pub fn pool2d_oracle(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    max: bool,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * c * oh * ow];
    for i in 0..n * c {
        let plane = &x[i * h * w..(i + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut acc = 0.0;
                let mut count = 0usize;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let v = plane[iy as usize * w + ix as usize];
                        best = best.max(v);
                        acc += v;
                        count += 1;
                    }
                }
                out[(i * oh + oy) * ow + ox] = if max { best } else { acc / count as f64 };
            }
        }
    }
    (out, oh, ow)
}

pub fn linear_oracle(x: &[f64], n: usize, d: usize, wt: &[f64], kk: usize, b: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; n * kk];
    for i in 0..n {
        for j in 0..kk {
            let mut acc = b.map_or(0.0, |b| b[j]);
            for t in 0..d {
                acc += x[i * d + t] * wt[j * d + t];
            }
            out[i * kk + j] = acc;
        }
    }
    out
}

/// Full quadratic-cost attention: per head and query position, logits
/// (q.k + q.(pos_row[dy] + pos_col[dx])) scaled, softmaxed, applied to values.
/// Returns (output, attention rows [n][head][i][j]).
pub fn mhsa_oracle(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    (n, d, h, w): (usize, usize, usize, usize),
    pos_row: &[f64],
    pos_col: &[f64],
    heads: usize,
    scale_logits: bool,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let hw = h * w;
    let s = if scale_logits { 1.0 / (dh as f64).sqrt() } else { 1.0 };
    let at = |bn: usize, c: usize, pos: usize| (bn * d + c) * hw + pos;
    let mut out = vec![0.0; n * d * hw];
    let mut attn = vec![0.0; n * heads * hw * hw];
    for bn in 0..n {
        for hd in 0..heads {
            for i in 0..hw {
                let (yi, xi) = (i / w, i % w);
                let mut logits = vec![0.0; hw];
                for (j, l) in logits.iter_mut().enumerate() {
                    let (yj, xj) = (j / w, j % w);
                    let ri = (yj + h - 1 - yi) * dh;
                    let ci = (xj + w - 1 - xi) * dh;
                    let mut acc = 0.0;
                    for t in 0..dh {
                        acc += q[at(bn, hd * dh + t, i)]
                            * (k[at(bn, hd * dh + t, j)] + pos_row[ri + t] + pos_col[ci + t]);
                    }
                    *l = acc * s;
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for j in 0..hw {
                    attn[((bn * heads + hd) * hw + i) * hw + j] = exps[j] / denom;
                }
                for t in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..hw {
                        acc += attn[((bn * heads + hd) * hw + i) * hw + j]
                            * v[at(bn, hd * dh + t, j)];
                    }
                    out[at(bn, hd * dh + t, i)] = acc;
                }
            }
        }
    }
    (out, attn)
}

/// Full-batch softmax regression with momentum SGD and L2 weight decay, the
/// oracle for classifier-only fine-tuning on frozen features. Updates
/// `w` ([classes, dim] row-major) and `b` in place.
#[allow(clippy::too_many_arguments)]
pub fn softmax_regression_sgd(
    w: &mut [f64],
    b: &mut [f64],
    feats: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    steps: usize,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let n = feats.len();
    let dim = feats[0].len();
    let mut vw = vec![0.0; w.len()];
    let mut vb = vec![0.0; b.len()];
    for _ in 0..steps {
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; b.len()];
        for (f, &label) in feats.iter().zip(labels) {
            let logits: Vec<f64> = (0..classes)
                .map(|c| b[c] + f.iter().zip(&w[c * dim..]).map(|(x, w)| x * w).sum::<f64>())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for c in 0..classes {
                let d = (exps[c] / denom - if label == c { 1.0 } else { 0.0 }) / n as f64;
                gb[c] += d;
                for (t, x) in f.iter().enumerate() {
                    gw[c * dim + t] += d * x;
                }
            }
        }
        for i in 0..w.len() {
            vw[i] = momentum * vw[i] + gw[i] + weight_decay * w[i];
            w[i] -= lr * vw[i];
        }
        for i in 0..b.len() {
            vb[i] = momentum * vb[i] + gb[i] + weight_decay * b[i];
            b[i] -= lr * vb[i];
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Shared-MLP channel attention on explicit matrices: per image, pool each
/// channel plane by mean and by max, push both descriptors through
/// fc2(relu(fc1(.))), add, sigmoid. Returns [n][c] weights.
pub fn channel_attention_oracle(
    m: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    w1: &[f64],
    b1: &[f64],
    hidden: usize,
    w2: &[f64],
    b2: &[f64],
) -> Vec<f64> {
    let mlp = |desc: &[f64]| -> Vec<f64> {
        let mut mid = vec![0.0; hidden];
        for j in 0..hidden {
            let mut acc = b1[j];
            for t in 0..c {
                acc += w1[j * c + t] * desc[t];
            }
            mid[j] = acc.max(0.0);
        }
        let mut out = vec![0.0; c];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = b2[j];
            for t in 0..hidden {
                acc += w2[j * hidden + t] * mid[t];
            }
            *o = acc;
        }
        out
    };
    let area = h * w;
    let mut out = vec![0.0; n * c];
    for bn in 0..n {
        let mut avg = vec![0.0; c];
        let mut mxd = vec![0.0; c];
        for ci in 0..c {
            let plane = &m[((bn * c) + ci) * area..((bn * c) + ci + 1) * area];
            avg[ci] = plane.iter().sum::<f64>() / area as f64;
            mxd[ci] = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
        let (a, b) = (mlp(&avg), mlp(&mxd));
        for ci in 0..c {
            out[bn * c + ci] = sigmoid(a[ci] + b[ci]);
        }
    }
    out
}

/// Spatial attention on explicit loops: channel-mean and channel-max maps,
/// 7x7 padded convolution, sigmoid. Returns [n][h][w] weights.
pub fn spatial_attention_oracle(
    m: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64], // [1,2,7,7]
    bias: f64,
) -> Vec<f64> {
    let area = h * w;
    let mut out = vec![0.0; n * area];
    for bn in 0..n {
        // two descriptor planes: mean over channels, max over channels
        let mut desc = vec![0.0; 2 * area];
        for p in 0..area {
            let mut acc = 0.0;
            let mut best = f64::NEG_INFINITY;
            for ci in 0..c {
                let v = m[(bn * c + ci) * area + p];
                acc += v;
                best = best.max(v);
            }
            desc[p] = acc / c as f64;
            desc[area + p] = best;
        }
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = bias;
                for ci in 0..2 {
                    for ky in 0..7 {
                        for kx in 0..7 {
                            let iy = (oy + ky) as isize - 3;
                            let ix = (ox + kx) as isize - 3;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += desc[ci * area + iy as usize * w + ix as usize]
                                * wt[(ci * 7 + ky) * 7 + kx];
                        }
                    }
                }
                out[bn * area + oy * w + ox] = sigmoid(acc);
            }
        }
    }
    out
}
