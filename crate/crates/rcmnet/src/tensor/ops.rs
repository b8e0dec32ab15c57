//! Structured ops: convolution, pooling, normalization, affine maps and the
//! multi-head self-attention kernel. Each forward caches what its backward
//! closure needs and accumulates input gradients with plain loops.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

fn shape4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Shape(format!(
            "{what}: expected rank-4 tensor, got {:?}",
            t.shape()
        ))),
    }
}

/// 2-D cross-correlation (no kernel flip) with zero padding.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, cin, h, w) = shape4(input, "conv2d input")?;
    let (cout, wcin, kh, kw) = shape4(weight, "conv2d weight")?;
    if wcin != cin {
        return Err(Error::Shape(format!(
            "conv2d: input has {cin} channels, kernel expects {wcin}"
        )));
    }
    if stride == 0 {
        return Err(Error::Shape("conv2d: stride must be positive".into()));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv2d: bias shape {:?} vs {cout} output channels",
                b.shape()
            )));
        }
    }
    let oh = (h + 2 * padding).checked_sub(kh).map(|v| v / stride + 1);
    let ow = (w + 2 * padding).checked_sub(kw).map(|v| v / stride + 1);
    let (oh, ow) = match (oh, ow) {
        (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => (oh, ow),
        _ => {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} too large for {h}x{w} input with padding {padding}"
            )))
        }
    };

    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; n * cout * oh * ow];
    for bn in 0..n {
        for co in 0..cout {
            let b0 = bias.map(|b| b.data()[co]).unwrap_or(0.0);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = ((bn * cin + ci) * h + iy as usize) * w;
                            let wrow = ((co * cin + ci) * kh + ky) * kw;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[xrow + ix as usize] * wt[wrow + kx];
                            }
                        }
                    }
                    out[((bn * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    drop(x);
    drop(wt);

    let (pi, pw) = (input.clone(), weight.clone());
    let pb = bias.cloned();
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Tensor::from_op(
        out,
        vec![n, cout, oh, ow],
        parents,
        Box::new(move |g| {
            let x = pi.data();
            let wt = pw.data();
            let mut gx = vec![0.0; x.len()];
            let mut gw = vec![0.0; wt.len()];
            let mut gb = vec![0.0; cout];
            for bn in 0..n {
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g[((bn * cout + co) * oh + oy) * ow + ox];
                            if go == 0.0 {
                                continue;
                            }
                            gb[co] += go;
                            for ci in 0..cin {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let xrow = ((bn * cin + ci) * h + iy as usize) * w;
                                    let wrow = ((co * cin + ci) * kh + ky) * kw;
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        gx[xrow + ix as usize] += go * wt[wrow + kx];
                                        gw[wrow + kx] += go * x[xrow + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            drop(x);
            drop(wt);
            pi.accum_grad(&gx);
            pw.accum_grad(&gw);
            if let Some(b) = &pb {
                b.accum_grad(&gb);
            }
        }),
        "conv2d",
    )
}

/// Windowed max/average pooling. Max routes the gradient to the first
/// (row-major) argmax; average counts only in-bounds cells under padding.
pub fn pool2d(
    input: &Tensor,
    mode: PoolMode,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = shape4(input, "pool2d input")?;
    if k == 0 || stride == 0 {
        return Err(Error::Shape("pool2d: window and stride must be positive".into()));
    }
    let oh = (h + 2 * padding).checked_sub(k).map(|v| v / stride + 1);
    let ow = (w + 2 * padding).checked_sub(k).map(|v| v / stride + 1);
    let (oh, ow) = match (oh, ow) {
        (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => (oh, ow),
        _ => {
            return Err(Error::Shape(format!(
                "pool2d: window {k} too large for {h}x{w} input with padding {padding}"
            )))
        }
    };

    let x = input.data();
    let mut out = vec![0.0; n * c * oh * ow];
    // max: flat argmax index; avg: in-bounds cell count per window
    let mut route: Vec<usize> = vec![0; out.len()];
    for bn in 0..n {
        for ch in 0..c {
            let plane = (bn * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = ((bn * c + ch) * oh + oy) * ow + ox;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    let mut sum = 0.0;
                    let mut count = 0usize;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = plane + iy as usize * w + ix as usize;
                            let v = x[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                            sum += v;
                            count += 1;
                        }
                    }
                    if count == 0 {
                        return Err(Error::Shape(
                            "pool2d: window contains no in-bounds cells".into(),
                        ));
                    }
                    match mode {
                        PoolMode::Max => {
                            out[o] = best;
                            route[o] = best_idx;
                        }
                        PoolMode::Avg => {
                            out[o] = sum / count as f64;
                            route[o] = count;
                        }
                    }
                }
            }
        }
    }
    drop(x);

    let p = input.clone();
    let in_len = input.len();
    Tensor::from_op(
        out,
        vec![n, c, oh, ow],
        vec![input.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0; in_len];
            match mode {
                PoolMode::Max => {
                    for (o, go) in g.iter().enumerate() {
                        gx[route[o]] += go;
                    }
                }
                PoolMode::Avg => {
                    for bn in 0..n {
                        for ch in 0..c {
                            let plane = (bn * c + ch) * h * w;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let o = ((bn * c + ch) * oh + oy) * ow + ox;
                                    let share = g[o] / route[o] as f64;
                                    if share == 0.0 {
                                        continue;
                                    }
                                    for ky in 0..k {
                                        let iy =
                                            (oy * stride + ky) as isize - padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ix = (ox * stride + kx) as isize
                                                - padding as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            gx[plane + iy as usize * w + ix as usize] += share;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            p.accum_grad(&gx);
        }),
        "pool2d",
    )
}

/// Per-channel spatial reduction to [N,C,1,1].
pub fn global_pool(input: &Tensor, mode: PoolMode) -> Result<Tensor> {
    let (n, c, h, w) = shape4(input, "global_pool input")?;
    let area = h * w;
    let x = input.data();
    let mut out = vec![0.0; n * c];
    let mut argmax = vec![0usize; n * c];
    for i in 0..n * c {
        let plane = &x[i * area..(i + 1) * area];
        match mode {
            PoolMode::Avg => out[i] = plane.iter().sum::<f64>() / area as f64,
            PoolMode::Max => {
                let mut best = f64::NEG_INFINITY;
                for (j, v) in plane.iter().enumerate() {
                    if *v > best {
                        best = *v;
                        argmax[i] = i * area + j;
                    }
                }
                out[i] = best;
            }
        }
    }
    drop(x);
    let p = input.clone();
    let in_len = input.len();
    Tensor::from_op(
        out,
        vec![n, c, 1, 1],
        vec![input.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0; in_len];
            match mode {
                PoolMode::Avg => {
                    for i in 0..n * c {
                        let share = g[i] / area as f64;
                        for j in 0..area {
                            gx[i * area + j] += share;
                        }
                    }
                }
                PoolMode::Max => {
                    for i in 0..n * c {
                        gx[argmax[i]] += g[i];
                    }
                }
            }
            p.accum_grad(&gx);
        }),
        "global_pool",
    )
}

/// Affine map: input [N,D] x weight [K,D] + bias [K] -> [N,K].
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, d) = match *input.shape() {
        [n, d] => (n, d),
        _ => {
            return Err(Error::Shape(format!(
                "linear input: expected rank 2, got {:?}",
                input.shape()
            )))
        }
    };
    let (k, wd) = match *weight.shape() {
        [k, wd] => (k, wd),
        _ => {
            return Err(Error::Shape(format!(
                "linear weight: expected rank 2, got {:?}",
                weight.shape()
            )))
        }
    };
    if wd != d {
        return Err(Error::Shape(format!(
            "linear: input width {d} vs weight width {wd}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(Error::Shape(format!(
                "linear: bias shape {:?} vs {k} outputs",
                b.shape()
            )));
        }
    }
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; n * k];
    for r in 0..n {
        for c in 0..k {
            let mut acc = bias.map(|b| b.data()[c]).unwrap_or(0.0);
            for j in 0..d {
                acc += x[r * d + j] * wt[c * d + j];
            }
            out[r * k + c] = acc;
        }
    }
    drop(x);
    drop(wt);
    let (pi, pw) = (input.clone(), weight.clone());
    let pb = bias.cloned();
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Tensor::from_op(
        out,
        vec![n, k],
        parents,
        Box::new(move |g| {
            let x = pi.data();
            let wt = pw.data();
            let mut gx = vec![0.0; n * d];
            let mut gw = vec![0.0; k * d];
            let mut gb = vec![0.0; k];
            for r in 0..n {
                for c in 0..k {
                    let go = g[r * k + c];
                    if go == 0.0 {
                        continue;
                    }
                    gb[c] += go;
                    for j in 0..d {
                        gx[r * d + j] += go * wt[c * d + j];
                        gw[c * d + j] += go * x[r * d + j];
                    }
                }
            }
            drop(x);
            drop(wt);
            pi.accum_grad(&gx);
            pw.accum_grad(&gw);
            if let Some(b) = &pb {
                b.accum_grad(&gb);
            }
        }),
        "linear",
    )
}

/// Batch normalization over the (N,H,W) axes of a [N,C,H,W] tensor.
///
/// Train mode normalizes by batch statistics (biased variance) and updates the
/// running buffers in place: running <- (1-momentum)*running + momentum*batch,
/// with the unbiased variance stored. Eval mode normalizes by the running
/// buffers, which then act as constants in the graph.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm2d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    training: bool,
    momentum: f64,
    eps: f64,
) -> Result<Tensor> {
    let (n, c, h, w) = shape4(input, "batch_norm2d input")?;
    for (t, name) in [
        (gamma, "gamma"),
        (beta, "beta"),
        (running_mean, "running_mean"),
        (running_var, "running_var"),
    ] {
        if t.shape() != [c] {
            return Err(Error::Shape(format!(
                "batch_norm2d: {name} shape {:?} vs {c} channels",
                t.shape()
            )));
        }
    }
    let count = n * h * w;
    if training && count < 2 {
        return Err(Error::Shape(
            "batch_norm2d: train mode needs at least 2 elements per channel".into(),
        ));
    }

    let x = input.data();
    let gm = gamma.data();
    let bt = beta.data();
    let area = h * w;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut invstd = vec![0.0; c];

    let channel_indices = |ch: usize| {
        (0..n).flat_map(move |bn| {
            let base = (bn * c + ch) * area;
            base..base + area
        })
    };

    if training {
        let mut new_rm = running_mean.to_vec();
        let mut new_rv = running_var.to_vec();
        for ch in 0..c {
            let sum: f64 = channel_indices(ch).map(|i| x[i]).sum();
            let mean = sum / count as f64;
            let var: f64 = channel_indices(ch).map(|i| (x[i] - mean).powi(2)).sum();
            let var_biased = var / count as f64;
            let istd = 1.0 / (var_biased + eps).sqrt();
            invstd[ch] = istd;
            for i in channel_indices(ch) {
                let xh = (x[i] - mean) * istd;
                xhat[i] = xh;
                out[i] = gm[ch] * xh + bt[ch];
            }
            let var_unbiased = var / (count - 1) as f64;
            new_rm[ch] = (1.0 - momentum) * new_rm[ch] + momentum * mean;
            new_rv[ch] = (1.0 - momentum) * new_rv[ch] + momentum * var_unbiased;
        }
        running_mean.set_data(&new_rm);
        running_var.set_data(&new_rv);
    } else {
        let rm = running_mean.data();
        let rv = running_var.data();
        for ch in 0..c {
            let istd = 1.0 / (rv[ch] + eps).sqrt();
            invstd[ch] = istd;
            for i in channel_indices(ch) {
                let xh = (x[i] - rm[ch]) * istd;
                xhat[i] = xh;
                out[i] = gm[ch] * xh + bt[ch];
            }
        }
    }
    drop(x);
    drop(gm);
    drop(bt);

    let (pi, pg, pb) = (input.clone(), gamma.clone(), beta.clone());
    Tensor::from_op(
        out,
        vec![n, c, h, w],
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let gm = pg.data();
            let mut gx = vec![0.0; xhat.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for ch in 0..c {
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for bn in 0..n {
                    let base = (bn * c + ch) * area;
                    for j in 0..area {
                        let i = base + j;
                        sum_g += g[i];
                        sum_gx += g[i] * xhat[i];
                    }
                }
                gbeta[ch] = sum_g;
                ggamma[ch] = sum_gx;
                let scale = gm[ch] * invstd[ch];
                if training {
                    let m = count as f64;
                    for bn in 0..n {
                        let base = (bn * c + ch) * area;
                        for j in 0..area {
                            let i = base + j;
                            gx[i] = scale * (g[i] - sum_g / m - xhat[i] * sum_gx / m);
                        }
                    }
                } else {
                    for bn in 0..n {
                        let base = (bn * c + ch) * area;
                        for j in 0..area {
                            let i = base + j;
                            gx[i] = scale * g[i];
                        }
                    }
                }
            }
            drop(gm);
            pi.accum_grad(&gx);
            pg.accum_grad(&ggamma);
            pb.accum_grad(&gbeta);
        }),
        "batch_norm2d",
    )
}

/// Mean over the channel axis: [N,C,H,W] -> [N,1,H,W].
pub fn channel_mean(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = shape4(input, "channel_mean input")?;
    let area = h * w;
    let x = input.data();
    let mut out = vec![0.0; n * area];
    for bn in 0..n {
        for j in 0..area {
            let mut s = 0.0;
            for ch in 0..c {
                s += x[(bn * c + ch) * area + j];
            }
            out[bn * area + j] = s / c as f64;
        }
    }
    drop(x);
    let p = input.clone();
    Tensor::from_op(
        out,
        vec![n, 1, h, w],
        vec![input.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0; n * c * area];
            for bn in 0..n {
                for j in 0..area {
                    let share = g[bn * area + j] / c as f64;
                    for ch in 0..c {
                        gx[(bn * c + ch) * area + j] += share;
                    }
                }
            }
            p.accum_grad(&gx);
        }),
        "channel_mean",
    )
}

/// Max over the channel axis (first argmax wins): [N,C,H,W] -> [N,1,H,W].
pub fn channel_max(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = shape4(input, "channel_max input")?;
    let area = h * w;
    let x = input.data();
    let mut out = vec![0.0; n * area];
    let mut route = vec![0usize; n * area];
    for bn in 0..n {
        for j in 0..area {
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0;
            for ch in 0..c {
                let i = (bn * c + ch) * area + j;
                if x[i] > best {
                    best = x[i];
                    best_idx = i;
                }
            }
            out[bn * area + j] = best;
            route[bn * area + j] = best_idx;
        }
    }
    drop(x);
    let p = input.clone();
    let in_len = input.len();
    Tensor::from_op(
        out,
        vec![n, 1, h, w],
        vec![input.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0; in_len];
            for (o, go) in g.iter().enumerate() {
                gx[route[o]] += go;
            }
            p.accum_grad(&gx);
        }),
        "channel_max",
    )
}

/// Concatenate two [N,·,H,W] tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ca, h, w) = shape4(a, "concat_channels lhs")?;
    let (nb, cb, hb, wb) = shape4(b, "concat_channels rhs")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::Shape(format!(
            "concat_channels: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let area = h * w;
    let xa = a.data();
    let xb = b.data();
    let mut out = vec![0.0; n * (ca + cb) * area];
    for bn in 0..n {
        let dst = bn * (ca + cb) * area;
        out[dst..dst + ca * area].copy_from_slice(&xa[bn * ca * area..(bn + 1) * ca * area]);
        out[dst + ca * area..dst + (ca + cb) * area]
            .copy_from_slice(&xb[bn * cb * area..(bn + 1) * cb * area]);
    }
    drop(xa);
    drop(xb);
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(
        out,
        vec![n, ca + cb, h, w],
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let mut ga = vec![0.0; n * ca * area];
            let mut gb = vec![0.0; n * cb * area];
            for bn in 0..n {
                let src = bn * (ca + cb) * area;
                ga[bn * ca * area..(bn + 1) * ca * area]
                    .copy_from_slice(&g[src..src + ca * area]);
                gb[bn * cb * area..(bn + 1) * cb * area]
                    .copy_from_slice(&g[src + ca * area..src + (ca + cb) * area]);
            }
            pa.accum_grad(&ga);
            pb.accum_grad(&gb);
        }),
        "concat_channels",
    )
}

pub(super) fn mul_bcast(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let sa = a.shape().to_vec();
    let sb = b.shape().to_vec();
    if sa.len() != sb.len() {
        return Err(Error::Shape(format!(
            "mul_bcast: rank mismatch {:?} vs {:?}",
            sa, sb
        )));
    }
    let rank = sa.len();
    let mut so = vec![0usize; rank];
    for i in 0..rank {
        if sa[i] == sb[i] || sa[i] == 1 || sb[i] == 1 {
            so[i] = sa[i].max(sb[i]);
        } else {
            return Err(Error::Shape(format!(
                "mul_bcast: incompatible shapes {:?} vs {:?}",
                sa, sb
            )));
        }
    }
    let strides = |s: &[usize]| -> Vec<usize> {
        let mut st = vec![0usize; s.len()];
        let mut acc = 1;
        for i in (0..s.len()).rev() {
            st[i] = if s[i] == 1 { 0 } else { acc };
            acc *= s[i];
        }
        st
    };
    let (sta, stb) = (strides(&sa), strides(&sb));
    let total: usize = so.iter().product();
    let xa = a.data();
    let xb = b.data();
    let mut out = vec![0.0; total];
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank {
            ia += idx[d] * sta[d];
            ib += idx[d] * stb[d];
        }
        *o = xa[ia] * xb[ib];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < so[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    drop(xa);
    drop(xb);

    let (pa, pb) = (a.clone(), b.clone());
    let (soc, stac, stbc) = (so.clone(), sta, stb);
    Tensor::from_op(
        out,
        so,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let xa = pa.data();
            let xb = pb.data();
            let mut ga = vec![0.0; xa.len()];
            let mut gb = vec![0.0; xb.len()];
            let rank = soc.len();
            let mut idx = vec![0usize; rank];
            for go in g.iter() {
                let mut ia = 0;
                let mut ib = 0;
                for d in 0..rank {
                    ia += idx[d] * stac[d];
                    ib += idx[d] * stbc[d];
                }
                ga[ia] += go * xb[ib];
                gb[ib] += go * xa[ia];
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    if idx[d] < soc[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            drop(xa);
            drop(xb);
            pa.accum_grad(&ga);
            pb.accum_grad(&gb);
        }),
        "mul_bcast",
    )
}

pub(super) fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = input.shape().to_vec();
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "softmax: axis {axis} out of range for shape {:?}",
            shape
        )));
    }
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * axis_len + j) * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..axis_len {
                mx = mx.max(x[at(j)]);
            }
            let mut denom = 0.0;
            for j in 0..axis_len {
                let e = (x[at(j)] - mx).exp();
                out[at(j)] = e;
                denom += e;
            }
            for j in 0..axis_len {
                out[at(j)] /= denom;
            }
        }
    }
    drop(x);
    let p = input.clone();
    let y = out.clone();
    Tensor::from_op(
        out,
        shape,
        vec![input.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * axis_len + j) * inner + i;
                    let mut dot = 0.0;
                    for j in 0..axis_len {
                        dot += g[at(j)] * y[at(j)];
                    }
                    for j in 0..axis_len {
                        gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            p.accum_grad(&gx);
        }),
        "softmax",
    )
}

/// Multi-head self-attention over flattened spatial positions with learnable
/// 2-D relative position embeddings added through the query.
///
/// q, k, v: [N, heads*d_head, H, W]. pos_row: [2*H_max-1, d_head],
/// pos_col: [2*W_max-1, d_head]. Per head, for query position i and key
/// position j: logit = (q_i.k_j + q_i.(pos_row[dy+H-1] + pos_col[dx+W-1])) * s
/// with s = 1/sqrt(d_head) when `scale_logits`. Rows are softmaxed and heads
/// are concatenated with no output projection.
#[allow(clippy::too_many_arguments)]
pub fn mhsa_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    pos_row: &Tensor,
    pos_col: &Tensor,
    heads: usize,
    scale_logits: bool,
) -> Result<Tensor> {
    let (n, d, h, w) = shape4(q, "mhsa q")?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::Shape(format!(
            "mhsa: q/k/v shapes differ: {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!(
            "mhsa: head count {heads} must divide attention width {d}"
        )));
    }
    let dh = d / heads;
    let (rrows, rdh) = match *pos_row.shape() {
        [r, c] => (r, c),
        _ => return Err(Error::Shape("mhsa: pos_row must be rank 2".into())),
    };
    let (rcols, cdh) = match *pos_col.shape() {
        [r, c] => (r, c),
        _ => return Err(Error::Shape("mhsa: pos_col must be rank 2".into())),
    };
    if rdh != dh || cdh != dh {
        return Err(Error::Shape(format!(
            "mhsa: position table width {rdh}/{cdh} vs head width {dh}"
        )));
    }
    if 2 * h - 1 > rrows || 2 * w - 1 > rcols {
        return Err(Error::Shape(format!(
            "mhsa: spatial extent {h}x{w} exceeds position tables ({rrows}/{rcols} rows)"
        )));
    }
    let hw = h * w;
    let s = if scale_logits { 1.0 / (dh as f64).sqrt() } else { 1.0 };

    let xq = q.data();
    let xk = k.data();
    let xv = v.data();
    let rr = pos_row.data();
    let rc = pos_col.data();

    // channel-major [N, D, HW] layout; head hd, dim t -> channel hd*dh + t
    let at = |bn: usize, c: usize, pos: usize| (bn * d + c) * hw + pos;
    let mut out = vec![0.0; n * d * hw];
    // cached attention rows: [n][head][i][j]
    let mut attn = vec![0.0; n * heads * hw * hw];
    for bn in 0..n {
        for hd in 0..heads {
            for i in 0..hw {
                let (yi, xi) = (i / w, i % w);
                let row = &mut attn
                    [((bn * heads + hd) * hw + i) * hw..((bn * heads + hd) * hw + i + 1) * hw];
                let mut mx = f64::NEG_INFINITY;
                for (j, slot) in row.iter_mut().enumerate() {
                    let (yj, xj) = (j / w, j % w);
                    let ri = (yj as isize - yi as isize + h as isize - 1) as usize;
                    let ci = (xj as isize - xi as isize + w as isize - 1) as usize;
                    let mut logit = 0.0;
                    for t in 0..dh {
                        let qv = xq[at(bn, hd * dh + t, i)];
                        logit += qv * (xk[at(bn, hd * dh + t, j)] + rr[ri * dh + t] + rc[ci * dh + t]);
                    }
                    *slot = logit * s;
                    mx = mx.max(*slot);
                }
                let mut denom = 0.0;
                for slot in row.iter_mut() {
                    *slot = (*slot - mx).exp();
                    denom += *slot;
                }
                for slot in row.iter_mut() {
                    *slot /= denom;
                }
                for t in 0..dh {
                    let mut acc = 0.0;
                    for (j, a) in row.iter().enumerate() {
                        acc += a * xv[at(bn, hd * dh + t, j)];
                    }
                    out[at(bn, hd * dh + t, i)] = acc;
                }
            }
        }
    }
    drop(xq);
    drop(xk);
    drop(xv);
    drop(rr);
    drop(rc);

    let (pq, pk, pv, pr, pc) = (
        q.clone(),
        k.clone(),
        v.clone(),
        pos_row.clone(),
        pos_col.clone(),
    );
    Tensor::from_op(
        out,
        vec![n, d, h, w],
        vec![q.clone(), k.clone(), v.clone(), pos_row.clone(), pos_col.clone()],
        Box::new(move |g| {
            let xq = pq.data();
            let xk = pk.data();
            let xv = pv.data();
            let rr = pr.data();
            let rc = pc.data();
            let mut gq = vec![0.0; xq.len()];
            let mut gk = vec![0.0; xk.len()];
            let mut gv = vec![0.0; xv.len()];
            let mut grr = vec![0.0; rr.len()];
            let mut grc = vec![0.0; rc.len()];
            let at = |bn: usize, c: usize, pos: usize| (bn * d + c) * hw + pos;
            for bn in 0..n {
                for hd in 0..heads {
                    for i in 0..hw {
                        let (yi, xi) = (i / w, i % w);
                        let row =
                            &attn[((bn * heads + hd) * hw + i) * hw..((bn * heads + hd) * hw + i + 1) * hw];
                        // d(loss)/d(attention row), then softmax backward
                        let mut da = vec![0.0; hw];
                        for (j, daj) in da.iter_mut().enumerate() {
                            for t in 0..dh {
                                *daj += g[at(bn, hd * dh + t, i)] * xv[at(bn, hd * dh + t, j)];
                            }
                        }
                        let dot: f64 = row.iter().zip(&da).map(|(a, d)| a * d).sum();
                        for j in 0..hw {
                            let dl = row[j] * (da[j] - dot) * s;
                            let (yj, xj) = (j / w, j % w);
                            let ri = (yj as isize - yi as isize + h as isize - 1) as usize;
                            let ci = (xj as isize - xi as isize + w as isize - 1) as usize;
                            for t in 0..dh {
                                let qv = xq[at(bn, hd * dh + t, i)];
                                gq[at(bn, hd * dh + t, i)] += dl
                                    * (xk[at(bn, hd * dh + t, j)]
                                        + rr[ri * dh + t]
                                        + rc[ci * dh + t]);
                                gk[at(bn, hd * dh + t, j)] += dl * qv;
                                grr[ri * dh + t] += dl * qv;
                                grc[ci * dh + t] += dl * qv;
                            }
                            // value gradient: dv_j += a_ij * g_i
                            for t in 0..dh {
                                gv[at(bn, hd * dh + t, j)] +=
                                    row[j] * g[at(bn, hd * dh + t, i)];
                            }
                        }
                    }
                }
            }
            drop(xq);
            drop(xk);
            drop(xv);
            drop(rr);
            drop(rc);
            pq.accum_grad(&gq);
            pk.accum_grad(&gk);
            pv.accum_grad(&gv);
            pr.accum_grad(&grr);
            pc.accum_grad(&grc);
        }),
        "mhsa_attention",
    )
}
