//! f32 compute kernels with f64 accumulation inside every reduction.
//!
//! Loops are laid out so the innermost axis walks contiguous memory; there
//! is no SIMD beyond what the compiler finds, and no threading (one tape is
//! single-threaded by contract, and the target machine is a single core).

/// Valid output extent for a strided, padded convolution axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Copy one input plane into a zero-padded scratch buffer so the inner
/// loops need no bounds checks.
fn pad_plane(src: &[f32], h: usize, w: usize, pad: usize, dst: &mut [f32]) {
    let wp = w + 2 * pad;
    dst.fill(0.0);
    for r in 0..h {
        dst[(r + pad) * wp + pad..(r + pad) * wp + pad + w]
            .copy_from_slice(&src[r * w..(r + 1) * w]);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd(
    x: &[f32],
    w: &[f32],
    bias: &[f32],
    b: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(wd, kw, stride, pad);
    let wp = wd + 2 * pad;
    let hp = h + 2 * pad;
    let mut out = vec![0.0f32; b * co * oh * ow];
    let mut acc = vec![0.0f64; co * oh * ow];
    let mut padded = vec![0.0f32; hp * wp];
    for bi in 0..b {
        for (oc, a) in acc.chunks_exact_mut(oh * ow).enumerate() {
            a.fill(bias[oc] as f64);
        }
        for ic in 0..ci {
            let x_plane = &x[((bi * ci + ic) * h) * wd..((bi * ci + ic) * h + h) * wd];
            pad_plane(x_plane, h, wd, pad, &mut padded);
            for oc in 0..co {
                let wbase = &w[((oc * ci + ic) * kh) * kw..((oc * ci + ic) * kh + kh) * kw];
                let a = &mut acc[oc * oh * ow..(oc + 1) * oh * ow];
                for k_r in 0..kh {
                    let wrow = &wbase[k_r * kw..(k_r + 1) * kw];
                    for o_r in 0..oh {
                        let row = &padded[(o_r * stride + k_r) * wp..];
                        let arow = &mut a[o_r * ow..(o_r + 1) * ow];
                        // kw is fused so each accumulator is touched once
                        // per kernel row.
                        match (kw, stride) {
                            (3, 1) => {
                                let (w0, w1, w2) =
                                    (wrow[0] as f64, wrow[1] as f64, wrow[2] as f64);
                                let seg = &row[..ow + 2];
                                for (i, av) in arow.iter_mut().enumerate() {
                                    *av += w0 * seg[i] as f64
                                        + w1 * seg[i + 1] as f64
                                        + w2 * seg[i + 2] as f64;
                                }
                            }
                            (3, 2) => {
                                let (w0, w1, w2) =
                                    (wrow[0] as f64, wrow[1] as f64, wrow[2] as f64);
                                let seg = &row[..2 * ow + 1];
                                for (i, av) in arow.iter_mut().enumerate() {
                                    *av += w0 * seg[2 * i] as f64
                                        + w1 * seg[2 * i + 1] as f64
                                        + w2 * seg[2 * i + 2] as f64;
                                }
                            }
                            (1, 1) => {
                                let w0 = wrow[0] as f64;
                                for (av, &xv) in arow.iter_mut().zip(row[..ow].iter()) {
                                    *av += w0 * xv as f64;
                                }
                            }
                            _ => {
                                for (i, av) in arow.iter_mut().enumerate() {
                                    let base = i * stride;
                                    for (k_c, &wv) in wrow.iter().enumerate() {
                                        *av += wv as f64 * row[base + k_c] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let dst = &mut out[bi * co * oh * ow..(bi + 1) * co * oh * ow];
        for (d, &a) in dst.iter_mut().zip(acc.iter()) {
            *d = a as f32;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd(
    x: &[f32],
    w: &[f32],
    grad: &[f32],
    b: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Vec<f32>) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(wd, kw, stride, pad);
    let wp = wd + 2 * pad;
    let hp = h + 2 * pad;

    let mut dbias = vec![0.0f32; co];
    for oc in 0..co {
        let mut acc = 0.0f64;
        for bi in 0..b {
            let g_plane = &grad[((bi * co + oc) * oh) * ow..((bi * co + oc) * oh + oh) * ow];
            for &g in g_plane {
                acc += g as f64;
            }
        }
        dbias[oc] = acc as f32;
    }

    // Weight gradient over padded input planes: contiguous row dot
    // products, f64 accumulation across the whole batch.
    let dw = if need_dw {
        let mut dw_acc = vec![0.0f64; co * ci * kh * kw];
        let mut padded = vec![0.0f32; ci * hp * wp];
        for bi in 0..b {
            for ic in 0..ci {
                let x_plane = &x[((bi * ci + ic) * h) * wd..((bi * ci + ic) * h + h) * wd];
                pad_plane(x_plane, h, wd, pad, &mut padded[ic * hp * wp..(ic + 1) * hp * wp]);
            }
            for oc in 0..co {
                let g_plane = &grad[((bi * co + oc) * oh) * ow..((bi * co + oc) * oh + oh) * ow];
                for ic in 0..ci {
                    let xp = &padded[ic * hp * wp..(ic + 1) * hp * wp];
                    let base = (oc * ci + ic) * kh * kw;
                    for k_r in 0..kh {
                        for k_c in 0..kw {
                            let mut acc = 0.0f64;
                            for o_r in 0..oh {
                                let grow = &g_plane[o_r * ow..(o_r + 1) * ow];
                                let xrow = &xp[(o_r * stride + k_r) * wp + k_c..];
                                if stride == 1 {
                                    for (&g, &xv) in grow.iter().zip(xrow[..ow].iter()) {
                                        acc += g as f64 * xv as f64;
                                    }
                                } else {
                                    for (i, &g) in grow.iter().enumerate() {
                                        acc += g as f64 * xrow[i * stride] as f64;
                                    }
                                }
                            }
                            dw_acc[base + k_r * kw + k_c] += acc;
                        }
                    }
                }
            }
        }
        Some(dw_acc.iter().map(|&v| v as f32).collect())
    } else {
        None
    };

    // Input gradient scattered into a padded accumulator with no bounds
    // checks, then cropped.
    let dx = if need_dx {
        let mut dx = vec![0.0f32; b * ci * h * wd];
        let mut acc = vec![0.0f64; hp * wp];
        for bi in 0..b {
            for ic in 0..ci {
                acc.fill(0.0);
                for oc in 0..co {
                    let g_plane =
                        &grad[((bi * co + oc) * oh) * ow..((bi * co + oc) * oh + oh) * ow];
                    let wbase = &w[((oc * ci + ic) * kh) * kw..((oc * ci + ic) * kh + kh) * kw];
                    for k_r in 0..kh {
                        let wrow = &wbase[k_r * kw..(k_r + 1) * kw];
                        for o_r in 0..oh {
                            let grow = &g_plane[o_r * ow..(o_r + 1) * ow];
                            let arow = &mut acc[(o_r * stride + k_r) * wp..];
                            for (k_c, &wv) in wrow.iter().enumerate() {
                                let wv = wv as f64;
                                if stride == 1 {
                                    for (i, &g) in grow.iter().enumerate() {
                                        arow[k_c + i] += wv * g as f64;
                                    }
                                } else {
                                    for (i, &g) in grow.iter().enumerate() {
                                        arow[k_c + i * stride] += wv * g as f64;
                                    }
                                }
                            }
                        }
                    }
                }
                let dst = &mut dx[((bi * ci + ic) * h) * wd..((bi * ci + ic) * h + h) * wd];
                for r in 0..h {
                    let src = &acc[(r + pad) * wp + pad..(r + pad) * wp + pad + wd];
                    for (d, &a) in dst[r * wd..(r + 1) * wd].iter_mut().zip(src.iter()) {
                        *d = a as f32;
                    }
                }
            }
        }
        Some(dx)
    } else {
        None
    };

    (dx, dw, dbias)
}

/// [m,k] x [k,n] -> [m,n] for each of `batch` independent pairs.
pub fn matmul_fwd(a: &[f32], bmat: &[f32], batch: usize, m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; batch * m * n];
    let mut acc = vec![0.0f64; n];
    for bi in 0..batch {
        let a_m = &a[bi * m * k..(bi + 1) * m * k];
        let b_m = &bmat[bi * k * n..(bi + 1) * k * n];
        let o_m = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            acc.fill(0.0);
            for kk in 0..k {
                let av = a_m[i * k + kk] as f64;
                let brow = &b_m[kk * n..(kk + 1) * n];
                for (ac, &bv) in acc.iter_mut().zip(brow.iter()) {
                    *ac += av * bv as f64;
                }
            }
            for (o, &ac) in o_m[i * n..(i + 1) * n].iter_mut().zip(acc.iter()) {
                *o = ac as f32;
            }
        }
    }
    out
}

/// da = g . b^T, db = a^T . g, per batch item.
pub fn matmul_bwd(
    a: &[f32],
    bmat: &[f32],
    grad: &[f32],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f32>, Vec<f32>) {
    let mut da = vec![0.0f32; batch * m * k];
    let mut db = vec![0.0f32; batch * k * n];
    for bi in 0..batch {
        let a_m = &a[bi * m * k..(bi + 1) * m * k];
        let b_m = &bmat[bi * k * n..(bi + 1) * k * n];
        let g_m = &grad[bi * m * n..(bi + 1) * m * n];
        // da[i,kk] = sum_j g[i,j] * b[kk,j]
        for i in 0..m {
            let grow = &g_m[i * n..(i + 1) * n];
            for kk in 0..k {
                let brow = &b_m[kk * n..(kk + 1) * n];
                let mut acc = 0.0f64;
                for (&g, &bv) in grow.iter().zip(brow.iter()) {
                    acc += g as f64 * bv as f64;
                }
                da[bi * m * k + i * k + kk] = acc as f32;
            }
        }
        // db[kk,j] = sum_i a[i,kk] * g[i,j]
        let mut acc = vec![0.0f64; n];
        for kk in 0..k {
            acc.fill(0.0);
            for i in 0..m {
                let av = a_m[i * k + kk] as f64;
                let grow = &g_m[i * n..(i + 1) * n];
                for (ac, &g) in acc.iter_mut().zip(grow.iter()) {
                    *ac += av * g as f64;
                }
            }
            for (d, &ac) in db[bi * k * n + kk * n..bi * k * n + (kk + 1) * n]
                .iter_mut()
                .zip(acc.iter())
            {
                *d = ac as f32;
            }
        }
    }
    (da, db)
}

/// 2x2 max pooling with stride 2; returns (values, flat argmax per output).
/// Ties resolve to the first maximum in row-major scan order.
pub fn maxpool2_fwd(x: &[f32], b: usize, c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = vec![0.0f32; b * c * oh * ow];
    let mut arg = vec![0u32; b * c * oh * ow];
    for p in 0..b * c {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for di in 0..2 {
                    for dj in 0..2 {
                        let idx = (2 * i + di) * w + 2 * j + dj;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[p * oh * ow + i * ow + j] = best;
                arg[p * oh * ow + i * ow + j] = best_idx as u32;
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour resize with pixel-center mapping.
pub fn resize_nearest_map(input: usize, output: usize) -> Vec<usize> {
    (0..output)
        .map(|o| {
            let f = (o as f64 + 0.5) * input as f64 / output as f64;
            (f.floor() as usize).min(input - 1)
        })
        .collect()
}

/// Bilinear taps with align_corners=false: (lo, hi, weight of hi).
pub fn resize_bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            let f = (o as f64 + 0.5) * input as f64 / output as f64 - 0.5;
            let f = f.max(0.0).min(input as f64 - 1.0);
            let lo = f.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, f - lo as f64)
        })
        .collect()
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Softmax over the last axis (rows of length `d`).
pub fn softmax_fwd(x: &[f32], d: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for (&v, o) in row.iter().zip(orow.iter_mut()) {
            let e = ((v - mx) as f64).exp();
            *o = e as f32;
            denom += e;
        }
        for o in orow.iter_mut() {
            *o = (*o as f64 / denom) as f32;
        }
    }
    out
}

/// dx = y * (g - sum(g*y)) per row, where y is the saved softmax output.
pub fn softmax_bwd(y: &[f32], grad: &[f32], d: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; y.len()];
    for ((yrow, grow), drow) in y
        .chunks_exact(d)
        .zip(grad.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        let mut dot = 0.0f64;
        for (&yv, &gv) in yrow.iter().zip(grow.iter()) {
            dot += yv as f64 * gv as f64;
        }
        for ((&yv, &gv), dv) in yrow.iter().zip(grow.iter()).zip(drow.iter_mut()) {
            *dv = (yv as f64 * (gv as f64 - dot)) as f32;
        }
    }
    dx
}

/// Layer norm over the last axis; returns (y, mean, rstd) with the row
/// statistics kept in f64 for the backward pass.
pub fn layernorm_fwd(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    d: usize,
    eps: f64,
) -> (Vec<f32>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut out = vec![0.0f32; x.len()];
    let mut means = vec![0.0f64; rows];
    let mut rstds = vec![0.0f64; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mut mean = 0.0f64;
        for &v in row {
            mean += v as f64;
        }
        mean /= d as f64;
        let mut var = 0.0f64;
        for &v in row {
            let c = v as f64 - mean;
            var += c * c;
        }
        var /= d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        means[r] = mean;
        rstds[r] = rstd;
        let orow = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            let xhat = (row[i] as f64 - mean) * rstd;
            orow[i] = (gamma[i] as f64 * xhat + beta[i] as f64) as f32;
        }
    }
    (out, means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_bwd(
    x: &[f32],
    gamma: &[f32],
    grad: &[f32],
    means: &[f64],
    rstds: &[f64],
    d: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let rows = x.len() / d;
    let mut dx = vec![0.0f32; x.len()];
    let mut dgamma64 = vec![0.0f64; d];
    let mut dbeta64 = vec![0.0f64; d];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let grow = &grad[r * d..(r + 1) * d];
        let mean = means[r];
        let rstd = rstds[r];
        let mut m_gy = 0.0f64;
        let mut m_gy_xhat = 0.0f64;
        for i in 0..d {
            let xhat = (row[i] as f64 - mean) * rstd;
            let gy = grow[i] as f64 * gamma[i] as f64;
            m_gy += gy;
            m_gy_xhat += gy * xhat;
            dgamma64[i] += grow[i] as f64 * xhat;
            dbeta64[i] += grow[i] as f64;
        }
        m_gy /= d as f64;
        m_gy_xhat /= d as f64;
        let drow = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            let xhat = (row[i] as f64 - mean) * rstd;
            let gy = grow[i] as f64 * gamma[i] as f64;
            drow[i] = ((gy - m_gy - xhat * m_gy_xhat) * rstd) as f32;
        }
    }
    let dgamma = dgamma64.iter().map(|&v| v as f32).collect();
    let dbeta = dbeta64.iter().map(|&v| v as f32).collect();
    (dx, dgamma, dbeta)
}

/// Mean-squared-error style full reduction in f64.
pub fn sum_all(x: &[f32]) -> f64 {
    x.iter().map(|&v| v as f64).sum()
}
