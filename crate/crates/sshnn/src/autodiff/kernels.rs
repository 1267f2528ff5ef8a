//! Forward and adjoint kernels on raw `f64` slices.
//!
//! Every kernel is a pure function with a fixed accumulation order, so the
//! same inputs always give bit-identical outputs. Where a kernel
//! parallelizes, it only ever splits the *output* buffer into disjoint
//! planes, each filled sequentially; results do not depend on the thread
//! count. The pool size comes from `SSHNN_THREADS` (see [`pool`]).

use std::sync::OnceLock;

use rayon::prelude::*;

/// Shared kernel thread pool, sized by the `SSHNN_THREADS` environment
/// variable (default: available parallelism).
pub fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = std::env::var("SSHNN_THREADS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            });
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("kernel thread pool")
    })
}

/// Output extent of a strided, dilated, padded window sweep.
pub fn conv_out_dim(input: usize, pad: usize, dilation: usize, ksize: usize, stride: usize) -> usize {
    (input + 2 * pad - dilation * (ksize - 1) - 1) / stride + 1
}

// ---------------------------------------------------------------------------
// Dense 2-D convolution (cross-correlation)
// ---------------------------------------------------------------------------

/// x: [n, cin, h, w], k: [cout, cin, kh, kw] -> [n, cout, oh, ow].
pub fn conv2d_fwd(
    x: &[f64],
    xs: &[usize],
    k: &[f64],
    ks: &[usize],
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Vec<f64> {
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    let oh = conv_out_dim(h, pad, dilation, kh, stride);
    let ow = conv_out_dim(w, pad, dilation, kw, stride);
    let mut out = vec![0.0; n * cout * oh * ow];
    pool().install(|| {
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, plane)| {
            let ni = p / cout;
            let co = p % cout;
            for ci in 0..cin {
                let xbase = (ni * cin + ci) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kv = k[((co * cin + ci) * kh + ky) * kw + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = xbase + iy as usize * w;
                            let orow = oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                plane[orow + ox] += kv * x[row + ix as usize];
                            }
                        }
                    }
                }
            }
        });
    });
    out
}

/// Gradient of `conv2d_fwd` with respect to the input.
pub fn conv2d_bwd_input(
    dout: &[f64],
    k: &[f64],
    ks: &[usize],
    xs: &[usize],
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Vec<f64> {
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    let oh = conv_out_dim(h, pad, dilation, kh, stride);
    let ow = conv_out_dim(w, pad, dilation, kw, stride);
    let mut dx = vec![0.0; n * cin * h * w];
    pool().install(|| {
        dx.par_chunks_mut(h * w).enumerate().for_each(|(p, plane)| {
            let ni = p / cin;
            let ci = p % cin;
            for co in 0..cout {
                let dbase = (ni * cout + co) * oh * ow;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kv = k[((co * cin + ci) * kh + ky) * kw + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = iy as usize * w;
                            let drow = dbase + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                plane[row + ix as usize] += kv * dout[drow + ox];
                            }
                        }
                    }
                }
            }
        });
    });
    dx
}

/// Gradient of `conv2d_fwd` with respect to the kernel.
pub fn conv2d_bwd_kernel(
    x: &[f64],
    xs: &[usize],
    dout: &[f64],
    ks: &[usize],
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Vec<f64> {
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    let oh = conv_out_dim(h, pad, dilation, kh, stride);
    let ow = conv_out_dim(w, pad, dilation, kw, stride);
    let mut dk = vec![0.0; cout * cin * kh * kw];
    pool().install(|| {
        dk.par_chunks_mut(kh * kw).enumerate().for_each(|(p, plane)| {
            let co = p / cin;
            let ci = p % cin;
            for ni in 0..n {
                let xbase = (ni * cin + ci) * h * w;
                let dbase = (ni * cout + co) * oh * ow;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = xbase + iy as usize * w;
                            let drow = dbase + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += dout[drow + ox] * x[row + ix as usize];
                            }
                        }
                        plane[ky * kw + kx] += acc;
                    }
                }
            }
        });
    });
    dk
}

// ---------------------------------------------------------------------------
// Depthwise convolution: one kh×kw kernel per channel
// ---------------------------------------------------------------------------

/// x: [n, c, h, w], k: [c, kh, kw] -> [n, c, oh, ow].
pub fn dwconv2d_fwd(
    x: &[f64],
    xs: &[usize],
    k: &[f64],
    ks: &[usize],
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Vec<f64> {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw) = (ks[1], ks[2]);
    let oh = conv_out_dim(h, pad, dilation, kh, stride);
    let ow = conv_out_dim(w, pad, dilation, kw, stride);
    let mut out = vec![0.0; n * c * oh * ow];
    pool().install(|| {
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, plane)| {
            let ci = p % c;
            let xbase = p * h * w;
            for ky in 0..kh {
                for kx in 0..kw {
                    let kv = k[(ci * kh + ky) * kw + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = xbase + iy as usize * w;
                        let orow = oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            plane[orow + ox] += kv * x[row + ix as usize];
                        }
                    }
                }
            }
        });
    });
    out
}

pub fn dwconv2d_bwd_input(
    dout: &[f64],
    k: &[f64],
    ks: &[usize],
    xs: &[usize],
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Vec<f64> {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw) = (ks[1], ks[2]);
    let oh = conv_out_dim(h, pad, dilation, kh, stride);
    let ow = conv_out_dim(w, pad, dilation, kw, stride);
    let mut dx = vec![0.0; n * c * h * w];
    pool().install(|| {
        dx.par_chunks_mut(h * w).enumerate().for_each(|(p, plane)| {
            let ci = p % c;
            let dbase = p * oh * ow;
            for ky in 0..kh {
                for kx in 0..kw {
                    let kv = k[(ci * kh + ky) * kw + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = iy as usize * w;
                        let drow = dbase + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            plane[row + ix as usize] += kv * dout[drow + ox];
                        }
                    }
                }
            }
        });
    });
    dx
}

pub fn dwconv2d_bwd_kernel(
    x: &[f64],
    xs: &[usize],
    dout: &[f64],
    ks: &[usize],
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Vec<f64> {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw) = (ks[1], ks[2]);
    let oh = conv_out_dim(h, pad, dilation, kh, stride);
    let ow = conv_out_dim(w, pad, dilation, kw, stride);
    let mut dk = vec![0.0; c * kh * kw];
    pool().install(|| {
        dk.par_chunks_mut(kh * kw).enumerate().for_each(|(ci, plane)| {
            for ni in 0..n {
                let xbase = (ni * c + ci) * h * w;
                let dbase = (ni * c + ci) * oh * ow;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = xbase + iy as usize * w;
                            let drow = dbase + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += dout[drow + ox] * x[row + ix as usize];
                            }
                        }
                        plane[ky * kw + kx] += acc;
                    }
                }
            }
        });
    });
    dk
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Padding never contributes: it is excluded from average denominators and
/// treated as -inf for max.
pub fn pool2d_fwd(
    mode: PoolMode,
    x: &[f64],
    xs: &[usize],
    window: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let oh = conv_out_dim(h, pad, 1, window, stride);
    let ow = conv_out_dim(w, pad, 1, window, stride);
    let mut out = vec![0.0; n * c * oh * ow];
    pool().install(|| {
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, plane)| {
            let xbase = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = match mode {
                        PoolMode::Avg => 0.0,
                        PoolMode::Max => f64::NEG_INFINITY,
                    };
                    let mut count = 0usize;
                    for ky in 0..window {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..window {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = x[xbase + iy as usize * w + ix as usize];
                            match mode {
                                PoolMode::Avg => acc += v,
                                PoolMode::Max => {
                                    if v > acc {
                                        acc = v;
                                    }
                                }
                            }
                            count += 1;
                        }
                    }
                    plane[oy * ow + ox] = match mode {
                        PoolMode::Avg => acc / count as f64,
                        PoolMode::Max => acc,
                    };
                }
            }
        });
    });
    out
}

pub fn pool2d_bwd(
    mode: PoolMode,
    x: &[f64],
    xs: &[usize],
    dout: &[f64],
    window: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let oh = conv_out_dim(h, pad, 1, window, stride);
    let ow = conv_out_dim(w, pad, 1, window, stride);
    let mut dx = vec![0.0; n * c * h * w];
    pool().install(|| {
        dx.par_chunks_mut(h * w).enumerate().for_each(|(p, plane)| {
            let xbase = p * h * w;
            let dbase = p * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dout[dbase + oy * ow + ox];
                    match mode {
                        PoolMode::Avg => {
                            // Two passes: count valid cells, then distribute.
                            let mut count = 0usize;
                            for ky in 0..window {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..window {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    count += 1;
                                }
                            }
                            let share = g / count as f64;
                            for ky in 0..window {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..window {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    plane[iy as usize * w + ix as usize] += share;
                                }
                            }
                        }
                        PoolMode::Max => {
                            // First maximum in scan order wins, matching fwd.
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = None;
                            for ky in 0..window {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..window {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let idx = iy as usize * w + ix as usize;
                                    let v = x[xbase + idx];
                                    if v > best {
                                        best = v;
                                        best_idx = Some(idx);
                                    }
                                }
                            }
                            if let Some(idx) = best_idx {
                                plane[idx] += g;
                            }
                        }
                    }
                }
            }
        });
    });
    dx
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Bilinear upsampling by an integer factor, align-corners = false
/// (pixel-corner to pixel-corner mapping, edges clamped).
pub fn upsample_bilinear_fwd(x: &[f64], xs: &[usize], factor: usize) -> Vec<f64> {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; n * c * oh * ow];
    pool().install(|| {
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, plane)| {
            let xbase = p * h * w;
            for oy in 0..oh {
                let sy = (oy as f64 + 0.5) / factor as f64 - 0.5;
                let y0f = sy.floor();
                let wy = sy - y0f;
                let y0 = (y0f as isize).clamp(0, h as isize - 1) as usize;
                let y1 = ((y0f as isize) + 1).clamp(0, h as isize - 1) as usize;
                for ox in 0..ow {
                    let sx = (ox as f64 + 0.5) / factor as f64 - 0.5;
                    let x0f = sx.floor();
                    let wx = sx - x0f;
                    let x0 = (x0f as isize).clamp(0, w as isize - 1) as usize;
                    let x1 = ((x0f as isize) + 1).clamp(0, w as isize - 1) as usize;
                    plane[oy * ow + ox] = (1.0 - wy) * (1.0 - wx) * x[xbase + y0 * w + x0]
                        + (1.0 - wy) * wx * x[xbase + y0 * w + x1]
                        + wy * (1.0 - wx) * x[xbase + y1 * w + x0]
                        + wy * wx * x[xbase + y1 * w + x1];
                }
            }
        });
    });
    out
}

pub fn upsample_bilinear_bwd(dout: &[f64], xs: &[usize], factor: usize) -> Vec<f64> {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![0.0; n * c * h * w];
    pool().install(|| {
        dx.par_chunks_mut(h * w).enumerate().for_each(|(p, plane)| {
            let dbase = p * oh * ow;
            for oy in 0..oh {
                let sy = (oy as f64 + 0.5) / factor as f64 - 0.5;
                let y0f = sy.floor();
                let wy = sy - y0f;
                let y0 = (y0f as isize).clamp(0, h as isize - 1) as usize;
                let y1 = ((y0f as isize) + 1).clamp(0, h as isize - 1) as usize;
                for ox in 0..ow {
                    let sx = (ox as f64 + 0.5) / factor as f64 - 0.5;
                    let x0f = sx.floor();
                    let wx = sx - x0f;
                    let x0 = (x0f as isize).clamp(0, w as isize - 1) as usize;
                    let x1 = ((x0f as isize) + 1).clamp(0, w as isize - 1) as usize;
                    let g = dout[dbase + oy * ow + ox];
                    plane[y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * g;
                    plane[y0 * w + x1] += (1.0 - wy) * wx * g;
                    plane[y1 * w + x0] += wy * (1.0 - wx) * g;
                    plane[y1 * w + x1] += wy * wx * g;
                }
            }
        });
    });
    dx
}

/// Average-pool downsampling by an integer factor; dims must divide evenly.
pub fn downsample_avg_fwd(x: &[f64], xs: &[usize], factor: usize) -> Vec<f64> {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    pool().install(|| {
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, plane)| {
            let xbase = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..factor {
                        let row = xbase + (oy * factor + ky) * w + ox * factor;
                        for kx in 0..factor {
                            acc += x[row + kx];
                        }
                    }
                    plane[oy * ow + ox] = acc * inv;
                }
            }
        });
    });
    out
}

pub fn downsample_avg_bwd(dout: &[f64], xs: &[usize], factor: usize) -> Vec<f64> {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut dx = vec![0.0; n * c * h * w];
    pool().install(|| {
        dx.par_chunks_mut(h * w).enumerate().for_each(|(p, plane)| {
            let dbase = p * oh * ow;
            for iy in 0..h {
                let drow = dbase + (iy / factor) * ow;
                let row = iy * w;
                for ix in 0..w {
                    plane[row + ix] = dout[drow + ix / factor] * inv;
                }
            }
        });
    });
    dx
}

// ---------------------------------------------------------------------------
// Softmax along an arbitrary axis
// ---------------------------------------------------------------------------

/// Lane decomposition of `shape` around `axis`: (outer, axis_len, inner).
pub fn axis_lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Max-shifted exponentials normalized along `axis`.
pub fn softmax_fwd(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_lanes(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let lane = |j: usize| (o * len + j) * inner + i;
            let mut m = f64::NEG_INFINITY;
            for j in 0..len {
                m = m.max(x[lane(j)]);
            }
            let mut z = 0.0;
            for j in 0..len {
                let e = (x[lane(j)] - m).exp();
                out[lane(j)] = e;
                z += e;
            }
            for j in 0..len {
                out[lane(j)] /= z;
            }
        }
    }
    out
}

/// VJP of softmax given its output `y`.
pub fn softmax_bwd(y: &[f64], dout: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_lanes(shape, axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let lane = |j: usize| (o * len + j) * inner + i;
            let mut dot = 0.0;
            for j in 0..len {
                dot += dout[lane(j)] * y[lane(j)];
            }
            for j in 0..len {
                dx[lane(j)] = y[lane(j)] * (dout[lane(j)] - dot);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Layer norm over the last dimension
// ---------------------------------------------------------------------------

pub fn layer_norm_fwd(x: &[f64], gain: &[f64], bias: &[f64], d: usize, eps: f64) -> Vec<f64> {
    let lanes = x.len() / d;
    let mut out = vec![0.0; x.len()];
    for l in 0..lanes {
        let xs = &x[l * d..(l + 1) * d];
        let mean = xs.iter().sum::<f64>() / d as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out[l * d + j] = (xs[j] - mean) * inv * gain[j] + bias[j];
        }
    }
    out
}

/// Returns (dx, dgain, dbias).
pub fn layer_norm_bwd(
    x: &[f64],
    gain: &[f64],
    d: usize,
    eps: f64,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let lanes = x.len() / d;
    let mut dx = vec![0.0; x.len()];
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    for l in 0..lanes {
        let xs = &x[l * d..(l + 1) * d];
        let dos = &dout[l * d..(l + 1) * d];
        let mean = xs.iter().sum::<f64>() / d as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let xhat = (xs[j] - mean) * inv;
            let dxhat = dos[j] * gain[j];
            dgain[j] += dos[j] * xhat;
            dbias[j] += dos[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let xhat = (xs[j] - mean) * inv;
            let dxhat = dos[j] * gain[j];
            dx[l * d + j] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// Row-major [m,k] @ [k,n] -> [m,n].
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    pool().install(|| {
        out.par_chunks_mut(n).enumerate().for_each(|(row, orow)| {
            let arow = &a[row * k..(row + 1) * k];
            for (i, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        });
    });
    out
}

/// [m,k] @ [n,k]^T -> [m,n]; both operands traversed row-contiguously.
pub fn matmul_abt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    pool().install(|| {
        out.par_chunks_mut(n).enumerate().for_each(|(row, orow)| {
            let arow = &a[row * k..(row + 1) * k];
            for (j, o) in orow.iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                *o = arow.iter().zip(brow.iter()).map(|(x, y)| x * y).sum();
            }
        });
    });
    out
}

/// [m,k]^T @ [m,n] -> [k,n].
pub fn matmul_atb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for l in 0..m {
        let arow = &a[l * k..(l + 1) * k];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// GELU (tanh form)
// ---------------------------------------------------------------------------

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu_fwd(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let u = GELU_C * (v + GELU_A * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        })
        .collect()
}

pub fn gelu_bwd(x: &[f64], dout: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dout.iter())
        .map(|(&v, &g)| {
            let u = GELU_C * (v + GELU_A * v * v * v);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
            g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean over pixels of -log softmax(logits)[label]; logits [n, classes, h, w],
/// labels row-major over (n, h, w).
pub fn cross_entropy_fwd(logits: &[f64], shape: &[usize], labels: &[usize]) -> f64 {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let mut total = 0.0;
    for ni in 0..n {
        for px in 0..plane {
            let at = |cl: usize| logits[(ni * c + cl) * plane + px];
            let mut m = f64::NEG_INFINITY;
            for cl in 0..c {
                m = m.max(at(cl));
            }
            let mut z = 0.0;
            for cl in 0..c {
                z += (at(cl) - m).exp();
            }
            let label = labels[ni * plane + px];
            total += z.ln() + m - at(label);
        }
    }
    total / (n * plane) as f64
}

pub fn cross_entropy_bwd(logits: &[f64], shape: &[usize], labels: &[usize], g: f64) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let scale = g / (n * plane) as f64;
    let mut dx = vec![0.0; logits.len()];
    for ni in 0..n {
        for px in 0..plane {
            let at = |cl: usize| logits[(ni * c + cl) * plane + px];
            let mut m = f64::NEG_INFINITY;
            for cl in 0..c {
                m = m.max(at(cl));
            }
            let mut z = 0.0;
            for cl in 0..c {
                z += (at(cl) - m).exp();
            }
            let label = labels[ni * plane + px];
            for cl in 0..c {
                let p = (at(cl) - m).exp() / z;
                let ind = if cl == label { 1.0 } else { 0.0 };
                dx[(ni * c + cl) * plane + px] = (p - ind) * scale;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force convolution oracle: literal sum over the receptive field.
    fn conv_oracle(
        x: &[f64],
        xs: &[usize],
        k: &[f64],
        ks: &[usize],
        stride: usize,
        dilation: usize,
        pad: usize,
    ) -> Vec<f64> {
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        let oh = conv_out_dim(h, pad, dilation, kh, stride);
        let ow = conv_out_dim(w, pad, dilation, kw, stride);
        let mut out = vec![0.0; n * cout * oh * ow];
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                                    let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((ni * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * k[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
    }

    #[test]
    fn conv_identity_kernel() {
        let y = conv2d_fwd(&[1.0], &[1, 1, 1, 1], &[1.0], &[1, 1, 1, 1], 1, 1, 0);
        assert_eq!(y, vec![1.0]);
    }

    #[test]
    fn conv_all_ones_4x4_counts_window_overlap() {
        let x = vec![1.0; 16];
        let k = vec![1.0; 9];
        let y = conv2d_fwd(&x, &[1, 1, 4, 4], &k, &[1, 1, 3, 3], 1, 1, 1);
        // Interior 9, corners 4, edges 6.
        let expect = [
            4.0, 6.0, 6.0, 4.0, //
            6.0, 9.0, 9.0, 6.0, //
            6.0, 9.0, 9.0, 6.0, //
            4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(y, expect);
    }

    #[test]
    fn dilated_conv_delta_hits_offsets_of_two() {
        // 5x5 delta at center, 3x3 ones kernel, dilation 2, pad 2.
        let mut x = vec![0.0; 25];
        x[12] = 1.0;
        let k = vec![1.0; 9];
        let y = conv2d_fwd(&x, &[1, 1, 5, 5], &k, &[1, 1, 3, 3], 1, 2, 2);
        assert_eq!(y.len(), 25);
        for oy in 0..5usize {
            for ox in 0..5usize {
                let hit = (oy as isize - 2).abs() % 2 == 0
                    && (ox as isize - 2).abs() % 2 == 0;
                let expect = if hit { 1.0 } else { 0.0 };
                assert_eq!(y[oy * 5 + ox], expect, "at ({oy},{ox})");
            }
        }
        assert_eq!(y.iter().filter(|&&v| v != 0.0).count(), 9);
    }

    #[test]
    fn conv_matches_oracle_on_random_inputs() {
        let mut seed = 7u64;
        for &(stride, dil, pad) in &[(1usize, 1usize, 1usize), (2, 1, 1), (1, 2, 2)] {
            let xs = [2, 3, 6, 6];
            let ks = [4, 3, 3, 3];
            let x: Vec<f64> = (0..xs.iter().product::<usize>()).map(|_| lcg(&mut seed)).collect();
            let k: Vec<f64> = (0..ks.iter().product::<usize>()).map(|_| lcg(&mut seed)).collect();
            let got = conv2d_fwd(&x, &xs, &k, &ks, stride, dil, pad);
            let want = conv_oracle(&x, &xs, &k, &ks, stride, dil, pad);
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dwconv_matches_dense_conv_with_diagonal_kernel() {
        let mut seed = 11u64;
        let xs = [1, 3, 5, 5];
        let x: Vec<f64> = (0..75).map(|_| lcg(&mut seed)).collect();
        let kd: Vec<f64> = (0..27).map(|_| lcg(&mut seed)).collect(); // [3,3,3]
        let got = dwconv2d_fwd(&x, &xs, &kd, &[3, 3, 3], 1, 1, 1);
        // Dense equivalent: kernel [3,3,3,3] with zeros off the channel diagonal.
        let mut kfull = vec![0.0; 3 * 3 * 9];
        for c in 0..3 {
            for i in 0..9 {
                kfull[(c * 3 + c) * 9 + i] = kd[c * 9 + i];
            }
        }
        let want = conv_oracle(&x, &xs, &kfull, &[3, 3, 3, 3], 1, 1, 1);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_constant_avg_stays_constant() {
        let x = vec![3.5; 16];
        let y = pool2d_fwd(PoolMode::Avg, &x, &[1, 1, 4, 4], 3, 1, 1);
        for v in y {
            assert!((v - 3.5).abs() < 1e-15);
        }
    }

    #[test]
    fn pool_max_2x2_window_takes_max() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let y = pool2d_fwd(PoolMode::Max, &x, &[1, 1, 2, 2], 2, 1, 0);
        assert_eq!(y, vec![4.0]);
    }

    #[test]
    fn pool_avg_matches_per_window_brute_force() {
        let mut seed = 23u64;
        let x: Vec<f64> = (0..16).map(|_| lcg(&mut seed)).collect();
        let y = pool2d_fwd(PoolMode::Avg, &x, &[1, 1, 4, 4], 3, 1, 1);
        for oy in 0..4usize {
            for ox in 0..4usize {
                let mut acc = 0.0;
                let mut cnt = 0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = oy as isize + ky - 1;
                        let ix = ox as isize + kx - 1;
                        if iy < 0 || iy > 3 || ix < 0 || ix > 3 {
                            continue;
                        }
                        acc += x[iy as usize * 4 + ix as usize];
                        cnt += 1;
                    }
                }
                assert!((y[oy * 4 + ox] - acc / cnt as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = vec![2.25; 9];
        let y = upsample_bilinear_fwd(&x, &[1, 1, 3, 3], 2);
        assert_eq!(y.len(), 36);
        for v in y {
            assert!((v - 2.25).abs() < 1e-15);
        }
    }

    #[test]
    fn downsample_2x2_block_mean() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let y = downsample_avg_fwd(&x, &[1, 1, 2, 2], 2);
        assert_eq!(y, vec![2.5]);
    }

    #[test]
    fn up_then_down_is_local_average() {
        // Bilinear x2 then avg x2 equals separable [1/8, 3/4, 1/8] smoothing
        // with clamped edges.
        let mut seed = 5u64;
        let x: Vec<f64> = (0..64).map(|_| lcg(&mut seed)).collect();
        let up = upsample_bilinear_fwd(&x, &[1, 1, 8, 8], 2);
        let down = downsample_avg_fwd(&up, &[1, 1, 16, 16], 2);
        let at = |v: &[f64], y: isize, xx: isize| {
            let yy = y.clamp(0, 7) as usize;
            let xc = xx.clamp(0, 7) as usize;
            v[yy * 8 + xc]
        };
        let kern = [0.125, 0.75, 0.125];
        for y in 0..8isize {
            for xx in 0..8isize {
                // Smooth rows first, then columns.
                let mut expect = 0.0;
                for (dy, ky) in (-1..=1).zip(kern.iter()) {
                    let mut row = 0.0;
                    for (dx, kx) in (-1..=1).zip(kern.iter()) {
                        row += kx * at(&x, y + dy, xx + dx);
                    }
                    expect += ky * row;
                }
                let got = down[y as usize * 8 + xx as usize];
                assert!(
                    (got - expect).abs() < 1e-6,
                    "({y},{xx}): {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let y = softmax_fwd(&[0.0; 6], &[6], 0);
        for v in &y {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
        let y = softmax_fwd(&[0.0, 3f64.ln()], &[2], 0);
        assert!((y[0] - 0.25).abs() < 1e-15);
        assert!((y[1] - 0.75).abs() < 1e-15);
        let y = softmax_fwd(&[1000.0, 1000.0], &[2], 0);
        assert!((y[0] - 0.5).abs() < 1e-15);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn layer_norm_closed_forms() {
        // Constant token: zero before affine, so output equals bias.
        let y = layer_norm_fwd(&[5.0, 5.0, 5.0], &[1.0, 1.0, 1.0], &[0.3, 0.3, 0.3], 3, 1e-5);
        for v in &y {
            assert!((v - 0.3).abs() < 1e-6);
        }
        // [1,-1] has unit variance.
        let y = layer_norm_fwd(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], 2, 1e-5);
        assert!((y[0] - 1.0).abs() < 1e-4);
        assert!((y[1] + 1.0).abs() < 1e-4);
        // Zero gain collapses to bias.
        let y = layer_norm_fwd(&[0.4, 7.0], &[0.0, 0.0], &[1.5, -2.0], 2, 1e-5);
        assert_eq!(y, vec![1.5, -2.0]);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        // Saturated correct prediction.
        let logits = vec![1e6, 0.0, 0.0, 0.0];
        let ce = cross_entropy_fwd(&logits, &[1, 4, 1, 1], &[0]);
        assert!(ce.abs() < 1e-9);
        // Uniform logits over 4 classes.
        let ce = cross_entropy_fwd(&[0.0; 4], &[1, 4, 1, 1], &[2]);
        assert!((ce - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matmul_small_case() {
        // [2,2] @ [2,2]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul_abt(&a, &b, 2, 2, 2), vec![17.0, 23.0, 39.0, 53.0]);
        assert_eq!(matmul_atb(&a, &b, 2, 2, 2), vec![26.0, 30.0, 38.0, 44.0]);
    }
}
