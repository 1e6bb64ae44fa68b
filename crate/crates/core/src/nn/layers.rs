//! Layer kernels. Every layer reads its parameters from the network's flat
//! parameter vector through stored offsets and writes gradients into a
//! vector of the same length.

use matrixmultiply::sgemm;

pub(crate) const BN_EPS: f32 = 1e-5;
pub(crate) const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub(crate) enum Layer {
    Linear {
        inp: usize,
        out: usize,
        w: usize,
        b: usize,
    },
    Conv {
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
        wt: usize,
        b: Option<usize>,
    },
    BatchNorm {
        c: usize,
        spatial: usize,
        gamma: usize,
        beta: usize,
        mean: usize,
        var: usize,
    },
    Relu,
    MaxPool2 {
        c: usize,
        h: usize,
        w: usize,
    },
    GlobalAvgPool {
        c: usize,
        spatial: usize,
    },
    Residual {
        body: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
}

#[derive(Debug)]
pub(crate) enum Cache {
    Linear { x: Vec<f32> },
    Conv { cols: Vec<f32> },
    BatchNorm {
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu { y: Vec<f32> },
    MaxPool { argmax: Vec<u32>, in_len: usize },
    GlobalAvgPool,
    Residual { body: Vec<Cache>, shortcut: Vec<Cache> },
}

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c`, all row-major unless strides say otherwise.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose lengths cover the strided extents.
    unsafe {
        sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Layer {
    pub(crate) fn forward(
        &self,
        params: &[f32],
        buffers: &mut [f32],
        x: &[f32],
        n: usize,
        mode: Mode,
        tape: Option<&mut Vec<Cache>>,
    ) -> Vec<f32> {
        let in_f = x.len() / n.max(1);
        match self {
            Layer::Linear { inp, out, w, b } => {
                let (inp, out) = (*inp, *out);
                let mut y = vec![0.0f32; n * out];
                for row in y.chunks_exact_mut(out) {
                    row.copy_from_slice(&params[*b..*b + out]);
                }
                gemm(
                    n,
                    inp,
                    out,
                    x,
                    inp as isize,
                    1,
                    &params[*w..*w + inp * out],
                    1,
                    inp as isize,
                    1.0,
                    &mut y,
                );
                if let Some(t) = tape {
                    t.push(Cache::Linear { x: x.to_vec() });
                }
                y
            }
            Layer::Conv {
                cin,
                cout,
                k,
                stride,
                pad,
                h,
                w,
                oh,
                ow,
                wt,
                b,
            } => {
                let kk = cin * k * k;
                let p = oh * ow;
                let np = n * p;
                let weights = &params[*wt..*wt + cout * kk];
                // columns of all samples side by side: [kk × n·p]
                let mut cols = vec![0.0f32; kk * np];
                for s in 0..n {
                    let xs = &x[s * in_f..(s + 1) * in_f];
                    im2col(xs, *cin, *h, *w, *k, *stride, *pad, *oh, *ow, &mut cols, np, s * p);
                }
                let mut out_t = vec![0.0f32; cout * np];
                gemm(*cout, kk, np, weights, kk as isize, 1, &cols, np as isize, 1, 0.0, &mut out_t);
                let mut y = vec![0.0f32; n * cout * p];
                for co in 0..*cout {
                    let bias = b.map_or(0.0, |b| params[b + co]);
                    for s in 0..n {
                        let src = &out_t[co * np + s * p..co * np + (s + 1) * p];
                        let dst = &mut y[(s * cout + co) * p..(s * cout + co + 1) * p];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = v + bias;
                        }
                    }
                }
                if let Some(t) = tape {
                    t.push(Cache::Conv { cols });
                }
                y
            }
            Layer::BatchNorm {
                c,
                spatial,
                gamma,
                beta,
                mean,
                var,
            } => {
                let (c, sp) = (*c, *spatial);
                let m = (n * sp) as f32;
                let mut y = vec![0.0f32; x.len()];
                let mut xhat = vec![0.0f32; x.len()];
                let mut inv_std = vec![0.0f32; c];
                for ch in 0..c {
                    let (mu, v) = match mode {
                        Mode::Train => {
                            let mut sum = 0.0f64;
                            for s in 0..n {
                                let base = s * c * sp + ch * sp;
                                sum += x[base..base + sp].iter().map(|&v| v as f64).sum::<f64>();
                            }
                            let mu = sum / m as f64;
                            let mut sq = 0.0f64;
                            for s in 0..n {
                                let base = s * c * sp + ch * sp;
                                sq += x[base..base + sp]
                                    .iter()
                                    .map(|&v| (v as f64 - mu).powi(2))
                                    .sum::<f64>();
                            }
                            let v = sq / m as f64;
                            let unbiased = if m > 1.0 { v * m as f64 / (m as f64 - 1.0) } else { v };
                            buffers[mean + ch] =
                                (1.0 - BN_MOMENTUM) * buffers[mean + ch] + BN_MOMENTUM * mu as f32;
                            buffers[var + ch] = (1.0 - BN_MOMENTUM) * buffers[var + ch]
                                + BN_MOMENTUM * unbiased as f32;
                            (mu as f32, v as f32)
                        }
                        Mode::Eval => (buffers[mean + ch], buffers[var + ch]),
                    };
                    let istd = 1.0 / (v + BN_EPS).sqrt();
                    inv_std[ch] = istd;
                    let (g, bt) = (params[gamma + ch], params[beta + ch]);
                    for s in 0..n {
                        let base = s * c * sp + ch * sp;
                        for i in base..base + sp {
                            let xh = (x[i] - mu) * istd;
                            xhat[i] = xh;
                            y[i] = g * xh + bt;
                        }
                    }
                }
                if let Some(t) = tape {
                    t.push(Cache::BatchNorm {
                        xhat,
                        inv_std,
                        batch_stats: mode == Mode::Train,
                    });
                }
                y
            }
            Layer::Relu => {
                let y: Vec<f32> = x.iter().map(|&v| v.max(0.0)).collect();
                if let Some(t) = tape {
                    t.push(Cache::Relu { y: y.clone() });
                }
                y
            }
            Layer::MaxPool2 { c, h, w } => {
                let (oh, ow) = (h / 2, w / 2);
                let out_f = c * oh * ow;
                let mut y = vec![0.0f32; n * out_f];
                let mut argmax = vec![0u32; n * out_f];
                for s in 0..n {
                    for ch in 0..*c {
                        let plane = s * in_f + ch * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = plane + 2 * oy * w + 2 * ox;
                                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                    let idx = plane + (2 * oy + dy) * w + 2 * ox + dx;
                                    if x[idx] > x[best] {
                                        best = idx;
                                    }
                                }
                                let o = s * out_f + ch * oh * ow + oy * ow + ox;
                                y[o] = x[best];
                                argmax[o] = best as u32;
                            }
                        }
                    }
                }
                if let Some(t) = tape {
                    t.push(Cache::MaxPool {
                        argmax,
                        in_len: x.len(),
                    });
                }
                y
            }
            Layer::GlobalAvgPool { c, spatial } => {
                let mut y = vec![0.0f32; n * c];
                for s in 0..n {
                    for ch in 0..*c {
                        let base = s * c * spatial + ch * spatial;
                        y[s * c + ch] = x[base..base + spatial].iter().sum::<f32>() / *spatial as f32;
                    }
                }
                if let Some(t) = tape {
                    t.push(Cache::GlobalAvgPool);
                }
                y
            }
            Layer::Residual { body, shortcut } => {
                let record = tape.is_some();
                let mut body_tape = Vec::new();
                let mut short_tape = Vec::new();
                let mut hbody = x.to_vec();
                for layer in body {
                    hbody = layer.forward(
                        params,
                        buffers,
                        &hbody,
                        n,
                        mode,
                        record.then_some(&mut body_tape),
                    );
                }
                let mut hshort = x.to_vec();
                for layer in shortcut {
                    hshort = layer.forward(
                        params,
                        buffers,
                        &hshort,
                        n,
                        mode,
                        record.then_some(&mut short_tape),
                    );
                }
                for (a, b) in hbody.iter_mut().zip(&hshort) {
                    *a += b;
                }
                if let Some(t) = tape {
                    t.push(Cache::Residual {
                        body: body_tape,
                        shortcut: short_tape,
                    });
                }
                hbody
            }
        }
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub(crate) fn backward(
        &self,
        params: &[f32],
        cache: Cache,
        dy: &[f32],
        n: usize,
        grads: &mut [f32],
    ) -> Vec<f32> {
        match (self, cache) {
            (Layer::Linear { inp, out, w, b }, Cache::Linear { x }) => {
                let (inp, out) = (*inp, *out);
                for row in dy.chunks_exact(out) {
                    for (g, d) in grads[*b..*b + out].iter_mut().zip(row) {
                        *g += d;
                    }
                }
                gemm(
                    out,
                    n,
                    inp,
                    dy,
                    1,
                    out as isize,
                    &x,
                    inp as isize,
                    1,
                    1.0,
                    &mut grads[*w..*w + out * inp],
                );
                let mut dx = vec![0.0f32; n * inp];
                gemm(
                    n,
                    out,
                    inp,
                    dy,
                    out as isize,
                    1,
                    &params[*w..*w + out * inp],
                    inp as isize,
                    1,
                    0.0,
                    &mut dx,
                );
                dx
            }
            (
                Layer::Conv {
                    cin,
                    cout,
                    k,
                    stride,
                    pad,
                    h,
                    w,
                    oh,
                    ow,
                    wt,
                    b,
                },
                Cache::Conv { cols },
            ) => {
                let kk = cin * k * k;
                let p = oh * ow;
                let np = n * p;
                let in_f = cin * h * w;
                let mut dy_t = vec![0.0f32; cout * np];
                for co in 0..*cout {
                    for s in 0..n {
                        dy_t[co * np + s * p..co * np + (s + 1) * p]
                            .copy_from_slice(&dy[(s * cout + co) * p..(s * cout + co + 1) * p]);
                    }
                }
                if let Some(b) = b {
                    for (co, row) in dy_t.chunks_exact(np).enumerate() {
                        grads[b + co] += row.iter().sum::<f32>();
                    }
                }
                gemm(
                    *cout,
                    np,
                    kk,
                    &dy_t,
                    np as isize,
                    1,
                    &cols,
                    1,
                    np as isize,
                    1.0,
                    &mut grads[*wt..*wt + cout * kk],
                );
                let mut dcols = vec![0.0f32; kk * np];
                gemm(
                    kk,
                    *cout,
                    np,
                    &params[*wt..*wt + cout * kk],
                    1,
                    kk as isize,
                    &dy_t,
                    np as isize,
                    1,
                    0.0,
                    &mut dcols,
                );
                let mut dx = vec![0.0f32; n * in_f];
                for s in 0..n {
                    col2im(
                        &dcols,
                        *cin,
                        *h,
                        *w,
                        *k,
                        *stride,
                        *pad,
                        *oh,
                        *ow,
                        np,
                        s * p,
                        &mut dx[s * in_f..(s + 1) * in_f],
                    );
                }
                dx
            }
            (
                Layer::BatchNorm {
                    c,
                    spatial,
                    gamma,
                    beta,
                    ..
                },
                Cache::BatchNorm {
                    xhat,
                    inv_std,
                    batch_stats,
                },
            ) => {
                let (c, sp) = (*c, *spatial);
                let m = (n * sp) as f32;
                let mut dx = vec![0.0f32; dy.len()];
                for ch in 0..c {
                    let mut sum_dy = 0.0f32;
                    let mut sum_dy_xh = 0.0f32;
                    for s in 0..n {
                        let base = s * c * sp + ch * sp;
                        for i in base..base + sp {
                            sum_dy += dy[i];
                            sum_dy_xh += dy[i] * xhat[i];
                        }
                    }
                    grads[gamma + ch] += sum_dy_xh;
                    grads[beta + ch] += sum_dy;
                    let g = params[gamma + ch];
                    let istd = inv_std[ch];
                    for s in 0..n {
                        let base = s * c * sp + ch * sp;
                        for i in base..base + sp {
                            dx[i] = if batch_stats {
                                g * istd / m * (m * dy[i] - sum_dy - xhat[i] * sum_dy_xh)
                            } else {
                                g * istd * dy[i]
                            };
                        }
                    }
                }
                dx
            }
            (Layer::Relu, Cache::Relu { y }) => dy
                .iter()
                .zip(&y)
                .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                .collect(),
            (Layer::MaxPool2 { .. }, Cache::MaxPool { argmax, in_len }) => {
                let mut dx = vec![0.0f32; in_len];
                for (&idx, &d) in argmax.iter().zip(dy) {
                    dx[idx as usize] += d;
                }
                dx
            }
            (Layer::GlobalAvgPool { c, spatial }, Cache::GlobalAvgPool) => {
                let mut dx = vec![0.0f32; n * c * spatial];
                for s in 0..n {
                    for ch in 0..*c {
                        let d = dy[s * c + ch] / *spatial as f32;
                        let base = s * c * spatial + ch * spatial;
                        dx[base..base + spatial].fill(d);
                    }
                }
                dx
            }
            (Layer::Residual { body, shortcut }, Cache::Residual { body: bt, shortcut: st }) => {
                let mut dbody = dy.to_vec();
                for (layer, cache) in body.iter().zip(bt).rev() {
                    dbody = layer.backward(params, cache, &dbody, n, grads);
                }
                let mut dshort = dy.to_vec();
                for (layer, cache) in shortcut.iter().zip(st).rev() {
                    dshort = layer.backward(params, cache, &dshort, n, grads);
                }
                for (a, b) in dbody.iter_mut().zip(&dshort) {
                    *a += b;
                }
                dbody
            }
            _ => unreachable!("cache does not match layer"),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f32],
    row_stride: usize,
    col_offset: usize,
) {
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * row_stride + col_offset..row * row_stride + col_offset + oh * ow];
                let (lo, hi) = valid_span(kx, stride, pad, w, ow);
                for oy in 0..oh {
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    if stride == 1 {
                        let start = lo + kx - pad;
                        out[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
                            *o = src[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad` lies in `[0, w)`.
fn valid_span(kx: usize, stride: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).div_ceil(stride).min(ow);
    // largest ox with ox·stride + kx − pad ≤ w − 1
    let hi = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(ow) } else { 0 };
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    row_stride: usize,
    col_offset: usize,
    dx: &mut [f32],
) {
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * row_stride + col_offset..row * row_stride + col_offset + oh * ow];
                let (lo, hi) = valid_span(kx, stride, pad, w, ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let s_row = &src[oy * ow..(oy + 1) * ow];
                    for ox in lo..hi {
                        dst[ox * stride + kx - pad] += s_row[ox];
                    }
                }
            }
        }
    }
}
