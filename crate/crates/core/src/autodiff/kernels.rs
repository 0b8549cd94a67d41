//! Raw forward/backward kernels over row-major `[N, C, H, W]` buffers.
//!
//! These work on plain slices and know nothing about the graph; `Graph`
//! validates shapes before calling in.

/// `c = a·b + beta·c` where `a` is `m×k` and `b` is `k×n` after the
/// optional transposes. All buffers are row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents checked above.
    unsafe {
        matrixmultiply::sgemm(
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding - self.kh) / self.stride + 1,
            (self.width + 2 * self.padding - self.kw) / self.stride + 1,
        )
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kj - pad`
/// falls inside the image when `stride == 1`.
fn valid_cols(g: &ConvGeometry, kj: usize, wo: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kj).min(wo);
    let hi = (g.width + g.padding).saturating_sub(kj).min(wo).max(lo);
    (lo, hi)
}

fn im2col(g: &ConvGeometry, input: &[f32], col: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let (h, w) = (g.height, g.width);
    let pad = g.padding as isize;
    let mut row = 0;
    for ci in 0..g.channels {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_cols(g, kj, wo);
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        out[..lo].fill(0.0);
                        out[hi..].fill(0.0);
                        let start = lo + kj - g.padding;
                        out[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        continue;
                    }
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *o = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, col: &[f32], dinput: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let (h, w) = (g.height, g.width);
    let pad = g.padding as isize;
    let mut row = 0;
    for ci in 0..g.channels {
        let plane = &mut dinput[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_cols(g, kj, wo);
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        let start = lo + kj - g.padding;
                        for (d, v) in dst[start..start + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                            *d += v;
                        }
                        continue;
                    }
                    for (ox, v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward(
    g: &ConvGeometry,
    batch: usize,
    input: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
) -> Vec<f32> {
    let (ho, wo) = g.out_hw();
    let plane_in = g.channels * g.height * g.width;
    let plane_out = g.filters * ho * wo;
    let k = g.col_rows();
    let mut out = vec![0.0; batch * plane_out];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * ho * wo]
    };
    for n in 0..batch {
        let x = &input[n * plane_in..(n + 1) * plane_in];
        let y = &mut out[n * plane_out..(n + 1) * plane_out];
        let b: &[f32] = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut col);
            &col
        };
        gemm(g.filters, k, ho * wo, weight, false, b, false, 0.0, y);
        if let Some(bias) = bias {
            for (f, row) in y.chunks_mut(ho * wo).enumerate() {
                let bf = bias[f];
                row.iter_mut().for_each(|v| *v += bf);
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    g: &ConvGeometry,
    batch: usize,
    input: &[f32],
    weight: &[f32],
    dout: &[f32],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let plane_in = g.channels * g.height * g.width;
    let plane_out = g.filters * p;
    let k = g.col_rows();
    let mut dinput = want_input.then(|| vec![0.0; batch * plane_in]);
    let mut dweight = want_weight.then(|| vec![0.0; weight.len()]);
    let mut dbias = want_bias.then(|| vec![0.0; g.filters]);
    let pointwise = g.is_pointwise();
    let mut dwt = if want_weight { vec![0.0; weight.len()] } else { Vec::new() };
    let mut col = if pointwise || !want_weight {
        Vec::new()
    } else {
        vec![0.0; k * p]
    };
    let mut dcol = if pointwise || !want_input {
        Vec::new()
    } else {
        vec![0.0; k * p]
    };
    for n in 0..batch {
        let x = &input[n * plane_in..(n + 1) * plane_in];
        let dy = &dout[n * plane_out..(n + 1) * plane_out];
        if let Some(db) = dbias.as_mut() {
            for (f, row) in dy.chunks(p).enumerate() {
                db[f] += row.iter().sum::<f32>();
            }
        }
        if dweight.is_some() {
            let b: &[f32] = if pointwise {
                x
            } else {
                im2col(g, x, &mut col);
                &col
            };
            // dWᵀ = col·dYᵀ packs the long operand contiguously
            gemm(k, p, g.filters, b, false, dy, true, 1.0, &mut dwt);
        }
        if let Some(dx) = dinput.as_mut() {
            let dx = &mut dx[n * plane_in..(n + 1) * plane_in];
            if pointwise {
                gemm(k, g.filters, p, weight, true, dy, false, 1.0, dx);
            } else {
                gemm(k, g.filters, p, weight, true, dy, false, 0.0, &mut dcol);
                col2im_add(g, &dcol, dx);
            }
        }
    }
    if let Some(dw) = dweight.as_mut() {
        for f in 0..g.filters {
            for r in 0..k {
                dw[f * k + r] = dwt[r * g.filters + f];
            }
        }
    }
    ConvGrads {
        input: dinput,
        weight: dweight,
        bias: dbias,
    }
}

/// 2×2 max pooling with stride 2. Returns the pooled values and, for each
/// output, the flat index of the winning input element.
pub fn max_pool2_forward(
    batch_channels: usize,
    h: usize,
    w: usize,
    input: &[f32],
) -> (Vec<f32>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(batch_channels * ho * wo);
    let mut arg = Vec::with_capacity(batch_channels * ho * wo);
    for bc in 0..batch_channels {
        let base = bc * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for idx in [
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Source index pair and weights for each output coordinate of a 2×
/// bilinear upsample (half-pixel centers, edge clamped).
fn upsample_taps(size: usize) -> Vec<(usize, usize, f32, f32)> {
    (0..2 * size)
        .map(|o| {
            let src = ((o as f32 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(size - 1);
            let i1 = (i0 + 1).min(size - 1);
            let w1 = src - i0 as f32;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

pub fn upsample2_forward(batch_channels: usize, h: usize, w: usize, input: &[f32]) -> Vec<f32> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; batch_channels * ho * wo];
    for bc in 0..batch_channels {
        let src = &input[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * ho * wo..(bc + 1) * ho * wo];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            let row = &mut dst[oy * wo..(oy + 1) * wo];
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                row[ox] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    out
}

pub fn upsample2_backward(batch_channels: usize, h: usize, w: usize, dout: &[f32]) -> Vec<f32> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut dinput = vec![0.0; batch_channels * h * w];
    for bc in 0..batch_channels {
        let src = &dout[bc * ho * wo..(bc + 1) * ho * wo];
        let dst = &mut dinput[bc * h * w..(bc + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = src[oy * wo + ox];
                dst[y0 * w + x0] += g * wy0 * wx0;
                dst[y0 * w + x1] += g * wy0 * wx1;
                dst[y1 * w + x0] += g * wy1 * wx0;
                dst[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
    dinput
}

pub struct GroupNormStats {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward(
    batch: usize,
    channels: usize,
    plane: usize,
    groups: usize,
    input: &[f32],
    gain: &[f32],
    shift: &[f32],
    eps: f32,
) -> (Vec<f32>, GroupNormStats) {
    let cpg = channels / groups;
    let span = cpg * plane;
    let mut out = vec![0.0; input.len()];
    let mut mean = Vec::with_capacity(batch * groups);
    let mut rstd = Vec::with_capacity(batch * groups);
    for n in 0..batch {
        for gi in 0..groups {
            let start = (n * channels + gi * cpg) * plane;
            let x = &input[start..start + span];
            let mu = x.iter().map(|&v| v as f64).sum::<f64>() / span as f64;
            let var = x.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / span as f64;
            let r = 1.0 / (var + eps as f64).sqrt();
            let (mu, r) = (mu as f32, r as f32);
            for ci in 0..cpg {
                let c = gi * cpg + ci;
                let (a, b) = (gain[c], shift[c]);
                let off = ci * plane;
                for (o, &v) in out[start + off..start + off + plane]
                    .iter_mut()
                    .zip(&x[off..off + plane])
                {
                    *o = (v - mu) * r * a + b;
                }
            }
            mean.push(mu);
            rstd.push(r);
        }
    }
    (out, GroupNormStats { mean, rstd })
}

/// Returns `(d_input, d_gain, d_shift)`.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward(
    batch: usize,
    channels: usize,
    plane: usize,
    groups: usize,
    input: &[f32],
    gain: &[f32],
    stats: &GroupNormStats,
    dout: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let cpg = channels / groups;
    let span = cpg * plane;
    let mut dx = vec![0.0; input.len()];
    let mut dgain = vec![0.0; channels];
    let mut dshift = vec![0.0; channels];
    for n in 0..batch {
        for gi in 0..groups {
            let ng = n * groups + gi;
            let (mu, r) = (stats.mean[ng], stats.rstd[ng]);
            let start = (n * channels + gi * cpg) * plane;
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for ci in 0..cpg {
                let c = gi * cpg + ci;
                let off = start + ci * plane;
                let mut dg = 0.0f64;
                let mut ds = 0.0f64;
                for i in off..off + plane {
                    let xhat = (input[i] - mu) * r;
                    let g = dout[i];
                    dg += (g * xhat) as f64;
                    ds += g as f64;
                    let dxhat = g * gain[c];
                    sum_dxhat += dxhat as f64;
                    sum_dxhat_xhat += (dxhat * xhat) as f64;
                }
                dgain[c] += dg as f32;
                dshift[c] += ds as f32;
            }
            let m1 = (sum_dxhat / span as f64) as f32;
            let m2 = (sum_dxhat_xhat / span as f64) as f32;
            for ci in 0..cpg {
                let c = gi * cpg + ci;
                let off = start + ci * plane;
                for i in off..off + plane {
                    let xhat = (input[i] - mu) * r;
                    dx[i] = r * (dout[i] * gain[c] - m1 - xhat * m2);
                }
            }
        }
    }
    (dx, dgain, dshift)
}

/// Softmax over the channel axis of `[N, C, P]`, max-subtracted.
pub fn softmax_channels(batch: usize, channels: usize, plane: usize, logits: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; logits.len()];
    for n in 0..batch {
        let base = n * channels * plane;
        for p in 0..plane {
            let mut m = f32::NEG_INFINITY;
            for c in 0..channels {
                m = m.max(logits[base + c * plane + p]);
            }
            let mut z = 0.0;
            for c in 0..channels {
                let e = (logits[base + c * plane + p] - m).exp();
                out[base + c * plane + p] = e;
                z += e;
            }
            for c in 0..channels {
                out[base + c * plane + p] /= z;
            }
        }
    }
    out
}

/// Backprop through a channel softmax given its output `probs`.
pub fn softmax_channels_backward(
    batch: usize,
    channels: usize,
    plane: usize,
    probs: &[f32],
    dprobs: &[f32],
) -> Vec<f32> {
    let mut dx = vec![0.0; probs.len()];
    for n in 0..batch {
        let base = n * channels * plane;
        for p in 0..plane {
            let mut dot = 0.0;
            for c in 0..channels {
                let i = base + c * plane + p;
                dot += probs[i] * dprobs[i];
            }
            for c in 0..channels {
                let i = base + c * plane + p;
                dx[i] = probs[i] * (dprobs[i] - dot);
            }
        }
    }
    dx
}
