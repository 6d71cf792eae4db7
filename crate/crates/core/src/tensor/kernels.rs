//! Raw compute kernels on NCHW buffers. These carry no autodiff bookkeeping;
//! [`super::Tape`] wires them together and they are also used directly by
//! inference-only paths.

use super::{Shape, Tensor};

/// `C ← α·A·B + β·C` on strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted extents keep every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Output spatial size of a same-padded convolution with odd kernel.
pub fn same_out(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// `out[n,o,p] = Σ_c w[o,c]·x[n,c,p]`.
pub fn pointwise_forward(x: &Tensor, w: &Tensor) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    let cout = w.shape()[0];
    let hw = h * wd;
    let mut out = Tensor::zeros([n, cout, h, wd]);
    if cin == 0 {
        return out;
    }
    let (xd, wd_, od) = (x.data(), w.data(), out.data_mut());
    if hw >= n {
        for s in 0..n {
            gemm(
                cout,
                cin,
                hw,
                1.0,
                wd_,
                cin,
                1,
                &xd[s * cin * hw..],
                hw,
                1,
                0.0,
                &mut od[s * cout * hw..],
                hw,
                1,
            );
        }
    } else {
        for p in 0..hw {
            gemm(
                n,
                cin,
                cout,
                1.0,
                &xd[p..],
                cin * hw,
                hw,
                wd_,
                1,
                cin,
                0.0,
                &mut od[p..],
                cout * hw,
                hw,
            );
        }
    }
    out
}

/// Accumulates `dx += wᵀ·dy` and `dw += dy·xᵀ` when the targets are given.
pub fn pointwise_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &[f32],
    dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
) {
    let [n, cin, h, wd] = x.shape();
    let cout = w.shape()[0];
    let hw = h * wd;
    if cin == 0 || cout == 0 {
        return;
    }
    let per_sample = hw >= n;
    if let Some(dx) = dx {
        if per_sample {
            for s in 0..n {
                gemm(
                    cin,
                    cout,
                    hw,
                    1.0,
                    w.data(),
                    1,
                    cin,
                    &dy[s * cout * hw..],
                    hw,
                    1,
                    1.0,
                    &mut dx[s * cin * hw..],
                    hw,
                    1,
                );
            }
        } else {
            for p in 0..hw {
                gemm(
                    n,
                    cout,
                    cin,
                    1.0,
                    &dy[p..],
                    cout * hw,
                    hw,
                    w.data(),
                    cin,
                    1,
                    1.0,
                    &mut dx[p..],
                    cin * hw,
                    hw,
                );
            }
        }
    }
    if let Some(dw) = dw {
        if per_sample {
            for s in 0..n {
                gemm(
                    cout,
                    hw,
                    cin,
                    1.0,
                    &dy[s * cout * hw..],
                    hw,
                    1,
                    &x.data()[s * cin * hw..],
                    1,
                    hw,
                    1.0,
                    dw,
                    cin,
                    1,
                );
            }
        } else {
            for p in 0..hw {
                gemm(
                    cout,
                    n,
                    cin,
                    1.0,
                    &dy[p..],
                    hw,
                    cout * hw,
                    &x.data()[p..],
                    cin * hw,
                    hw,
                    1.0,
                    dw,
                    cin,
                    1,
                );
            }
        }
    }
}

/// A run of consecutive channels sharing one depthwise kernel size.
#[derive(Clone, Copy, Debug)]
pub struct DepthwiseGroup<'a> {
    pub first_channel: usize,
    pub channels: usize,
    pub kernel: usize,
    /// `[channels, 1, kernel, kernel]`.
    pub weight: &'a [f32],
}

/// Output columns `ox` for which `ox·stride + kx − pad` lands inside `[0, len)`.
#[inline]
fn valid_range(kx: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    // largest ox with ox·stride + kx ≤ len − 1 + pad
    let hi = if len + pad > kx {
        ((len - 1 + pad - kx) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// `[rows, cols]` → `[cols, rows]`.
fn transpose(src: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    for (r, row) in src.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            dst[c * rows + r] = v;
        }
    }
}

/// Kernel weights laid out tap-major, `[k·k, channels]`, so every tap is a
/// contiguous run over the group's channels.
fn tap_major(g: &DepthwiseGroup<'_>) -> Vec<f32> {
    let kk = g.kernel * g.kernel;
    let mut out = vec![0.0; kk * g.channels];
    transpose(&g.weight[..g.channels * kk], g.channels, kk, &mut out);
    out
}

/// In-bounds input coordinate for output `o` and tap offset `t`.
#[inline]
fn source(o: usize, t: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    (o * stride + t).checked_sub(pad).filter(|&i| i < len)
}

/// Mixed-kernel depthwise convolution with zero "same" padding of `k/2`.
///
/// Works one sample at a time in channels-last layout so the innermost loop
/// runs over the channels of a kernel group.
pub fn depthwise_forward(x: &Tensor, groups: &[DepthwiseGroup<'_>], stride: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (same_out(h, stride), same_out(w, stride));
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let weights: Vec<Vec<f32>> = groups.iter().map(tap_major).collect();
    let mut xt = vec![0.0f32; h * w * c];
    let mut ot = vec![0.0f32; ho * wo * c];
    for s in 0..n {
        transpose(&x.data()[s * c * h * w..][..c * h * w], c, h * w, &mut xt);
        ot.fill(0.0);
        for (g, wt) in groups.iter().zip(&weights) {
            let (k, len, first) = (g.kernel, g.channels, g.first_channel);
            let pad = k / 2;
            for oy in 0..ho {
                for ky in 0..k {
                    let Some(iy) = source(oy, ky, stride, pad, h) else { continue };
                    for ox in 0..wo {
                        let dst = &mut ot[(oy * wo + ox) * c + first..][..len];
                        for kx in 0..k {
                            let Some(ix) = source(ox, kx, stride, pad, w) else { continue };
                            let src = &xt[(iy * w + ix) * c + first..][..len];
                            let wv = &wt[(ky * k + kx) * len..][..len];
                            for ((d, &a), &b) in dst.iter_mut().zip(src).zip(wv) {
                                *d += a * b;
                            }
                        }
                    }
                }
            }
        }
        transpose(&ot, ho * wo, c, &mut out.data_mut()[s * c * ho * wo..][..c * ho * wo]);
    }
    out
}

/// Accumulates input and per-group kernel gradients of [`depthwise_forward`].
pub fn depthwise_backward(
    x: &Tensor,
    groups: &[DepthwiseGroup<'_>],
    stride: usize,
    dy: &[f32],
    mut dx: Option<&mut [f32]>,
    dweights: &mut [Option<&mut [f32]>],
) {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (same_out(h, stride), same_out(w, stride));
    let weights: Vec<Vec<f32>> = groups.iter().map(tap_major).collect();
    let mut dwt: Vec<Vec<f32>> = groups.iter().map(|g| vec![0.0; g.kernel * g.kernel * g.channels]).collect();
    let mut xt = vec![0.0f32; h * w * c];
    let mut gt = vec![0.0f32; ho * wo * c];
    let mut dxt = vec![0.0f32; h * w * c];
    let mut plane = vec![0.0f32; c * h * w];
    for s in 0..n {
        transpose(&x.data()[s * c * h * w..][..c * h * w], c, h * w, &mut xt);
        transpose(&dy[s * c * ho * wo..][..c * ho * wo], c, ho * wo, &mut gt);
        dxt.fill(0.0);
        for ((g, wt), dw) in groups.iter().zip(&weights).zip(dwt.iter_mut()) {
            let (k, len, first) = (g.kernel, g.channels, g.first_channel);
            let pad = k / 2;
            for oy in 0..ho {
                for ky in 0..k {
                    let Some(iy) = source(oy, ky, stride, pad, h) else { continue };
                    for ox in 0..wo {
                        let grad = &gt[(oy * wo + ox) * c + first..][..len];
                        for kx in 0..k {
                            let Some(ix) = source(ox, kx, stride, pad, w) else { continue };
                            let at = (iy * w + ix) * c + first;
                            let tap = (ky * k + kx) * len;
                            for ((d, &gv), &xv) in dw[tap..][..len].iter_mut().zip(grad).zip(&xt[at..][..len]) {
                                *d += gv * xv;
                            }
                            for ((d, &gv), &wv) in dxt[at..][..len].iter_mut().zip(grad).zip(&wt[tap..][..len]) {
                                *d += gv * wv;
                            }
                        }
                    }
                }
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            transpose(&dxt, h * w, c, &mut plane);
            for (d, &v) in dx[s * c * h * w..][..c * h * w].iter_mut().zip(&plane) {
                *d += v;
            }
        }
    }
    for ((g, dwg), dw) in groups.iter().zip(dweights.iter_mut()).zip(&dwt) {
        if let Some(dwv) = dwg.as_deref_mut() {
            let kk = g.kernel * g.kernel;
            let mut back = vec![0.0; kk * g.channels];
            transpose(dw, kk, g.channels, &mut back);
            for (d, &v) in dwv[..kk * g.channels].iter_mut().zip(&back) {
                *d += v;
            }
        }
    }
}

/// Unfolds `[Cin, H, W]` patches of one sample into a `[Cin·k·k, Ho·Wo]` matrix.
fn im2col(x: &[f32], cin: usize, h: usize, w: usize, k: usize, stride: usize, cols: &mut [f32]) {
    let pad = k / 2;
    let (ho, wo) = (same_out(h, stride), same_out(w, stride));
    cols.fill(0.0);
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..][..ho * wo];
                let (oy0, oy1) = valid_range(ky, pad, stride, h, ho);
                let (ox0, ox1) = valid_range(kx, pad, stride, w, wo);
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - pad;
                    for ox in ox0..ox1 {
                        dst[oy * wo + ox] = x[(c * h + iy) * w + ox * stride + kx - pad];
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], cin: usize, h: usize, w: usize, k: usize, stride: usize, dx: &mut [f32]) {
    let pad = k / 2;
    let (ho, wo) = (same_out(h, stride), same_out(w, stride));
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..][..ho * wo];
                let (oy0, oy1) = valid_range(ky, pad, stride, h, ho);
                let (ox0, ox1) = valid_range(kx, pad, stride, w, wo);
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - pad;
                    for ox in ox0..ox1 {
                        dx[(c * h + iy) * w + ox * stride + kx - pad] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// Dense `k×k` convolution with zero "same" padding.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let (ho, wo) = (same_out(h, stride), same_out(wd, stride));
    let rows = cin * k * k;
    let mut cols = vec![0.0f32; rows * ho * wo];
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    for s in 0..n {
        im2col(&x.data()[s * cin * h * wd..][..cin * h * wd], cin, h, wd, k, stride, &mut cols);
        gemm(
            cout,
            rows,
            ho * wo,
            1.0,
            w.data(),
            rows,
            1,
            &cols,
            ho * wo,
            1,
            0.0,
            &mut out.data_mut()[s * cout * ho * wo..],
            ho * wo,
            1,
        );
    }
    out
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    dy: &[f32],
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
) {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let (ho, wo) = (same_out(h, stride), same_out(wd, stride));
    let rows = cin * k * k;
    let mut cols = vec![0.0f32; rows * ho * wo];
    for s in 0..n {
        let gy = &dy[s * cout * ho * wo..][..cout * ho * wo];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x.data()[s * cin * h * wd..][..cin * h * wd], cin, h, wd, k, stride, &mut cols);
            gemm(cout, ho * wo, rows, 1.0, gy, ho * wo, 1, &cols, 1, ho * wo, 1.0, dw, rows, 1);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(rows, cout, ho * wo, 1.0, w.data(), 1, rows, gy, ho * wo, 1, 0.0, &mut cols, ho * wo, 1);
            col2im(&cols, cin, h, wd, k, stride, &mut dx[s * cin * h * wd..][..cin * h * wd]);
        }
    }
}

/// `out[n,k] = Σ_d x[n,d]·w[k,d] + b[k]` where `x` is viewed as `[N, C·H·W]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let n = x.n();
    let d = x.numel() / n.max(1);
    let k = w.shape()[0];
    let mut out = Tensor::zeros([n, k, 1, 1]);
    for row in out.data_mut().chunks_mut(k.max(1)) {
        row.copy_from_slice(b.data());
    }
    gemm(n, d, k, 1.0, x.data(), d, 1, w.data(), 1, d, 1.0, out.data_mut(), k, 1);
    out
}

pub fn global_avgpool(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let hw = (h * w) as f32;
    let data = x.data().chunks(h * w).map(|p| p.iter().sum::<f32>() / hw).collect();
    Tensor::from_vec([n, c, 1, 1], data).expect("pooled shape")
}

/// Zero-pads the spatial dims of a tensor symmetrically.
pub fn pad_spatial(x: &Tensor, top: usize, left: usize, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let od = out.data_mut();
    for plane in 0..n * c {
        for y in 0..h {
            let src = &x.data()[(plane * h + y) * w..][..w];
            od[(plane * out_h + y + top) * out_w + left..][..w].copy_from_slice(src);
        }
    }
    out
}

pub fn shape_str(s: Shape) -> String {
    format!("[{}, {}, {}, {}]", s[0], s[1], s[2], s[3])
}
