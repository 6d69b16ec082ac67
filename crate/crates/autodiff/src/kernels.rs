//! Numerical kernels shared by the forward and backward passes.

use crate::tensor::Tensor;

/// Geometry of a square-kernel 2D convolution over a `[C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// A 1x1 stride-1 convolution reads its input directly as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let mut cols = vec![0.0; g.patch_len() * n];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        // contiguous run; only the borders fall into padding
                        let shift = kx as isize - g.pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((g.w as isize - shift).min(wo as isize)).max(0) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + shift) as usize;
                            drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of `a`, `b` and the row-major
    // `c`; the callers below derive them from the same dimensions.
    unsafe {
        matrixmultiply::dgemm(
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

/// Returns `(output, columns)`; the column matrix is kept for the backward pass.
pub fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    c_out: usize,
    g: &ConvGeom,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let kk = g.patch_len();
    let mut out = vec![0.0; c_out * n];
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = bv);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.is_pointwise() {
        gemm(c_out, kk, n, weight, (kk as isize, 1), x, (n as isize, 1), &mut out, beta);
        (out, None)
    } else {
        let cols = im2col(x, g);
        gemm(c_out, kk, n, weight, (kk as isize, 1), &cols, (n as isize, 1), &mut out, beta);
        (out, Some(cols))
    }
}

/// Weight gradient `dY * cols^T`.
pub fn conv2d_grad_weight(dy: &[f64], cols: &[f64], c_out: usize, kk: usize, n: usize) -> Vec<f64> {
    let mut dw = vec![0.0; c_out * kk];
    gemm(c_out, n, kk, dy, (n as isize, 1), cols, (1, n as isize), &mut dw, 0.0);
    dw
}

/// Input gradient `col2im(W^T * dY)`.
pub fn conv2d_grad_input(dy: &[f64], weight: &[f64], c_out: usize, g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let kk = g.patch_len();
    let mut dcols = vec![0.0; kk * n];
    gemm(kk, c_out, n, weight, (1, kk as isize), dy, (n as isize, 1), &mut dcols, 0.0);
    if g.is_pointwise() {
        dcols
    } else {
        col2im(&dcols, g)
    }
}

/// Per-group statistics of a group normalization.
#[derive(Clone, Debug)]
pub struct GroupStats {
    pub inv_std: Vec<f64>,
}

/// Normalizes each group of `c / groups` channels to zero mean, unit variance.
///
/// Values are shifted by the first element of the group before accumulation,
/// so a group of identical values normalizes to exactly zero.
pub fn group_norm_forward(x: &[f64], c: usize, hw: usize, groups: usize, eps: f64) -> (Vec<f64>, GroupStats) {
    let per = c / groups * hw;
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for gi in 0..groups {
        let xs = &x[gi * per..(gi + 1) * per];
        let shift = xs[0];
        let mut sum = 0.0;
        for &v in xs {
            sum += v - shift;
        }
        let mean = sum / per as f64;
        let mut var = 0.0;
        for &v in xs {
            let d = v - shift - mean;
            var += d * d;
        }
        var /= per as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        for (o, &v) in out[gi * per..(gi + 1) * per].iter_mut().zip(xs) {
            *o = (v - shift - mean) * inv;
        }
    }
    (out, GroupStats { inv_std })
}

pub fn group_norm_backward(dy: &[f64], xhat: &[f64], stats: &GroupStats, per: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    let n = per as f64;
    for (gi, &inv) in stats.inv_std.iter().enumerate() {
        let r = gi * per..(gi + 1) * per;
        let (dys, xh) = (&dy[r.clone()], &xhat[r.clone()]);
        let sum_dy: f64 = dys.iter().sum();
        let sum_dy_xh: f64 = dys.iter().zip(xh).map(|(a, b)| a * b).sum();
        for ((d, &g), &xv) in dx[r].iter_mut().zip(dys).zip(xh) {
            *d = inv / n * (n * g - sum_dy - xv * sum_dy_xh);
        }
    }
    dx
}

/// Source taps and weights for bilinear resampling by an integer factor
/// (half-pixel centers, edge clamped).
pub fn bilinear_taps(src: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..src * factor)
        .map(|o| {
            let s = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear(x: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let p = &x[ch * h * w..(ch + 1) * h * w];
        let o = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                o[oy * wo + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward(dy: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = &dy[ch * ho * wo..(ch + 1) * ho * wo];
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * wo + ox];
                d[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                d[y0 * w + x1] += v * (1.0 - fy) * fx;
                d[y1 * w + x0] += v * fy * (1.0 - fx);
                d[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    dx
}

/// Non-overlapping `factor x factor` mean pooling.
pub fn avg_pool(x: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (ho, wo) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho * factor {
            for xx in 0..wo * factor {
                out[(ch * ho + y / factor) * wo + xx / factor] += x[(ch * h + y) * w + xx] * norm;
            }
        }
    }
    out
}

pub fn avg_pool_backward(dy: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (ho, wo) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..ho * factor {
            for xx in 0..wo * factor {
                dx[(ch * h + y) * w + xx] = dy[(ch * ho + y / factor) * wo + xx / factor] * norm;
            }
        }
    }
    dx
}

/// Average over the spatial axes of a `[C, H, W]` tensor.
pub fn global_avg_pool(x: &Tensor) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hw = (h * w) as f64;
    (0..c).map(|ch| x.channel(ch).iter().sum::<f64>() / hw).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], c_out: usize, g: &ConvGeom) -> Vec<f64> {
        let (ho, wo) = g.out_hw();
        let mut out = vec![0.0; c_out * ho * wo];
        for o in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..g.c_in {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    acc += x[(c * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((o * g.c_in + c) * g.k + ky) * g.k + kx];
                                }
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, stride, pad, h, w) in &[(3, 1, 1, 7, 5), (3, 2, 1, 8, 8), (1, 1, 0, 4, 6), (1, 2, 0, 6, 6), (3, 1, 0, 5, 5)] {
            let g = ConvGeom { c_in: 3, h, w, k, stride, pad };
            let x: Vec<f64> = (0..3 * h * w).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
            let wt: Vec<f64> = (0..4 * g.patch_len()).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
            let (out, _) = conv2d_forward(&x, &wt, None, 4, &g);
            let expect = naive_conv(&x, &wt, 4, &g);
            for (a, b) in out.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { c_in: 2, h: 6, w: 5, k: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..60).map(|i| (i as f64).sin()).collect();
        let cols = im2col(&x, &g);
        let r: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = cols.iter().zip(&r).map(|(a, b)| a * b).sum();
        let back = col2im(&r, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn constant_group_normalizes_to_exact_zero() {
        let x = vec![0.1; 2 * 9];
        let (out, _) = group_norm_forward(&x, 2, 9, 1, 1e-5);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = vec![2.5; 3 * 4];
        let out = upsample_bilinear(&x, 1, 3, 4, 4);
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }
}
