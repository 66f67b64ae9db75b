//! Slice-level forward/backward kernels shared by the graph operators and by
//! the parameter-free parts of the pipeline.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::{gemm, MatView, Scalar};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Softmax along the middle axis of an `(outer, len, inner)` layout.
pub(crate) fn softmax_axis<S: Scalar>(x: &[S], outer: usize, len: usize, inner: usize) -> Vec<S> {
    let mut y = vec![S::ZERO; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = x[base];
            for a in 1..len {
                m = m.max(x[base + a * inner]);
            }
            let mut z = S::ZERO;
            for a in 0..len {
                let e = (x[base + a * inner] - m).exp();
                y[base + a * inner] = e;
                z += e;
            }
            for a in 0..len {
                y[base + a * inner] /= z;
            }
        }
    }
    y
}

pub(crate) fn softmax_axis_backward<S: Scalar>(y: &[S], dy: &[S], outer: usize, len: usize, inner: usize) -> Vec<S> {
    let mut dx = vec![S::ZERO; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = S::ZERO;
            for a in 0..len {
                dot += y[base + a * inner] * dy[base + a * inner];
            }
            for a in 0..len {
                let k = base + a * inner;
                dx[k] = y[k] * (dy[k] - dot);
            }
        }
    }
    dx
}

/// Row-wise layer normalization (no affine). Returns `(xhat, inv_std)`.
pub(crate) fn layer_norm_rows<S: Scalar>(x: &[S], n: usize) -> (Vec<S>, Vec<S>) {
    let rows = x.len() / n;
    let mut xhat = vec![S::ZERO; x.len()];
    let mut inv = vec![S::ZERO; rows];
    let nf = S::from_f64(n as f64);
    let eps = S::from_f64(LN_EPS);
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().copied().sum::<S>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
        let is = S::ONE / (var + eps).sqrt();
        inv[r] = is;
        for (o, &v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv)
}

/// Gradient of row-wise layer normalization w.r.t. its input, given the
/// gradient w.r.t. the normalized values.
pub(crate) fn layer_norm_rows_backward<S: Scalar>(xhat: &[S], inv_std: &[S], dxhat: &[S], n: usize) -> Vec<S> {
    let mut dx = vec![S::ZERO; xhat.len()];
    let nf = S::from_f64(n as f64);
    for (r, &is) in inv_std.iter().enumerate() {
        let span = r * n..(r + 1) * n;
        let xh = &xhat[span.clone()];
        let dh = &dxhat[span.clone()];
        let sum_d: S = dh.iter().copied().sum();
        let sum_dx: S = dh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        for ((o, &d), &h) in dx[span].iter_mut().zip(dh).zip(xh) {
            *o = is / nf * (nf * d - sum_d - h * sum_dx);
        }
    }
    dx
}

/// Multi-head scaled dot-product attention. `q` is `lq × dm`, `k`/`v` are
/// `lk × dm`. Returns the `lq × dm` output and the per-head probabilities
/// (`heads × lq × lk`).
pub(crate) fn attention_forward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    lq: usize,
    lk: usize,
    dm: usize,
    heads: usize,
) -> (Vec<S>, Vec<S>) {
    let dh = dm / heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = vec![S::ZERO; lq * dm];
    let mut probs = vec![S::ZERO; heads * lq * lk];
    for h in 0..heads {
        let off = h * dh;
        let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
        let qh = MatView { data: &q[off..], rows: lq, cols: dh, row_stride: dm, col_stride: 1 };
        let kt = MatView { data: &k[off..], rows: dh, cols: lk, row_stride: 1, col_stride: dm };
        gemm(scale, qh, kt, S::ZERO, p, lk);
        let sm = softmax_axis(p, lq, lk, 1);
        p.copy_from_slice(&sm);
        let vh = MatView { data: &v[off..], rows: lk, cols: dh, row_stride: dm, col_stride: 1 };
        gemm(S::ONE, MatView::rm(p, lq, lk), vh, S::ZERO, &mut out[off..], dm);
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    dout: &[S],
    lq: usize,
    lk: usize,
    dm: usize,
    heads: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let dh = dm / heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = vec![S::ZERO; lq * dm];
    let mut dk = vec![S::ZERO; lk * dm];
    let mut dv = vec![S::ZERO; lk * dm];
    let mut dp = vec![S::ZERO; lq * lk];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * lq * lk..(h + 1) * lq * lk];
        let doh = MatView { data: &dout[off..], rows: lq, cols: dh, row_stride: dm, col_stride: 1 };
        let vt = MatView { data: &v[off..], rows: dh, cols: lk, row_stride: 1, col_stride: dm };
        gemm(S::ONE, doh, vt, S::ZERO, &mut dp, lk);
        gemm(S::ONE, MatView::rm_t(p, lq, lk), doh, S::ZERO, &mut dv[off..], dm);
        let ds = softmax_axis_backward(p, &dp, lq, lk, 1);
        let kh = MatView { data: &k[off..], rows: lk, cols: dh, row_stride: dm, col_stride: 1 };
        gemm(scale, MatView::rm(&ds, lq, lk), kh, S::ZERO, &mut dq[off..], dm);
        let qh = MatView { data: &q[off..], rows: lq, cols: dh, row_stride: dm, col_stride: 1 };
        gemm(scale, MatView::rm_t(&ds, lq, lk), qh, S::ZERO, &mut dk[off..], dm);
    }
    (dq, dk, dv)
}

/// im2col for a stride-1, zero-padded ("same") convolution with an odd kernel.
/// Output is `(c·k·k) × (h·w)`.
pub(crate) fn im2col<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, k: usize) -> Vec<S> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![S::ZERO; c * k * k * hw];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[y * w + xx] = x[(ch * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im<S: Scalar>(cols: &[S], c: usize, h: usize, w: usize, k: usize) -> Vec<S> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![S::ZERO; c * hw];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        x[(ch * h + sy as usize) * w + sx as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

/// Source taps `(i0, i1, frac)` for half-pixel-centred bilinear resizing
/// along one axis.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a `(c, h, w)` buffer to `(c, oh, ow)`.
pub(crate) fn resize_bilinear<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<S> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![S::ZERO; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (wy0, wy1) = (S::from_f64(1.0 - fy), S::from_f64(fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (wx0, wx1) = (S::from_f64(1.0 - fx), S::from_f64(fx));
                let v = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
                out[(ch * oh + oy) * ow + ox] = v;
            }
        }
    }
    out
}

pub(crate) fn resize_bilinear_backward<S: Scalar>(
    dy: &[S],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![S::ZERO; c * h * w];
    for ch in 0..c {
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (wy0, wy1) = (S::from_f64(1.0 - fy), S::from_f64(fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (wx0, wx1) = (S::from_f64(1.0 - fx), S::from_f64(fx));
                let g = dy[(ch * oh + oy) * ow + ox];
                dst[y0 * w + x0] += g * wy0 * wx0;
                dst[y0 * w + x1] += g * wy0 * wx1;
                dst[y1 * w + x0] += g * wy1 * wx0;
                dst[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
    dx
}

/// Area-weighted average resampling of an `h × w` map to `oh × ow`
/// (exact block averaging when the sizes divide).
pub(crate) fn area_resample<S: Scalar>(x: &[S], h: usize, w: usize, oh: usize, ow: usize) -> Vec<S> {
    let weights = |n: usize, o: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n as f64 / o as f64;
        (0..o)
            .map(|i| {
                let (a, b) = (i as f64 * scale, (i + 1) as f64 * scale);
                let mut taps = Vec::new();
                let mut s = libm::floor(a) as usize;
                while (s as f64) < b && s < n {
                    let lo = a.max(s as f64);
                    let hi = b.min((s + 1) as f64);
                    if hi > lo {
                        taps.push((s, (hi - lo) / scale));
                    }
                    s += 1;
                }
                taps
            })
            .collect()
    };
    let wy = weights(h, oh);
    let wx = weights(w, ow);
    let mut out = vec![S::ZERO; oh * ow];
    for (oy, ty) in wy.iter().enumerate() {
        for (ox, tx) in wx.iter().enumerate() {
            let (mut acc, mut total) = (0.0f64, 0.0f64);
            for &(sy, fy) in ty {
                for &(sx, fx) in tx {
                    acc += fy * fx * x[sy * w + sx].to_f64();
                    total += fy * fx;
                }
            }
            out[oy * ow + ox] = S::from_f64(acc / total);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let (c, h, w, k) = (2, 3, 4, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let cols_probe: Vec<f64> = (0..c * k * k * h * w).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = im2col(&x, c, h, w, k).iter().zip(&cols_probe).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&cols_probe, c, h, w, k)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn area_resample_block_average() {
        let x = [1.0f64, 0.0, 0.0, 1.0];
        assert_eq!(area_resample(&x, 2, 2, 1, 1), vec![0.5]);
        let y = area_resample(&[1.0f64; 36], 6, 6, 4, 4);
        assert!(y.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(resize_bilinear(&x, 1, 3, 4, 3, 4), x);
    }
}
