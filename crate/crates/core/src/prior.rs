//! Class-agnostic base priors.

use alloc::vec;
use alloc::vec::Vec;

use crate::episode::Mask;
use crate::error::{shape_err, Result};
use crate::graph::MINMAX_EPS;
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(m - min) / (max - min + 1e-8)` over the whole slice.
pub fn minmax_norm<S: Scalar>(m: &[S]) -> Vec<S> {
    if m.is_empty() {
        return Vec::new();
    }
    let lo = m.iter().copied().fold(m[0], S::min);
    let hi = m.iter().copied().fold(m[0], S::max);
    let denom = hi - lo + S::from_f64(MINMAX_EPS);
    m.iter().map(|&v| (v - lo) / denom).collect()
}

fn norm<S: Scalar>(v: &[S]) -> S {
    v.iter().map(|&x| x * x).sum::<S>().sqrt()
}

/// Per-pixel cosine similarity of a `(h, w, d)` map with `text`; zero-norm
/// pixels score 0.
pub fn cosine_map<S: Scalar>(clip: &Tensor<S>, text: &[S]) -> Result<Tensor<S>> {
    let s = clip.shape();
    if s.len() != 3 || s[2] != text.len() {
        return shape_err("cosine_map", s, &[text.len()]);
    }
    let tn = norm(text);
    let out = clip
        .data()
        .chunks(s[2])
        .map(|px| {
            let pn = norm(px);
            if pn == S::ZERO || tn == S::ZERO {
                S::ZERO
            } else {
                px.iter().zip(text).map(|(&a, &b)| a * b).sum::<S>() / (pn * tn)
            }
        })
        .collect();
    Tensor::new([s[0], s[1]], out)
}

/// Min-max normalized cosine map on the clip grid.
pub fn textual_prior<S: Scalar>(clip: &Tensor<S>, text: &[S]) -> Result<Tensor<S>> {
    let raw = cosine_map(clip, text)?;
    let shape = raw.shape().to_vec();
    Tensor::new(shape, minmax_norm(raw.data()))
}

/// Textual prior bilinearly upsampled to an `oh × ow` image.
pub fn textual_prior_at<S: Scalar>(clip: &Tensor<S>, text: &[S], oh: usize, ow: usize) -> Result<Tensor<S>> {
    let p = textual_prior(clip, text)?;
    let (h, w) = p.dims2("textual_prior")?;
    Tensor::new([oh, ow], kernels::resize_bilinear(p.data(), 1, h, w, oh, ow))
}

/// Visual prior from a cross affinity `A_sq` (`L_s × L_q`): the best support
/// match of every query pixel, min-max normalized. Returns the map and
/// whether it is degenerate (all-zero affinity, e.g. an empty support mask).
pub fn visual_prior<S: Scalar>(a_sq: &Tensor<S>) -> Result<(Vec<S>, bool)> {
    let (ls, lq) = a_sq.dims2("visual_prior")?;
    if ls == 0 {
        return Ok((vec![S::ZERO; lq], true));
    }
    let d = a_sq.data();
    if d.iter().all(|&v| v == S::ZERO) {
        return Ok((vec![S::ZERO; lq], true));
    }
    let mut best = d[..lq].to_vec();
    for row in d.chunks(lq).skip(1) {
        for (b, &v) in best.iter_mut().zip(row) {
            *b = b.max(v);
        }
    }
    Ok((minmax_norm(&best), false))
}

/// Area-average downsample of a `(H, W)` map to `(h, w)`.
pub fn downsample<S: Scalar>(map: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    let (ih, iw) = map.dims2("downsample")?;
    Tensor::new([h, w], kernels::area_resample(map.data(), ih, iw, h, w))
}

/// Support ground-truth prior at a level grid.
pub fn support_gt_prior<S: Scalar>(mask: &Mask, h: usize, w: usize) -> Result<Tensor<S>> {
    downsample(&mask.to_tensor().cast(), h, w)
}

/// Textual prior at image size, area-averaged to a level grid.
pub fn clip_prior_at_grid<S: Scalar>(clip: &Tensor<S>, text: &[S], image: (usize, usize), h: usize, w: usize) -> Result<Tensor<S>> {
    let full = textual_prior_at(clip, text, image.0, image.1)?;
    downsample(&full, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minmax_examples() {
        let out = minmax_norm(&[0.2f64, 0.6, 1.0]);
        for (o, e) in out.iter().zip([0.0, 0.5, 1.0]) {
            assert!((o - e).abs() < 1e-7);
        }
        assert_eq!(minmax_norm(&[0.3f64; 4]), vec![0.0; 4]);
        let unit = minmax_norm(&[0.0f64, 0.25, 1.0]);
        assert!((unit[1] - 0.25).abs() < 1e-7 && (unit[2] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn one_aligned_pixel() {
        // 2×2 grid, text = e0; one pixel along e0, the rest orthogonal.
        let clip = Tensor::new([2, 2, 2], vec![0.0f64, 1.0, 3.0, 0.0, 0.0, 2.0, 0.0, 5.0]).unwrap();
        let p = textual_prior(&clip, &[1.0, 0.0]).unwrap();
        let expect = [0.0, 1.0, 0.0, 0.0];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_pixel_is_zero_cosine() {
        let clip = Tensor::new([1, 2, 2], vec![0.0f64, 0.0, 1.0, 1.0]).unwrap();
        let c = cosine_map(&clip, &[1.0, 0.0]).unwrap();
        assert_eq!(c.data()[0], 0.0);
        assert!(c.all_finite());
    }

    #[test]
    fn visual_prior_takes_column_max() {
        let a = Tensor::new([2, 2], vec![0.9f64, 0.2, 0.1, 0.4]).unwrap();
        let (raw, flagged) = visual_prior(&a).unwrap();
        assert!(!flagged);
        assert!((raw[0] - 1.0).abs() < 1e-6 && raw[1].abs() < 1e-12);
        let (z, flagged) = visual_prior(&Tensor::<f64>::zeros([3, 4])).unwrap();
        assert!(flagged && z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkerboard_quarter() {
        let m = Mask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        let p: Tensor<f64> = support_gt_prior(&m, 1, 1).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-12);
        let ones = Mask::new(4, 4, vec![1; 16]).unwrap();
        let p: Tensor<f32> = support_gt_prior(&ones, 2, 2).unwrap();
        assert!(p.data().iter().all(|&v| v == 1.0));
    }
}
