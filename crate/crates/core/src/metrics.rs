//! IoU bookkeeping.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::episode::Mask;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Foreground where the logit is strictly positive.
pub fn threshold<S: Scalar>(logits: &Tensor<S>) -> Result<Mask> {
    let (h, w) = logits.dims2("threshold")?;
    Ok(Mask { height: h, width: w, data: logits.data().iter().map(|&v| u8::from(v > S::ZERO)).collect() })
}

/// `(intersection, union)` pixel counts.
pub fn overlap(pred: &Mask, gt: &Mask) -> Result<(u64, u64)> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::ShapeMismatch { op: "iou", lhs: alloc::vec![pred.height, pred.width], rhs: alloc::vec![gt.height, gt.width] });
    }
    let (mut i, mut u) = (0, 0);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        i += u64::from(p & g);
        u += u64::from(p | g);
    }
    Ok((i, u))
}

fn ratio(i: u64, u: u64) -> f64 {
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// IoU of two masks; 1 when both are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (i, u) = overlap(pred, gt)?;
    Ok(ratio(i, u))
}

/// Dataset-level accumulation: per-class foreground counts and global
/// foreground/background counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IouAccumulator {
    per_class: BTreeMap<usize, (u64, u64)>,
    fg: (u64, u64),
    bg: (u64, u64),
    episodes: usize,
}

impl IouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, class: usize, pred: &Mask, gt: &Mask) -> Result<()> {
        let (i, u) = overlap(pred, gt)?;
        let e = self.per_class.entry(class).or_default();
        e.0 += i;
        e.1 += u;
        self.fg.0 += i;
        self.fg.1 += u;
        let inv = |m: &Mask| Mask { height: m.height, width: m.width, data: m.data.iter().map(|&v| 1 - v).collect() };
        let (bi, bu) = overlap(&inv(pred), &inv(gt))?;
        self.bg.0 += bi;
        self.bg.1 += bu;
        self.episodes += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for (c, (i, u)) in &other.per_class {
            let e = self.per_class.entry(*c).or_default();
            e.0 += i;
            e.1 += u;
        }
        self.fg.0 += other.fg.0;
        self.fg.1 += other.fg.1;
        self.bg.0 += other.bg.0;
        self.bg.1 += other.bg.1;
        self.episodes += other.episodes;
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    /// Per-class IoU in percent.
    pub fn per_class(&self) -> Vec<(usize, f64)> {
        self.per_class.iter().map(|(&c, &(i, u))| (c, 100.0 * ratio(i, u))).collect()
    }

    /// Mean of per-class IoU, in percent.
    pub fn miou(&self) -> f64 {
        let pc = self.per_class();
        if pc.is_empty() {
            return 0.0;
        }
        pc.iter().map(|(_, v)| v).sum::<f64>() / pc.len() as f64
    }

    /// Mean of foreground and background IoU, in percent.
    pub fn fbiou(&self) -> f64 {
        50.0 * (ratio(self.fg.0, self.fg.1) + ratio(self.bg.0, self.bg.1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize, y0: usize, x0: usize, side: usize) -> Mask {
        Mask::from_fn(n, n, |y, x| (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x))
    }

    #[test]
    fn iou_examples() {
        let a = square(8, 0, 0, 4);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &square(8, 4, 4, 4)).unwrap(), 0.0);
        // 4×4 squares offset by two columns share half their area.
        assert!((iou(&a, &square(8, 0, 2, 4)).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&Mask::zeros(3, 3), &Mask::zeros(3, 3)).unwrap(), 1.0);
        assert!(iou(&Mask::zeros(3, 3), &Mask::zeros(2, 3)).is_err());
    }

    #[test]
    fn accumulator_means() {
        let mut acc = IouAccumulator::new();
        let a = square(4, 0, 0, 2);
        acc.add(1, &a, &a).unwrap();
        acc.add(2, &Mask::zeros(4, 4), &a).unwrap();
        assert_eq!(acc.miou(), 50.0);
        // Background: class 1 exact (12/12), class 2 misses 4 pixels (12/16).
        let bg = 24.0 / 28.0;
        let fg = 4.0 / 8.0;
        assert!((acc.fbiou() - 50.0 * (fg + bg)).abs() < 1e-9);
    }

    #[test]
    fn threshold_is_strict() {
        let t = Tensor::new([1, 3], alloc::vec![-0.1f32, 0.0, 0.1]).unwrap();
        assert_eq!(threshold(&t).unwrap().data, alloc::vec![0, 0, 1]);
    }
}
