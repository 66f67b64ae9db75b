//! Segmentation losses on sigmoid probabilities.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

pub const DEFAULT_LAMBDA: f64 = 0.5;

/// The three loss scalars of one prediction.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub dice: Var,
    pub ce: Var,
}

/// `λ·dice + (1 − λ)·ce` of `sigmoid(logits)` against `gt`.
pub fn total_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, gt: Var, lambda: f64) -> Result<LossParts> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(alloc::format!("loss weight {lambda} outside [0, 1]")));
    }
    let pred = g.sigmoid(logits);
    let dice = g.dice_loss(pred, gt)?;
    let ce = g.bce_loss(pred, gt)?;
    let a = g.scale(dice, S::from_f64(lambda));
    let b = g.scale(ce, S::from_f64(1.0 - lambda));
    let total = g.add(a, b)?;
    Ok(LossParts { total, dice, ce })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn eval(pred: &[f64], gt: &[f64]) -> (f64, f64) {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new([pred.len()], pred.to_vec()).unwrap());
        let y = g.constant(Tensor::new([gt.len()], gt.to_vec()).unwrap());
        let d = g.dice_loss(p, y).unwrap();
        let c = g.bce_loss(p, y).unwrap();
        (g.value(d).item(), g.value(c).item())
    }

    #[test]
    fn dice_examples() {
        assert!(eval(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).0.abs() < 1e-6);
        assert!((eval(&[0.0; 4], &[1.0; 4]).0 - 1.0).abs() < 1e-6);
        let (d, _) = eval(&[0.5, 0.0], &[1.0, 0.0]);
        assert!((d - 0.2).abs() < 1e-6);
    }

    #[test]
    fn ce_examples() {
        assert!((eval(&[0.5; 3], &[1.0, 0.0, 1.0]).1 - core::f64::consts::LN_2).abs() < 1e-9);
        assert!(eval(&[1.0, 0.0], &[1.0, 0.0]).1 < 1e-6);
        assert!((eval(&[0.25], &[1.0]).1 - 1.3862943611198906).abs() < 1e-9);
    }

    #[test]
    fn lambda_extremes() {
        let run = |lambda: f64| {
            let mut g = Graph::new();
            let l = g.constant(Tensor::new([3], vec![0.3, -1.2, 2.0]).unwrap());
            let y = g.constant(Tensor::new([3], vec![1.0, 0.0, 1.0]).unwrap());
            let parts = total_loss(&mut g, l, y, lambda).unwrap();
            (g.value(parts.total).item(), g.value(parts.dice).item(), g.value(parts.ce).item())
        };
        let (t0, _, c0) = run(0.0);
        assert!((t0 - c0).abs() < 1e-12);
        let (t1, d1, _) = run(1.0);
        assert!((t1 - d1).abs() < 1e-12);
        assert_eq!(DEFAULT_LAMBDA, 0.5);
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros([1]));
        assert!(total_loss(&mut g, l, l, 1.5).is_err());
    }
}
