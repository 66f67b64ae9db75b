//! AdamW with bias correction and decoupled weight decay.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Optimizer state: first/second moments shaped like their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<S> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamWState<S> {
    pub fn new(params: &ParamStore<S>, config: AdamWConfig) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect::<Vec<_>>();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update. Parameters without a gradient entry see a zero
    /// gradient. A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &BTreeMap<ParamId, Tensor<S>>) -> Result<()> {
        for (id, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(params.name(*id).to_string()));
            }
            if g.shape() != params.get(*id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: params.get(*id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        let (b1, b2) = (S::from_f64(c.beta1), S::from_f64(c.beta2));
        let (ob1, ob2) = (S::from_f64(1.0 - c.beta1), S::from_f64(1.0 - c.beta2));
        let lr = S::from_f64(c.lr);
        let decay = S::from_f64(1.0 - c.lr * c.weight_decay);
        let (inv_bc1, inv_bc2) = (S::from_f64(1.0 / bc1), S::from_f64(1.0 / bc2));
        let eps = S::from_f64(c.eps);
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.get(&id);
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.map_or(S::ZERO, |g| g.data()[i]);
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                let mh = m[i] * inv_bc1;
                let vh = v[i] * inv_bc2;
                p[i] = p[i] * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
