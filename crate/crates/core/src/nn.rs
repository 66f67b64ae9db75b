//! Parameterised layers built from graph operators.

use alloc::format;

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How fresh weights are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Init {
    #[default]
    Random,
    /// Output projections start at zero so every residual block is the
    /// identity plus layer norm at step 0.
    Residual,
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        inputs: usize,
        outputs: usize,
        zero: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = if zero {
            Tensor::zeros([inputs, outputs])
        } else {
            ParamStore::glorot(rng, &[inputs, outputs], inputs, outputs)
        };
        let w = store.insert(format!("{prefix}.w"), w)?;
        let b = store.insert(format!("{prefix}.b"), Tensor::zeros([outputs]))?;
        Ok(Self { w, b, inputs, outputs })
    }

    pub fn bind<S: Scalar>(store: &ParamStore<S>, prefix: &str) -> Result<Self> {
        let w = store.id(&format!("{prefix}.w"))?;
        let b = store.id(&format!("{prefix}.b"))?;
        let s = store.get(w).shape();
        Ok(Self { w, b, inputs: s[0], outputs: s[1] })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, width: usize) -> Result<Self> {
        let gamma = store.insert(format!("{prefix}.g"), Tensor::full([width], S::ONE))?;
        let beta = store.insert(format!("{prefix}.b"), Tensor::zeros([width]))?;
        Ok(Self { gamma, beta })
    }

    pub fn bind<S: Scalar>(store: &ParamStore<S>, prefix: &str) -> Result<Self> {
        Ok(Self { gamma: store.id(&format!("{prefix}.g"))?, beta: store.id(&format!("{prefix}.b"))? })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }

    /// Normalizes a `(c, h, w)` map across channels at every pixel.
    pub fn forward_channels<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
        let pix = g.transpose(flat)?;
        let normed = self.forward(g, store, pix)?;
        let back = g.transpose(normed)?;
        g.reshape(back, &s)
    }
}

/// Multi-head attention with learned input projections into a model width
/// and an output projection back to `out_dim`.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        query_dim: usize,
        context_dim: usize,
        model_dim: usize,
        out_dim: usize,
        heads: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{prefix}.q"), query_dim, model_dim, false, rng)?,
            k: Linear::new(store, &format!("{prefix}.k"), context_dim, model_dim, false, rng)?,
            v: Linear::new(store, &format!("{prefix}.v"), context_dim, model_dim, false, rng)?,
            o: Linear::new(store, &format!("{prefix}.o"), model_dim, out_dim, init == Init::Residual, rng)?,
            heads,
        })
    }

    pub fn bind<S: Scalar>(store: &ParamStore<S>, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::bind(store, &format!("{prefix}.q"))?,
            k: Linear::bind(store, &format!("{prefix}.k"))?,
            v: Linear::bind(store, &format!("{prefix}.v"))?,
            o: Linear::bind(store, &format!("{prefix}.o"))?,
            heads,
        })
    }

    /// `queries: lq × query_dim`, `context: lk × context_dim` → `lq × out_dim`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, queries: Var, context: Var) -> Result<Var> {
        let q = self.q.forward(g, store, queries)?;
        let k = self.k.forward(g, store, context)?;
        let v = self.v.forward(g, store, context)?;
        let a = g.attention(q, k, v, self.heads)?;
        self.o.forward(g, store, a)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = ParamStore::he(rng, &[c_out, c_in, kernel, kernel], c_in * kernel * kernel);
        Ok(Self { w: store.insert(format!("{prefix}.w"), w)?, b: store.insert(format!("{prefix}.b"), Tensor::zeros([c_out]))? })
    }

    pub fn bind<S: Scalar>(store: &ParamStore<S>, prefix: &str) -> Result<Self> {
        Ok(Self { w: store.id(&format!("{prefix}.w"))?, b: store.id(&format!("{prefix}.b"))? })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b)
    }
}
