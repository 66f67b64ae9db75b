//! Parameter-free and high-order pixel affinities.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Init, LayerNorm, Linear, MultiHeadAttention};
use crate::params::ParamStore;
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::Tensor;

/// Flattens a `(h, w, d)` map to `h·w × d`, scaling each row by the mask
/// value at that pixel (`None` keeps every row).
pub fn masked_flatten<S: Scalar>(f: &Tensor<S>, mask: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    let s = f.shape();
    if s.len() != 3 {
        return shape_err("masked_flatten", s, &[]);
    }
    let (l, d) = (s[0] * s[1], s[2]);
    let mut data = f.data().to_vec();
    if let Some(m) = mask {
        if m.shape() != &s[..2] {
            return shape_err("masked_flatten", s, m.shape());
        }
        for (row, &mv) in data.chunks_mut(d).zip(m.data()) {
            row.iter_mut().for_each(|v| *v *= mv);
        }
    }
    Tensor::new([l, d], data)
}

/// Unit-normalizes every row; zero rows stay zero.
pub fn normalize_rows<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, d) = x.dims2("normalize_rows")?;
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(d.max(1)) {
        let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
        if norm > S::ZERO {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Tensor::new([n, d], data)
}

/// `a · bᵀ` for two row-major matrices sharing their column count.
fn gram<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, d) = a.dims2("affinity")?;
    let (n, d2) = b.dims2("affinity")?;
    if d != d2 {
        return shape_err("affinity", a.shape(), b.shape());
    }
    let mut out = alloc::vec![S::ZERO; m * n];
    gemm(S::ONE, MatView::rm(a.data(), m, d), MatView::rm_t(b.data(), n, d), S::ZERO, &mut out, n);
    Tensor::new([m, n], out)
}

/// Cosine affinity between masked support rows and query rows, `L_s × L_q`.
pub fn cross_affinity<S: Scalar>(fs_hat: &Tensor<S>, fq_hat: &Tensor<S>) -> Result<Tensor<S>> {
    gram(&normalize_rows(fs_hat)?, &normalize_rows(fq_hat)?)
}

/// Cosine self-affinity, `L × L`.
pub fn self_affinity<S: Scalar>(f_hat: &Tensor<S>) -> Result<Tensor<S>> {
    let n = normalize_rows(f_hat)?;
    gram(&n, &n)
}

/// One attention block: `h = LN(residual + MHA(tokens, context))`,
/// `out = h + FFN(h)`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionBlock {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl AttentionBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        token_dim: usize,
        context_dim: usize,
        out_dim: usize,
        model_dim: usize,
        heads: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), token_dim, context_dim, model_dim, out_dim, heads, init, rng)?,
            norm: LayerNorm::new(store, &format!("{prefix}.ln"), out_dim)?,
            ff1: Linear::new(store, &format!("{prefix}.ff1"), out_dim, model_dim, false, rng)?,
            ff2: Linear::new(store, &format!("{prefix}.ff2"), model_dim, out_dim, init == Init::Residual, rng)?,
        })
    }

    fn bind<S: Scalar>(store: &ParamStore<S>, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::bind(store, &format!("{prefix}.attn"), heads)?,
            norm: LayerNorm::bind(store, &format!("{prefix}.ln"))?,
            ff1: Linear::bind(store, &format!("{prefix}.ff1"))?,
            ff2: Linear::bind(store, &format!("{prefix}.ff2"))?,
        })
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, tokens: Var, context: Var, residual: Var) -> Result<Var> {
        let o = self.attn.forward(g, store, tokens, context)?;
        let r = g.add(residual, o)?;
        let h = self.norm.forward(g, store, r)?;
        let f = self.ff1.forward(g, store, h)?;
        let f = g.relu(f);
        let f = self.ff2.forward(g, store, f)?;
        g.add(h, f)
    }
}

/// Learned refinement of the affinities of one pyramid level.
#[derive(Clone, Copy, Debug)]
pub struct HighOrder {
    pub cross: AttentionBlock,
    pub self_: AttentionBlock,
    pub support_len: usize,
    pub query_len: usize,
}

impl HighOrder {
    /// Registers the parameters of both blocks under `prefix`
    /// (`high_order.<level>`).
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        support_len: usize,
        query_len: usize,
        model_dim: usize,
        heads: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!("model width {model_dim} is not divisible into {heads} heads")));
        }
        let cross = AttentionBlock::new(store, &format!("{prefix}.cross"), support_len, support_len, support_len, model_dim, heads, init, rng)?;
        let self_ = AttentionBlock::new(store, &format!("{prefix}.self"), support_len, query_len, query_len, model_dim, heads, init, rng)?;
        Ok(Self { cross, self_, support_len, query_len })
    }

    pub fn bind<S: Scalar>(store: &ParamStore<S>, prefix: &str, heads: usize) -> Result<Self> {
        let cross = AttentionBlock::bind(store, &format!("{prefix}.cross"), heads)?;
        let self_ = AttentionBlock::bind(store, &format!("{prefix}.self"), heads)?;
        Ok(Self { cross, self_, support_len: cross.attn.q.inputs, query_len: self_.attn.k.inputs })
    }

    /// Query-pixel tokens (rows of `A_sqᵀ`) attend over support-pixel tokens
    /// (rows of `A_ss`). Returns `A'_sqᵀ`, shaped `L_q × L_s`.
    pub fn cross_t<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, a_ss: Var, a_sq_t: Var) -> Result<Var> {
        self.check(g, a_sq_t, [self.query_len, self.support_len])?;
        self.check(g, a_ss, [self.support_len, self.support_len])?;
        self.cross.forward(g, store, a_sq_t, a_ss, a_sq_t)
    }

    /// Rows of `A'_sqᵀ` attend over query tokens of `A_qq`; with no refined
    /// cross affinity the block attends `A_qq` to itself, which needs
    /// `L_s == L_q`. Returns `A'_qq`, `L_q × L_q`.
    pub fn self_qq<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, a_sq_prime_t: Option<Var>, a_qq: Var) -> Result<Var> {
        self.check(g, a_qq, [self.query_len, self.query_len])?;
        let tokens = match a_sq_prime_t {
            Some(t) => {
                self.check(g, t, [self.query_len, self.support_len])?;
                t
            }
            None if self.support_len == self.query_len => a_qq,
            None => {
                return Err(Error::InvalidArgument {
                    op: "high_order_self",
                    reason: format!("query-only path needs equal support/query grids, got {} vs {}", self.support_len, self.query_len),
                })
            }
        };
        self.self_.forward(g, store, tokens, a_qq, a_qq)
    }

    fn check<S: Scalar>(&self, g: &Graph<S>, v: Var, want: [usize; 2]) -> Result<()> {
        if g.shape(v) != want {
            return shape_err("high_order", g.shape(v), &want);
        }
        Ok(())
    }
}

/// Pearson correlation of two equally long slices.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / libm::sqrt(saa * sbb)
}

/// Permutes the rows of a matrix: row `i` of the result is row `perm[i]`.
pub fn permute_rows<S: Scalar>(t: &Tensor<S>, perm: &[usize]) -> Result<Tensor<S>> {
    let (n, d) = t.dims2("permute_rows")?;
    if perm.len() != n {
        return shape_err("permute_rows", t.shape(), &[perm.len()]);
    }
    let mut out = Vec::with_capacity(n * d);
    for &p in perm {
        out.extend_from_slice(&t.data()[p * d..(p + 1) * d]);
    }
    Tensor::new([n, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use alloc::vec;

    #[test]
    fn single_pixel_mask_leaves_one_row() {
        let f = Tensor::from_fn([2, 2, 3], |i| i as f64 + 1.0);
        let m = Tensor::new([2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let x = masked_flatten(&f, Some(&m)).unwrap();
        let nonzero: Vec<_> = x.rows().map(|r| r.iter().any(|&v| v != 0.0)).collect();
        assert_eq!(nonzero, vec![false, false, true, false]);
        assert_eq!(masked_flatten(&f, None).unwrap().data(), f.data());
    }

    #[test]
    fn self_affinity_has_unit_diagonal() {
        let f = Tensor::from_fn([9, 4], |i| libm::sin(i as f64 * 0.7) + 0.1);
        let a = self_affinity(&f).unwrap();
        for i in 0..9 {
            assert!((a.at2(i, i) - 1.0).abs() < 1e-12);
            for j in 0..9 {
                assert!((a.at2(i, j) - a.at2(j, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orthogonal_sets_give_zero() {
        let s = Tensor::new([2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        let q = Tensor::new([2, 4], vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 3.0]).unwrap();
        assert!(cross_affinity(&s, &q).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn query_only_path_needs_square_tokens() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream(1, Stream::Init, 0);
        let ho = HighOrder::new(&mut store, "high_order.x", 4, 9, 8, 2, Init::Random, &mut rng).unwrap();
        let mut g = Graph::new();
        let a_qq = g.constant(Tensor::eye(9));
        assert!(ho.self_qq(&mut g, &store, None, a_qq).is_err());
    }
}
