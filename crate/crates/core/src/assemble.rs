//! Prior assembly through affinities.
//!
//! Every level yields ten query-grid channels in a fixed order:
//!
//! | # | channel |
//! |---|---------|
//! | 0 | `p_q^clip` |
//! | 1 | `M_q^v` |
//! | 2 | `A_qq · p_q^clip` |
//! | 3 | `A_qq · M_q^v` |
//! | 4 | `A'_qq · p_q^clip` |
//! | 5 | `A'_qq · M_q^v` |
//! | 6 | `A_sqᵀ · M_s^gt` |
//! | 7 | `A_sqᵀ · p_s^clip` |
//! | 8 | `A'_sqᵀ · M_s^gt` |
//! | 9 | `A'_sqᵀ · p_s^clip` |

use alloc::vec::Vec;

use crate::affinity::HighOrder;
use crate::episode::TaskMode;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 10;

pub const CHANNEL_NAMES: [&str; CHANNELS] = [
    "p_q_clip",
    "m_q_v",
    "a_qq.p_q_clip",
    "a_qq.m_q_v",
    "a'_qq.p_q_clip",
    "a'_qq.m_q_v",
    "a_sq.m_s_gt",
    "a_sq.p_s_clip",
    "a'_sq.m_s_gt",
    "a'_sq.p_s_clip",
];

/// Channels that involve a learned affinity.
pub const LEARNED: [usize; 4] = [4, 5, 8, 9];

/// Which channels a task mode can populate.
pub fn availability(mode: TaskMode) -> [bool; CHANNELS] {
    match mode {
        TaskMode::Zss => core::array::from_fn(|c| matches!(c, 0 | 2 | 4)),
        TaskMode::Coseg => core::array::from_fn(|c| !matches!(c, 6 | 8)),
        TaskMode::Fss | TaskMode::Bbox | TaskMode::CorruptMask(_) | TaskMode::CorruptImage(_) => [true; CHANNELS],
    }
}

/// Softmax over the source axis of `a` (`target × source`), applied to the
/// columns of `p` (`source × c`), then min-max normalized per column.
pub fn gau<S: Scalar>(g: &mut Graph<S>, a: Var, p: Var) -> Result<Var> {
    if g.shape(a).len() != 2 || g.shape(p).len() != 2 || g.shape(a)[1] != g.shape(p)[0] {
        return shape_err("gau", g.shape(a), g.shape(p));
    }
    let w = g.softmax(a, 1)?;
    let raw = g.matmul(w, p)?;
    g.minmax_norm(raw, 0)
}

/// [`gau`] on plain tensors; `p` may be a vector.
pub fn gau_tensor<S: Scalar>(a: &Tensor<S>, p: &Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let col = p.clone().reshape([p.shape()[0], p.len() / p.shape()[0].max(1)])?;
    let pv = g.constant(col);
    let out = gau(&mut g, av, pv)?;
    Ok(g.value(out).clone())
}

/// Support-side inputs of one shot at one level.
#[derive(Clone, Debug)]
pub struct SupportPriors<S> {
    /// `L_s × L_q`, from mask-weighted support features.
    pub a_sq: Tensor<S>,
    /// `L_s × L_s`.
    pub a_ss: Tensor<S>,
    /// Visual prior on the query grid (`L_q`).
    pub m_q_v: Tensor<S>,
    /// Downsampled support mask (`L_s`); `None` when no mask is given.
    pub m_s_gt: Option<Tensor<S>>,
    /// Support textual prior (`L_s`).
    pub p_s: Tensor<S>,
}

/// Everything one level needs for assembly.
#[derive(Clone, Debug)]
pub struct LevelPriors<S> {
    /// Query textual prior (`L_q`).
    pub p_q: Tensor<S>,
    /// `L_q × L_q`.
    pub a_qq: Tensor<S>,
    pub support: Option<SupportPriors<S>>,
}

/// Ten assembled channels (`10 × L_q`) and their validity.
#[derive(Clone, Copy, Debug)]
pub struct Assembled {
    pub channels: Var,
    pub valid: [bool; CHANNELS],
}

/// Builds the ten channels of one level for one shot. `learned` enables the
/// high-order channels; without it they are zero and flagged invalid.
pub fn assemble_level<S: Scalar>(
    g: &mut Graph<S>,
    priors: &LevelPriors<S>,
    learned: Option<(&HighOrder, &ParamStore<S>)>,
) -> Result<Assembled> {
    let lq = priors.p_q.len();
    if priors.a_qq.shape() != [lq, lq] {
        return shape_err("assemble_level", priors.a_qq.shape(), &[lq, lq]);
    }
    let column = |t: &Tensor<S>| t.clone().reshape([t.len(), 1]);
    let zero_q = || Tensor::<S>::zeros([lq, 1]);
    let mut valid = [false; CHANNELS];
    let mut cols: Vec<Var> = Vec::with_capacity(CHANNELS);

    let support = priors.support.as_ref();
    if let Some(s) = support {
        let ls = s.p_s.len();
        if s.a_sq.shape() != [ls, lq] || s.a_ss.shape() != [ls, ls] || s.m_q_v.len() != lq {
            return shape_err("assemble_level", s.a_sq.shape(), &[ls, lq]);
        }
        if s.m_s_gt.as_ref().is_some_and(|m| m.len() != ls) {
            return shape_err("assemble_level", s.a_ss.shape(), &[ls]);
        }
    }

    // Query-side pair [p_q, M_q^v] as an L_q × 2 matrix.
    let m_q_v = support.map_or_else(zero_q, |s| s.m_q_v.clone().reshape([lq, 1]).expect("checked length"));
    let pq_pair = Tensor::concat(&[&column(&priors.p_q)?, &m_q_v], 1)?;
    let pq_pair = g.constant(pq_pair);
    let p_q = g.narrow(pq_pair, 1, 0, 1)?;
    let m_qv = g.narrow(pq_pair, 1, 1, 1)?;
    cols.push(p_q);
    cols.push(m_qv);
    valid[0] = true;
    valid[1] = support.is_some();

    let a_qq = g.constant(priors.a_qq.clone());
    let qq = gau(g, a_qq, pq_pair)?;
    cols.push(g.narrow(qq, 1, 0, 1)?);
    cols.push(g.narrow(qq, 1, 1, 1)?);
    valid[2] = true;
    valid[3] = support.is_some();

    // Support-side pair [M_s^gt, p_s] as L_s × 2, plus the cross affinities.
    let cross = match support {
        Some(s) => {
            let ls = s.p_s.len();
            let gt = match &s.m_s_gt {
                Some(m) => column(m)?,
                None => Tensor::zeros([ls, 1]),
            };
            let ps_pair = g.constant(Tensor::concat(&[&gt, &column(&s.p_s)?], 1)?);
            let a_sq_t = g.constant(s.a_sq.transpose2()?);
            Some((s, ps_pair, a_sq_t))
        }
        None => None,
    };

    let (refined_t, a_qq_prime) = match learned {
        Some((ho, store)) => {
            let refined_t = match &cross {
                Some((s, _, a_sq_t)) => {
                    let a_ss = g.constant(s.a_ss.clone());
                    Some(ho.cross_t(g, store, a_ss, *a_sq_t)?)
                }
                None => None,
            };
            let a_qq_prime = ho.self_qq(g, store, refined_t, a_qq)?;
            (refined_t, Some(a_qq_prime))
        }
        None => (None, None),
    };

    match a_qq_prime {
        Some(a) => {
            let hqq = gau(g, a, pq_pair)?;
            cols.push(g.narrow(hqq, 1, 0, 1)?);
            cols.push(g.narrow(hqq, 1, 1, 1)?);
            valid[4] = true;
            valid[5] = support.is_some();
        }
        None => {
            let z = g.constant(zero_q());
            cols.extend([z, z]);
        }
    }

    match &cross {
        Some((s, ps_pair, a_sq_t)) => {
            let sq = gau(g, *a_sq_t, *ps_pair)?;
            cols.push(g.narrow(sq, 1, 0, 1)?);
            cols.push(g.narrow(sq, 1, 1, 1)?);
            valid[6] = s.m_s_gt.is_some();
            valid[7] = true;
            if let Some(r) = refined_t {
                let hsq = gau(g, r, *ps_pair)?;
                cols.push(g.narrow(hsq, 1, 0, 1)?);
                cols.push(g.narrow(hsq, 1, 1, 1)?);
                valid[8] = s.m_s_gt.is_some();
                valid[9] = true;
            } else {
                let z = g.constant(zero_q());
                cols.extend([z, z]);
            }
        }
        None => {
            let z = g.constant(zero_q());
            cols.extend([z, z, z, z]);
        }
    }

    // Invalid channels are exact zeros regardless of what produced them.
    for (c, v) in valid.iter().enumerate() {
        if !v {
            cols[c] = g.constant(zero_q());
        }
    }
    let stacked = g.concat(&cols, 1)?;
    let channels = g.transpose(stacked)?;
    Ok(Assembled { channels, valid })
}

/// Combines per-shot channel sets: query-only channels from shot 0, `M_q^v`
/// as an elementwise max, support-dependent channels as a mean.
pub fn fuse_shots<S: Scalar>(g: &mut Graph<S>, shots: &[Assembled]) -> Result<Assembled> {
    let first = *shots.first().ok_or(Error::NoShots)?;
    if shots.len() == 1 {
        return Ok(first);
    }
    let shape = g.shape(first.channels).to_vec();
    for s in shots {
        if g.shape(s.channels) != shape {
            return shape_err("fuse_shots", &shape, g.shape(s.channels));
        }
    }
    let scale = S::from_f64(1.0 / shots.len() as f64);
    let mut rows = Vec::with_capacity(CHANNELS);
    for c in 0..CHANNELS {
        let per: Vec<Var> = shots.iter().map(|s| g.narrow(s.channels, 0, c, 1)).collect::<Result<_>>()?;
        let row = match c {
            0 | 2 => per[0],
            1 => per[1..].iter().try_fold(per[0], |acc, &v| g.maximum(acc, v))?,
            _ => {
                let sum = per[1..].iter().try_fold(per[0], |acc, &v| g.add(acc, v))?;
                g.scale(sum, scale)
            }
        };
        rows.push(row);
    }
    let mut valid = first.valid;
    for s in &shots[1..] {
        for (v, o) in valid.iter_mut().zip(s.valid) {
            *v &= o;
        }
    }
    Ok(Assembled { channels: g.concat(&rows, 0)?, valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn gau_uniform_rows_give_zero_map() {
        let a = Tensor::<f64>::zeros([2, 2]);
        let p = Tensor::new([2], vec![1.0, 0.0]).unwrap();
        let out = gau_tensor(&a, &p).unwrap();
        assert!(out.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn gau_saturated_diagonal_recovers_prior() {
        let a = Tensor::from_fn([4, 4], |i| if i % 5 == 0 { 100.0 } else { 0.0 });
        let p = Tensor::new([4], vec![0.2f64, 0.9, 0.5, 0.1]).unwrap();
        let out = gau_tensor(&a, &p).unwrap();
        let expect = crate::prior::minmax_norm(p.data());
        for (o, e) in out.data().iter().zip(expect) {
            assert!((o - e).abs() < 1e-6);
        }
    }

    #[test]
    fn availability_counts() {
        assert_eq!(availability(TaskMode::Fss).iter().filter(|&&v| v).count(), 10);
        let z = availability(TaskMode::Zss);
        assert_eq!((0..10).filter(|&c| z[c]).collect::<Vec<_>>(), vec![0, 2, 4]);
        let c = availability(TaskMode::Coseg);
        assert_eq!(c.iter().filter(|&&v| v).count(), 8);
        assert!(!c[6] && !c[8]);
    }

    fn priors(seed: f64, with_support: bool, gt: bool) -> LevelPriors<f64> {
        let lq = 4;
        let f = |n: usize, m: usize, k: f64| Tensor::from_fn([n, m], |i| libm::sin(i as f64 * k + seed));
        LevelPriors {
            p_q: Tensor::from_fn([lq], |i| (i as f64 * 0.3 + seed).fract()),
            a_qq: f(lq, lq, 0.7),
            support: with_support.then(|| SupportPriors {
                a_sq: f(4, lq, 1.3),
                a_ss: f(4, 4, 0.9),
                m_q_v: Tensor::from_fn([lq], |i| (i as f64 * 0.41 + seed).fract()),
                m_s_gt: gt.then(|| Tensor::from_fn([4], |i| (i % 2) as f64)),
                p_s: Tensor::from_fn([4], |i| (i as f64 * 0.2).fract()),
            }),
        }
    }

    #[test]
    fn zero_shot_fills_support_channels_with_zeros() {
        let mut g = Graph::new();
        let a = assemble_level(&mut g, &priors(0.1, false, false), None).unwrap();
        assert_eq!(g.shape(a.channels), &[10, 4]);
        let vals = g.value(a.channels).clone();
        for c in [1, 3, 4, 5, 6, 7, 8, 9] {
            assert!(!a.valid[c]);
            assert!(vals.data()[c * 4..(c + 1) * 4].iter().all(|&v| v == 0.0));
        }
        assert!(a.valid[0] && a.valid[2]);
    }

    #[test]
    fn fusing_identical_shots_is_identity() {
        let mut g = Graph::new();
        let p = priors(0.2, true, true);
        let a = assemble_level(&mut g, &p, None).unwrap();
        let b = assemble_level(&mut g, &p, None).unwrap();
        let f = fuse_shots(&mut g, &[a, b]).unwrap();
        for (x, y) in g.value(f.channels).data().iter().zip(g.value(a.channels).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(fuse_shots::<f64>(&mut g, &[]).is_err());
    }

    #[test]
    fn fused_visual_prior_is_max() {
        let mut g = Graph::new();
        let a = assemble_level(&mut g, &priors(0.2, true, true), None).unwrap();
        let b = assemble_level(&mut g, &priors(0.55, true, true), None).unwrap();
        let f = fuse_shots(&mut g, &[a, b]).unwrap();
        let (va, vb, vf) = (g.value(a.channels).data(), g.value(b.channels).data(), g.value(f.channels).data());
        for i in 4..8 {
            assert_eq!(vf[i], va[i].max(vb[i]));
        }
    }
}
