//! Measurement routines shared by the gradient, oracle and property tests
//! and by the acceptance runner. Each returns what it measured so callers
//! decide how to report it.
#![allow(dead_code)]

use pgma_core::affinity::{cross_affinity, masked_flatten, self_affinity};
use pgma_core::assemble::gau_tensor;
use pgma_core::episode::{Episode, Mask, TaskMode};
use pgma_core::graph::Graph;
use pgma_core::loss::total_loss;
use pgma_core::model::{DropPolicy, Geometry, Model, ModelConfig};
use pgma_core::nn::Init;
use pgma_core::prior::{clip_prior_at_grid, minmax_norm, support_gt_prior, textual_prior, textual_prior_at, visual_prior};
use pgma_core::rng::{self, Stream};
use pgma_core::synth::{StageSpec, SynthConfig, SynthWorld};
use pgma_core::{Result, Tensor, Var};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::Rng;

pub const STEP: f64 = 1e-6;
pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
pub const ORACLE_TOL: f64 = 1e-6;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, Stream::Sampling, 0);
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0))
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    random(shape, seed).map(|v| 0.05 + 0.9 * (v + 1.0) / 2.0)
}

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, or the plain difference norm when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        diff
    } else {
        diff / norm
    }
}

/// Reduces the operator output to a scalar with fixed random weights so
/// every output element contributes a distinct amount.
fn scalarize(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    if g.shape(out).is_empty() {
        return Ok(out);
    }
    let w = g.constant(random(g.shape(out), seed ^ 0xABCD));
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn eval(f: &OpFn, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let l = scalarize(&mut g, out, 7).unwrap();
    g.value(l).item()
}

/// Worst relative error between analytic and central-difference gradients
/// over the inputs of one operator.
fn op_error(inputs: &[Tensor<f64>], f: &OpFn) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let l = scalarize(&mut g, out, 7).unwrap();
    let grads = g.backward(l).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let numeric: Vec<f64> = (0..inputs[i].len())
            .map(|k| {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[k] += STEP;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[k] -= STEP;
                (eval(f, &plus) - eval(f, &minus)) / (2.0 * STEP)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn op(name: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> (&'static str, Vec<Tensor<f64>>, OpFn) {
    (name, inputs, Box::new(f))
}

fn operators() -> Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> {
    let gt = Tensor::from_fn([3, 4], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    let gt2 = gt.clone();
    vec![
        op("matmul", vec![random(&[3, 4], 1), random(&[4, 5], 2)], |g, v| g.matmul(v[0], v[1])),
        op("transpose", vec![random(&[3, 4], 3)], |g, v| g.transpose(v[0])),
        op("reshape", vec![random(&[3, 4], 4)], |g, v| g.reshape(v[0], &[2, 6])),
        op("concat0", vec![random(&[2, 3], 5), random(&[4, 3], 6)], |g, v| g.concat(&[v[0], v[1]], 0)),
        op("concat1", vec![random(&[2, 3], 7), random(&[2, 2], 8)], |g, v| g.concat(&[v[0], v[1]], 1)),
        op("narrow", vec![random(&[3, 5, 2], 9)], |g, v| g.narrow(v[0], 1, 1, 3)),
        op("linear", vec![random(&[4, 3], 10), random(&[3, 5], 11), random(&[5], 12)], |g, v| g.linear(v[0], v[1], v[2])),
        op("add", vec![random(&[3, 4], 20), random(&[3, 4], 21)], |g, v| g.add(v[0], v[1])),
        op("sub", vec![random(&[3, 4], 22), random(&[3, 4], 23)], |g, v| g.sub(v[0], v[1])),
        op("mul", vec![random(&[3, 4], 24), random(&[3, 4], 25)], |g, v| g.mul(v[0], v[1])),
        op("maximum", vec![random(&[3, 4], 26), random(&[3, 4], 27)], |g, v| g.maximum(v[0], v[1])),
        op("scale", vec![random(&[3, 4], 28)], |g, v| Ok(g.scale(v[0], -1.7))),
        op("relu", vec![random(&[3, 4], 29)], |g, v| Ok(g.relu(v[0]))),
        op("gelu", vec![random(&[3, 4], 30)], |g, v| Ok(g.gelu(v[0]))),
        op("sigmoid", vec![random(&[3, 4], 31)], |g, v| Ok(g.sigmoid(v[0]))),
        op("mean", vec![random(&[3, 4], 32)], |g, v| Ok(g.mean(v[0]))),
        op("sum", vec![random(&[3, 4], 33)], |g, v| Ok(g.sum(v[0]))),
        op("softmax0", vec![random(&[4, 3], 40)], |g, v| g.softmax(v[0], 0)),
        op("softmax1", vec![random(&[4, 3], 41)], |g, v| g.softmax(v[0], 1)),
        op("layer_norm", vec![random(&[3, 5], 42), random(&[5], 43), random(&[5], 44)], |g, v| g.layer_norm(v[0], v[1], v[2])),
        op("minmax0", vec![random(&[5, 3], 45)], |g, v| g.minmax_norm(v[0], 0)),
        op("minmax1", vec![random(&[5, 3], 46)], |g, v| g.minmax_norm(v[0], 1)),
        op("max_axis0", vec![random(&[4, 3], 47)], |g, v| g.max_axis(v[0], 0)),
        op("max_axis1", vec![random(&[4, 3], 48)], |g, v| g.max_axis(v[0], 1)),
        op("max_axes", vec![random(&[2, 3, 4], 49)], |g, v| g.max_axes(v[0], &[0, 2])),
        op("attention", vec![random(&[3, 4], 50), random(&[5, 4], 51), random(&[5, 4], 52)], |g, v| g.attention(v[0], v[1], v[2], 2)),
        op("conv3", vec![random(&[2, 5, 4], 53), random(&[3, 2, 3, 3], 54), random(&[3], 55)], |g, v| g.conv2d(v[0], v[1], v[2])),
        op("conv1", vec![random(&[3, 4, 4], 56), random(&[2, 3, 1, 1], 57), random(&[2], 58)], |g, v| g.conv2d(v[0], v[1], v[2])),
        op("resize_up", vec![random(&[2, 3, 4], 59)], |g, v| g.resize(v[0], 6, 5)),
        op("resize_down", vec![random(&[2, 6, 6], 60)], |g, v| g.resize(v[0], 4, 3)),
        op("dice", vec![positive(&[3, 4], 70)], move |g, v| {
            let y = g.constant(gt.clone());
            g.dice_loss(v[0], y)
        }),
        op("bce", vec![positive(&[3, 4], 71)], move |g, v| {
            let y = g.constant(gt2.clone());
            g.bce_loss(v[0], y)
        }),
    ]
}

/// Gradient error of every differentiable operator.
pub fn operator_errors() -> Vec<(&'static str, f64)> {
    operators().iter().map(|(name, inputs, f)| (*name, op_error(inputs, f))).collect()
}

fn tiny_world() -> (SynthConfig, SynthWorld) {
    let cfg = SynthConfig {
        image_size: 12,
        stages: vec![StageSpec { grid: 6, layers: 2 }, StageSpec { grid: 3, layers: 1 }],
        feat_dim: 5,
        text_dim: 4,
        clip_grid: 3,
        ..SynthConfig::default()
    };
    let world = SynthWorld::new(&cfg).unwrap();
    (cfg, world)
}

fn model_loss(model: &Model<f64>, ep: &Episode) -> f64 {
    let mut g = Graph::new();
    let logits = model.forward(&mut g, ep, TaskMode::Fss, DropPolicy::KeepAll).unwrap();
    let y = g.constant(ep.query_mask.as_ref().unwrap().to_tensor().cast());
    let parts = total_loss(&mut g, logits, y, 0.5).unwrap();
    g.value(parts.total).item()
}

pub struct EndToEnd {
    pub error: f64,
    /// Parameter tensors probed, and whether both attention blocks were among them.
    pub tensors: usize,
    pub covers_high_order: bool,
}

/// Full-model loss gradient against central differences, two entries per
/// parameter tensor, on 6×6 and 3×3 grids.
pub fn end_to_end() -> EndToEnd {
    let (cfg, world) = tiny_world();
    let ep = world.training_episode(3, 0, 1).unwrap();
    let mc = ModelConfig { model_dim: 8, heads: 2, decoder: pgma_core::decoder::DecoderConfig { width: 4, low_width: 2 }, ..Default::default() };
    let mut model: Model<f64> = Model::new(mc, Geometry::of_synth(&cfg), 5, Init::Random).unwrap();
    // Zero-initialized biases put relus exactly on their kink; move off it.
    let mut jitter = rng::stream(12, Stream::Sampling, 0);
    let ids: Vec<_> = model.params.ids().collect();
    for &id in &ids {
        model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v += jitter.gen_range(-0.05..0.05));
    }

    let mut g = Graph::new();
    let logits = model.forward(&mut g, &ep, TaskMode::Fss, DropPolicy::KeepAll).unwrap();
    let y = g.constant(ep.query_mask.as_ref().unwrap().to_tensor().cast());
    let parts = total_loss(&mut g, logits, y, 0.5).unwrap();
    let grads = g.backward(parts.total).unwrap();

    let mut pick = rng::stream(11, Stream::Sampling, 0);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let (mut cross, mut own) = (false, false);
    for &id in &ids {
        let name = model.params.name(id).to_string();
        cross |= name.contains(".cross.");
        own |= name.contains(".self.");
        let n = model.params.get(id).len();
        let g_all = grads.param(id).unwrap_or_else(|| panic!("no gradient for {name}"));
        for _ in 0..2 {
            let k = pick.gen_range(0..n);
            let orig = model.params.get(id).data()[k];
            model.params.get_mut(id).data_mut()[k] = orig + STEP;
            let up = model_loss(&model, &ep);
            model.params.get_mut(id).data_mut()[k] = orig - STEP;
            let down = model_loss(&model, &ep);
            model.params.get_mut(id).data_mut()[k] = orig;
            analytic.push(g_all.data()[k]);
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    EndToEnd { error: rel_err(&analytic, &numeric), tensors: ids.len(), covers_high_order: cross && own }
}

fn brute_gau(a: &[Vec<f64>], p: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = a
        .iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut num = 0.0;
            let mut den = 0.0;
            for (i, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                num += e * p[i];
                den += e;
            }
            num / den
        })
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    raw.iter().map(|v| (v - lo) / (hi - lo + 1e-8)).collect()
}

/// Largest deviation of `gau` from the loop oracle over `cases` random
/// instances at three affinity temperatures.
pub fn gau_oracle(cases: usize) -> f64 {
    let mut r = rng::stream(100, Stream::Sampling, 0);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let lt = r.gen_range(1..=40);
        let ls = r.gen_range(1..=40);
        let temp = [0.1, 1.0, 10.0][case % 3];
        let a: Vec<Vec<f64>> = (0..lt).map(|_| (0..ls).map(|_| temp * r.gen_range(-1.0..1.0)).collect()).collect();
        let p: Vec<f64> = (0..ls).map(|_| r.gen_range(0.0..1.0)).collect();
        let expect = brute_gau(&a, &p);
        let at = Tensor::new([lt, ls], a.concat()).unwrap();
        let pt = Tensor::new([ls], p).unwrap();
        let got = gau_tensor(&at, &pt).unwrap();
        assert_eq!(got.shape(), &[lt, 1]);
        for (&g, &e) in got.data().iter().zip(&expect) {
            worst = worst.max((g - e).abs());
        }
    }
    worst
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

fn pixel(f: &Tensor<f64>, i: usize) -> &[f64] {
    let d = f.shape()[2];
    &f.data()[i * d..(i + 1) * d]
}

/// Largest deviation of the cross and self affinities from double-loop
/// cosine similarities over `cases` instances.
pub fn affinity_oracle(cases: usize) -> f64 {
    let mut r = rng::stream(101, Stream::Sampling, 0);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let (h, w) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let (hq, wq) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let d = r.gen_range(1..=12);
        let fs = Tensor::from_fn([h, w, d], |_| r.gen_range(-1.0..1.0));
        let fq = Tensor::from_fn([hq, wq, d], |_| r.gen_range(-1.0..1.0));
        // Binary, soft, and (every tenth case) empty masks.
        let mask = match case % 10 {
            0 => Tensor::zeros([h, w]),
            k if k % 2 == 0 => Tensor::from_fn([h, w], |_| r.gen_range(0.0..1.0)),
            _ => Tensor::from_fn([h, w], |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }),
        };
        let (ls, lq) = (h * w, hq * wq);
        let fs_hat = masked_flatten(&fs, Some(&mask)).unwrap();
        let fq_hat = masked_flatten(&fq, None).unwrap();
        let a_sq = cross_affinity(&fs_hat, &fq_hat).unwrap();
        let a_ss = self_affinity(&fs_hat).unwrap();
        let a_qq = self_affinity(&fq_hat).unwrap();
        assert_eq!(a_sq.shape(), &[ls, lq]);

        let masked = |i: usize| -> Vec<f64> { pixel(&fs, i).iter().map(|v| v * mask.data()[i]).collect() };
        for i in 0..ls {
            for j in 0..lq {
                worst = worst.max((a_sq.at2(i, j) - cosine(&masked(i), pixel(&fq, j))).abs());
            }
            for j in 0..ls {
                worst = worst.max((a_ss.at2(i, j) - cosine(&masked(i), &masked(j))).abs());
            }
        }
        for i in 0..lq {
            for j in 0..lq {
                worst = worst.max((a_qq.at2(i, j) - cosine(pixel(&fq, i), pixel(&fq, j))).abs());
            }
        }
    }
    worst
}

pub fn matrix(max_r: usize, max_c: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_r, 1..=max_c).prop_flat_map(move |(r, c)| prop::collection::vec(lo..hi, r * c).prop_map(move |d| Tensor::new([r, c], d).unwrap()))
}

pub fn map3(max_hw: usize, max_d: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_hw, 1..=max_hw, 1..=max_d)
        .prop_flat_map(|(h, w, d)| prop::collection::vec(-1.0f64..1.0, h * w * d).prop_map(move |v| Tensor::new([h, w, d], v).unwrap()))
}

pub fn in_unit(v: &[f64]) -> bool {
    v.iter().all(|&x| (0.0..=1.0).contains(&x))
}

pub fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S: Strategy>(name: &str, cases: u32, strategy: S, test: impl Fn(S::Value) -> std::result::Result<(), TestCaseError>) -> std::result::Result<(), String> {
    runner(cases).run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

/// Every prior map lies in [0, 1].
pub fn priors_in_unit_interval(cases: u32) -> std::result::Result<(), String> {
    let strategy = (map3(6, 5), matrix(12, 12, -1.0, 1.0), prop::collection::vec(any::<bool>(), 64), (1usize..20, 1usize..20));
    run("priors in [0, 1]", cases, strategy, |(clip, a, bits, (oh, ow))| {
        let d = clip.shape()[2];
        let text: Vec<f64> = (0..d).map(|i| (i as f64 * 1.3).sin()).collect();
        prop_assert!(in_unit(textual_prior(&clip, &text).unwrap().data()));
        prop_assert!(in_unit(textual_prior_at(&clip, &text, oh, ow).unwrap().data()));
        let (gh, gw) = (1 + oh / 3, 1 + ow / 3);
        prop_assert!(in_unit(clip_prior_at_grid(&clip, &text, (oh, ow), gh.min(oh), gw.min(ow)).unwrap().data()));
        prop_assert!(in_unit(&visual_prior(&a).unwrap().0));
        let mask = Mask::from_fn(8, 8, |y, x| bits[y * 8 + x]);
        prop_assert!(in_unit(support_gt_prior::<f64>(&mask, 3, 5).unwrap().data()));
        let p = Tensor::from_fn([a.shape()[1], 2], |i| bits[i % 64] as u8 as f64);
        prop_assert!(in_unit(gau_tensor(&a, &p).unwrap().data()));
        Ok(())
    })
}

pub fn minmax_idempotent(cases: u32) -> std::result::Result<(), String> {
    run("minmax idempotence", cases, prop::collection::vec(-50.0f64..50.0, 2..64), |v| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assume!(hi - lo > 1e-3);
        let once = minmax_norm(&v);
        let twice = minmax_norm(&once);
        prop_assert!(close(&once, &twice, 1e-6));
        let (mn, mx) = once.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        prop_assert!(mn.abs() < 1e-6 && (mx - 1.0).abs() < 1e-6);
        Ok(())
    })
}

/// Adding a constant to the whole affinity, or to any row, leaves `gau`
/// unchanged.
pub fn gau_shift_invariant(cases: u32) -> std::result::Result<(), String> {
    let strategy = (matrix(10, 10, -3.0, 3.0), -5.0f64..5.0, prop::collection::vec(-5.0f64..5.0, 10));
    run("gau shift invariance", cases, strategy, |(a, c, per_row)| {
        let (r, s) = (a.shape()[0], a.shape()[1]);
        let p = Tensor::from_fn([s], |i| ((i * 7) % 5) as f64 / 4.0);
        let base = gau_tensor(&a, &p).unwrap();
        let global = a.map(|v| v + c);
        prop_assert!(close(gau_tensor(&global, &p).unwrap().data(), base.data(), 1e-9));
        let rows = Tensor::from_fn([r, s], |i| a.data()[i] + per_row[i / s]);
        prop_assert!(close(gau_tensor(&rows, &p).unwrap().data(), base.data(), 1e-9));
        Ok(())
    })
}

/// Scaling any pixel's feature vector by a positive factor leaves the
/// affinities unchanged.
pub fn affinity_scale_invariant(cases: u32) -> std::result::Result<(), String> {
    run("affinity scale invariance", cases, (map3(5, 6), prop::collection::vec(0.01f64..100.0, 25)), |(fs, factors)| {
        let (h, w, d) = (fs.shape()[0], fs.shape()[1], fs.shape()[2]);
        let fq = Tensor::from_fn([4, 3, d], |i| (i as f64 * 0.61).cos());
        let scaled = Tensor::from_fn([h, w, d], |i| fs.data()[i] * factors[i / d]);
        let (a, b) = (masked_flatten(&fs, None).unwrap(), masked_flatten(&scaled, None).unwrap());
        let q = masked_flatten(&fq, None).unwrap();
        prop_assert!(close(cross_affinity(&a, &q).unwrap().data(), cross_affinity(&b, &q).unwrap().data(), 1e-9));
        prop_assert!(close(self_affinity(&a).unwrap().data(), self_affinity(&b).unwrap().data(), 1e-9));
        Ok(())
    })
}

/// The four normalization properties, stopping at the first failure.
pub fn normalization_suite(cases: u32) -> std::result::Result<(), String> {
    priors_in_unit_interval(cases)?;
    minmax_idempotent(cases)?;
    gau_shift_invariant(cases)?;
    affinity_scale_invariant(cases)
}
