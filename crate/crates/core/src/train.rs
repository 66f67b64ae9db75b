//! Episodic training steps.
//!
//! A step draws `batch` episodes, computes each episode's gradient on its own
//! graph, averages them in episode order and applies one AdamW update. The
//! per-episode work is exposed separately so callers can spread it over
//! threads without changing results.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::Rng;

use crate::episode::{Episode, TaskMode};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{DropPolicy, Model};
use crate::optim::{AdamWConfig, AdamWState};
use crate::params::ParamId;
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::synth::SynthWorld;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Dice weight in the total loss.
    pub lambda: f64,
    pub keep_prob: f64,
    pub channel_drop: bool,
    /// Share of channel-drop draws that take the query-only vector, with the
    /// episode's supports withheld.
    pub query_only_rate: f64,
    /// Random horizontal flips of query and supports.
    pub flip: bool,
    pub shots: usize,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        Self {
            steps: 2000,
            batch: 4,
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            lambda: crate::loss::DEFAULT_LAMBDA,
            keep_prob: 0.7,
            channel_drop: true,
            query_only_rate: 0.2,
            flip: true,
            shots: 1,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.shots == 0 {
            return Err(Error::Config("train.batch and train.shots must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("train.lambda must lie in [0, 1]".into()));
        }
        if !(0.0 < self.keep_prob && self.keep_prob <= 1.0) {
            return Err(Error::Config("train.keep_prob must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.query_only_rate) {
            return Err(Error::Config("train.query_only_rate must lie in [0, 1]".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        Ok(())
    }

    fn episode_index(&self, step: u64, b: usize) -> u64 {
        step * self.batch as u64 + b as u64
    }
}

/// Loss components of one step (batch means).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub step: u64,
    pub total: f64,
    pub dice: f64,
    pub ce: f64,
}

/// Gradient and losses of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeGrad<S> {
    pub grads: BTreeMap<ParamId, Tensor<S>>,
    pub total: f64,
    pub dice: f64,
    pub ce: f64,
}

/// The episodes of one step, flips applied.
pub fn batch_episodes(world: &SynthWorld, cfg: &TrainConfig, step: u64) -> Result<Vec<Episode>> {
    (0..cfg.batch)
        .map(|b| {
            let index = cfg.episode_index(step, b);
            let ep = world.training_episode(cfg.seed, index, cfg.shots)?;
            Ok(if cfg.flip { random_flips(ep, cfg.seed, index) } else { ep })
        })
        .collect()
}

/// Independently mirrors the query and each support with probability ½.
pub fn random_flips(mut ep: Episode, seed: u64, index: u64) -> Episode {
    let mut rng = rng::stream(rng::derive(seed, 0xF11F), Stream::Sampling, index);
    if rng.gen_bool(0.5) {
        ep.query = ep.query.flip_horizontal();
        ep.query_mask = ep.query_mask.map(|m| m.flip_horizontal());
    }
    for s in &mut ep.supports {
        if rng.gen_bool(0.5) {
            s.features = s.features.flip_horizontal();
            s.mask = s.mask.flip_horizontal();
        }
    }
    ep
}

/// Forward and backward of one training episode.
pub fn episode_grad<S: Scalar>(model: &Model<S>, ep: &Episode, cfg: &TrainConfig, step: u64, b: usize) -> Result<EpisodeGrad<S>> {
    let gt = ep.query_mask.as_ref().ok_or(Error::MissingInput("query mask"))?;
    let mut g = Graph::new();
    let mut rng = rng::stream(cfg.seed, Stream::Dropout, cfg.episode_index(step, b));
    let logits = if !cfg.channel_drop {
        model.forward(&mut g, ep, TaskMode::Fss, DropPolicy::KeepAll)?
    } else if rng.gen_bool(cfg.query_only_rate) {
        model.forward(&mut g, ep, TaskMode::Zss, DropPolicy::Mode)?
    } else {
        model.forward(&mut g, ep, TaskMode::Fss, DropPolicy::Random { rng: &mut rng, keep_prob: cfg.keep_prob })?
    };
    let y = g.constant(gt.to_tensor().cast());
    let parts = crate::loss::total_loss(&mut g, logits, y, cfg.lambda)?;
    let (total, dice, ce) = (g.value(parts.total).item().to_f64(), g.value(parts.dice).item().to_f64(), g.value(parts.ce).item().to_f64());
    let grads = g.backward(parts.total)?.into_params();
    Ok(EpisodeGrad { grads, total, dice, ce })
}

/// Model plus optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer<S> {
    pub model: Model<S>,
    pub opt: AdamWState<S>,
    pub cfg: TrainConfig,
    /// Number of completed steps.
    pub step: u64,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: Model<S>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamWState::new(&model.params, cfg.optimizer());
        Ok(Self { model, opt, cfg, step: 0 })
    }

    /// Averages per-episode results (in the given order) and updates the
    /// parameters. A non-finite loss leaves the model untouched.
    pub fn apply(&mut self, results: Vec<EpisodeGrad<S>>) -> Result<StepLoss> {
        let n = results.len();
        if n == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        let inv = 1.0 / n as f64;
        let (mut total, mut dice, mut ce) = (0.0, 0.0, 0.0);
        for r in &results {
            total += r.total * inv;
            dice += r.dice * inv;
            ce += r.ce * inv;
        }
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss(self.step));
        }
        let mut mean: BTreeMap<ParamId, Tensor<S>> = BTreeMap::new();
        let scale = S::from_f64(inv);
        for r in results {
            for (id, gr) in r.grads {
                match mean.get_mut(&id) {
                    Some(acc) => acc.data_mut().iter_mut().zip(gr.data()).for_each(|(a, &b)| *a += b * scale),
                    None => {
                        mean.insert(id, gr.map(|v| v * scale));
                    }
                }
            }
        }
        self.opt.step(&mut self.model.params, &mean)?;
        let out = StepLoss { step: self.step, total, dice, ce };
        self.step += 1;
        Ok(out)
    }

    /// One full step on the calling thread.
    pub fn step_serial(&mut self, world: &SynthWorld) -> Result<StepLoss> {
        let eps = batch_episodes(world, &self.cfg, self.step)?;
        let results = eps
            .iter()
            .enumerate()
            .map(|(b, ep)| episode_grad(&self.model, ep, &self.cfg, self.step, b))
            .collect::<Result<Vec<_>>>()?;
        self.apply(results)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Geometry, ModelConfig};
    use crate::nn::Init;
    use crate::synth::{StageSpec, SynthConfig};

    fn setup(seed: u64) -> (SynthWorld, Trainer<f32>) {
        let scfg = SynthConfig {
            image_size: 8,
            stages: alloc::vec![StageSpec { grid: 4, layers: 1 }, StageSpec { grid: 2, layers: 1 }],
            feat_dim: 6,
            text_dim: 4,
            clip_grid: 2,
            ..SynthConfig::default()
        };
        let world = SynthWorld::new(&scfg).unwrap();
        let model = Model::new(ModelConfig { model_dim: 8, heads: 2, ..Default::default() }, Geometry::of_synth(&scfg), seed, Init::Random).unwrap();
        let cfg = TrainConfig { batch: 2, seed, ..TrainConfig::default() };
        (world, Trainer::new(model, cfg).unwrap())
    }

    #[test]
    fn same_seed_same_trace() {
        let run = || {
            let (world, mut t) = setup(4);
            (0..3).map(|_| t.step_serial(&world).unwrap().total).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_loss_keeps_parameters() {
        let (_, mut t) = setup(1);
        let before = t.model.params.clone();
        let bad = EpisodeGrad { grads: BTreeMap::new(), total: f64::NAN, dice: 0.0, ce: 0.0 };
        assert_eq!(t.apply(alloc::vec![bad]), Err(Error::NonFiniteLoss(0)));
        assert_eq!(t.model.params, before);
    }

    #[test]
    fn query_only_draws_ignore_supports() {
        let (world, mut t) = setup(2);
        t.cfg.query_only_rate = 1.0;
        let ep = world.training_episode(2, 0, 1).unwrap();
        let mut other = ep.clone();
        other.supports = world.training_episode(2, 9, 1).unwrap().supports;
        let a = episode_grad(&t.model, &ep, &t.cfg, 0, 0).unwrap();
        let b = episode_grad(&t.model, &other, &t.cfg, 0, 0).unwrap();
        assert_eq!(a.total, b.total);
        let cross = a.grads.keys().filter(|&&id| t.model.params.name(id).contains(".cross.")).count();
        assert_eq!(cross, 0);

        t.cfg.query_only_rate = 0.0;
        let c = episode_grad(&t.model, &ep, &t.cfg, 0, 0).unwrap();
        assert!(c.grads.keys().any(|&id| t.model.params.name(id).contains(".cross.")));
    }

    #[test]
    fn config_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.lambda, c.batch, c.steps, c.keep_prob), (0.001, 0.5, 4, 2000, 0.7));
    }
}
