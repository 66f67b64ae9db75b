//! Multi-threaded training and evaluation drivers.
//!
//! Episodes of a step are processed in parallel, but gradients are reduced
//! in episode order, so results do not depend on the thread count.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pgma_core::corrupt::apply_mode;
use pgma_core::episode::TaskMode;
use pgma_core::eval::{baseline_mask, mode_seed, Scorer};
use pgma_core::metrics::{threshold, IouAccumulator};
use pgma_core::model::{Geometry, Model};
use pgma_core::nn::Init;
use pgma_core::train::{episode_grad, StepLoss, Trainer};
use pgma_core::Error;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, Meta};
use crate::config::RunConfig;
use crate::dataset::Source;

pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

/// Input geometry of the model trained on `source`.
pub fn geometry(cfg: &RunConfig, source: &Source) -> Result<Geometry> {
    match source {
        Source::Synth(_) => Ok(Geometry::of_synth(&cfg.synth)),
        Source::Files { .. } => {
            let ep = source.train_episode(&cfg.train, 0, 0)?;
            Ok(Geometry::of_stack(&ep.query, ep.text_embed.len()))
        }
    }
}

pub fn new_trainer(cfg: &RunConfig, source: &Source) -> Result<Trainer<f32>> {
    let model = Model::new(cfg.model.clone(), geometry(cfg, source)?, cfg.train.seed, Init::Random)?;
    Ok(Trainer::new(model, cfg.train.clone())?)
}

pub fn checkpoint_of(cfg: &RunConfig, t: &Trainer<f32>) -> Checkpoint {
    Checkpoint {
        meta: Meta { run: cfg.clone(), config_hash: cfg.hash(), geometry: t.model.geometry.clone() },
        step: t.step,
        params: t.model.params.clone(),
        opt: Some(t.opt.clone()),
    }
}

/// Continues training from a checkpoint's parameters and optimizer state.
pub fn resume_trainer(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Trainer<f32>> {
    let mut t = Trainer::new(ckpt.model()?, cfg.train.clone())?;
    if let Some(opt) = &ckpt.opt {
        t.opt = opt.clone();
    }
    t.step = ckpt.step;
    Ok(t)
}

/// One step: parallel per-episode gradients, ordered reduction, update.
pub fn step(t: &mut Trainer<f32>, source: &Source) -> Result<StepLoss> {
    let (model, cfg, s) = (&t.model, &t.cfg, t.step);
    let grads = (0..cfg.batch)
        .into_par_iter()
        .map(|b| -> Result<_> {
            let ep = source.train_episode(cfg, s, b)?;
            Ok(episode_grad(model, &ep, cfg, s, b)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(t.apply(grads)?)
}

pub struct TrainOutput {
    pub trainer: Trainer<f32>,
    pub losses: Vec<StepLoss>,
    pub last_checkpoint: PathBuf,
}

/// Trains until `cfg.train.steps`, writing `loss.csv`, periodic
/// `step_{n}.pgmc` files and `last.pgmc` into `out`. A non-finite loss
/// stops the run with `last.pgmc` holding the parameters before the bad
/// step.
pub fn train(cfg: &RunConfig, source: &Source, mut t: Trainer<f32>, out: &Path, mut progress: impl FnMut(&StepLoss)) -> Result<TrainOutput> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    let csv_path = out.join("loss.csv");
    let mut csv = BufWriter::new(File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?);
    writeln!(csv, "step,total,dice,ce")?;
    let last = out.join("last.pgmc");
    let mut losses = Vec::new();
    while t.step < cfg.train.steps {
        let l = match step(&mut t, source) {
            Ok(l) => l,
            Err(e) => {
                csv.flush()?;
                checkpoint_of(cfg, &t).save(&last)?;
                if let Some(Error::NonFiniteLoss(s)) = e.downcast_ref::<Error>() {
                    anyhow::bail!("loss became non-finite at step {s}; last good parameters saved to {}", last.display());
                }
                return Err(e);
            }
        };
        writeln!(csv, "{},{},{},{}", l.step, l.total, l.dice, l.ce)?;
        progress(&l);
        losses.push(l);
        let every = cfg.train.checkpoint_every;
        if every > 0 && t.step % every == 0 {
            csv.flush()?;
            let ck = checkpoint_of(cfg, &t);
            ck.save(out.join(format!("step_{}.pgmc", t.step)))?;
            ck.save(&last)?;
        }
    }
    csv.flush()?;
    checkpoint_of(cfg, &t).save(&last)?;
    Ok(TrainOutput { trainer: t, losses, last_checkpoint: last })
}

/// What an evaluation run scores.
#[derive(Clone, Copy, Debug)]
pub struct EvalSpec {
    pub scorer: Scorer,
    pub episodes: u64,
    pub shots: usize,
    pub seed: u64,
}

impl EvalSpec {
    fn supports(&self) -> usize {
        match self.scorer {
            Scorer::Model(m) if m.uses_supports() => self.shots,
            _ => 0,
        }
    }
}

/// Scores `spec.episodes` evaluation episodes (all of them for a dataset
/// when `episodes` is zero) in parallel.
pub fn evaluate(model: Option<&Model<f32>>, source: &Source, spec: EvalSpec) -> Result<IouAccumulator> {
    let n = match (source.eval_len(), spec.episodes) {
        (Some(len), 0) => len as u64,
        (Some(len), e) => e.min(len as u64),
        (None, e) => e,
    };
    let per_episode = (0..n)
        .into_par_iter()
        .map(|i| -> Result<IouAccumulator> {
            let ep = source.eval_episode(spec.seed, i, spec.supports())?;
            let gt = ep.query_mask.as_ref().context("evaluation episode has no query mask")?;
            let pred = match spec.scorer {
                Scorer::Baseline => baseline_mask(&ep)?,
                Scorer::Model(mode) => {
                    let model = model.context("model scorer needs a checkpoint")?;
                    let seen = apply_mode(&ep, mode, mode_seed(spec.seed, i))?;
                    threshold(&model.predict(&seen, mode)?)?
                }
            };
            let mut acc = IouAccumulator::new();
            acc.add(ep.class_id, &pred, gt)?;
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = IouAccumulator::new();
    per_episode.iter().for_each(|a| acc.merge(a));
    Ok(acc)
}

/// Parses a mode string, accepting the baseline as `baseline`.
pub fn parse_scorer(s: &str) -> Result<Scorer> {
    if s == "baseline" {
        return Ok(Scorer::Baseline);
    }
    let mode: TaskMode = s.parse().map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok(Scorer::Model(mode))
}
