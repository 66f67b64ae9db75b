//! Episode sources: the in-memory generator or a PGME dataset directory laid
//! out as `root/{train,val}/episode_{i}.pgme`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pgma_core::episode::Episode;
use pgma_core::rng::{self, Stream};
use pgma_core::synth::SynthWorld;
use pgma_core::train::{random_flips, TrainConfig};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::pgme::{load_episode_with, save_episode, Supports};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

pub fn episode_path(root: &Path, split: Split, index: usize) -> PathBuf {
    root.join(split.dir()).join(format!("episode_{index}.pgme"))
}

/// Episode files of one split, ordered by index.
pub fn list_split(root: &Path, split: Split) -> Result<Vec<PathBuf>> {
    let dir = root.join(split.dir());
    let mut found = Vec::new();
    for entry in std::fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(i) = name.strip_prefix("episode_").and_then(|r| r.strip_suffix(".pgme")).and_then(|i| i.parse::<usize>().ok()) {
            found.push((i, path));
        }
    }
    if found.is_empty() {
        bail!("no episode files in {}", dir.display());
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Writes `n_train` base-class and `n_val` novel-class episodes with
/// `shots` supports each.
pub fn write_synthetic(world: &SynthWorld, root: &Path, n_train: usize, n_val: usize, shots: usize, seed: u64) -> Result<()> {
    for split in [Split::Train, Split::Val] {
        std::fs::create_dir_all(root.join(split.dir()))?;
    }
    let jobs: Vec<(Split, usize)> = (0..n_train).map(|i| (Split::Train, i)).chain((0..n_val).map(|i| (Split::Val, i))).collect();
    jobs.par_iter().try_for_each(|&(split, i)| -> Result<()> {
        let ep = match split {
            Split::Train => world.training_episode(seed, i as u64, shots)?,
            Split::Val => world.novel_episode(seed, i as u64, shots)?,
        };
        let path = episode_path(root, split, i);
        save_episode(&path, &ep).with_context(|| format!("writing {}", path.display()))
    })
}

/// Where episodes come from.
#[derive(Clone, Debug)]
pub enum Source {
    Synth(Box<SynthWorld>),
    Files { train: Vec<PathBuf>, val: Vec<PathBuf> },
}

impl From<SynthWorld> for Source {
    fn from(world: SynthWorld) -> Self {
        Source::Synth(Box::new(world))
    }
}

impl Source {
    pub fn open_dir(root: &Path) -> Result<Self> {
        Ok(Source::Files { train: list_split(root, Split::Train).unwrap_or_default(), val: list_split(root, Split::Val)? })
    }

    /// Training episode `b` of `step`, flips applied.
    pub fn train_episode(&self, cfg: &TrainConfig, step: u64, b: usize) -> Result<Episode> {
        let index = step * cfg.batch as u64 + b as u64;
        let ep = match self {
            Source::Synth(world) => world.training_episode(cfg.seed, index, cfg.shots)?,
            Source::Files { train, .. } => {
                let mut r = rng::stream(cfg.seed, Stream::Sampling, index);
                let path = train.choose(&mut r).context("dataset has no training episodes")?;
                let ep = load_episode_with(path, Supports::First(cfg.shots)).with_context(|| format!("loading {}", path.display()))?;
                ep.with_shots(cfg.shots)
            }
        };
        Ok(if cfg.flip { random_flips(ep, cfg.seed, index) } else { ep })
    }

    /// Number of evaluation episodes available; `None` when unbounded.
    pub fn eval_len(&self) -> Option<usize> {
        match self {
            Source::Synth(_) => None,
            Source::Files { val, .. } => Some(val.len()),
        }
    }

    /// Evaluation episode `index` with its first `shots` supports, before
    /// any mode transform. Other support records are never read.
    pub fn eval_episode(&self, seed: u64, index: u64, shots: usize) -> Result<Episode> {
        match self {
            Source::Synth(world) => Ok(world.novel_episode(seed, index, shots)?),
            Source::Files { val, .. } => {
                let path = &val[index as usize];
                load_episode_with(path, Supports::First(shots)).with_context(|| format!("loading {}", path.display()))
            }
        }
    }
}
