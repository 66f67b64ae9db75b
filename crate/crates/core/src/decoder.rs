//! Hierarchical decoder and channel-drop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::assemble::{availability, CHANNELS};
use crate::episode::TaskMode;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv, LayerNorm};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropOrigin {
    RandomTraining,
    ModeDeterministic,
    AllKeep,
}

/// Per-channel keep flags for one level; at least one flag is set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropVector {
    pub keep: [bool; CHANNELS],
    pub origin: DropOrigin,
}

impl DropVector {
    pub fn all_keep() -> Self {
        Self { keep: [true; CHANNELS], origin: DropOrigin::AllKeep }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Independent Bernoulli(`keep_prob`) flags, redrawn until one is kept.
    pub fn sample<R: Rng>(rng: &mut R, keep_prob: f64) -> Self {
        let p = keep_prob.clamp(0.0, 1.0);
        if p == 0.0 {
            // Degenerate configuration: fall back to keeping everything.
            return Self::all_keep();
        }
        loop {
            let keep: [bool; CHANNELS] = core::array::from_fn(|_| rng.gen_bool(p));
            if keep.iter().any(|&k| k) {
                return Self { keep, origin: DropOrigin::RandomTraining };
            }
        }
    }
}

/// The deterministic drop vector matching what a task mode can provide.
pub fn mode_drop(mode: TaskMode) -> DropVector {
    DropVector { keep: availability(mode), origin: DropOrigin::ModeDeterministic }
}

/// Zeros dropped channels of a `(10, h, w)` level input. Kept channels are not
/// rescaled; an all-keep vector returns the input node itself.
pub fn channel_drop<S: Scalar>(g: &mut Graph<S>, x: Var, pi: &DropVector) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.first() != Some(&CHANNELS) {
        return shape_err("channel_drop", &s, &[CHANNELS]);
    }
    if pi.kept() == 0 {
        return Err(Error::EmptyDropVector);
    }
    if pi.kept() == CHANNELS {
        return Ok(x);
    }
    let per = s[1..].iter().product::<usize>();
    let mask = Tensor::from_fn(s.clone(), |i| if pi.keep[i / per] { S::ONE } else { S::ZERO });
    let m = g.constant(mask);
    g.mul(x, m)
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct DecoderConfig {
    pub width: usize,
    pub low_width: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { width: 32, low_width: 16 }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvBlock {
    conv1: Conv,
    ln1: LayerNorm,
    conv2: Conv,
    ln2: LayerNorm,
}

impl ConvBlock {
    fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, store, x)?;
        let y = self.ln1.forward_channels(g, store, y)?;
        let y = g.relu(y);
        let y = self.conv2.forward(g, store, y)?;
        let y = self.ln2.forward_channels(g, store, y)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
struct Stage {
    block: ConvBlock,
    fuse: Option<Conv>,
}

/// Decoder over levels given coarse to fine.
#[derive(Clone, Debug)]
pub struct Decoder {
    stages: Vec<Stage>,
    low: Conv,
    low_fuse: Conv,
    head: Conv,
}

fn block_params<S: Scalar, R: Rng>(store: &mut ParamStore<S>, prefix: &str, cin: usize, width: usize, rng: &mut R) -> Result<ConvBlock> {
    Ok(ConvBlock {
        conv1: Conv::new(store, &format!("{prefix}.conv1"), cin, width, 3, rng)?,
        ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), width)?,
        conv2: Conv::new(store, &format!("{prefix}.conv2"), width, width, 3, rng)?,
        ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), width)?,
    })
}

fn block_bind<S: Scalar>(store: &ParamStore<S>, prefix: &str) -> Result<ConvBlock> {
    Ok(ConvBlock {
        conv1: Conv::bind(store, &format!("{prefix}.conv1"))?,
        ln1: LayerNorm::bind(store, &format!("{prefix}.ln1"))?,
        conv2: Conv::bind(store, &format!("{prefix}.conv2"))?,
        ln2: LayerNorm::bind(store, &format!("{prefix}.ln2"))?,
    })
}

impl Decoder {
    /// `levels` are checkpoint names of the pyramid levels, coarse to fine.
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, levels: &[String], low_dim: usize, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("decoder needs at least one level".into()));
        }
        let w = cfg.width;
        let mut stages = Vec::with_capacity(levels.len());
        for (i, name) in levels.iter().enumerate() {
            let block = block_params(store, &format!("decoder.{name}.block"), CHANNELS, w, rng)?;
            let fuse = if i == 0 { None } else { Some(Conv::new(store, &format!("decoder.{name}.fuse"), 2 * w, w, 1, rng)?) };
            stages.push(Stage { block, fuse });
        }
        Ok(Self {
            stages,
            low: Conv::new(store, "decoder.low.proj", low_dim, cfg.low_width, 1, rng)?,
            low_fuse: Conv::new(store, "decoder.low_fuse", w + cfg.low_width, w, 1, rng)?,
            head: Conv::new(store, "decoder.head", w, 1, 1, rng)?,
        })
    }

    pub fn bind<S: Scalar>(store: &ParamStore<S>, levels: &[String]) -> Result<Self> {
        let mut stages = Vec::with_capacity(levels.len());
        for (i, name) in levels.iter().enumerate() {
            let block = block_bind(store, &format!("decoder.{name}.block"))?;
            let fuse = if i == 0 { None } else { Some(Conv::bind(store, &format!("decoder.{name}.fuse"))?) };
            stages.push(Stage { block, fuse });
        }
        Ok(Self {
            stages,
            low: Conv::bind(store, "decoder.low.proj")?,
            low_fuse: Conv::bind(store, "decoder.low_fuse")?,
            head: Conv::bind(store, "decoder.head")?,
        })
    }

    /// `levels`: `(10, h, w)` inputs coarse to fine; `low`: `(d, h, w)`
    /// low-level features. Returns `(H, W)` logits.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, levels: &[Var], low: Var, out: (usize, usize)) -> Result<Var> {
        if levels.len() != self.stages.len() {
            return Err(Error::InvalidArgument { op: "decode", reason: format!("expected {} levels, got {}", self.stages.len(), levels.len()) });
        }
        let mut x: Option<Var> = None;
        for (stage, &inp) in self.stages.iter().zip(levels) {
            let s = g.shape(inp).to_vec();
            if s.len() != 3 || s[0] != CHANNELS {
                return shape_err("decode", &s, &[CHANNELS]);
            }
            let y = stage.block.forward(g, store, inp)?;
            x = Some(match (x, stage.fuse) {
                (None, _) => y,
                (Some(prev), Some(fuse)) => {
                    let up = resize_to(g, prev, s[1], s[2])?;
                    let cat = g.concat(&[up, y], 0)?;
                    let f = fuse.forward(g, store, cat)?;
                    g.relu(f)
                }
                (Some(_), None) => unreachable!("only the first stage lacks a fuse conv"),
            });
        }
        let x = x.expect("at least one level");
        let ls = g.shape(low).to_vec();
        if ls.len() != 3 {
            return shape_err("decode.low", &ls, &[]);
        }
        let x = resize_to(g, x, ls[1], ls[2])?;
        let l = self.low.forward(g, store, low)?;
        let l = g.relu(l);
        let cat = g.concat(&[x, l], 0)?;
        let f = self.low_fuse.forward(g, store, cat)?;
        let f = g.relu(f);
        let logit = self.head.forward(g, store, f)?;
        let logit = resize_to(g, logit, out.0, out.1)?;
        g.reshape(logit, &[out.0, out.1])
    }
}

fn resize_to<S: Scalar>(g: &mut Graph<S>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x);
    if s[1] == h && s[2] == w {
        Ok(x)
    } else {
        g.resize(x, h, w)
    }
}
