//! Evaluation of a trained model under a task mode.

use crate::corrupt::apply_mode;
use crate::episode::{Episode, Mask, TaskMode};
use crate::error::{Error, Result};
use crate::metrics::{threshold, IouAccumulator};
use crate::model::Model;
use crate::prior::textual_prior_at;
use crate::rng;
use crate::scalar::Scalar;
use crate::synth::SynthWorld;
use crate::tensor::Tensor;

/// Threshold applied to the upsampled textual prior by the baseline.
pub const BASELINE_THRESHOLD: f64 = 0.5;

/// The text-only reference: `p_q^clip` at image size, above one half.
pub fn baseline_mask(ep: &Episode) -> Result<Mask> {
    let clip: Tensor<f64> = ep.query.clip.cast();
    let text: alloc::vec::Vec<f64> = ep.text_embed.iter().map(|&v| v as f64).collect();
    let (h, w) = ep.query.image_size;
    let p = textual_prior_at(&clip, &text, h, w)?;
    Ok(Mask { height: h, width: w, data: p.data().iter().map(|&v| u8::from(v > BASELINE_THRESHOLD)).collect() })
}

/// Seed of the corruption applied to evaluation episode `index`.
pub fn mode_seed(seed: u64, index: u64) -> u64 {
    rng::derive(seed ^ 0xC0AA_0F7E, index)
}

/// Predicted mask for one raw episode after applying the mode transform.
pub fn predict_mask<S: Scalar>(model: &Model<S>, ep: &Episode, mode: TaskMode, seed: u64) -> Result<Mask> {
    let seen = apply_mode(ep, mode, seed)?;
    threshold(&model.predict(&seen, mode)?)
}

/// What to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scorer {
    Model(TaskMode),
    Baseline,
}

/// Scores one evaluation episode into `acc`.
pub fn score_episode<S: Scalar>(model: Option<&Model<S>>, ep: &Episode, scorer: Scorer, seed: u64, acc: &mut IouAccumulator) -> Result<()> {
    let gt = ep.query_mask.as_ref().ok_or(Error::MissingInput("query mask"))?;
    let pred = match scorer {
        Scorer::Baseline => baseline_mask(ep)?,
        Scorer::Model(mode) => predict_mask(model.ok_or(Error::MissingInput("model"))?, ep, mode, seed)?,
    };
    acc.add(ep.class_id, &pred, gt)
}

/// Serial evaluation over `episodes` novel-class synthetic episodes.
pub fn evaluate_synthetic<S: Scalar>(
    model: Option<&Model<S>>,
    world: &SynthWorld,
    scorer: Scorer,
    episodes: u64,
    shots: usize,
    seed: u64,
) -> Result<IouAccumulator> {
    let mut acc = IouAccumulator::new();
    for i in 0..episodes {
        let ep = world.novel_episode(seed, i, shots)?;
        score_episode(model, &ep, scorer, mode_seed(seed, i), &mut acc)?;
    }
    Ok(acc)
}
