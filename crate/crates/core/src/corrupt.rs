//! Support-mask and feature corruption, bounding-box masks, and the input
//! transform of every task mode.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::episode::{Episode, FeatureStack, Level, Mask, TaskMode};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Structuring-element radius per corruption level.
pub const MASK_RADII: [usize; 3] = [1, 2, 4];
/// Noise scale (fraction of each map's standard deviation) per level.
pub const FEATURE_SIGMAS: [f64; 3] = [0.05, 0.1, 0.2];

/// Tight axis-aligned box around the foreground, filled.
pub fn bbox_fill(mask: &Mask) -> Result<Mask> {
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if y0 == usize::MAX {
        return Err(Error::EmptyMask);
    }
    Ok(Mask::from_fn(mask.height, mask.width, |y, x| (y0..=y1).contains(&y) && (x0..=x1).contains(&x)))
}

/// Square-element dilation (`grow`) or erosion with the given radius.
pub fn morph(mask: &Mask, radius: usize, grow: bool) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height as isize, mask.width as isize);
    let r = radius as isize;
    Mask::from_fn(mask.height, mask.width, |y, x| {
        let (y, x) = (y as isize, x as isize);
        let mut any = false;
        let mut all = true;
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xx) = (y + dy, x + dx);
                // Outside the image counts as background.
                let v = (0..h).contains(&yy) && (0..w).contains(&xx) && mask.get(yy as usize, xx as usize);
                any |= v;
                all &= v;
            }
        }
        if grow {
            any
        } else {
            all
        }
    })
}

fn level_index(level: u8) -> Result<usize> {
    match level {
        1..=3 => Ok(level as usize - 1),
        _ => Err(Error::InvalidArgument { op: "corrupt", reason: alloc::format!("level {level} not in 1..=3") }),
    }
}

/// Erodes or dilates (a fair coin per seed) by `radius`. An erosion that
/// would wipe the mask out becomes a dilation.
pub fn corrupt_mask_radius(mask: &Mask, radius: usize, seed: u64) -> Mask {
    let mut rng = rng::stream(seed, Stream::Corrupt, 0);
    let grow = rng.gen_bool(0.5);
    let out = morph(mask, radius, grow);
    if !grow && out.area() == 0 && mask.area() > 0 {
        morph(mask, radius, true)
    } else {
        out
    }
}

pub fn corrupt_mask(mask: &Mask, level: u8, seed: u64) -> Result<Mask> {
    Ok(corrupt_mask_radius(mask, MASK_RADII[level_index(level)?], seed))
}

fn noisy(t: &Tensor<f32>, sigma: f64, rng: &mut rng::Rng) -> Tensor<f32> {
    if sigma == 0.0 {
        return t.clone();
    }
    let n = t.len() as f64;
    let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let scale = sigma * libm::sqrt(var);
    let data = t.data().iter().map(|&v| v + (scale * rng.sample::<f64, _>(StandardNormal)) as f32).collect();
    Tensor { shape: t.shape().to_vec(), data }
}

/// Adds Gaussian noise with standard deviation `sigma` times each map's own
/// standard deviation to every feature and clip map.
pub fn noise_features(stack: &FeatureStack, sigma: f64, seed: u64) -> FeatureStack {
    let mut rng = rng::stream(seed, Stream::Corrupt, 1);
    FeatureStack {
        levels: stack.levels.iter().map(|l| Level { stage: l.stage, layer: l.layer, map: noisy(&l.map, sigma, &mut rng) }).collect(),
        clip: noisy(&stack.clip, sigma, &mut rng),
        image_size: stack.image_size,
    }
}

pub fn corrupt_image_features(stack: &FeatureStack, level: u8, seed: u64) -> Result<FeatureStack> {
    Ok(noise_features(stack, FEATURE_SIGMAS[level_index(level)?], seed))
}

/// Rewrites an episode into what the model may see under `mode`: zero-shot
/// drops the supports, bbox and corrupt-mask replace support masks,
/// corrupt-image perturbs every feature stack. Co-segmentation keeps the
/// masks in the container; the model ignores them.
pub fn apply_mode(ep: &Episode, mode: TaskMode, seed: u64) -> Result<Episode> {
    let mut out = ep.clone();
    match mode {
        TaskMode::Fss | TaskMode::Coseg => {}
        TaskMode::Zss => out.supports.clear(),
        TaskMode::Bbox => {
            for s in &mut out.supports {
                s.mask = bbox_fill(&s.mask)?;
            }
        }
        TaskMode::CorruptMask(level) => {
            for (k, s) in out.supports.iter_mut().enumerate() {
                s.mask = corrupt_mask(&s.mask, level, rng::derive(seed, k as u64))?;
            }
        }
        TaskMode::CorruptImage(level) => {
            out.query = corrupt_image_features(&out.query, level, rng::derive(seed, u64::MAX))?;
            for (k, s) in out.supports.iter_mut().enumerate() {
                s.features = corrupt_image_features(&s.features, level, rng::derive(seed, k as u64))?;
            }
        }
    }
    Ok(out)
}
