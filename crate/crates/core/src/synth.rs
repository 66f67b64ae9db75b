//! Synthetic shape episodes.
//!
//! Every class is a shape family paired with a texture signature. An image
//! holds the target object drawn on top of up to `max_shapes - 1`
//! distractors from the same class partition. Backbone-like features are a
//! fixed random projection of the local appearance plus a class signal and
//! noise; the CLIP-like map carries the class text vector over foreground
//! and a random off-class mixture over background.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use rand_distr::StandardNormal;

use crate::episode::{Episode, FeatureStack, Level, Mask, Shot};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Dimension of the per-pixel appearance descriptor.
const DESC_DIM: usize = 8;
const FAMILIES: usize = 5;
const PLACEMENT_TRIES: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct StageSpec {
    pub grid: usize,
    pub layers: usize,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct SynthConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Stages from finest to coarsest.
    pub stages: Vec<StageSpec>,
    pub feat_dim: usize,
    pub text_dim: usize,
    pub clip_grid: usize,
    pub classes: usize,
    pub folds: usize,
    pub novel_fold: usize,
    pub shots: usize,
    /// Upper bound on objects per image (target included).
    pub max_shapes: usize,
    pub area_min: f64,
    pub area_max: f64,
    /// Global multiplier on every noise term below.
    pub noise: f64,
    pub feature_noise: f64,
    pub texture_jitter: f64,
    pub class_signal: f64,
    pub clip_noise: f64,
    /// How far distractor objects lean towards the target text vector.
    pub clip_confusion: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            stages: vec![StageSpec { grid: 16, layers: 2 }, StageSpec { grid: 8, layers: 2 }],
            feat_dim: 32,
            text_dim: 16,
            clip_grid: 8,
            classes: 20,
            folds: 4,
            novel_fold: 0,
            shots: 1,
            max_shapes: 3,
            area_min: 0.05,
            area_max: 0.6,
            noise: 1.0,
            feature_noise: 0.6,
            texture_jitter: 0.5,
            class_signal: 0.6,
            clip_noise: 0.5,
            clip_confusion: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.stages.is_empty() || self.stages.iter().any(|s| s.layers == 0 || s.grid == 0) {
            return bad("synth.stages needs at least one stage with nonzero grid and layers");
        }
        for s in &self.stages {
            if self.image_size % s.grid != 0 {
                return bad("synth.image_size must be a multiple of every stage grid");
            }
        }
        if self.clip_grid == 0 || self.image_size % self.clip_grid != 0 {
            return bad("synth.image_size must be a multiple of clip_grid");
        }
        if self.folds == 0 || self.classes % self.folds != 0 {
            return bad("synth.classes must split evenly into folds");
        }
        if self.novel_fold >= self.folds {
            return Err(Error::FoldOutOfRange { fold: self.novel_fold, folds: self.folds });
        }
        if self.classes / self.folds < 2 && self.max_shapes > 1 {
            return bad("synth distractors need at least two classes per partition");
        }
        if self.max_shapes == 0 || self.feat_dim == 0 || self.text_dim == 0 {
            return bad("synth.max_shapes, feat_dim and text_dim must be positive");
        }
        if !(0.0 < self.area_min && self.area_min < self.area_max && self.area_max <= 1.0) {
            return bad("synth area bounds must satisfy 0 < area_min < area_max <= 1");
        }
        let knobs = [self.noise, self.feature_noise, self.texture_jitter, self.class_signal, self.clip_noise, self.clip_confusion];
        if knobs.iter().any(|v| !v.is_finite() || *v < 0.0) || self.clip_confusion > 1.0 {
            return bad("synth noise knobs must be finite and non-negative (clip_confusion <= 1)");
        }
        Ok(())
    }

    /// `(stage, layer, grid)` for every level, finest stage first.
    pub fn levels(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (si, s) in self.stages.iter().enumerate() {
            for l in 0..s.layers {
                out.push((si + 1, l + 1, s.grid));
            }
        }
        out
    }
}

/// Classes of one fold.
pub fn fold_classes(classes: usize, folds: usize, fold: usize) -> Result<Range<usize>> {
    if fold >= folds {
        return Err(Error::FoldOutOfRange { fold, folds });
    }
    let per = classes / folds;
    Ok(fold * per..(fold + 1) * per)
}

/// `(base, novel)` classes with `novel_fold` held out.
pub fn fold_split(classes: usize, folds: usize, novel_fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if folds == 0 || classes % folds != 0 {
        return Err(Error::Config("classes must split evenly into folds".into()));
    }
    let novel = fold_classes(classes, folds, novel_fold)?;
    let base = (0..classes).filter(|c| !novel.contains(c)).collect();
    Ok((base, novel.collect()))
}

#[derive(Clone, Copy, Debug)]
struct Object {
    class: usize,
    cx: f64,
    cy: f64,
    r: f64,
}

fn inside(family: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (u, v) = (dx / r, dy / r);
    match family {
        0 => u * u + v * v <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.85,
        2 => (-1.0..=0.8).contains(&v) && u.abs() <= (v + 1.0) * 0.55,
        3 => u.abs() + v.abs() <= 1.1,
        _ => {
            let d = u * u + v * v;
            (0.3..=1.0).contains(&d)
        }
    }
}

/// Fixed per-configuration randomness: textures, text vectors, projections.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    cfg: SynthConfig,
    base: Vec<usize>,
    novel: Vec<usize>,
    textures: Vec<[f64; DESC_DIM]>,
    text: Vec<Vec<f64>>,
    /// Per level, a `feat_dim × DESC_DIM` projection.
    proj: Vec<Vec<f64>>,
    /// Per level and class, a unit class-signal vector.
    signal: Vec<Vec<Vec<f64>>>,
}

fn gauss<R: rand::Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn unit<R: rand::Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| gauss(rng)).collect();
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if norm > 0.0 {
        v.into_iter().map(|x| x / norm).collect()
    } else {
        v
    }
}

impl SynthWorld {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let (base, novel) = fold_split(cfg.classes, cfg.folds, cfg.novel_fold)?;
        let mut rng = rng::stream(cfg.seed, Stream::Synth, u64::MAX);
        let textures = (0..cfg.classes)
            .map(|_| {
                let mut t = [0.0; DESC_DIM];
                t.iter_mut().for_each(|x| *x = gauss(&mut rng));
                t
            })
            .collect();
        let text = (0..cfg.classes).map(|_| unit(&mut rng, cfg.text_dim)).collect();
        let levels = cfg.levels().len();
        let scale = 1.0 / libm::sqrt(DESC_DIM as f64);
        let proj = (0..levels).map(|_| (0..cfg.feat_dim * DESC_DIM).map(|_| gauss(&mut rng) * scale).collect()).collect();
        let signal = (0..levels).map(|_| (0..cfg.classes).map(|_| unit(&mut rng, cfg.feat_dim)).collect()).collect();
        Ok(Self { cfg: cfg.clone(), base, novel, textures, text, proj, signal })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn base_classes(&self) -> &[usize] {
        &self.base
    }

    pub fn novel_classes(&self) -> &[usize] {
        &self.novel
    }

    pub fn text_embed(&self, class: usize) -> Vec<f32> {
        self.text[class].iter().map(|&v| v as f32).collect()
    }

    fn partition(&self, class: usize) -> &[usize] {
        if self.novel.contains(&class) {
            &self.novel
        } else {
            &self.base
        }
    }

    fn place<R: rand::Rng>(&self, class: usize, rng: &mut R) -> (Vec<Object>, Vec<u8>) {
        let c = &self.cfg;
        let s = c.image_size as f64;
        let n_distract = rng.gen_range(0..c.max_shapes);
        let pool: Vec<usize> = self.partition(class).iter().copied().filter(|&k| k != class).collect();
        let mut objects = Vec::with_capacity(n_distract + 1);
        for _ in 0..n_distract {
            let Some(&k) = pool.choose(rng) else { break };
            objects.push(Object { class: k, cx: rng.gen_range(0.15..0.85) * s, cy: rng.gen_range(0.15..0.85) * s, r: rng.gen_range(0.12..0.3) * s });
        }
        let mut target = None;
        for _ in 0..PLACEMENT_TRIES {
            let o = Object { class, cx: rng.gen_range(0.25..0.75) * s, cy: rng.gen_range(0.25..0.75) * s, r: rng.gen_range(0.15..0.5) * s };
            let frac = self.raster(&[o]).iter().filter(|&&v| v == 1).count() as f64 / (s * s);
            if (c.area_min..=c.area_max).contains(&frac) {
                target = Some(o);
                break;
            }
        }
        // Fallback when no random placement met the area bounds: a centred object.
        let target = target.unwrap_or(Object { class, cx: s / 2.0, cy: s / 2.0, r: s * 0.3 });
        objects.push(target);
        let labels = self.raster(&objects);
        (objects, labels)
    }

    /// Label map: 0 background, `i + 1` for object `i` (later objects on top).
    fn raster(&self, objects: &[Object]) -> Vec<u8> {
        let n = self.cfg.image_size;
        let mut labels = vec![0u8; n * n];
        for (i, o) in objects.iter().enumerate() {
            let family = o.class % FAMILIES;
            for y in 0..n {
                for x in 0..n {
                    if inside(family, x as f64 + 0.5 - o.cx, y as f64 + 0.5 - o.cy, o.r) {
                        labels[y * n + x] = (i + 1) as u8;
                    }
                }
            }
        }
        labels
    }

    /// Renders one image of `class` into a feature stack and its mask.
    pub fn image<R: rand::Rng>(&self, class: usize, rng: &mut R) -> Result<(FeatureStack, Mask)> {
        let c = &self.cfg;
        if class >= c.classes {
            return Err(Error::ClassOutOfRange { class, classes: c.classes });
        }
        let n = c.image_size;
        let (objects, labels) = self.place(class, rng);
        let target = objects.len() as u8;
        let mut mask = Mask::from_fn(n, n, |y, x| labels[y * n + x] == target);
        if mask.area() == 0 {
            mask = Mask::from_fn(n, n, |y, x| (n / 4..3 * n / 4).contains(&y) && (n / 4..3 * n / 4).contains(&x));
        }
        let owner = |p: usize| -> Option<usize> {
            if mask.data[p] == 1 {
                Some(class)
            } else {
                match labels[p] {
                    0 => None,
                    l if l == target => None,
                    l => Some(objects[l as usize - 1].class),
                }
            }
        };

        let jitter = c.noise * c.texture_jitter;
        let mut bg = [0.0; DESC_DIM];
        bg.iter_mut().for_each(|x| *x = gauss(rng));
        let mut desc = vec![0.0f64; n * n * DESC_DIM];
        for p in 0..n * n {
            let t = owner(p).map_or(&bg, |k| &self.textures[k]);
            for (j, d) in desc[p * DESC_DIM..(p + 1) * DESC_DIM].iter_mut().enumerate() {
                *d = t[j] + jitter * gauss(rng);
            }
        }

        let mut levels = Vec::new();
        let fnoise = c.noise * c.feature_noise / libm::sqrt(c.feat_dim as f64);
        for (li, (stage, layer, grid)) in c.levels().into_iter().enumerate() {
            let cell = n / grid;
            let area = (cell * cell) as f64;
            let mut map = vec![0.0f32; grid * grid * c.feat_dim];
            for gy in 0..grid {
                for gx in 0..grid {
                    let mut mean = [0.0; DESC_DIM];
                    let mut frac = vec![0.0; c.classes];
                    for y in gy * cell..(gy + 1) * cell {
                        for x in gx * cell..(gx + 1) * cell {
                            let p = y * n + x;
                            for j in 0..DESC_DIM {
                                mean[j] += desc[p * DESC_DIM + j] / area;
                            }
                            if let Some(k) = owner(p) {
                                frac[k] += 1.0 / area;
                            }
                        }
                    }
                    let out = &mut map[(gy * grid + gx) * c.feat_dim..][..c.feat_dim];
                    for (i, o) in out.iter_mut().enumerate() {
                        let row = &self.proj[li][i * DESC_DIM..(i + 1) * DESC_DIM];
                        let mut v: f64 = row.iter().zip(&mean).map(|(a, b)| a * b).sum();
                        for (k, f) in frac.iter().enumerate() {
                            if *f > 0.0 {
                                v += c.class_signal * f * self.signal[li][k][i];
                            }
                        }
                        *o = (v + fnoise * gauss(rng)) as f32;
                    }
                }
            }
            levels.push(Level { stage, layer, map: Tensor::new([grid, grid, c.feat_dim], map)? });
        }

        let clip = self.clip_map(class, &objects, &labels, &mask, rng)?;
        Ok((FeatureStack { levels, clip, image_size: (n, n) }, mask))
    }

    fn clip_map<R: rand::Rng>(&self, class: usize, objects: &[Object], labels: &[u8], mask: &Mask, rng: &mut R) -> Result<Tensor<f32>> {
        let c = &self.cfg;
        let (n, g, dt) = (c.image_size, c.clip_grid, c.text_dim);
        let cell = n / g;
        let area = (cell * cell) as f64;
        let target_text = &self.text[class];
        let off: Vec<usize> = (0..c.classes).filter(|&k| k != class).collect();
        let mixture: Vec<usize> = off.choose_multiple(rng, 3.min(off.len())).copied().collect();
        let lean = |k: usize| -> Vec<f64> {
            normalized(self.text[k].iter().zip(target_text).map(|(a, b)| (1.0 - c.clip_confusion) * a + c.clip_confusion * b).collect())
        };
        let distract: Vec<Vec<f64>> = objects.iter().map(|o| lean(o.class)).collect();
        let cnoise = c.noise * c.clip_noise / libm::sqrt(dt as f64);
        let mut out = vec![0.0f32; g * g * dt];
        for gy in 0..g {
            for gx in 0..g {
                let mut v = vec![0.0f64; dt];
                let mut bg = 0.0;
                for y in gy * cell..(gy + 1) * cell {
                    for x in gx * cell..(gx + 1) * cell {
                        let p = y * n + x;
                        if mask.data[p] == 1 {
                            v.iter_mut().zip(target_text).for_each(|(a, b)| *a += b / area);
                        } else if labels[p] == 0 || labels[p] as usize == objects.len() {
                            bg += 1.0 / area;
                        } else {
                            v.iter_mut().zip(&distract[labels[p] as usize - 1]).for_each(|(a, b)| *a += b / area);
                        }
                    }
                }
                if bg > 0.0 {
                    let w: Vec<f64> = mixture.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
                    let mut m = vec![0.0; dt];
                    for (wk, &k) in w.iter().zip(&mixture) {
                        m.iter_mut().zip(&self.text[k]).for_each(|(a, b)| *a += wk * b);
                    }
                    let m = normalized(m);
                    v.iter_mut().zip(&m).for_each(|(a, b)| *a += bg * b);
                }
                let o = &mut out[(gy * g + gx) * dt..][..dt];
                for (oi, vi) in o.iter_mut().zip(&v) {
                    *oi = (vi + cnoise * gauss(rng)) as f32;
                }
            }
        }
        Tensor::new([g, g, dt], out)
    }

    /// Episode with `shots` supports; query and supports are independent
    /// images of `class` drawn from `seed`.
    pub fn episode(&self, class: usize, seed: u64, shots: usize) -> Result<Episode> {
        let mut rng = rng::stream(seed, Stream::Synth, 0);
        let (query, qmask) = self.image(class, &mut rng)?;
        let mut supports = Vec::with_capacity(shots);
        for k in 0..shots {
            let mut rng = rng::stream(seed, Stream::Synth, k as u64 + 1);
            let (features, mask) = self.image(class, &mut rng)?;
            supports.push(Shot { features, mask });
        }
        Ok(Episode { supports, query, query_mask: Some(qmask), text_embed: self.text_embed(class), class_id: class })
    }

    /// Training episode `index` of a stream seeded by `seed`; classes are
    /// drawn uniformly from the base partition.
    pub fn training_episode(&self, seed: u64, index: u64, shots: usize) -> Result<Episode> {
        let mut rng = rng::stream(seed, Stream::Sampling, index);
        let class = *self.base.choose(&mut rng).ok_or(Error::Config("no base classes".into()))?;
        self.episode(class, rng::derive(seed, index), shots)
    }

    /// Evaluation episode `index`; novel classes are visited round-robin.
    pub fn novel_episode(&self, seed: u64, index: u64, shots: usize) -> Result<Episode> {
        let class = self.novel[index as usize % self.novel.len()];
        self.episode(class, rng::derive(seed ^ 0x5EED_E7A1, index), shots)
    }
}

/// One episode straight from a configuration.
pub fn synth_episode(cfg: &SynthConfig, class: usize, seed: u64) -> Result<Episode> {
    SynthWorld::new(cfg)?.episode(class, seed, cfg.shots)
}
