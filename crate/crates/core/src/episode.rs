//! Episode containers and task modes.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary mask over an image, row-major, values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch { op: "mask", lhs: alloc::vec![height, width], rhs: alloc::vec![data.len()] });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument { op: "mask", reason: "values must be 0 or 1".into() });
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: alloc::vec![0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self { height, width, data }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn fraction(&self) -> f64 {
        self.area() as f64 / self.data.len().max(1) as f64
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_fn([self.height, self.width], |i| f32::from(self.data[i]))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }
}

/// One backbone feature map, stored as `(h, w, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    /// 1-based stage index (stage 1 has the finest grid).
    pub stage: usize,
    /// 1-based layer index within the stage.
    pub layer: usize,
    pub map: Tensor<f32>,
}

impl Level {
    pub fn grid(&self) -> (usize, usize) {
        (self.map.shape()[0], self.map.shape()[1])
    }

    pub fn dim(&self) -> usize {
        self.map.shape()[2]
    }
}

/// All features extracted from one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    /// Ordered by `(stage, layer)`.
    pub levels: Vec<Level>,
    /// CLIP-space visual map `(h_c, w_c, d_t)`.
    pub clip: Tensor<f32>,
    /// `(height, width)` of the source image.
    pub image_size: (usize, usize),
}

impl FeatureStack {
    pub fn validate(&self, text_dim: usize) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::MissingInput("feature levels"));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.map.rank() != 3 {
                return Err(Error::InvalidArgument { op: "feature_stack", reason: alloc::format!("level S{}.L{} must be rank 3", l.stage, l.layer) });
            }
            if i > 0 {
                let p = &self.levels[i - 1];
                if (p.stage, p.layer) >= (l.stage, l.layer) {
                    return Err(Error::InvalidArgument { op: "feature_stack", reason: "levels must be sorted by (stage, layer)".into() });
                }
            }
            if !l.map.all_finite() {
                return Err(Error::InvalidArgument { op: "feature_stack", reason: alloc::format!("non-finite values in S{}.L{}", l.stage, l.layer) });
            }
        }
        if self.clip.rank() != 3 || self.clip.shape()[2] != text_dim {
            return Err(Error::ShapeMismatch { op: "feature_stack.clip", lhs: self.clip.shape().to_vec(), rhs: alloc::vec![text_dim] });
        }
        if !self.clip.all_finite() {
            return Err(Error::InvalidArgument { op: "feature_stack", reason: "non-finite clip features".into() });
        }
        Ok(())
    }

    /// Mirrors every map left to right.
    pub fn flip_horizontal(&self) -> Self {
        Self {
            levels: self.levels.iter().map(|l| Level { stage: l.stage, layer: l.layer, map: flip_hwc(&l.map) }).collect(),
            clip: flip_hwc(&self.clip),
            image_size: self.image_size,
        }
    }
}

fn flip_hwc(t: &Tensor<f32>) -> Tensor<f32> {
    let (h, w, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let base = (y * w + x) * d;
            out.extend_from_slice(&src[base..base + d]);
        }
    }
    Tensor { shape: alloc::vec![h, w, d], data: out }
}

/// A support image with its annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Shot {
    pub features: FeatureStack,
    pub mask: Mask,
}

/// One 1-way K-shot task. `supports` may be empty (zero-shot).
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub supports: Vec<Shot>,
    pub query: FeatureStack,
    /// Absent at pure inference.
    pub query_mask: Option<Mask>,
    /// Unit-norm class text embedding.
    pub text_embed: Vec<f32>,
    pub class_id: usize,
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        let dt = self.text_embed.len();
        if dt == 0 || self.text_embed.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument { op: "episode", reason: "text embedding must be finite and non-empty".into() });
        }
        self.query.validate(dt)?;
        if let Some(m) = &self.query_mask {
            check_mask_size(m, self.query.image_size)?;
        }
        for s in &self.supports {
            s.features.validate(dt)?;
            check_mask_size(&s.mask, s.features.image_size)?;
            if s.features.levels.len() != self.query.levels.len() {
                return Err(Error::InvalidArgument { op: "episode", reason: "support and query level layouts differ".into() });
            }
        }
        Ok(())
    }

    /// Keeps only the first `k` shots.
    pub fn with_shots(mut self, k: usize) -> Self {
        self.supports.truncate(k);
        self
    }
}

fn check_mask_size(m: &Mask, size: (usize, usize)) -> Result<()> {
    if (m.height, m.width) != size {
        return Err(Error::ShapeMismatch { op: "episode.mask", lhs: alloc::vec![m.height, m.width], rhs: alloc::vec![size.0, size.1] });
    }
    Ok(())
}

/// How an episode is presented to the model at evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum TaskMode {
    /// Support images with exact masks.
    #[default]
    Fss,
    /// Text only; supports are never read.
    Zss,
    /// Support masks replaced by their filled bounding boxes.
    Bbox,
    /// Support images without masks.
    Coseg,
    /// Support masks eroded or dilated, level 1 to 3.
    CorruptMask(u8),
    /// Gaussian noise on every feature map, level 1 to 3.
    CorruptImage(u8),
}

impl TaskMode {
    pub fn uses_supports(self) -> bool {
        self != TaskMode::Zss
    }

    pub fn uses_support_masks(self) -> bool {
        !matches!(self, TaskMode::Zss | TaskMode::Coseg)
    }
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskMode::Fss => f.write_str("fss"),
            TaskMode::Zss => f.write_str("zss"),
            TaskMode::Bbox => f.write_str("bbox"),
            TaskMode::Coseg => f.write_str("coseg"),
            TaskMode::CorruptMask(l) => write!(f, "corrupt-mask:{l}"),
            TaskMode::CorruptImage(l) => write!(f, "corrupt-image:{l}"),
        }
    }
}

impl FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument { op: "task_mode", reason: alloc::format!("unknown mode `{s}`") };
        let level = |v: &str| match v.parse::<u8>() {
            Ok(l @ 1..=3) => Ok(l),
            _ => Err(Error::InvalidArgument { op: "task_mode", reason: alloc::format!("corruption level must be 1, 2 or 3 in `{s}`") }),
        };
        match s.to_ascii_lowercase().as_str() {
            "fss" => Ok(TaskMode::Fss),
            "zss" => Ok(TaskMode::Zss),
            "bbox" => Ok(TaskMode::Bbox),
            "coseg" => Ok(TaskMode::Coseg),
            other => match other.split_once(':') {
                Some(("corrupt-mask", l)) => Ok(TaskMode::CorruptMask(level(l)?)),
                Some(("corrupt-image", l)) => Ok(TaskMode::CorruptImage(level(l)?)),
                _ => Err(bad()),
            },
        }
    }
}
