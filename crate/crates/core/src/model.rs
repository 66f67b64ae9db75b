//! The full network: priors, affinities, assembly and decoding.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::affinity::{cross_affinity, masked_flatten, self_affinity, HighOrder};
use crate::assemble::{assemble_level, fuse_shots, LevelPriors, SupportPriors, CHANNELS};
use crate::decoder::{channel_drop, mode_drop, Decoder, DecoderConfig, DropVector};
use crate::episode::{Episode, FeatureStack, TaskMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Init;
use crate::params::ParamStore;
use crate::prior::{clip_prior_at_grid, support_gt_prior, visual_prior};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::synth::SynthConfig;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct ModelConfig {
    /// Attention model width.
    pub model_dim: usize,
    pub heads: usize,
    /// Disable to get the parameter-free-affinity variant.
    pub high_order: bool,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { model_dim: 64, heads: 4, high_order: true, decoder: DecoderConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct LevelGeometry {
    pub stage: usize,
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
}

impl LevelGeometry {
    pub fn name(&self) -> String {
        format!("S{}L{}", self.stage, self.layer)
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Input layout the parameters are tied to.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct Geometry {
    pub image: (usize, usize),
    /// Sorted by `(stage, layer)`, finest stage first.
    pub levels: Vec<LevelGeometry>,
    pub text_dim: usize,
}

impl Geometry {
    pub fn of_stack(stack: &FeatureStack, text_dim: usize) -> Self {
        Self {
            image: stack.image_size,
            levels: stack
                .levels
                .iter()
                .map(|l| LevelGeometry { stage: l.stage, layer: l.layer, height: l.grid().0, width: l.grid().1, dim: l.dim() })
                .collect(),
            text_dim,
        }
    }

    pub fn of_synth(cfg: &SynthConfig) -> Self {
        Self {
            image: (cfg.image_size, cfg.image_size),
            levels: cfg
                .levels()
                .into_iter()
                .map(|(stage, layer, grid)| LevelGeometry { stage, layer, height: grid, width: grid, dim: cfg.feat_dim })
                .collect(),
            text_dim: cfg.text_dim,
        }
    }

    /// Checks that a feature stack matches this layout.
    pub fn check(&self, stack: &FeatureStack, what: &'static str) -> Result<()> {
        let got = Geometry::of_stack(stack, self.text_dim);
        if got.levels != self.levels || got.image != self.image {
            return Err(Error::InvalidArgument { op: "geometry", reason: format!("{what} layout {:?} does not match model {:?}", got.levels, self.levels) });
        }
        Ok(())
    }

    /// Level indices from coarsest to finest.
    fn coarse_to_fine(&self) -> Vec<usize> {
        (0..self.levels.len()).rev().collect()
    }
}

/// Channel-drop behaviour for one forward pass.
pub enum DropPolicy<'a> {
    /// The deterministic vector of the task mode (evaluation).
    Mode,
    /// Independent random vectors per level (training).
    Random { rng: &'a mut rng::Rng, keep_prob: f64 },
    /// Keep every channel (training without channel-drop).
    KeepAll,
}

#[derive(Clone, Debug)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub geometry: Geometry,
    pub params: ParamStore<S>,
    high: Vec<Option<HighOrder>>,
    decoder: Decoder,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, geometry: Geometry, seed: u64, init: Init) -> Result<Self> {
        if geometry.levels.is_empty() {
            return Err(Error::Config("model needs at least one feature level".into()));
        }
        let mut rng = rng::stream(seed, Stream::Init, 0);
        let mut params = ParamStore::new();
        let mut high = Vec::with_capacity(geometry.levels.len());
        for lvl in &geometry.levels {
            high.push(if config.high_order {
                let prefix = format!("high_order.{}", lvl.name());
                Some(HighOrder::new(&mut params, &prefix, lvl.len(), lvl.len(), config.model_dim, config.heads, init, &mut rng)?)
            } else {
                None
            });
        }
        let names = Self::decoder_names(&geometry);
        let decoder = Decoder::new(&mut params, &names, geometry.levels[0].dim, &config.decoder, &mut rng)?;
        Ok(Self { config, geometry, params, high, decoder })
    }

    /// Rebuilds a model around existing parameters (e.g. from a checkpoint).
    pub fn from_params(config: ModelConfig, geometry: Geometry, params: ParamStore<S>) -> Result<Self> {
        let mut high = Vec::with_capacity(geometry.levels.len());
        for lvl in &geometry.levels {
            high.push(if config.high_order { Some(HighOrder::bind(&params, &format!("high_order.{}", lvl.name()), config.heads)?) } else { None });
        }
        let decoder = Decoder::bind(&params, &Self::decoder_names(&geometry))?;
        let fresh: Model<S> = Model::new(config.clone(), geometry.clone(), 0, Init::Random)?;
        for (_, name, t) in fresh.params.iter() {
            let got = params.get(params.id(name)?);
            if got.shape() != t.shape() {
                return Err(Error::ShapeMismatch { op: "from_params", lhs: got.shape().to_vec(), rhs: t.shape().to_vec() });
            }
        }
        if fresh.params.len() != params.len() {
            return Err(Error::Config(format!("expected {} parameters, found {}", fresh.params.len(), params.len())));
        }
        Ok(Self { config, geometry, params, high, decoder })
    }

    fn decoder_names(geometry: &Geometry) -> Vec<String> {
        geometry.coarse_to_fine().into_iter().map(|i| geometry.levels[i].name()).collect()
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model { config: self.config.clone(), geometry: self.geometry.clone(), params: self.params.cast(), high: self.high.clone(), decoder: self.decoder.clone() }
    }

    /// Constant priors and affinities of one level for every usable shot.
    pub fn level_priors(&self, ep: &Episode, level: usize, mode: TaskMode) -> Result<Vec<LevelPriors<S>>> {
        let geo = &self.geometry.levels[level];
        let (h, w) = (geo.height, geo.width);
        let text: Vec<S> = ep.text_embed.iter().map(|&v| S::from_f64(v as f64)).collect();
        let q_clip: Tensor<S> = ep.query.clip.cast();
        let p_q = clip_prior_at_grid(&q_clip, &text, ep.query.image_size, h, w)?.reshape([h * w])?;
        let fq = masked_flatten(&ep.query.levels[level].map.cast::<S>(), None)?;
        let a_qq = self_affinity(&fq)?;
        if !mode.uses_supports() || ep.supports.is_empty() {
            return Ok(alloc::vec![LevelPriors { p_q, a_qq, support: None }]);
        }
        let mut out = Vec::with_capacity(ep.supports.len());
        for shot in &ep.supports {
            let sgeo = &shot.features.levels[level];
            let (sh, sw) = sgeo.grid();
            let m_s = if mode.uses_support_masks() { Some(support_gt_prior::<S>(&shot.mask, sh, sw)?) } else { None };
            let fs_hat = masked_flatten(&sgeo.map.cast::<S>(), m_s.as_ref())?;
            let a_sq = cross_affinity(&fs_hat, &fq)?;
            let a_ss = self_affinity(&fs_hat)?;
            let (m_q_v, _degenerate) = visual_prior(&a_sq)?;
            let s_clip: Tensor<S> = shot.features.clip.cast();
            let p_s = clip_prior_at_grid(&s_clip, &text, shot.features.image_size, sh, sw)?.reshape([sh * sw])?;
            out.push(LevelPriors {
                p_q: p_q.clone(),
                a_qq: a_qq.clone(),
                support: Some(SupportPriors {
                    a_sq,
                    a_ss,
                    m_q_v: Tensor::new([h * w], m_q_v)?,
                    m_s_gt: m_s.map(|m| m.reshape([sh * sw])).transpose()?,
                    p_s,
                }),
            });
        }
        Ok(out)
    }

    /// Assembled `(10, h, w)` channels of every level, finest stage first,
    /// before channel-drop.
    pub fn assemble(&self, g: &mut Graph<S>, ep: &Episode, mode: TaskMode) -> Result<Vec<Var>> {
        let mut levels = Vec::with_capacity(self.geometry.levels.len());
        for (li, geo) in self.geometry.levels.iter().enumerate() {
            let learned = self.high[li].as_ref().map(|h| (h, &self.params));
            let shots = self
                .level_priors(ep, li, mode)?
                .iter()
                .map(|p| assemble_level(g, p, learned))
                .collect::<Result<Vec<_>>>()?;
            let fused = fuse_shots(g, &shots)?;
            levels.push(g.reshape(fused.channels, &[CHANNELS, geo.height, geo.width])?);
        }
        Ok(levels)
    }

    /// Query logits `(H, W)` for an episode already transformed for `mode`.
    pub fn forward(&self, g: &mut Graph<S>, ep: &Episode, mode: TaskMode, mut drop: DropPolicy<'_>) -> Result<Var> {
        self.geometry.check(&ep.query, "query")?;
        if mode.uses_supports() {
            if ep.supports.is_empty() {
                return Err(Error::MissingInput("support shots"));
            }
            for s in &ep.supports {
                self.geometry.check(&s.features, "support")?;
            }
        }
        let assembled = self.assemble(g, ep, mode)?;
        let mut inputs = Vec::with_capacity(assembled.len());
        for li in self.geometry.coarse_to_fine() {
            let pi = match &mut drop {
                DropPolicy::Mode => mode_drop(mode),
                DropPolicy::Random { rng, keep_prob } => DropVector::sample(*rng, *keep_prob),
                DropPolicy::KeepAll => DropVector::all_keep(),
            };
            inputs.push(channel_drop(g, assembled[li], &pi)?);
        }
        let low = &ep.query.levels[0].map;
        let (h, w, d) = (low.shape()[0], low.shape()[1], low.shape()[2]);
        let low = low.cast::<S>().reshape([h * w, d])?.transpose2()?.reshape([d, h, w])?;
        let low = g.constant(low);
        self.decoder.forward(g, &self.params, &inputs, low, self.geometry.image)
    }

    /// Evaluation-time logits with the mode's deterministic channel mask.
    pub fn predict(&self, ep: &Episode, mode: TaskMode) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, ep, mode, DropPolicy::Mode)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_episode, StageSpec};

    fn tiny() -> SynthConfig {
        SynthConfig {
            image_size: 8,
            stages: alloc::vec![StageSpec { grid: 4, layers: 1 }, StageSpec { grid: 2, layers: 1 }],
            feat_dim: 6,
            text_dim: 4,
            clip_grid: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn logits_cover_the_image_in_every_mode() {
        let cfg = tiny();
        let ep = synth_episode(&cfg, 2, 4).unwrap();
        let model: Model<f64> = Model::new(ModelConfig { model_dim: 8, heads: 2, ..Default::default() }, Geometry::of_synth(&cfg), 1, Init::Random).unwrap();
        for mode in [TaskMode::Fss, TaskMode::Zss, TaskMode::Coseg, TaskMode::Bbox] {
            let ep = crate::corrupt::apply_mode(&ep, mode, 0).unwrap();
            let out = model.predict(&ep, mode).unwrap();
            assert_eq!(out.shape(), &[8, 8]);
            assert!(out.all_finite());
        }
    }

    #[test]
    fn fss_needs_supports() {
        let cfg = tiny();
        let ep = synth_episode(&cfg, 2, 4).unwrap().with_shots(0);
        let model: Model<f64> = Model::new(ModelConfig { model_dim: 8, heads: 2, ..Default::default() }, Geometry::of_synth(&cfg), 1, Init::Random).unwrap();
        assert_eq!(model.predict(&ep, TaskMode::Fss), Err(Error::MissingInput("support shots")));
        assert!(model.predict(&ep, TaskMode::Zss).is_ok());
    }

    #[test]
    fn rebinding_params_reproduces_outputs() {
        let cfg = tiny();
        let ep = synth_episode(&cfg, 1, 9).unwrap();
        let mc = ModelConfig { model_dim: 8, heads: 2, ..Default::default() };
        let a: Model<f64> = Model::new(mc.clone(), Geometry::of_synth(&cfg), 3, Init::Random).unwrap();
        let b = Model::from_params(mc, a.geometry.clone(), a.params.clone()).unwrap();
        assert_eq!(a.predict(&ep, TaskMode::Fss).unwrap(), b.predict(&ep, TaskMode::Fss).unwrap());
    }
}
