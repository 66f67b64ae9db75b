//! Prior-guided mask assembly for any-shot segmentation.
//!
//! Class-relevant visual and textual features are turned into class-agnostic
//! probability maps ([`prior`]), refined through pixel affinities
//! ([`affinity`], [`assemble`]) and decoded into a mask by a hierarchical
//! decoder with channel-drop ([`decoder`]). Everything runs on a small
//! reverse-mode engine ([`graph`]) so the learned parts train in-crate.
//!
//! The crate is `no_std` + `alloc`; enable the `std` feature for runtime CPU
//! feature detection in the GEMM kernels.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod affinity;
pub mod assemble;
pub mod corrupt;
pub mod decoder;
pub mod episode;
pub mod error;
pub mod eval;
pub mod graph;
mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod prior;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Resizes a `(c, h, w)` tensor bilinearly (half-pixel centres).
pub fn resize_bilinear<S: Scalar>(t: &Tensor<S>, oh: usize, ow: usize) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let v = g.constant(t.clone());
    let r = g.resize(v, oh, ow)?;
    Ok(g.value(r).clone())
}

/// Area-average resampling of an `h × w` map.
pub fn resize_area<S: Scalar>(t: &Tensor<S>, oh: usize, ow: usize) -> Result<Tensor<S>> {
    let (h, w) = t.dims2("resize_area")?;
    Tensor::new([oh, ow], kernels::area_resample(t.data(), h, w, oh, ow))
}
