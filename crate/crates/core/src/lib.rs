//! Progressive, gated injection of multi-level geometric features into the
//! early layers of a toy multimodal decoder.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense arrays and a reverse-mode differentiation tape.
//! * [`geo`]: synthetic scenes, a mock multi-layer geometric encoder, and the layer sampler.
//! * [`alignment`]: patch-grid alignment, bilinear resize, and the 2×2 merge projector.
//! * [`decoder`]: input anchoring, dual gating, and the decoder that consumes injected features.
//! * [`training`]: tasks, Adam with warmup/linear decay, and the training loop.
//! * [`harness`]: run configs, ablation grids, and result aggregation behind the `guide` CLI.

pub mod alignment;
pub mod config;
pub mod decoder;
pub mod error;
pub mod geo;
pub mod harness;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/tensors.md")]
    struct Tensors;
    #[doc = include_str!("../../../book/src/geometry.md")]
    struct Geometry;
    #[doc = include_str!("../../../book/src/alignment.md")]
    struct Alignment;
    #[doc = include_str!("../../../book/src/gating.md")]
    struct Gating;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
