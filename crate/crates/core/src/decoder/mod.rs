//! The fusion path from visual/geometric tokens to answer logits.
//!
//! * [`anchor_input`]: the terminal geometric layer is added onto the visual
//!   tokens before the decoder sees them.
//! * [`GateBank::inject`]: before decoder layer `l ∈ 1..=m`, visual positions receive
//!   `h + tanh(α_l)·(σ(MLP(h)) ⊙ g_l)`, where `g_l` is the merge-projected
//!   `l`-th sampled geometric layer.
//! * [`Decoder`]: a small pre-norm transformer over `[visual; text]`.
//! * [`GuideModel`]: all of the above plus the frozen visual embedder and
//!   geometric encoder, wired to [`crate::params::ParamStore`].

mod config;
mod gates;
mod model;
mod guide;
mod stream;

pub use config::{DecoderConfig, GateResolution, GatingMode};
pub use gates::GateBank;
pub use guide::{GuideConfig, GuideModel, ModelOutput, PreparedSample};
pub use model::{Decoder, DecoderOutput};
pub use stream::{anchor_input, visual_provenance, AlignedFeature, FusedInput, SequenceLayout, TokenPos, TokenStream};
