//! Prefill-time self-assessment for small decoder-only language models.
//!
//! A frozen backbone is extended with appended `[CPX]` introspection tokens
//! whose hidden states feed a binary capability classifier. Low-rank
//! adapters that fire only at `[CPX]` positions sharpen that signal while
//! leaving prompt-token computation, the KV cache and generation untouched.
//! The crate also ships the synthetic labelling pipeline, trainers,
//! threshold-free metrics and the two-model routing analysis.

pub mod backbone;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod introspect;
pub mod metrics;
pub mod par;
pub mod rng;
pub mod routing;
pub mod tensor;
pub mod trainer;

pub use backbone::{BackboneConfig, BackboneWeights, KvCache, Projection};
pub use error::{Error, Result};
pub use introspect::{CpxConfig, IntroModel, LoraAdapter, TokenMask};
pub use tensor::{Scalar, Tape, Tensor, Var};
