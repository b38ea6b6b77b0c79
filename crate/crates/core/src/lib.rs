//! Dual-branch speech-token language model over a synthetic speech world.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] – tensors, reverse-mode autodiff, parameter store, Adam.
//! * [`toy_world`] – corpus generator, renderer, codec and exact transcriber.
//! * [`model`] – encoder, projector, shared-bottom dual-branch transformer and
//!   the grouped multi-token prediction head.
//! * [`training`] – text pretraining, modality alignment and speech generation.
//! * [`flow_matching`] – token-to-frame conditional flow matching decoder.
//! * [`streaming`] – incremental sessions, offline reference and chunked vocoding.
//! * [`eval`] – token error rate and report helpers.
//!
//! Numeric code is generic over [`numerics::Scalar`]; the aliases below fix
//! the single-precision types used for training and inference.

pub mod error;
pub mod numerics;
pub mod toy_world;
pub mod model;
pub mod training;
pub mod flow_matching;
pub mod streaming;
pub mod eval;

pub use error::{Error, Result};

pub type Tensor32 = numerics::Tensor<f32>;
pub type Graph32 = numerics::Graph<f32>;
pub type ParamStore32 = numerics::ParamStore<f32>;
