//! Hierarchical Bi-LSTM-CRF tagging of dialogue acts.
//!
//! Conversations are encoded twice: a word-level bidirectional LSTM turns
//! each utterance into a vector, a conversation-level bidirectional LSTM
//! contextualizes those vectors, and a linear-chain CRF labels the whole
//! utterance sequence jointly. Everything is differentiated by the small
//! reverse-mode engine in [`numcore`].
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what training and every
//! verification tolerance assume.

pub mod corpus;
pub mod crf;
pub mod encoder;
pub mod error;
pub mod extensions;
pub mod fsutil;
pub mod model;
pub mod numcore;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = numcore::Tensor<f64>;
pub type ParamStore = numcore::ParamStore<f64>;
pub type Tape<'p> = numcore::Tape<'p, f64>;
pub type Tagger = model::Tagger<f64>;

pub type Tensor32 = numcore::Tensor<f32>;
pub type ParamStore32 = numcore::ParamStore<f32>;
pub type Tagger32 = model::Tagger<f32>;
