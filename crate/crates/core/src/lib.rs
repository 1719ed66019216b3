//! Language-embedding modeling for languages a multilingual recognizer never saw.
//!
//! A tiny tied-embedding encoder–decoder stands in for a large multilingual
//! speech recognizer. Unseen languages are conditioned on convex combinations of
//! the known language-tag embeddings (per utterance or per corpus), on a trainable
//! embedding initialized from such a combination, or on the output of a small
//! predictor trained by leave-one-language-out masking over seen languages.

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod langembed;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod seeds;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::Tensor;
