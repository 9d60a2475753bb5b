//! Desk-scale audio-visual speech representation learning.
//!
//! The pipeline: generate a synthetic paired corpus, pre-train student
//! encoders against momentum teachers on masked inputs, fine-tune with a
//! joint CTC/attention objective, decode with a fused beam search, and
//! optionally self-train on pseudo-labels.

pub mod corpus;
pub mod ctc;
pub mod error;
pub mod masking;
pub mod nets;
pub mod rng;
pub mod vocab;
pub mod tensor;

pub use error::{RavenError, Result};
