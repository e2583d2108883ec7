//! Coarse-to-fine dialogue state tracking as sequence generation.
//!
//! A dialogue state (a set of domain-slot-value triples) is linearized into a
//! marked-language token sequence. The tracker first decodes a *sketch* (the
//! domain/slot skeleton), then decodes the full state conditioned on the sketch
//! and the dialogue, with two-stage attention over utterances and tokens plus a
//! copy mixture. Training is cross-entropy pretraining followed by
//! policy-gradient fine-tuning with a shaped BLEU reward.
//!
//! Module map:
//! - [`codec`] — the state language: serialize/parse, sketches, grammar masks
//! - [`corpus`] — dialogue corpora, vocabulary, toy-corpus generator, MultiWOZ loader
//! - [`tensor`] / [`tape`] — dense f64 tensors and reverse-mode autodiff
//! - [`model`] — hierarchical encoder, sketch decoder, fine decoder with copy
//! - [`losses`] — CE and policy-gradient objectives, reward shaping, baselines
//! - [`train`] — Adam, the SL and RL training loops
//! - [`metrics`] — joint accuracy, BLEU, ITC probe, attention heat maps
//! - [`checkpoint`] — versioned named-tensor containers

pub mod checkpoint;
pub mod codec;
pub mod corpus;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{CreditError, Result};
