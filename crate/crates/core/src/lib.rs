//! Style-transfer back-translation toolkit.
//!
//! Trains small encoder-decoder translation models on a synthetic bilingual
//! world, generates back-translation data in several flavours, transfers the
//! style of synthetic source text toward natural text, and measures the
//! effect with BLEU/ChrF and a Nature-vs-MT classifier.

pub mod augment;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod nnet;
pub mod pipeline;
pub mod par;
pub mod styleclf;
pub mod synthworld;
pub mod tst;
pub mod util;

pub use error::{Error, Result};
