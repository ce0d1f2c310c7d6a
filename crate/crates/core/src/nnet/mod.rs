//! A small pre-norm Transformer encoder-decoder with hand-written backprop.
//!
//! Parameters live in one flat `f64` vector addressed through named tensors
//! (see [`Layout`]); the input embedding is shared with the output projection.

mod checkpoint;
mod incremental;
pub mod kernels;
mod loss;
mod model;
mod optim;
mod params;
mod train;


pub use checkpoint::Checkpoint;
pub use incremental::{DecoderState, EncodedSource};
pub use loss::label_smoothed_loss;
pub use model::{Batch, ModelConfig, PassStats, Seq2SeqModel};
pub use optim::{lr_at, Adam, AdamConfig};
pub use params::{pattern_matches, Layout, ParamSpec};
pub use train::{batch_gradient, encode_pairs, make_batches, perplexity, train, EvalPoint, IdPair, TrainConfig, TrainOutcome};
