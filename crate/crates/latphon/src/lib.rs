//! Multilingual Latin-script grapheme-to-phoneme toolkit.
//!
//! The crate is organized around a small set of subsystems:
//!
//! * [`corpus`]: pronunciation-dictionary parsing, IPA tokenization, and
//!   deterministic train/val/test splitting.
//! * [`vocab`]: grapheme and phoneme vocabularies and id codecs.
//! * [`tensor`]: a tape-based reverse-mode autodiff core, generic over the
//!   scalar type.
//! * [`model`]: the encoder-decoder transducer, parameter store, and the
//!   binary checkpoint format.
//! * [`train`]: AdamW, the learning-rate schedule, batching, and the
//!   training loop.
//! * [`eval`]: greedy decoding, phoneme error rate, confidence intervals,
//!   significance tests, and benchmark reports.
//! * [`cli`]: the `latphon` command-line front end.
//!
//! Numeric code is generic over [`scalar::Scalar`] so the same kernels run
//! in `f32` (the product configuration) and `f64` (used by gradient-check
//! harnesses). The crate root exports `f32` aliases for the common types.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod vocab;

/// Product-precision tape: training and inference run in f32, while the
/// generic core stays open to f64 for high-precision numeric checks.
pub type Tape32<'a> = tensor::Tape<'a, f32>;

/// Product-precision model, the type every checkpoint stores.
pub type Model32 = model::Model<f32>;
