//! Turns multi-channel surface-EMG recordings into discrete token sequences
//! ("sEMG language") that a sequence model can consume.
//!
//! The pipeline: window raw recordings into segments (`signal`), encode them
//! with a small 1D-convolutional network (`net`), discretize latents against a
//! learnable codebook (`quantizer`), train the whole autoencoder through an
//! iterated-learning schedule with linguistic-bias regularizers (`losses`,
//! `iterlearn`), re-tokenize segments under a residual-driven token budget
//! (`tokenizer`), and check that the tokens stay discriminative with a proxy
//! classifier plus instruction-prompt export (`downstream`). `metrics` holds
//! the shared statistics (Zipf fits, divergences, accuracy reports) and `cli`
//! the command-line entry points.

pub mod cli;
pub mod downstream;
pub mod iterlearn;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod quantizer;
pub mod seeds;
pub mod signal;
pub mod tokenizer;
