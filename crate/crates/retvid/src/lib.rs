//! Retention-based autoregressive generator for vision token sequences.
//!
//! The crate provides a small decoder-only model whose sequence mixer is a
//! retention mechanism with two mathematically equivalent execution forms:
//! a parallel form used for training and a recurrent form whose per-token
//! cost is independent of sequence length, used for generation. On top of
//! the model sit a toy image tokenizer, a serial-number sequencing scheme
//! for key-frame generation and frame interpolation, a redundancy-aware
//! interpolation scheduler, and a benchmark harness that contrasts the
//! recurrent path with a quadratic re-encoding baseline.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod error;
pub mod generate;
pub mod interpolation;
pub mod retention;
pub mod rng;
pub mod selftest;
pub mod sequencer;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
