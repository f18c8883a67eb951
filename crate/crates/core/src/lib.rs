//! Melody-conditioned lyrics generation, from scratch.
//!
//! The crate turns a symbolic melody into a per-syllable structure token
//! stream (`S`/`B`/`M`/`E`), fuses it with contextual text (the previous
//! sentence or a keyword) through a two-channel attention encoder-decoder,
//! and generates sentences whose syllable pattern matches the melody.
//!
//! Everything numeric is built on the small reverse-mode autodiff engine in
//! [`tensor`]: LSTM encoders/decoder in [`layers`], the seq2seq models in
//! [`model`], the training recipe in [`training`], beam-search decoding in
//! [`decoding`] and the automatic metrics in [`evaluation`]. Melody parsing
//! and the token algebra live in [`melody`]; text ingestion, TextRank and
//! batching in [`corpus`].
//!
//! The crate is `no_std` (with `alloc`); all IO, file formats and the CLI
//! live in the companion `lyrgen` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod corpus;
pub mod decoding;
mod error;
pub mod evaluation;
pub mod layers;
pub mod melody;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
