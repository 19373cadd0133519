//! Zero-shot human-object interaction editing on a toy diffusion backbone.
//!
//! The pipeline inverts a single source image into portable inversion clues —
//! three learnable concept token embeddings (subject, object, background) plus
//! low-rank attention adapters — and then edits the interaction by reassembling
//! those clues into a new prompt and sampling from scratch. A benchmark harness
//! scores edits for interaction editability and identity consistency against
//! pluggable perception backends.

pub mod archive;
pub mod attention_lora;
pub mod autograd;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod editing;
pub mod error;
pub mod fixture;
pub mod iebench;
pub mod inversion;
pub mod optim;
pub mod rng;
pub mod scene;
#[cfg(test)]
pub(crate) mod testutil;
pub mod vocab;

pub use error::{Error, Result};
