//! Early detection of acoustic events from partially observed audio.
//!
//! A foreground/background network and a multitask class/boundary network
//! score each 100 ms frame. Every frame then votes for the span of frames it
//! believes its event covers, and the running vote total per class is
//! thresholded as frames arrive, so an event can be reported before it ends.

// Range checks are written as `!(x >= lo)` on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
mod header;
pub mod inference;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
