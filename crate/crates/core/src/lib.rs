//! Serial-token time-series forecasting.
//!
//! A decoder-only transformer over patch tokens. Main TimeMoE blocks build
//! contextual embeddings; each TimeSTP block refines the previous depth's
//! embeddings against the initial patch embeddings and predicts one patch
//! further ahead, so a horizon of `(H + 1) P` steps comes out of one forward
//! pass. See the `book/` directory for a guided tour.

// Negated float comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod datagen;
pub mod dataloader;
pub mod error;
pub mod inference;
pub mod numerics;
pub mod objectives;
mod params;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};

// The guide's code blocks run as doctests so the book cannot drift from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/signals.md")]
    mod signals {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    mod statistics {}
    #[doc = include_str!("../../../book/src/tokens.md")]
    mod tokens {}
    #[doc = include_str!("../../../book/src/backbone.md")]
    mod backbone {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/forecasting.md")]
    mod forecasting {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
