//! Targeted universal adversarial perturbations and their detection with a
//! locally optimal generalized likelihood ratio test under a Gaussian tile
//! model, plus a PCA baseline and the evaluation metrics to compare them.
//!
//! The guide in `book/` walks through each module; its code blocks run as
//! doctests of this crate.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod attack;
pub mod baseline;
pub mod classifier;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod numerics;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/synthetic-task.md")]
    mod synthetic_task {}
    #[doc = include_str!("../../../book/src/attacks.md")]
    mod attacks {}
    #[doc = include_str!("../../../book/src/lo-glrt.md")]
    mod lo_glrt {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/baseline.md")]
    mod baseline {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
