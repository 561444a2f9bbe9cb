//! Self and collaborative attention matching for video re-identification.
//!
//! The crate covers the matching head on top of precomputed frame features:
//! fc projections, parameter-free temporal attention, the gated pairwise
//! similarity feature and its binary classifier, identity loss, SGD
//! training, clip-pair ensembling and CMC/mAP evaluation.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io_util;
pub mod losses;
pub mod model;
pub mod numkit;
pub mod similarity;
pub mod training;

pub use error::{Result, ScanError};
