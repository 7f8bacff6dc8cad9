// SPDX-License-Identifier: MIT OR Apache-2.0

//! Self-supervised contrastive anomaly detection for multivariate time series.
//!
//! The pipeline has two training stages. The pretext stage learns window
//! representations with a triplet loss, where positives are temporally close
//! windows and negatives are copies of the anchor with a synthetic anomaly
//! injected. It then mines nearest and furthest neighbours in representation
//! space. The classification stage trains a softmax classifier so that
//! neighbours share a class and far-away windows do not. At inference the
//! anomaly score of a window is one minus its probability of belonging to the
//! class that holds most training windows.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod infer;
pub mod inject;
pub mod neighbors;
pub mod nn;
pub mod pipeline;
pub mod pretext;
pub mod selfsup;

pub use error::{CarlaError, Result};
