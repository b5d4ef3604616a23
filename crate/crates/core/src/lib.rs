//! Multi-task stock ranking: momentum-line labelling, a smooth NDCG ranking
//! loss with adaptive depth, a converge-based gradient balancer, and the
//! evaluation and backtest tooling around them.

// `!(x > 0.0)` is used on purpose so NaN fails the check; Var arithmetic is
// fallible, so it cannot use the std operator traits.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod backbone;
pub mod backtest;
pub mod config;
pub mod cqb;
pub mod data;
pub mod dataset;
pub mod diffcore;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod momentum;

pub use error::{Error, Result};
