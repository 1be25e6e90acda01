//! Trajectory-driven negative-pair analysis and curriculum batch
//! construction for contrastive learning.
//!
//! The pipeline has three stages:
//!
//! 1. train a reference model and keep per-checkpoint embeddings
//!    ([`snapshot`], [`toy`]);
//! 2. fit every negative pair's similarity trajectory and derive the
//!    change `delta` ([`trajectory`]);
//! 3. build mini-batches whose negatives move from easy to hard over the
//!    epochs ([`selection`]) and train on them ([`toy`]).

pub mod error;
pub mod matfile;
pub mod report;
pub mod selection;
pub mod snapshot;
pub mod toy;
pub mod trajectory;

pub use error::{Error, ErrorKind, Result};
