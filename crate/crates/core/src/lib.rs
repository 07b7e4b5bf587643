//! Conformal decoding for autoregressive next-token prediction.
//!
//! The crate calibrates per-step cutoffs on prefix scores so that the set of
//! sequences surviving every step contains a fresh sequence with probability
//! at least `1 - alpha`. Besides the cluster-step method in [`cover`] it ships
//! the reference decoders in [`baseline`], finite-sample bound calculators in
//! [`pac`], a tabular autoregressive simulator in [`scorer`] and experiment
//! plumbing in [`harness`].

pub mod baseline;
pub mod clustering;
pub mod cover;
pub mod error;
pub mod expand;
pub mod harness;
pub mod pac;
pub mod scorer;
pub mod serde_ext;
pub mod trace;

pub use clustering::{Cluster, ClusterAssignment, ClusteringConfig};
pub use cover::{calibrate, cover_decode, CalibratedModel, CoverConfig, LambdaSchedule, PathEvalRecord};
pub use error::{Error, Result};
pub use expand::{ConformalSet, DEFAULT_MAX_NODES};
pub use scorer::{LongTailConfig, Scorer, TabularARModel};
pub use trace::{load_traces, quantile, save_traces, ScoreTrace, Token};
