//! Quantify the inductive bias of vector representations by Bayesian
//! model selection over probing classifiers.
//!
//! A probing dataset maps example ids to token sequences and labels. A
//! representation turns each example into a fixed-width vector. For each
//! representation the library trains a small family of softmax probes to
//! their MAP solutions, approximates the log marginal likelihood of each
//! probe with a Laplace approximation around the MAP point, optimizes
//! prior precisions online by evidence gradient ascent, and reports the
//! evidence-maximizing probe. The maximum log evidence is the score of
//! the representation: it trades off fit against probe complexity in a
//! single number, unlike raw probe accuracy.
//!
//! Module map:
//! - [`dataset`]: JSONL probing datasets, rare-label filtering, and
//!   type-disjoint train/test splits.
//! - [`representations`]: random, word-identity, and file-backed
//!   embeddings turned into design matrices.
//! - [`probes`]: probe architectures, parameter layouts, priors, and
//!   forward/backward passes.
//! - [`training`]: Adam MAP training with an epoch hook for hyperparameter
//!   updates.
//! - [`laplace`]: GGN curvature (diagonal and Kronecker), posterior log
//!   determinants, log evidence, and its precision gradients.
//! - [`evidence`]: the interleaved evidence-optimization loop and probe
//!   selection.
//! - [`experiments`]: batch experiment drivers and report rendering
//!   behind the CLI.

pub mod dataset;
pub mod error;
pub mod evidence;
pub mod experiments;
pub mod laplace;
pub mod probes;
pub mod representations;
pub mod training;

pub use error::{Error, Result};
