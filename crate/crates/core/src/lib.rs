//! Federated unstructured pruning of layered models.
//!
//! Clients score the weights of a shared model on private calibration
//! shards, upload binary prune masks, and a server turns the vote counts
//! into a global mask. The crate covers the whole loop at desk scale:
//!
//! - [`model`]: dense matrices and the prunable layer stack
//! - [`metrics`]: magnitude, Wanda, RIA and SparseGPT-diagonal scores
//! - [`masking`]: group-wise top-k masks, vote aggregation, wire encoding
//! - [`federation`]: one-shot and iterative protocols plus baselines
//! - [`evaluation`]: perplexity, reconstruction error, reports
//! - [`datagen`]: Markov corpora, reference-model training, sharding
//! - [`experiment`]: spec files, grids, sweeps and CSV output
//! - [`verify`]: brute-force oracles and the acceptance checks

pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod federation;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod verify;

pub use error::{PruneError, Result};
