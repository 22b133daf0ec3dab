//! A desk-scale hybrid message-passing / biased-attention network for
//! molecular graph regression.
//!
//! The crate is organised around the training pipeline:
//!
//! - [`graph`]: the molecular graph data model, JSONL dataset files,
//!   train/validation splits and a synthetic graph generator.
//! - [`encodings`]: structural and positional features computed per graph
//!   (Laplacian eigen-features, random-walk return probabilities, shortest
//!   path distance maps, degree centrality) plus the Gaussian distance
//!   kernels used for 3D information.
//! - [`diff`]: a minimal reverse-mode autodiff engine over dense `f64`
//!   tensors, with a finite-difference gradient checker.
//! - [`pack`]: streaming packing of variable-size graphs into fixed-capacity
//!   packs with validity masks.
//! - [`model`]: the network itself — input encoder, stacked MPNN/attention
//!   blocks, sum-pool decoder, parameter store and checkpoint format.
//! - [`train`]: grouped input masking, noisy node/edge corruption, the
//!   composite loss, Adam with warmup + linear decay, and the training loop.
//! - [`ensemble`]: weighted averaging of member predictions and MAE reports.

pub mod diff;
pub mod encodings;
pub mod ensemble;
pub mod error;
pub mod graph;
pub mod model;
pub mod pack;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
