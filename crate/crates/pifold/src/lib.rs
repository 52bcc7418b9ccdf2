//! Structure-based protein sequence design at desk scale.
//!
//! The pipeline maps a backbone structure (per-residue N/CA/C/O coordinates)
//! to an amino-acid sequence:
//!
//! 1. [`geometry`] builds per-residue local frames and rotation/translation
//!    invariant scalar features (distances, angles, directions, quaternions).
//! 2. [`featurize`] assembles a k-NN residue graph with node/edge feature
//!    matrices, including distances to learnable virtual atoms.
//! 3. [`model`] runs a stack of PiGNN layers (MLP attention, edge updates,
//!    gated global context) and reads out per-residue logits.
//! 4. [`decode`] emits sequences either one-shot (a single forward pass) or
//!    with an autoregressive decoder variant used for latency comparison.
//!
//! Training, evaluation, checkpointing and the decoding-latency benchmark
//! live in [`train`], [`metrics`], [`checkpoint`] and [`bench`].
//!
//! All numeric code is generic over [`real::Real`] so the same kernels run
//! in f64 (tests, gradient checks) and f32 (training, benchmarks). Batch
//! work over proteins is data-parallel via rayon when the `parallel`
//! feature (default) is enabled; disabling it falls back to sequential
//! execution with identical results.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod featurize;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod parallel;
pub mod protein;
pub mod real;
pub mod runner;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use protein::Protein;
pub use real::{Precision, Real};
pub use tensor::Tensor;
