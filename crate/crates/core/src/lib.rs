//! Deterministic laboratory for data-ordering effects in SGD on modular
//! addition.
//!
//! A small pre-LayerNorm transformer learns `(a + b) mod p` under four
//! example orderings (stride-sorted, fixed random, reshuffled, label-sorted).
//! Training is bit-reproducible and instrumented with hooks that run on
//! isolated copies of the training state: counterfactual gradient
//! decomposition into content and ordering components, finite-difference
//! Hessian-gradient entanglement probes, Fourier spectra of the learned
//! weights, and a set of gradient/parameter geometry metrics.

pub mod counterfactual;
pub mod error;
pub mod hessian;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod ordering;
pub mod rng;
pub mod spectral;
pub mod task;
pub mod trainer;
pub mod validate;

pub use error::{Error, Result};
