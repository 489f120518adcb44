//! Verdin picks a query-processing configuration for every incoming query so
//! that carbon and latency stay low while retrieval quality stays within a
//! guarded band of the default configuration.
//!
//! The pipeline, end to end:
//!
//! * [`config_space`] describes the discrete configuration lattice
//!   (candidate depth `k`, block size, quantization bits) and projects
//!   relaxed points back onto it.
//! * [`latent`] maps a low-dimensional latent vector through a small decoder
//!   onto the continuous hull of that lattice.
//! * [`diff_peir`] prices a relaxed configuration in memory and float
//!   operation counts and turns those into differentiable carbon / latency
//!   estimates.
//! * [`potential`] combines cost and effectiveness into the scalar objective
//!   the sampler descends.
//! * [`guidance`] scores query / configuration affinity with a contrastively
//!   trained twin-tower model whose gradient steers the sampler.
//! * [`sampler`] runs the noisy descent loop: gradient step, manifold
//!   projection, early exit, validation rollback, lattice projection and
//!   repair.
//! * [`calibration`] keeps the cost coefficients honest online with an
//!   exponentially weighted recursive least-squares estimator.
//! * [`cache`] short-circuits queries that look like ones already solved.
//! * [`workload`] is the synthetic serving oracle the whole desk-scale
//!   verification story runs against, plus the batch experiment drivers.
//!
//! Batch drivers run queries in parallel when the `parallel` feature
//! (default) is enabled; results are identical either way because every
//! query draws from its own seeded stream.

pub mod cache;
pub mod calibration;
pub mod config_space;
pub mod diff_peir;
pub mod error;
pub mod guidance;
pub mod latent;
mod nn;
pub mod potential;
pub mod report;
pub mod sampler;
pub mod workload;

pub use error::{Error, Result};
