//! Online kernel adaptive filtering for nonstationary time series.
//!
//! The crate is organised bottom-up:
//!
//! - [`kernel`]: Gaussian kernels with full symmetric precision matrices.
//! - [`dictionary`]: online dictionary sparsification (ALD, quantization
//!   distance, loss-change significance, orthogonal forward selection).
//! - [`weight_update`]: KRLS, multi-innovation RLS, recurrent gradient and
//!   linear RLS weight updaters.
//! - [`cmaes`]: a plain CMA-ES and its use for intermittent precision-matrix
//!   optimization.
//! - [`topology`]: series/parallel/cascade kernel connections with
//!   prequential per-depth error tracking.
//! - [`datasets`]: Lorenz and RLC generators, sunspot loader and supervised
//!   pair construction.
//! - [`experiment`]: config-driven experiment runner behind the `kcascade`
//!   binary.

pub mod cmaes;
pub mod datasets;
pub mod dictionary;
mod error;
pub mod experiment;
pub mod kernel;
pub mod linalg;
pub mod topology;
pub mod verify;
pub mod weight_update;

pub use error::{Error, Result};
pub use nalgebra::{DMatrix, DVector};
