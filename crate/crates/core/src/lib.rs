//! Desk-scale laboratory for the gradient dynamics of EMA-teacher
//! self-distillation in masked autoencoders.
//!
//! * [`linalg`], [`rng`], [`autodiff`]: dense double-precision substrate,
//!   labelled random streams and a reverse-mode tape.
//! * [`datasets`]: Gaussian-mixture vectors and synthetic patch images.
//! * [`masking`]: component and patch masks, same/different pairings.
//! * [`linear_lab`]: the closed-form linear student/teacher system.
//! * [`deep_lab`]: the single-hidden-layer model and a tiny RC-MAE.
//! * [`harness`]: configuration, multi-seed runs and CSV/JSON emission.

pub mod autodiff;
pub mod container;
pub mod datasets;
pub mod deep_lab;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod linear_lab;
pub mod masking;
pub mod rng;

pub use error::{LabError, Result};
pub use linalg::{DenseMatrix, DenseVector};
pub use rng::Rng;
