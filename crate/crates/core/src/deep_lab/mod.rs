//! Nonlinear extensions: a single-hidden-layer student/teacher pair with
//! hand-written backprop, and a tiny masked autoencoder with an EMA teacher.

pub mod mae;
pub mod probe;
pub mod shallow;
pub mod train;

pub use mae::{consistency_loss, mae_forward, recon_loss, MaeArch, TinyMae};
pub use probe::{run_deep_probe, run_deep_probe_subset};
pub use shallow::{shallow_forward, shallow_grads, Activation, ShallowNet};
pub use train::{train_step, MaeTrainer, RcMaeConfig, RcMaeMode, StepMetrics};
