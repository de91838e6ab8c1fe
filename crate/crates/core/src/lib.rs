//! Fairness-enhanced data-free robustness distillation.
//!
//! A robust teacher is distilled into a student using only synthetic data:
//! a conditional generator is trained against the teacher, labels are drawn
//! with a bias towards the classes the teacher defends worst, non-robust
//! feature channels are located with an information bottleneck and their
//! predictions pushed towards uniform, and the student is trained on those
//! samples plus uniform-target adversarial examples built from them.
//!
//! The modules follow that pipeline:
//!
//! * [`model_zoo`] architectures, split forwards, checkpoints and robust
//!   teacher training;
//! * [`attacks`] FGSM / PGD / CW∞ / targeted PGD / UTAE;
//! * [`fairness_reweight`] adversarial margins and class sampling weights;
//! * [`nonrobust_ib`] per-channel noise bottleneck and channel masks;
//! * [`generator`] the generator losses and training step;
//! * [`distill`] the alternating training loop and ablation arms;
//! * [`eval`] class-wise accuracy, fairness aggregates and reports;
//! * [`cli`] configuration, profiles and command implementations.

pub mod attacks;
pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod fairness_reweight;
pub mod generator;
pub mod losses;
pub mod model_zoo;
pub mod nonrobust_ib;
pub mod optim;
pub mod rng;

pub use error::{FerdError, Result};
pub use ferd_autograd::Tensor;
