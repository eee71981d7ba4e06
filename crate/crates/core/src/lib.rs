//! Diffusion-model intermediate-layer optimization for inverse problems,
//! built on analytic Gaussian-mixture priors so that every score, posterior
//! mean and Jacobian-vector product is exact.
//!
//! The pieces, bottom up:
//!
//! - [`schedule`]: variance-preserving noise schedule and time grid.
//! - [`prior`]: Gaussian-mixture prior with closed-form denoiser.
//! - [`sampler`]: deterministic DDIM steps, their VJPs, full compositions.
//! - [`operators`]: forward operators (masks, blur, downsampling, ...).
//! - [`optim`]: Adam and the per-layer subproblem.
//! - [`solvers`]: DMILO, DMILO-PGD, a whole-sampler baseline, blind variants.
//! - [`theory`]: numerical checks of the covering and recovery arguments.
//! - [`harness`]: experiment configs, metrics, reports and the CLI.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod linalg;
pub mod operators;
pub mod optim;
pub mod prior;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod solvers;
pub mod theory;

pub use error::{Error, Result};
pub use operators::{ForwardOperator, Kernel, OperatorKind};
pub use optim::{InnerSettings, L1Mode};
pub use prior::{Denoiser, GmmPrior, PriorConfig};
pub use sampler::{RetainedContextCounter, SamplerStepIndex};
pub use schedule::{NoiseLevel, Schedule, ScheduleConfig};
pub use solvers::{RunReport, SolverKind, SolverSettings, SolverState};
