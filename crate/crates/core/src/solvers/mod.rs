//! Solver drivers: intermediate-layer optimization through the sampler
//! composition (`dmilo`), its projected-gradient variant (`dmilo_pgd`), the
//! blind-deblurring versions of both, and a baseline that optimizes only the
//! initial latent through the whole sampler (`dmplug_baseline`).
//!
//! Gradient convention: `grad ||y - A(x)||^2 = 2 vjp_A(x, A(x) - y)`.

mod bid;
mod chain;

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::metrics::MetricSet;
use crate::linalg;
use crate::operators::{gram_spectral_radius, ForwardOperator, Kernel};
use crate::optim::{AdamConfig, AdamState, InnerSettings};
use crate::prior::Denoiser;
use crate::rng::{standard_normal_vec, stream_rng, streams};
use crate::sampler::{sample_compose, RetainedContextCounter};
use crate::schedule::Schedule;

pub use bid::{dmilo_bid, dmilo_pgd_bid};
pub use chain::{init_chain, resynthesis_error, SolverState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Dmilo,
    DmiloPgd,
    Dmplug,
    DmiloBid,
    DmiloPgdBid,
}

impl SolverKind {
    pub fn is_blind(self) -> bool {
        matches!(self, SolverKind::DmiloBid | SolverKind::DmiloPgdBid)
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SolverKind::Dmilo => "dmilo",
            SolverKind::DmiloPgd => "dmilo_pgd",
            SolverKind::Dmplug => "dmplug",
            SolverKind::DmiloBid => "dmilo_bid",
            SolverKind::DmiloPgdBid => "dmilo_pgd_bid",
        };
        f.write_str(s)
    }
}

/// `solver` block of an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    pub kind: SolverKind,
    #[serde(default = "default_outer_iters")]
    pub outer_iters: usize,
    /// Outer gradient step of the PGD variants. `None` picks
    /// `1 / (2 lambda_max(A^T A))`, the exact-projection step for masks.
    #[serde(default)]
    pub eta: Option<f64>,
    /// Kernel gradient step of `dmilo_pgd_bid`.
    #[serde(default)]
    pub eta_k: f64,
    #[serde(default)]
    pub last_timestep_only: bool,
    #[serde(default)]
    pub seed: u64,
    /// Optimize the sparse deviations; when false they stay at zero.
    #[serde(default = "yes")]
    pub sparse_deviation: bool,
    #[serde(default = "default_kernel_len")]
    pub kernel_len: usize,
    /// Starting kernel for the blind solvers; drawn from `N(0, I)` when absent.
    #[serde(default)]
    pub kernel_init: Option<Vec<f64>>,
    #[serde(default)]
    pub normalize_kernel: bool,
    /// Adam step for the kernel taps in `dmilo_bid`; defaults to `optim.inner_lr`.
    #[serde(default)]
    pub kernel_lr: Option<f64>,
}

fn default_outer_iters() -> usize {
    5
}
fn default_kernel_len() -> usize {
    5
}
fn yes() -> bool {
    true
}

impl SolverSettings {
    pub fn new(kind: SolverKind) -> Self {
        Self {
            kind,
            outer_iters: default_outer_iters(),
            eta: None,
            eta_k: 0.0,
            last_timestep_only: false,
            seed: 0,
            sparse_deviation: true,
            kernel_len: default_kernel_len(),
            kernel_init: None,
            normalize_kernel: false,
            kernel_lr: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(eta) = self.eta {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::config("solver.eta must be a finite value >= 0"));
            }
        }
        if !(self.eta_k >= 0.0 && self.eta_k.is_finite()) {
            return Err(Error::config("solver.eta_k must be a finite value >= 0"));
        }
        if self.kind.is_blind() {
            if self.kernel_len == 0 {
                return Err(Error::config("solver.kernel_len must be at least 1"));
            }
            if let Some(k) = &self.kernel_init {
                if k.len() != self.kernel_len {
                    return Err(Error::config(format!(
                        "solver.kernel_init has {} taps but kernel_len = {}",
                        k.len(),
                        self.kernel_len
                    )));
                }
            }
        }
        if let Some(lr) = self.kernel_lr {
            if !(lr > 0.0) {
                return Err(Error::config("solver.kernel_lr must be positive"));
            }
        }
        Ok(())
    }
}

/// Fidelity `||y - A(x)||^2` immediately before and after one PGD gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientStepRecord {
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub solver: SolverKind,
    pub estimate: Vec<f64>,
    /// `||y - A(x_{t_0})||` at the solver's starting estimate.
    pub residual_init: f64,
    /// `||y - A(x_{t_0})||` after each outer iteration.
    pub residual_trace: Vec<f64>,
    /// PGD variants only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gradient_steps: Vec<GradientStepRecord>,
    /// Objective of the last measurement-layer solve (or of the baseline's
    /// final iterate).
    pub final_objective: Option<f64>,
    pub context_peak: usize,
    pub wall_ms: f64,
    pub seed: u64,
    pub state: SolverState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<Kernel>,
    /// Hash of the experiment config that produced the run; set by the harness.
    #[serde(default)]
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricSet>,
}

impl RunReport {
    pub fn residual_final(&self) -> f64 {
        self.residual_trace.last().copied().unwrap_or(self.residual_init)
    }
}

pub(crate) fn relabel(err: Error, outer: usize, layer: usize) -> Error {
    match err {
        Error::Divergence { iter, .. } => Error::Divergence { outer, layer, iter },
        e => e,
    }
}

fn check_problem(y: &[f64], op: &dyn ForwardOperator, d: &dyn Denoiser) -> Result<()> {
    crate::error::check_dim("forward operator input", d.dim(), op.in_dim())?;
    crate::error::check_dim("measurements", op.out_dim(), y.len())?;
    Ok(())
}

fn residual(y: &[f64], op: &dyn ForwardOperator, x: &[f64]) -> f64 {
    linalg::dist(y, &op.apply(x))
}

/// Outer step size for the PGD variants.
pub fn resolve_eta(settings: &SolverSettings, op: &dyn ForwardOperator) -> f64 {
    settings.eta.unwrap_or_else(|| {
        let lmax = gram_spectral_radius(op, 50, 0x5eed);
        if lmax > 0.0 {
            0.5 / lmax
        } else {
            0.0
        }
    })
}

/// Intermediate-layer optimization with sparse deviations.
pub fn dmilo(
    y: &[f64],
    op: &dyn ForwardOperator,
    s: &Schedule,
    d: &dyn Denoiser,
    settings: &SolverSettings,
    optim: &InnerSettings,
) -> Result<RunReport> {
    settings.validate()?;
    optim.validate()?;
    check_problem(y, op, d)?;
    let start = Instant::now();
    let counter = RetainedContextCounter::new();
    let mut chain = chain::Chain::new(s, d, &counter, settings, optim)?;
    let residual_init = residual(y, op, chain.state.estimate());
    let mut residual_trace = Vec::with_capacity(settings.outer_iters);
    let mut final_objective = None;
    for j in 1..=settings.outer_iters {
        final_objective = Some(chain.sweep(y, op, j)?);
        residual_trace.push(residual(y, op, chain.state.estimate()));
    }
    Ok(RunReport {
        solver: SolverKind::Dmilo,
        estimate: chain.state.estimate().to_vec(),
        residual_init,
        residual_trace,
        gradient_steps: Vec::new(),
        final_objective,
        context_peak: counter.peak(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        seed: settings.seed,
        state: chain.state,
        kernel: None,
        config_hash: String::new(),
        metrics: None,
    })
}

/// One PGD gradient step `x - eta * 2 vjp_A(x, A(x) - y)`.
pub(crate) fn fidelity_step(
    y: &[f64],
    op: &dyn ForwardOperator,
    x: &[f64],
    eta: f64,
) -> (Vec<f64>, GradientStepRecord) {
    let ax = op.apply(x);
    let r = linalg::sub(&ax, y);
    let before = linalg::norm_sq(&r);
    let grad = op.vjp(x, &linalg::scale(&r, 2.0));
    let mut next = x.to_vec();
    linalg::axpy(&mut next, -eta, &grad);
    let after = linalg::norm_sq(&linalg::sub(y, &op.apply(&next)));
    (next, GradientStepRecord { before, after })
}

/// Projected gradient descent whose projection is the
/// intermediate-layer sweep, guided through the forward operator.
pub fn dmilo_pgd(
    y: &[f64],
    op: &dyn ForwardOperator,
    s: &Schedule,
    d: &dyn Denoiser,
    settings: &SolverSettings,
    optim: &InnerSettings,
) -> Result<RunReport> {
    settings.validate()?;
    optim.validate()?;
    check_problem(y, op, d)?;
    let start = Instant::now();
    let eta = resolve_eta(settings, op);
    let counter = RetainedContextCounter::new();
    let mut chain = chain::Chain::new(s, d, &counter, settings, optim)?;
    chain.state.latents[0] = vec![0.0; d.dim()];
    let residual_init = residual(y, op, chain.state.estimate());
    let mut residual_trace = Vec::with_capacity(settings.outer_iters);
    let mut gradient_steps = Vec::with_capacity(settings.outer_iters);
    let mut final_objective = None;
    for e in 1..=settings.outer_iters {
        let (stepped, record) = fidelity_step(y, op, chain.state.estimate(), eta);
        gradient_steps.push(record);
        let target = op.apply(&stepped);
        final_objective = Some(chain.sweep(&target, op, e)?);
        residual_trace.push(residual(y, op, chain.state.estimate()));
    }
    Ok(RunReport {
        solver: SolverKind::DmiloPgd,
        estimate: chain.state.estimate().to_vec(),
        residual_init,
        residual_trace,
        gradient_steps,
        final_objective,
        context_peak: counter.peak(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        seed: settings.seed,
        state: chain.state,
        kernel: None,
        config_hash: String::new(),
        metrics: None,
    })
}

/// Baseline: Adam on the initial latent `x_{t_N}` through the full sampler,
/// retaining every step's context for the backward pass. Runs
/// `outer_iters * inner_iters` steps and records the residual after each
/// block of `inner_iters`.
pub fn dmplug_baseline(
    y: &[f64],
    op: &dyn ForwardOperator,
    s: &Schedule,
    d: &dyn Denoiser,
    settings: &SolverSettings,
    optim: &InnerSettings,
) -> Result<RunReport> {
    settings.validate()?;
    optim.validate()?;
    check_problem(y, op, d)?;
    let start = Instant::now();
    let counter = RetainedContextCounter::new();
    let mut latent = standard_normal_vec(&mut stream_rng(settings.seed, streams::CHAIN_INIT), d.dim());
    let mut adam = AdamState::new(latent.len(), AdamConfig::with_lr(optim.inner_lr))?;
    let total = settings.outer_iters * optim.inner_iters;
    let mut residual_init = f64::NAN;
    let mut residual_trace = Vec::with_capacity(settings.outer_iters);
    let mut final_objective = None;
    for iter in 0..=total {
        let traj = sample_compose(s, d, &latent, &counter, true)?;
        let out = traj.output().to_vec();
        let r = linalg::sub(&op.apply(&out), y);
        let loss = linalg::norm_sq(&r);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                outer: iter / optim.inner_iters + 1,
                layer: 0,
                iter: iter % optim.inner_iters,
            });
        }
        if iter == 0 {
            residual_init = loss.sqrt();
        } else if iter % optim.inner_iters == 0 {
            residual_trace.push(loss.sqrt());
        }
        final_objective = Some(loss);
        if iter == total {
            break;
        }
        let cot = op.vjp(&out, &linalg::scale(&r, 2.0));
        let grad = traj.pullback(s, d, &cot)?;
        adam.step(&mut latent, &grad);
    }
    let traj = sample_compose(s, d, &latent, &counter, false)?;
    let state = SolverState::from_latents(traj.latents.clone(), settings.outer_iters);
    Ok(RunReport {
        solver: SolverKind::Dmplug,
        estimate: traj.output().to_vec(),
        residual_init,
        residual_trace,
        gradient_steps: Vec::new(),
        final_objective,
        context_peak: counter.peak(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        seed: settings.seed,
        state,
        kernel: None,
        config_hash: String::new(),
        metrics: None,
    })
}

/// Dispatches on `settings.kind`. The blind solvers ignore `op`'s kernel and
/// estimate their own.
pub fn run_solver(
    y: &[f64],
    op: &dyn ForwardOperator,
    s: &Schedule,
    d: &dyn Denoiser,
    settings: &SolverSettings,
    optim: &InnerSettings,
) -> Result<RunReport> {
    match settings.kind {
        SolverKind::Dmilo => dmilo(y, op, s, d, settings, optim),
        SolverKind::DmiloPgd => dmilo_pgd(y, op, s, d, settings, optim),
        SolverKind::Dmplug => dmplug_baseline(y, op, s, d, settings, optim),
        SolverKind::DmiloBid => dmilo_bid(y, s, d, settings, optim),
        SolverKind::DmiloPgdBid => dmilo_pgd_bid(y, s, d, settings, optim),
    }
}
