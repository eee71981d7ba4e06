use std::time::Instant;

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::operators::{CircConvOperator, ForwardOperator, Kernel};
use crate::optim::{subgradient_sign, soft_threshold, AdamConfig, AdamState, InnerSettings, L1Mode};
use crate::prior::Denoiser;
use crate::rng::{standard_normal_vec, stream_rng, streams};
use crate::sampler::RetainedContextCounter;
use crate::schedule::Schedule;

use super::chain::Chain;
use super::{fidelity_step, resolve_eta, RunReport, SolverKind, SolverSettings};

fn initial_kernel(settings: &SolverSettings) -> Result<Kernel> {
    let taps = match &settings.kernel_init {
        Some(k) => k.clone(),
        None => standard_normal_vec(
            &mut stream_rng(settings.seed, streams::KERNEL_INIT),
            settings.kernel_len,
        ),
    };
    let mut k = Kernel::centered(taps)?;
    if settings.normalize_kernel {
        normalize(&mut k);
    }
    Ok(k)
}

fn normalize(k: &mut Kernel) {
    let s: f64 = k.taps.iter().sum();
    if s.abs() > 1e-12 {
        k.taps.iter_mut().for_each(|t| *t /= s);
    }
}

fn check_blind(y: &[f64], d: &dyn Denoiser, settings: &SolverSettings) -> Result<()> {
    check_dim("measurements", d.dim(), y.len())?;
    if settings.kernel_len > y.len() {
        return Err(Error::config(format!(
            "kernel_len {} exceeds signal length {}",
            settings.kernel_len,
            y.len()
        )));
    }
    Ok(())
}

fn blind_residual(y: &[f64], k: &Kernel, x: &[f64]) -> f64 {
    linalg::dist(y, &k.convolve(x))
}

/// Joint Adam on `(x_{t_1}, nu_{t_1}, k)` for
/// `||y - k * (g_1(x) + nu)||^2 + lambda ||nu||_1 + l2 ||x||^2`.
/// Returns the final objective.
fn solve_measurement_layer(
    chain: &mut Chain<'_>,
    y: &[f64],
    kernel: &mut Kernel,
    outer: usize,
) -> Result<f64> {
    let optim = chain.optim;
    let settings = chain.settings;
    let g = chain.step(1)?;
    let cfg = AdamConfig::with_lr(optim.inner_lr);
    let mut x = chain.state.latents[1].clone();
    let mut nu = chain.state.deviations[0].clone();
    let mut adam_x = AdamState::new(x.len(), cfg)?;
    let mut adam_nu = AdamState::new(nu.len(), cfg)?;
    let mut adam_k = AdamState::new(
        kernel.len(),
        AdamConfig::with_lr(settings.kernel_lr.unwrap_or(optim.inner_lr)),
    )?;
    let mut loss = f64::NAN;
    for iter in 0..=optim.inner_iters {
        let z = linalg::add(&g.apply(&x), &nu);
        let r = linalg::sub(&kernel.convolve(&z), y);
        loss = linalg::norm_sq(&r)
            + optim.lambda * linalg::norm_l1(&nu)
            + optim.l2_weight * linalg::norm_sq(&x);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                outer,
                layer: 1,
                iter,
            });
        }
        if iter == optim.inner_iters {
            break;
        }
        let two_r = linalg::scale(&r, 2.0);
        let grad_z = kernel.correlate(&two_r);
        let grad_k = kernel.tap_gradient(&z, &two_r);
        let mut grad_x = g.vjp(&x, &grad_z);
        if optim.l2_weight > 0.0 {
            linalg::axpy(&mut grad_x, 2.0 * optim.l2_weight, &x);
        }
        adam_x.step(&mut x, &grad_x);
        if settings.sparse_deviation {
            match optim.mode {
                L1Mode::Subgradient => {
                    let grad_nu: Vec<f64> = grad_z
                        .iter()
                        .zip(&nu)
                        .map(|(gz, v)| gz + optim.lambda * subgradient_sign(*v))
                        .collect();
                    adam_nu.step(&mut nu, &grad_nu);
                }
                L1Mode::Proximal => {
                    adam_nu.step(&mut nu, &grad_z);
                    nu = soft_threshold(&nu, optim.inner_lr * optim.lambda);
                }
            }
        }
        adam_k.step(&mut kernel.taps, &grad_k);
        if settings.normalize_kernel {
            normalize(kernel);
        }
    }
    chain.state.latents[1] = x;
    chain.state.deviations[0] = nu;
    Ok(loss)
}

/// Blind deblurring: the measurement layer also updates the kernel taps.
pub fn dmilo_bid(
    y: &[f64],
    s: &Schedule,
    d: &dyn Denoiser,
    settings: &SolverSettings,
    optim: &InnerSettings,
) -> Result<RunReport> {
    settings.validate()?;
    optim.validate()?;
    check_blind(y, d, settings)?;
    let start = Instant::now();
    let counter = RetainedContextCounter::new();
    let mut chain = Chain::new(s, d, &counter, settings, optim)?;
    let mut kernel = initial_kernel(settings)?;
    let residual_init = blind_residual(y, &kernel, chain.state.estimate());
    let mut residual_trace = Vec::with_capacity(settings.outer_iters);
    let mut final_objective = None;
    for j in 1..=settings.outer_iters {
        chain.state.outer_index = j;
        final_objective = Some(solve_measurement_layer(&mut chain, y, &mut kernel, j)?);
        for i in 2..=chain.state.layers() {
            chain.solve_layer(i, j)?;
        }
        chain.resynthesize()?;
        residual_trace.push(blind_residual(y, &kernel, chain.state.estimate()));
    }
    Ok(RunReport {
        solver: SolverKind::DmiloBid,
        estimate: chain.state.estimate().to_vec(),
        residual_init,
        residual_trace,
        gradient_steps: Vec::new(),
        final_objective,
        context_peak: counter.peak(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        seed: settings.seed,
        state: chain.state,
        kernel: Some(kernel),
        config_hash: String::new(),
        metrics: None,
    })
}

/// Blind PGD: the outer iteration is the PGD step with the current kernel,
/// followed by a gradient step on the taps. With `eta_k = 0` and the true
/// kernel as `kernel_init` this reduces to `dmilo_pgd` with that kernel.
pub fn dmilo_pgd_bid(
    y: &[f64],
    s: &Schedule,
    d: &dyn Denoiser,
    settings: &SolverSettings,
    optim: &InnerSettings,
) -> Result<RunReport> {
    settings.validate()?;
    optim.validate()?;
    check_blind(y, d, settings)?;
    let start = Instant::now();
    let counter = RetainedContextCounter::new();
    let mut chain = Chain::new(s, d, &counter, settings, optim)?;
    chain.state.latents[0] = vec![0.0; d.dim()];
    let mut kernel = initial_kernel(settings)?;
    let residual_init = blind_residual(y, &kernel, chain.state.estimate());
    let mut residual_trace = Vec::with_capacity(settings.outer_iters);
    let mut gradient_steps = Vec::with_capacity(settings.outer_iters);
    let mut final_objective = None;
    for e in 1..=settings.outer_iters {
        let op = CircConvOperator::new(y.len(), kernel.clone())?;
        let eta = resolve_eta(settings, &op);
        let (stepped, record) = fidelity_step(y, &op, chain.state.estimate(), eta);
        gradient_steps.push(record);
        let target = op.apply(&stepped);
        final_objective = Some(chain.sweep(&target, &op, e)?);
        let x0 = chain.state.estimate();
        let r = linalg::sub(&kernel.convolve(x0), y);
        let grad_k = kernel.tap_gradient(x0, &linalg::scale(&r, 2.0));
        linalg::axpy(&mut kernel.taps, -settings.eta_k, &grad_k);
        if settings.normalize_kernel {
            normalize(&mut kernel);
        }
        if !linalg::all_finite(&kernel.taps) {
            return Err(Error::Divergence {
                outer: e,
                layer: 0,
                iter: 0,
            });
        }
        residual_trace.push(blind_residual(y, &kernel, chain.state.estimate()));
    }
    Ok(RunReport {
        solver: SolverKind::DmiloPgdBid,
        estimate: chain.state.estimate().to_vec(),
        residual_init,
        residual_trace,
        gradient_steps,
        final_objective,
        context_peak: counter.peak(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        seed: settings.seed,
        state: chain.state,
        kernel: Some(kernel),
        config_hash: String::new(),
        metrics: None,
    })
}
