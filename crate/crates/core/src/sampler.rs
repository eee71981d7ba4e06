//! First-order DDIM sampling viewed as a composition of per-step maps.
//!
//! Step `i` maps a latent at `t_i` to `t_{i-1}`:
//! `g_i(x) = (sigma_{i-1}/sigma_i) x + (alpha_{i-1} - sigma_{i-1} alpha_i / sigma_i) x_theta(x, t_i)`
//! and the full sampler is `G = g_1 o g_2 o ... o g_N`.
//!
//! Memory is accounted as *retained differentiation contexts*: a context is
//! the saved input of one step that its vector-Jacobian product needs.

use std::cell::Cell;
use std::io::Write;
use std::rc::Rc;

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::prior::Denoiser;
use crate::schedule::{NoiseLevel, Schedule};

/// Index `i` in `1..=N` of the step `t_i -> t_{i-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerStepIndex(usize);

impl SamplerStepIndex {
    pub fn new(i: usize, schedule: &Schedule) -> Result<Self> {
        if i == 0 || i > schedule.steps() {
            return Err(Error::config(format!(
                "sampler step index {i} outside 1..={}",
                schedule.steps()
            )));
        }
        Ok(Self(i))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

#[derive(Debug, Default)]
struct Counts {
    current: Cell<usize>,
    peak: Cell<usize>,
}

/// Counts simultaneously retained per-step contexts within one solver run.
#[derive(Debug, Clone, Default)]
pub struct RetainedContextCounter {
    counts: Rc<Counts>,
}

/// One retained context; released when dropped.
#[derive(Debug)]
pub struct ContextToken {
    counts: Rc<Counts>,
}

impl Drop for ContextToken {
    fn drop(&mut self) {
        let c = self.counts.current.get();
        self.counts.current.set(c - 1);
    }
}

impl RetainedContextCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn acquire(&self) -> ContextToken {
        let c = self.counts.current.get() + 1;
        self.counts.current.set(c);
        if c > self.counts.peak.get() {
            self.counts.peak.set(c);
        }
        ContextToken {
            counts: Rc::clone(&self.counts),
        }
    }

    pub fn current(&self) -> usize {
        self.counts.current.get()
    }

    pub fn peak(&self) -> usize {
        self.counts.peak.get()
    }
}

/// Coefficients of `g_i(x) = skip * x + pred * x_theta(x, t_i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub skip: f64,
    pub pred: f64,
}

impl StepCoefficients {
    pub fn between(cur: NoiseLevel, prev: NoiseLevel) -> Result<Self> {
        if !(cur.sigma > 0.0) {
            return Err(Error::Singularity(format!(
                "DDIM step from sigma = {} is undefined",
                cur.sigma
            )));
        }
        let skip = prev.sigma / cur.sigma;
        Ok(Self {
            skip,
            pred: prev.alpha - skip * cur.alpha,
        })
    }

    pub fn for_step(schedule: &Schedule, i: SamplerStepIndex) -> Result<Self> {
        let i = i.get();
        Self::between(schedule.level_at(i), schedule.level_at(i - 1))
    }
}

/// DDIM update from level `cur` to level `prev` with denoiser `d`.
pub fn ddim_step_between(
    d: &dyn Denoiser,
    cur: NoiseLevel,
    prev: NoiseLevel,
    x: &[f64],
) -> Result<Vec<f64>> {
    check_dim("ddim_step", d.dim(), x.len())?;
    let c = StepCoefficients::between(cur, prev)?;
    Ok(apply_step(d, c, cur, x))
}

fn apply_step(d: &dyn Denoiser, c: StepCoefficients, cur: NoiseLevel, x: &[f64]) -> Vec<f64> {
    let pred = d.predict(x, cur);
    x.iter()
        .zip(&pred)
        .map(|(xi, pi)| c.skip * xi + c.pred * pi)
        .collect()
}

fn step_vjp(d: &dyn Denoiser, c: StepCoefficients, cur: NoiseLevel, x: &[f64], u: &[f64]) -> Vec<f64> {
    let back = d.vjp(x, cur, u);
    u.iter()
        .zip(&back)
        .map(|(ui, bi)| c.skip * ui + c.pred * bi)
        .collect()
}

/// `g_i(x)`.
pub fn ddim_step(s: &Schedule, d: &dyn Denoiser, i: SamplerStepIndex, x: &[f64]) -> Result<Vec<f64>> {
    check_dim("ddim_step", d.dim(), x.len())?;
    let c = StepCoefficients::for_step(s, i)?;
    Ok(apply_step(d, c, s.level_at(i.get()), x))
}

/// `u^T (d g_i / d x)`.
pub fn ddim_step_vjp(
    s: &Schedule,
    d: &dyn Denoiser,
    i: SamplerStepIndex,
    x: &[f64],
    u: &[f64],
) -> Result<Vec<f64>> {
    check_dim("ddim_step_vjp", d.dim(), x.len())?;
    check_dim("ddim_step_vjp cotangent", d.dim(), u.len())?;
    let c = StepCoefficients::for_step(s, i)?;
    Ok(step_vjp(d, c, s.level_at(i.get()), x, u))
}

/// A single sampling step `g_i` as a differentiable map. Each VJP holds one
/// retained context for its duration.
pub struct StepMap<'a> {
    denoiser: &'a dyn Denoiser,
    coeffs: StepCoefficients,
    level: NoiseLevel,
    counter: RetainedContextCounter,
}

impl<'a> StepMap<'a> {
    pub fn new(
        s: &Schedule,
        d: &'a dyn Denoiser,
        i: SamplerStepIndex,
        counter: &RetainedContextCounter,
    ) -> Result<Self> {
        Ok(Self {
            denoiser: d,
            coeffs: StepCoefficients::for_step(s, i)?,
            level: s.level_at(i.get()),
            counter: counter.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.denoiser.dim()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        apply_step(self.denoiser, self.coeffs, self.level, x)
    }

    pub fn vjp(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let _ctx = self.counter.acquire();
        step_vjp(self.denoiser, self.coeffs, self.level, x, u)
    }
}

/// Saved input of one step, held until the backward pass consumes it.
#[derive(Debug)]
pub struct StepContext {
    step: usize,
    input: Vec<f64>,
    _token: ContextToken,
}

/// Result of running the sampler: `latents[i]` is `x_{t_i}` for `i in 0..=N`.
#[derive(Debug)]
pub struct Trajectory {
    pub latents: Vec<Vec<f64>>,
    contexts: Vec<StepContext>,
}

impl Trajectory {
    /// Final sample `x_{t_0}`.
    pub fn output(&self) -> &[f64] {
        &self.latents[0]
    }

    pub fn retained(&self) -> usize {
        self.contexts.len()
    }

    /// `u^T (d G / d x_{t_N})`, consuming the retained contexts from step 1 up
    /// to step N. Requires a trajectory built with `retain_all`.
    pub fn pullback(mut self, s: &Schedule, d: &dyn Denoiser, u: &[f64]) -> Result<Vec<f64>> {
        if self.contexts.len() != s.steps() {
            return Err(Error::config(
                "trajectory did not retain its step contexts; rerun with retain_all",
            ));
        }
        check_dim("trajectory pullback", d.dim(), u.len())?;
        let mut g = u.to_vec();
        // contexts were pushed in order N, N-1, ..., 1
        while let Some(ctx) = self.contexts.pop() {
            let i = SamplerStepIndex(ctx.step);
            let c = StepCoefficients::for_step(s, i)?;
            g = step_vjp(d, c, s.level_at(ctx.step), &ctx.input, &g);
        }
        Ok(g)
    }
}

/// Runs `g_N, ..., g_1` from `x_t_end`. With `retain_all` every step keeps its
/// context alive until the trajectory is dropped or pulled back (peak N);
/// otherwise each step acquires and releases one context (peak 1).
pub fn sample_compose(
    s: &Schedule,
    d: &dyn Denoiser,
    x_t_end: &[f64],
    counter: &RetainedContextCounter,
    retain_all: bool,
) -> Result<Trajectory> {
    check_dim("sample_compose", d.dim(), x_t_end.len())?;
    let n_steps = s.steps();
    let mut latents = vec![Vec::new(); n_steps + 1];
    latents[n_steps] = x_t_end.to_vec();
    let mut contexts = Vec::with_capacity(if retain_all { n_steps } else { 0 });
    for i in (1..=n_steps).rev() {
        let token = counter.acquire();
        let next = ddim_step(s, d, SamplerStepIndex(i), &latents[i])?;
        if retain_all {
            contexts.push(StepContext {
                step: i,
                input: latents[i].clone(),
                _token: token,
            });
        }
        latents[i - 1] = next;
    }
    Ok(Trajectory { latents, contexts })
}

/// Writes `step,latent_norm` rows for `latents[i] = x_{t_i}`, from `i = N` down to 0.
pub fn write_trace_csv<W: Write>(latents: &[Vec<f64>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "latent_norm"])?;
    for (i, x) in latents.iter().enumerate().rev() {
        w.write_record([i.to_string(), format!("{:.17e}", linalg::norm(x))])?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "trace".into(),
        source: e,
    })?;
    Ok(())
}
