use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::operators::ForwardOperator;
use crate::optim::{solve_inner, InnerProblem, InnerSettings};
use crate::prior::Denoiser;
use crate::rng::{standard_normal_vec, stream_rng, streams};
use crate::sampler::{sample_compose, RetainedContextCounter, SamplerStepIndex, StepMap};
use crate::schedule::Schedule;

use super::{relabel, SolverSettings};

/// Optimized chain: `latents[i]` is `x_{t_i}` and `deviations[i - 1]` is
/// `nu_{t_i}`. In last-timestep mode only `x_{t_0}`, `x_{t_1}`, `nu_{t_1}`
/// are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverState {
    pub latents: Vec<Vec<f64>>,
    pub deviations: Vec<Vec<f64>>,
    pub outer_index: usize,
}

impl SolverState {
    pub(crate) fn from_latents(latents: Vec<Vec<f64>>, outer_index: usize) -> Self {
        let n = latents[0].len();
        let deviations = vec![vec![0.0; n]; latents.len() - 1];
        Self {
            latents,
            deviations,
            outer_index,
        }
    }

    pub fn estimate(&self) -> &[f64] {
        &self.latents[0]
    }

    /// Number of optimized layers.
    pub fn layers(&self) -> usize {
        self.deviations.len()
    }

    pub fn deviation(&self, i: usize) -> &[f64] {
        &self.deviations[i - 1]
    }

    /// Total count of nonzero deviation entries.
    pub fn deviation_support(&self) -> usize {
        self.deviations
            .iter()
            .flatten()
            .filter(|v| **v != 0.0)
            .count()
    }
}

/// Draws `x_{t_N}` from the run's chain stream and fills the chain with one
/// sampling sweep; deviations start at zero.
pub fn init_chain(s: &Schedule, d: &dyn Denoiser, seed: u64) -> Result<SolverState> {
    init_with(s, d, seed, &RetainedContextCounter::new())
}

fn init_with(
    s: &Schedule,
    d: &dyn Denoiser,
    seed: u64,
    counter: &RetainedContextCounter,
) -> Result<SolverState> {
    let x_t = standard_normal_vec(&mut stream_rng(seed, streams::CHAIN_INIT), d.dim());
    let traj = sample_compose(s, d, &x_t, counter, false)?;
    Ok(SolverState::from_latents(traj.latents.clone(), 0))
}

/// Largest `max_abs(x_{t_{i-1}} - g_i(x_{t_i}) - nu_{t_i})` over the layers of
/// `state`.
pub fn resynthesis_error(s: &Schedule, d: &dyn Denoiser, state: &SolverState) -> Result<f64> {
    let counter = RetainedContextCounter::new();
    let mut worst = 0.0f64;
    for i in 1..=state.layers() {
        let g = StepMap::new(s, d, SamplerStepIndex::new(i, s)?, &counter)?;
        let pred = linalg::add(&g.apply(&state.latents[i]), state.deviation(i));
        worst = worst.max(linalg::max_abs(&linalg::sub(&state.latents[i - 1], &pred)));
    }
    Ok(worst)
}

/// Layer-wise machinery shared by the intermediate-layer solvers.
pub(crate) struct Chain<'a> {
    pub s: &'a Schedule,
    pub d: &'a dyn Denoiser,
    pub counter: &'a RetainedContextCounter,
    pub settings: &'a SolverSettings,
    pub optim: &'a InnerSettings,
    pub state: SolverState,
}

impl<'a> Chain<'a> {
    pub fn new(
        s: &'a Schedule,
        d: &'a dyn Denoiser,
        counter: &'a RetainedContextCounter,
        settings: &'a SolverSettings,
        optim: &'a InnerSettings,
    ) -> Result<Self> {
        let mut state = init_with(s, d, settings.seed, counter)?;
        if settings.last_timestep_only {
            state.latents.truncate(2);
            state.deviations.truncate(1);
        }
        Ok(Self {
            s,
            d,
            counter,
            settings,
            optim,
            state,
        })
    }

    pub fn step(&self, i: usize) -> Result<StepMap<'a>> {
        StepMap::new(self.s, self.d, SamplerStepIndex::new(i, self.s)?, self.counter)
    }

    fn frozen(&self) -> bool {
        !self.settings.sparse_deviation
    }

    /// Replaces layer `i >= 2` by the solution of
    /// `min ||x_{t_{i-1}} - g_i(x) - nu||^2 + lambda ||nu||_1`.
    pub fn solve_layer(&mut self, i: usize, outer: usize) -> Result<()> {
        let g = self.step(i)?;
        let target = self.state.latents[i - 1].clone();
        let problem = InnerProblem::new(&target, &g, self.optim)
            .with_l2(0.0)
            .frozen_deviation(self.frozen());
        let sol = solve_inner(
            &problem,
            &self.state.latents[i],
            &self.state.deviations[i - 1],
            self.optim.mode,
        )
        .map_err(|e| relabel(e, outer, i))?;
        self.state.latents[i] = sol.x;
        self.state.deviations[i - 1] = sol.nu;
        Ok(())
    }

    /// `x_{t_{i-1}} = g_i(x_{t_i}) + nu_{t_i}` from the top layer down.
    pub fn resynthesize(&mut self) -> Result<()> {
        for i in (1..=self.state.layers()).rev() {
            let g = self.step(i)?;
            let z = linalg::add(&g.apply(&self.state.latents[i]), &self.state.deviations[i - 1]);
            if !linalg::all_finite(&z) {
                return Err(Error::Divergence {
                    outer: self.state.outer_index,
                    layer: i,
                    iter: 0,
                });
            }
            self.state.latents[i - 1] = z;
        }
        Ok(())
    }

    /// One outer iteration: the measurement layer against `target` through
    /// `op`, the deeper layers against their optimized successors, then
    /// re-synthesis. Returns the measurement layer's final objective.
    pub fn sweep(&mut self, target: &[f64], op: &dyn ForwardOperator, outer: usize) -> Result<f64> {
        self.state.outer_index = outer;
        let g = self.step(1)?;
        let problem = InnerProblem::new(target, &g, self.optim)
            .with_outer(op)
            .frozen_deviation(self.frozen());
        let sol = solve_inner(
            &problem,
            &self.state.latents[1],
            &self.state.deviations[0],
            self.optim.mode,
        )
        .map_err(|e| relabel(e, outer, 1))?;
        let objective = sol.final_loss();
        self.state.latents[1] = sol.x;
        self.state.deviations[0] = sol.nu;
        for i in 2..=self.state.layers() {
            self.solve_layer(i, outer)?;
        }
        self.resynthesize()?;
        Ok(objective)
    }
}
