//! Adam and the per-layer subproblem
//! `min_{x, nu} ||target - F(M(x) + nu)||^2 + lambda ||nu||_1 + l2 ||x||^2`
//! where `M` is a sampling step and `F` is either the forward operator (first
//! layer) or the identity (deeper layers).

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::operators::ForwardOperator;
use crate::sampler::StepMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one parameter block.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
    cfg: AdamConfig,
}

impl AdamState {
    pub fn new(dim: usize, cfg: AdamConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || !(cfg.eps > 0.0) {
            return Err(Error::config(format!("invalid Adam hyperparameters {cfg:?}")));
        }
        Ok(Self {
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            step_count: 0,
            cfg,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        debug_assert_eq!(params.len(), self.first_moment.len());
        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powf(self.step_count as f64);
        let bc2 = 1.0 - beta2.powf(self.step_count as f64);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(state: &AdamState, params: &[f64], grad: &[f64]) -> Result<(Vec<f64>, AdamState)> {
    check_dim("adam params", state.first_moment.len(), params.len())?;
    check_dim("adam grad", params.len(), grad.len())?;
    let mut st = state.clone();
    let mut p = params.to_vec();
    st.step(&mut p, grad);
    Ok((p, st))
}

/// Elementwise `sign(v) max(|v| - kappa, 0)`.
pub fn soft_threshold(v: &[f64], kappa: f64) -> Vec<f64> {
    v.iter()
        .map(|x| x.signum() * (x.abs() - kappa).max(0.0))
        .collect()
}

/// `sign` with `sign(0) = 0`.
pub(crate) fn subgradient_sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// How the `lambda ||nu||_1` term is handled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Mode {
    /// Adam on the full objective, differentiating `|nu|` as `sign(nu)`.
    #[default]
    Subgradient,
    /// Adam on the smooth part, then `soft_threshold(nu, lr * lambda)`.
    Proximal,
}

/// A differentiable map `R^n -> R^n` used as the mapping of a subproblem.
pub trait DiffMap {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn vjp(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
}

impl DiffMap for StepMap<'_> {
    fn dim(&self) -> usize {
        StepMap::dim(self)
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        StepMap::apply(self, x)
    }
    fn vjp(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        StepMap::vjp(self, x, u)
    }
}

/// `x -> x`.
#[derive(Debug, Clone, Copy)]
pub struct IdentityMap(pub usize);

impl DiffMap for IdentityMap {
    fn dim(&self) -> usize {
        self.0
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
    fn vjp(&self, _x: &[f64], u: &[f64]) -> Vec<f64> {
        u.to_vec()
    }
}

/// Hyperparameters shared by every layer subproblem of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerSettings {
    #[serde(default = "default_inner_lr")]
    pub inner_lr: f64,
    #[serde(default = "default_inner_iters")]
    pub inner_iters: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_l2_weight")]
    pub l2_weight: f64,
    #[serde(default)]
    pub mode: L1Mode,
}

fn default_inner_lr() -> f64 {
    0.02
}
fn default_inner_iters() -> usize {
    200
}
fn default_lambda() -> f64 {
    0.1
}
fn default_l2_weight() -> f64 {
    1e-3
}

impl Default for InnerSettings {
    fn default() -> Self {
        Self {
            inner_lr: default_inner_lr(),
            inner_iters: default_inner_iters(),
            lambda: default_lambda(),
            l2_weight: default_l2_weight(),
            mode: L1Mode::default(),
        }
    }
}

impl InnerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0) {
            return Err(Error::config("optim.inner_lr must be positive"));
        }
        if self.inner_iters == 0 {
            return Err(Error::config("optim.inner_iters must be at least 1"));
        }
        if !(self.lambda >= 0.0) || !(self.l2_weight >= 0.0) {
            return Err(Error::config("optim.lambda and optim.l2_weight must be >= 0"));
        }
        Ok(())
    }
}

pub struct InnerProblem<'a> {
    pub target: &'a [f64],
    pub mapping: &'a dyn DiffMap,
    /// Applied after `M(x) + nu`; `None` means identity.
    pub outer: Option<&'a dyn ForwardOperator>,
    pub lambda: f64,
    pub l2_weight: f64,
    pub iters: usize,
    pub lr: f64,
    /// Keep `nu` fixed at its starting value.
    pub freeze_deviation: bool,
}

impl<'a> InnerProblem<'a> {
    pub fn new(target: &'a [f64], mapping: &'a dyn DiffMap, settings: &InnerSettings) -> Self {
        Self {
            target,
            mapping,
            outer: None,
            lambda: settings.lambda,
            l2_weight: settings.l2_weight,
            iters: settings.inner_iters,
            lr: settings.inner_lr,
            freeze_deviation: false,
        }
    }

    pub fn with_outer(mut self, op: &'a dyn ForwardOperator) -> Self {
        self.outer = Some(op);
        self
    }

    pub fn with_l2(mut self, l2_weight: f64) -> Self {
        self.l2_weight = l2_weight;
        self
    }

    pub fn frozen_deviation(mut self, frozen: bool) -> Self {
        self.freeze_deviation = frozen;
        self
    }

    /// Objective value at `(x, nu)`.
    pub fn loss(&self, x: &[f64], nu: &[f64]) -> f64 {
        self.evaluate(x, nu).0
    }

    /// Returns `(loss, gradient wrt z = M(x) + nu of the data term)`.
    fn evaluate(&self, x: &[f64], nu: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let z = linalg::add(&self.mapping.apply(x), nu);
        let pred = match self.outer {
            Some(op) => op.apply(&z),
            None => z.clone(),
        };
        let resid = linalg::sub(&pred, self.target);
        let loss = linalg::norm_sq(&resid)
            + self.lambda * linalg::norm_l1(nu)
            + self.l2_weight * linalg::norm_sq(x);
        let two_r = linalg::scale(&resid, 2.0);
        let grad_z = match self.outer {
            Some(op) => op.vjp(&z, &two_r),
            None => two_r,
        };
        (loss, grad_z, z)
    }

    fn validate(&self, x0: &[f64], nu0: &[f64]) -> Result<()> {
        let n = self.mapping.dim();
        check_dim("inner x0", n, x0.len())?;
        check_dim("inner nu0", n, nu0.len())?;
        let m = self.outer.map_or(n, |op| op.out_dim());
        if let Some(op) = self.outer {
            check_dim("inner outer operator", n, op.in_dim())?;
        }
        check_dim("inner target", m, self.target.len())?;
        if self.iters == 0 {
            return Err(Error::config("inner iterations must be at least 1"));
        }
        if !(self.lambda >= 0.0) || !(self.l2_weight >= 0.0) {
            return Err(Error::config("lambda and l2 weight must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub x: Vec<f64>,
    pub nu: Vec<f64>,
    /// `losses[k]` is the objective after `k` Adam steps; length `iters + 1`.
    pub losses: Vec<f64>,
}

impl InnerSolution {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("loss trace is never empty")
    }
}

/// Runs `p.iters` Adam steps on `(x, nu)` jointly from the warm start
/// `(x0, nu0)`. Each call starts with fresh optimizer moments.
pub fn solve_inner(p: &InnerProblem<'_>, x0: &[f64], nu0: &[f64], mode: L1Mode) -> Result<InnerSolution> {
    p.validate(x0, nu0)?;
    let cfg = AdamConfig::with_lr(p.lr);
    let mut x = x0.to_vec();
    let mut nu = nu0.to_vec();
    let mut adam_x = AdamState::new(x.len(), cfg)?;
    let mut adam_nu = AdamState::new(nu.len(), cfg)?;
    let mut losses = Vec::with_capacity(p.iters + 1);
    for iter in 0..=p.iters {
        let (loss, grad_z, _) = p.evaluate(&x, &nu);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                outer: 0,
                layer: 0,
                iter,
            });
        }
        losses.push(loss);
        if iter == p.iters {
            break;
        }
        let mut grad_x = p.mapping.vjp(&x, &grad_z);
        if p.l2_weight > 0.0 {
            linalg::axpy(&mut grad_x, 2.0 * p.l2_weight, &x);
        }
        adam_x.step(&mut x, &grad_x);
        if p.freeze_deviation {
            continue;
        }
        match mode {
            L1Mode::Subgradient => {
                let grad_nu: Vec<f64> = grad_z
                    .iter()
                    .zip(&nu)
                    .map(|(g, v)| g + p.lambda * subgradient_sign(*v))
                    .collect();
                adam_nu.step(&mut nu, &grad_nu);
            }
            L1Mode::Proximal => {
                adam_nu.step(&mut nu, &grad_z);
                nu = soft_threshold(&nu, p.lr * p.lambda);
            }
        }
    }
    Ok(InnerSolution { x, nu, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let st = AdamState::new(1, AdamConfig::with_lr(0.02)).unwrap();
        let (p, st) = adam_step(&st, &[1.0], &[1.0]).unwrap();
        assert!((p[0] - 0.98).abs() < 1e-9);
        assert_eq!(st.step_count(), 1);
        let fresh = AdamState::new(2, AdamConfig::default()).unwrap();
        let (q, _) = adam_step(&fresh, &[0.3, -0.4], &[0.0, 0.0]).unwrap();
        assert_eq!(q, vec![0.3, -0.4]);
    }

    #[test]
    fn adam_converges_on_1d_quadratic() {
        let mut st = AdamState::new(1, AdamConfig::with_lr(0.05)).unwrap();
        let mut x = [0.0];
        for _ in 0..200 {
            let g = [2.0 * (x[0] - 3.0)];
            st.step(&mut x, &g);
            assert!(st.second_moment()[0] >= 0.0);
        }
        assert!((x[0] - 3.0).abs() < 0.05, "x = {}", x[0]);
        assert_eq!(st.step_count(), 200);
    }

    #[test]
    fn soft_threshold_examples() {
        assert!((soft_threshold(&[0.25], 0.1)[0] - 0.15).abs() < 1e-15);
        assert_eq!(soft_threshold(&[-0.05], 0.1), vec![0.0]);
        assert_eq!(soft_threshold(&[-0.3, 0.2], 0.0), vec![-0.3, 0.2]);
        assert!((soft_threshold(&[-0.3], 0.1)[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(AdamState::new(1, AdamConfig::with_lr(0.0)).is_err());
        let map = IdentityMap(2);
        let t = [0.0, 0.0];
        let p = InnerProblem::new(&t, &map, &InnerSettings::default());
        assert!(solve_inner(&p, &[0.0], &[0.0, 0.0], L1Mode::Subgradient).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        struct Blowup;
        impl DiffMap for Blowup {
            fn dim(&self) -> usize {
                1
            }
            fn apply(&self, x: &[f64]) -> Vec<f64> {
                vec![if x[0] < 0.99 { f64::INFINITY } else { x[0] }]
            }
            fn vjp(&self, _x: &[f64], u: &[f64]) -> Vec<f64> {
                u.to_vec()
            }
        }
        let t = [1.0];
        let p = InnerProblem::new(&t, &Blowup, &InnerSettings::default());
        let err = solve_inner(&p, &[1.0], &[0.0], L1Mode::Subgradient).unwrap_err();
        assert!(matches!(err, Error::Divergence { iter: 1, .. }), "{err:?}");
    }

    #[test]
    fn frozen_deviation_stays_put() {
        let map = IdentityMap(3);
        let t = [1.0, 2.0, 3.0];
        let p = InnerProblem::new(&t, &map, &InnerSettings::default()).frozen_deviation(true);
        let s = solve_inner(&p, &[0.0; 3], &[0.0; 3], L1Mode::Subgradient).unwrap();
        assert_eq!(s.nu, vec![0.0; 3]);
        assert_eq!(s.losses.len(), 201);
    }
}
