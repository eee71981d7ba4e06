//! Numerical checks of the recovery guarantee and its ingredients: greedy
//! epsilon-nets, the empirical covering bound for l1 balls, the S-REC
//! constant of a measurement operator over a point set, norm concentration
//! of Gaussian matrices, and a brute-force test of the recovery inequality
//! on instances small enough to enumerate.

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::operators::{ForwardOperator, GaussianOperator};
use crate::prior::GmmPrior;
use crate::rng::{derive_seed, rng_from_seed, standard_normal_vec};
use crate::sampler::{ddim_step, SamplerStepIndex, StepCoefficients};
use crate::schedule::{Schedule, ScheduleConfig};

/// Largest number of candidates `recovery_bound_check` will enumerate.
pub const CANDIDATE_BUDGET: usize = 1_000_000;

/// Indices of a greedy cover: a point joins the net when it is farther than
/// `eps` from every net point chosen so far.
pub fn greedy_epsilon_net(points: &[Vec<f64>], eps: f64) -> Result<Vec<usize>> {
    if !(eps > 0.0) {
        return Err(Error::config("epsilon-net radius must be positive"));
    }
    if points.is_empty() {
        return Err(Error::config("epsilon-net needs at least one point"));
    }
    let mut net: Vec<usize> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if net.iter().all(|&j| linalg::dist(p, &points[j]) > eps) {
            net.push(i);
        }
    }
    Ok(net)
}

/// Greedy net sizes at each radius and the least-squares slope of
/// `log |net|` against `log (1 / eps)`.
pub fn net_scaling_slope(points: &[Vec<f64>], radii: &[f64]) -> Result<(Vec<usize>, f64)> {
    if radii.len() < 2 {
        return Err(Error::config("net scaling needs at least two radii"));
    }
    let sizes = radii
        .iter()
        .map(|&eps| greedy_epsilon_net(points, eps).map(|n| n.len()))
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = radii.iter().map(|e| (1.0 / e).ln()).collect();
    let ys: Vec<f64> = sizes.iter().map(|&s| (s as f64).ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok((sizes, sxy / sxx))
}

/// Uniform draw from the l1 ball of radius `r` in `R^n`.
pub fn sample_l1_ball(rng: &mut impl Rng, n: usize, r: f64) -> Vec<f64> {
    // n + 1 exponentials normalized are uniform on the simplex; dropping the
    // slack coordinate and adding signs gives the solid cross-polytope
    let e: Vec<f64> = (0..=n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = e.iter().sum();
    e[..n]
        .iter()
        .map(|v| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * r * v / total
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaureyReport {
    pub n: usize,
    pub r: f64,
    pub lipschitz: f64,
    pub delta: f64,
    pub samples: usize,
    pub net_size: usize,
    pub log_net_size: f64,
    /// `(r^2 L^2 / delta^2) log(3n)`.
    pub bound: f64,
    pub holds: bool,
}

/// Greedy `(delta / L)`-net of samples from `B_1^n(r)` against the
/// empirical-method covering bound.
pub fn maurey_check(
    n: usize,
    r: f64,
    lipschitz: f64,
    delta: f64,
    samples: usize,
    seed: u64,
) -> Result<MaureyReport> {
    if n == 0 || samples == 0 || !(r >= 0.0) || !(lipschitz > 0.0) || !(delta > 0.0) {
        return Err(Error::config(
            "maurey check needs n, samples >= 1, r >= 0 and positive L, delta",
        ));
    }
    let mut rng = rng_from_seed(seed);
    let points: Vec<Vec<f64>> = (0..samples).map(|_| sample_l1_ball(&mut rng, n, r)).collect();
    let net_size = greedy_epsilon_net(&points, delta / lipschitz)?.len();
    let log_net_size = (net_size as f64).ln();
    let bound = (r * lipschitz / delta).powi(2) * (3.0 * n as f64).ln();
    Ok(MaureyReport {
        n,
        r,
        lipschitz,
        delta,
        samples,
        net_size,
        log_net_size,
        bound,
        holds: log_net_size <= bound,
    })
}

/// `min (||A(s1 - s2)|| + delta) / ||s1 - s2||` over distinct pairs, the
/// largest `gamma` for which the set satisfies S-REC with slack `delta`.
pub fn srec_gamma(op: &dyn ForwardOperator, points: &[Vec<f64>], delta: f64) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::config("S-REC estimate needs at least two points"));
    }
    if !op.is_linear() {
        return Err(Error::config("S-REC estimate needs a linear operator"));
    }
    for p in points {
        check_dim("S-REC point", op.in_dim(), p.len())?;
    }
    let images: Vec<Vec<f64>> = points.iter().map(|p| op.apply(p)).collect();
    let gamma = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let mut best = f64::INFINITY;
            for j in i + 1..points.len() {
                let d = linalg::dist(&points[i], &points[j]);
                if d == 0.0 {
                    continue;
                }
                let ad = linalg::dist(&images[i], &images[j]);
                best = best.min((ad + delta) / d);
            }
            best
        })
        .reduce(|| f64::INFINITY, f64::min);
    if gamma.is_infinite() {
        return Err(Error::Degenerate("all S-REC points coincide".into()));
    }
    Ok(gamma)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub n: usize,
    pub m: usize,
    pub eps: f64,
    pub trials: usize,
    pub failures: usize,
    pub failure_rate: f64,
    /// `2 exp(-eps^2 (1 - eps) m / 4)`.
    pub bound: f64,
}

/// Concentration of `||Ax||^2` for `A` with i.i.d. `N(0, 1/m)` entries at a
/// fixed random `x`.
pub fn concentration_check(
    n: usize,
    m: usize,
    eps: f64,
    trials: usize,
    seed: u64,
) -> Result<ConcentrationReport> {
    let x = standard_normal_vec(&mut rng_from_seed(seed), n);
    concentration_check_at(&x, m, eps, trials, seed)
}

/// [`concentration_check`] at a given `x`; trial `t` draws its matrix from
/// `derive_seed(seed, t + 1)`.
pub fn concentration_check_at(
    x: &[f64],
    m: usize,
    eps: f64,
    trials: usize,
    seed: u64,
) -> Result<ConcentrationReport> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Domain {
            what: "concentration eps",
            value: eps,
            lo: 0.0,
            hi: 1.0,
        });
    }
    if x.is_empty() || m == 0 || trials == 0 {
        return Err(Error::config("concentration check needs n, m, trials >= 1"));
    }
    let n = x.len();
    let xx = linalg::norm_sq(x);
    let failures = (0..trials)
        .into_par_iter()
        .map(|t| {
            let a = GaussianOperator::new(m, n, derive_seed(seed, t as u64 + 1))?;
            let ax = linalg::norm_sq(&a.apply(x));
            let ok = (1.0 - eps) * xx <= ax && ax <= (1.0 + eps) * xx;
            Ok(usize::from(!ok))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(ConcentrationReport {
        n,
        m,
        eps,
        trials,
        failures,
        failure_rate: failures as f64 / trials as f64,
        bound: 2.0 * (-eps * eps * (1.0 - eps) * m as f64 / 4.0).exp(),
    })
}

/// `z -> tanh(W z + b)` from the box `[-1, 1]^latent` into `R^n`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyGenerator {
    /// Row-major `n x latent`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub latent_dim: usize,
}

impl ToyGenerator {
    pub fn new(weights: Vec<f64>, bias: Vec<f64>, latent_dim: usize) -> Result<Self> {
        if latent_dim == 0 || bias.is_empty() {
            return Err(Error::config("toy generator needs latent and output dims >= 1"));
        }
        check_dim("toy generator weights", bias.len() * latent_dim, weights.len())?;
        Ok(Self {
            weights,
            bias,
            latent_dim,
        })
    }

    /// `W ~ N(0, 1)`, `b ~ N(0, 1/4)`.
    pub fn random(n: usize, latent_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let weights = standard_normal_vec(rng, n * latent_dim);
        let bias = linalg::scale(&standard_normal_vec(rng, n), 0.5);
        Self::new(weights, bias, latent_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.bias
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let row = &self.weights[i * self.latent_dim..(i + 1) * self.latent_dim];
                (linalg::dot(row, z) + b).tanh()
            })
            .collect()
    }

    pub fn sample_uniform(&self, rng: &mut impl Rng) -> Vec<f64> {
        let z: Vec<f64> = (0..self.latent_dim)
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect();
        self.apply(&z)
    }
}

/// The final sampler step `g_1` under a single-Gaussian prior. The denoiser
/// is affine, so `g_1` is `x -> a x + b` with `L = |a|`.
#[derive(Debug, Clone)]
pub struct ToyStep {
    pub schedule: Schedule,
    pub prior: GmmPrior,
}

impl ToyStep {
    pub fn new(schedule: Schedule, prior: GmmPrior) -> Result<Self> {
        if prior.components() != 1 {
            return Err(Error::config("toy step needs a single-component prior"));
        }
        Ok(Self { schedule, prior })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let i = SamplerStepIndex::new(1, &self.schedule).expect("schedule has at least one step");
        ddim_step(&self.schedule, &self.prior, i, x).expect("dimensions checked at construction")
    }

    /// `|skip + pred * alpha tau^2 / (alpha^2 tau^2 + sigma^2)|`.
    pub fn lipschitz(&self) -> f64 {
        let i = SamplerStepIndex::new(1, &self.schedule).expect("schedule has at least one step");
        let c = StepCoefficients::for_step(&self.schedule, i).expect("sigma > 0 on the grid");
        let lvl = self.schedule.level_at(1);
        let tau2 = self.prior.stddevs()[0].powi(2);
        let shrink = lvl.alpha * tau2 / (lvl.alpha * lvl.alpha * tau2 + lvl.sigma * lvl.sigma);
        (c.skip + c.pred * shrink).abs()
    }
}

/// Tiny instance of the recovery guarantee: `X_2 = g_2([-1,1]^latent)`
/// sampled on a grid, extended by a discretized `B_1^n(r)` with
/// `r = k delta / L`, and mapped through `g_1`.
#[derive(Debug, Clone)]
pub struct TheoryInstance {
    pub g2: ToyGenerator,
    pub g1: ToyStep,
    pub lipschitz: f64,
    pub delta: f64,
    pub k: f64,
    pub r: f64,
    /// Grid points per latent axis.
    pub grid: usize,
}

impl TheoryInstance {
    pub fn new(g2: ToyGenerator, g1: ToyStep, delta: f64, k: f64, grid: usize) -> Result<Self> {
        check_dim("toy step dimension", g2.out_dim(), g1.prior.dim())?;
        if !(delta > 0.0) || !(k >= 0.0) || grid == 0 {
            return Err(Error::config("theory instance needs delta > 0, k >= 0, grid >= 1"));
        }
        let lipschitz = g1.lipschitz();
        Ok(Self {
            r: k * delta / lipschitz,
            g2,
            g1,
            lipschitz,
            delta,
            k,
            grid,
        })
    }

    pub fn dim(&self) -> usize {
        self.g2.out_dim()
    }

    /// Row-major grid on `[-1, 1]^latent`, `grid` points per axis.
    pub fn latent_grid(&self) -> Vec<Vec<f64>> {
        let axis: Vec<f64> = if self.grid == 1 {
            vec![0.0]
        } else {
            (0..self.grid)
                .map(|i| -1.0 + 2.0 * i as f64 / (self.grid - 1) as f64)
                .collect()
        };
        let mut out = vec![Vec::new()];
        for _ in 0..self.g2.latent_dim {
            out = out
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |a| {
                        let mut q = p.clone();
                        q.push(*a);
                        q
                    })
                })
                .collect();
        }
        out
    }

    /// Number of candidates [`TheoryInstance::candidates`] would produce.
    pub fn candidate_count(&self) -> usize {
        self.grid.pow(self.g2.latent_dim as u32) * l1_ball_points(self.dim(), self.r).len()
    }

    /// `g_2(grid) + ball`, enumerated grid-major.
    pub fn candidates(&self) -> Result<Vec<Vec<f64>>> {
        let count = self.candidate_count();
        if count > CANDIDATE_BUDGET {
            return Err(Error::config(format!(
                "{count} candidates exceed the budget of {CANDIDATE_BUDGET}"
            )));
        }
        let ball = l1_ball_points(self.dim(), self.r);
        let mut out = Vec::with_capacity(count);
        for z in self.latent_grid() {
            let base = self.g2.apply(&z);
            for b in &ball {
                out.push(linalg::add(&base, b));
            }
        }
        Ok(out)
    }

    /// Largest `||g_1(a) - g_1(b)|| / ||a - b||` over random pairs.
    pub fn empirical_lipschitz(&self, pairs: usize, seed: u64) -> f64 {
        let mut rng = rng_from_seed(seed);
        let n = self.dim();
        (0..pairs)
            .map(|_| {
                let a = standard_normal_vec(&mut rng, n);
                let b = standard_normal_vec(&mut rng, n);
                linalg::dist(&self.g1.apply(&a), &self.g1.apply(&b)) / linalg::dist(&a, &b)
            })
            .fold(0.0, f64::max)
    }
}

/// Origin, the `2n` cross-polytope vertices `+-r e_j`, and one level of
/// midpoints: between the origin and each vertex, and between every
/// non-antipodal pair of vertices. `1 + 2n + 2n + 2n(n-1)` points.
pub fn l1_ball_points(n: usize, r: f64) -> Vec<Vec<f64>> {
    let mut vertices = Vec::with_capacity(2 * n);
    for j in 0..n {
        for s in [1.0, -1.0] {
            let mut v = vec![0.0; n];
            v[j] = s * r;
            vertices.push(v);
        }
    }
    let mut out = vec![vec![0.0; n]];
    out.extend(vertices.iter().cloned());
    out.extend(vertices.iter().map(|v| linalg::scale(v, 0.5)));
    for a in 0..vertices.len() {
        for b in a + 1..vertices.len() {
            if a / 2 == b / 2 {
                continue;
            }
            out.push(linalg::scale(&linalg::add(&vertices[a], &vertices[b]), 0.5));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub candidates: usize,
    pub gamma: f64,
    pub delta: f64,
    /// `||g_1(x_bar) - x*||`, the best approximation error in the extended range.
    pub best_error: f64,
    /// `||g_1(x_hat) - x*||` for the measurement-space optimum.
    pub measured_error: f64,
    pub best_index: usize,
    pub measured_index: usize,
    /// `(1 + 3/gamma) best_error + delta/gamma`.
    pub bound: f64,
    pub holds: bool,
}

impl RecoveryReport {
    /// The right-hand side with `gamma` replaced by `gamma_prime`.
    pub fn bound_with(&self, gamma_prime: f64) -> f64 {
        (1.0 + 3.0 / gamma_prime) * self.best_error + self.delta / gamma_prime
    }
}

fn first_argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Brute force over the extended range: `x_bar` minimizes `||x* - g_1(x)||`,
/// `x_hat` minimizes `||A x* - A g_1(x)||` (first index wins ties), and `gamma`
/// is the S-REC constant of `A` over `g_1(candidates)`.
pub fn recovery_bound_check(
    inst: &TheoryInstance,
    op: &dyn ForwardOperator,
    xstar: &[f64],
) -> Result<RecoveryReport> {
    check_dim("recovery target", inst.dim(), xstar.len())?;
    check_dim("recovery operator", inst.dim(), op.in_dim())?;
    let images: Vec<Vec<f64>> = inst
        .candidates()?
        .par_iter()
        .map(|c| inst.g1.apply(c))
        .collect();
    let ax = op.apply(xstar);
    let measured: Vec<f64> = images
        .par_iter()
        .map(|g| linalg::dist(&ax, &op.apply(g)))
        .collect();
    let best_index = first_argmin(images.iter().map(|g| linalg::dist(xstar, g)));
    let measured_index = first_argmin(measured.into_iter());
    let gamma = srec_gamma(op, &images, inst.delta)?;
    let best_error = linalg::dist(xstar, &images[best_index]);
    let measured_error = linalg::dist(xstar, &images[measured_index]);
    let bound = (1.0 + 3.0 / gamma) * best_error + inst.delta / gamma;
    Ok(RecoveryReport {
        candidates: images.len(),
        gamma,
        delta: inst.delta,
        best_error,
        measured_error,
        best_index,
        measured_index,
        bound,
        holds: measured_error <= bound,
    })
}

/// Settings for a batch of random recovery instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryConfig {
    pub instances: usize,
    pub n: usize,
    pub latent_dim: usize,
    pub m: usize,
    pub grid: usize,
    pub delta: f64,
    /// `r = k delta / L`.
    pub k: f64,
    pub tau: f64,
    /// Standard deviation of the off-range perturbation added to `x*`.
    pub xstar_noise: f64,
    pub min_pass: usize,
    pub schedule: ScheduleConfig,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            instances: 50,
            n: 6,
            latent_dim: 2,
            m: 24,
            grid: 7,
            delta: 0.1,
            k: 1.0,
            tau: 0.5,
            xstar_noise: 0.05,
            min_pass: 48,
            schedule: ScheduleConfig::default(),
        }
    }
}

/// Instance `index` of a batch: draws `g_2`, the prior mean, `A`, a latent
/// `z*` and the perturbation from `derive_seed(seed, index)`, in that order.
pub fn random_instance(
    cfg: &RecoveryConfig,
    seed: u64,
    index: usize,
) -> Result<(TheoryInstance, GaussianOperator, Vec<f64>)> {
    let mut rng = rng_from_seed(derive_seed(seed, index as u64));
    let g2 = ToyGenerator::random(cfg.n, cfg.latent_dim, &mut rng)?;
    let mean = linalg::scale(&standard_normal_vec(&mut rng, cfg.n), 0.5);
    let g1 = ToyStep::new(cfg.schedule.build()?, GmmPrior::gaussian(mean, cfg.tau)?)?;
    let inst = TheoryInstance::new(g2, g1, cfg.delta, cfg.k, cfg.grid)?;
    let op = GaussianOperator::with_rng(cfg.m, cfg.n, &mut rng)?;
    let x2 = inst.g2.sample_uniform(&mut rng);
    let mut xstar = inst.g1.apply(&x2);
    for v in xstar.iter_mut() {
        *v += cfg.xstar_noise * rng.sample::<f64, _>(StandardNormal);
    }
    Ok((inst, op, xstar))
}

pub fn recovery_batch(cfg: &RecoveryConfig, seed: u64) -> Result<Vec<RecoveryReport>> {
    (0..cfg.instances)
        .map(|i| {
            let (inst, op, xstar) = random_instance(cfg, seed, i)?;
            recovery_bound_check(&inst, &op, &xstar)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetScalingConfig {
    pub points: usize,
    pub ambient: usize,
    pub latent_dim: usize,
    pub radii: Vec<f64>,
    pub max_slope: f64,
}

impl Default for NetScalingConfig {
    fn default() -> Self {
        Self {
            points: 500,
            ambient: 16,
            latent_dim: 2,
            radii: vec![0.4, 0.2, 0.1, 0.05],
            max_slope: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaureyConfig {
    pub n: usize,
    pub r: f64,
    pub lipschitz: f64,
    pub delta: f64,
    pub samples: usize,
}

impl Default for MaureyConfig {
    fn default() -> Self {
        Self {
            n: 8,
            r: 1.0,
            lipschitz: 1.0,
            delta: 0.5,
            samples: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrecConfig {
    pub ambient: usize,
    pub latent_dim: usize,
    pub points: usize,
    /// Defaults to `ceil(8 latent_dim ln(ambient))`.
    pub m: Option<usize>,
    pub delta: f64,
    pub trials: usize,
    pub gamma_min: f64,
    pub min_pass: usize,
}

impl Default for SrecConfig {
    fn default() -> Self {
        Self {
            ambient: 16,
            latent_dim: 2,
            points: 200,
            m: None,
            delta: 0.0,
            trials: 100,
            gamma_min: 0.5,
            min_pass: 95,
        }
    }
}

impl SrecConfig {
    pub fn rows(&self) -> usize {
        self.m.unwrap_or_else(|| {
            (8.0 * self.latent_dim as f64 * (self.ambient as f64).ln()).ceil() as usize
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConcentrationConfig {
    pub n: usize,
    pub cases: Vec<(usize, f64)>,
    pub trials: usize,
}

impl Default for ConcentrationConfig {
    fn default() -> Self {
        Self {
            n: 32,
            cases: vec![(50, 0.5), (100, 0.5), (400, 0.5)],
            trials: 1000,
        }
    }
}

/// Input of `verify-theory`. Every block has working defaults, so `{}` is a
/// valid config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub seed: u64,
    pub net_scaling: NetScalingConfig,
    pub maurey: MaureyConfig,
    pub srec: SrecConfig,
    pub concentration: ConcentrationConfig,
    pub recovery: RecoveryConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
}

impl From<bool> for CheckStatus {
    fn from(ok: bool) -> Self {
        if ok {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub status: CheckStatus,
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryReport {
    pub seed: u64,
    pub all_pass: bool,
    pub checks: Vec<CheckResult>,
}

fn check(name: &str, ok: bool, details: serde_json::Value) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        status: ok.into(),
        details,
    }
}

fn manifold_points(
    ambient: usize,
    latent_dim: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    let g = ToyGenerator::random(ambient, latent_dim, rng)?;
    Ok((0..count).map(|_| g.sample_uniform(rng)).collect())
}

/// Runs every check in `cfg` and collects a pass/fail report.
pub fn verify_theory(cfg: &TheoryConfig) -> Result<TheoryReport> {
    let seed = cfg.seed;
    let mut checks = Vec::new();

    let nc = &cfg.net_scaling;
    let pts = manifold_points(nc.ambient, nc.latent_dim, nc.points, &mut rng_from_seed(derive_seed(seed, 1)))?;
    let (sizes, slope) = net_scaling_slope(&pts, &nc.radii)?;
    let valid = nc.radii.iter().all(|&eps| {
        let net = greedy_epsilon_net(&pts, eps).expect("radius validated");
        pts.iter()
            .all(|p| net.iter().any(|&j| linalg::dist(p, &pts[j]) <= eps))
    });
    checks.push(check(
        "net_scaling",
        valid && slope <= nc.max_slope,
        json!({ "radii": nc.radii, "net_sizes": sizes, "slope": slope, "max_slope": nc.max_slope, "covers": valid }),
    ));

    let mc = &cfg.maurey;
    let maurey = maurey_check(mc.n, mc.r, mc.lipschitz, mc.delta, mc.samples, derive_seed(seed, 2))?;
    checks.push(check("maurey", maurey.holds, serde_json::to_value(&maurey)?));

    let sc = &cfg.srec;
    let m = sc.rows();
    let gammas = (0..sc.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_from_seed(derive_seed(derive_seed(seed, 3), t as u64));
            let pts = manifold_points(sc.ambient, sc.latent_dim, sc.points, &mut rng)?;
            let a = GaussianOperator::with_rng(m, sc.ambient, &mut rng)?;
            srec_gamma(&a, &pts, sc.delta)
        })
        .collect::<Result<Vec<f64>>>()?;
    let passing = gammas.iter().filter(|g| **g >= sc.gamma_min).count();
    checks.push(check(
        "srec_gamma",
        passing >= sc.min_pass,
        json!({
            "m": m, "trials": sc.trials, "gamma_min": sc.gamma_min, "passing": passing,
            "min_pass": sc.min_pass, "gamma_median": linalg::median(&gammas),
            "gamma_min_observed": gammas.iter().copied().fold(f64::INFINITY, f64::min),
        }),
    ));

    let cc = &cfg.concentration;
    let mut conc = Vec::new();
    for (idx, &(m, eps)) in cc.cases.iter().enumerate() {
        conc.push(concentration_check(cc.n, m, eps, cc.trials, derive_seed(seed, 40 + idx as u64))?);
    }
    checks.push(check(
        "concentration",
        conc.iter().all(|c| c.failure_rate <= c.bound),
        serde_json::to_value(&conc)?,
    ));

    let rc = &cfg.recovery;
    let reports = recovery_batch(rc, derive_seed(seed, 5))?;
    let held = reports.iter().filter(|r| r.holds).count();
    let sample = reports.first().map(|r| r.candidates).unwrap_or(0);
    let lipschitz = random_instance(rc, derive_seed(seed, 5), 0)?.0.lipschitz;
    checks.push(check(
        "recovery_bound",
        held >= rc.min_pass,
        json!({
            "instances": rc.instances, "held": held, "min_pass": rc.min_pass,
            "candidates_per_instance": sample, "lipschitz": lipschitz, "delta": rc.delta, "k": rc.k,
            "gamma_median": linalg::median(&reports.iter().map(|r| r.gamma).collect::<Vec<_>>()),
        }),
    ));

    Ok(TheoryReport {
        seed,
        all_pass: checks.iter().all(|c| c.status == CheckStatus::Pass),
        checks,
    })
}
