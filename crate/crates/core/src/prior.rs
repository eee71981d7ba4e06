//! Analytic Gaussian-mixture data prior.
//!
//! With `p_0 = sum_k w_k N(mu_k, tau_k^2 I)` the forward marginal at noise
//! level `(alpha, sigma)` is again a mixture,
//! `p_t = sum_k w_k N(alpha mu_k, (alpha^2 tau_k^2 + sigma^2) I)`, so the
//! score, the posterior mean `E[x_0 | x_t]` and its Jacobian are all closed
//! form. The posterior mean stands in for a trained data-prediction network.

use rand::Rng;
use rand::distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::rng::{rng_from_seed, standard_normal_vec};
use crate::schedule::NoiseLevel;

/// Data-prediction model `x_theta(x, t)` and its vector-Jacobian product.
///
/// Implementations may assume `x` and `u` have length [`Denoiser::dim`];
/// callers validate dimensions.
pub trait Denoiser: Send + Sync {
    fn dim(&self) -> usize;

    fn predict(&self, x: &[f64], level: NoiseLevel) -> Vec<f64>;

    /// `u^T (d predict / d x)` at `x`.
    fn vjp(&self, x: &[f64], level: NoiseLevel, u: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmPrior {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    stddevs: Vec<f64>,
}

/// Prior block of an experiment config. Either `means` (optionally with
/// `weights`) is given explicitly, or `K` means are drawn from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    #[serde(rename = "K", default = "default_k")]
    pub components: usize,
    pub n: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

fn default_k() -> usize {
    5
}

fn default_tau() -> f64 {
    0.1
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            components: default_k(),
            n: 16,
            tau: default_tau(),
            seed: 0,
            means: None,
            weights: None,
        }
    }
}

impl PriorConfig {
    pub fn build(&self) -> Result<GmmPrior> {
        match &self.means {
            Some(means) => {
                let k = means.len();
                let weights = match &self.weights {
                    Some(w) => w.clone(),
                    None => vec![1.0 / k.max(1) as f64; k],
                };
                let prior = GmmPrior::new(weights, means.clone(), vec![self.tau; k])?;
                if prior.dim() != self.n {
                    return Err(Error::config(format!(
                        "prior.n = {} but explicit means have dimension {}",
                        self.n,
                        prior.dim()
                    )));
                }
                Ok(prior)
            }
            None => {
                if self.weights.is_some() {
                    return Err(Error::config("prior.weights given without prior.means"));
                }
                GmmPrior::toy(self.components, self.n, self.tau, self.seed)
            }
        }
    }
}

/// Per-component quantities at one `(x, level)`.
struct Posterior {
    resp: Vec<f64>,
    /// `-(x - alpha mu_k) / v_k`
    comp_scores: Vec<Vec<f64>>,
    /// `alpha tau_k^2 / v_k`
    shrink: Vec<f64>,
    log_density: f64,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, stddevs: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::config("mixture needs at least one component"));
        }
        if means.len() != k || stddevs.len() != k {
            return Err(Error::config(format!(
                "mixture has {k} weights, {} means, {} stddevs",
                means.len(),
                stddevs.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::config("mixture weights must be strictly positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("mixture weights sum to {total}, not 1")));
        }
        let n = means[0].len();
        if n == 0 || means.iter().any(|m| m.len() != n) {
            return Err(Error::config("all means must share one positive dimension"));
        }
        if stddevs.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::config("component scales must be positive"));
        }
        Ok(Self {
            weights,
            means,
            stddevs,
        })
    }

    /// Uniform-weight mixture with `k` means drawn from a seeded standard
    /// normal and rescaled so every coordinate lies in `[-1, 1]`.
    pub fn toy(k: usize, n: usize, tau: f64, seed: u64) -> Result<Self> {
        if k == 0 || n == 0 {
            return Err(Error::config("prior.K and prior.n must be positive"));
        }
        let mut rng = rng_from_seed(seed);
        let mut means: Vec<Vec<f64>> = (0..k).map(|_| standard_normal_vec(&mut rng, n)).collect();
        let peak = means.iter().map(|m| linalg::max_abs(m)).fold(0.0, f64::max);
        if peak > 0.0 {
            for m in &mut means {
                m.iter_mut().for_each(|v| *v /= peak);
            }
        }
        Self::new(vec![1.0 / k as f64; k], means, vec![tau; k])
    }

    /// Single isotropic Gaussian `N(mean, tau^2 I)`.
    pub fn gaussian(mean: Vec<f64>, tau: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![tau])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn stddevs(&self) -> &[f64] {
        &self.stddevs
    }

    fn posterior(&self, x: &[f64], level: NoiseLevel) -> Posterior {
        let n = x.len() as f64;
        let NoiseLevel { alpha, sigma, .. } = level;
        let k = self.components();
        let mut logits = Vec::with_capacity(k);
        let mut comp_scores = Vec::with_capacity(k);
        let mut shrink = Vec::with_capacity(k);
        for ((w, mu), tau) in self.weights.iter().zip(&self.means).zip(&self.stddevs) {
            let var = alpha * alpha * tau * tau + sigma * sigma;
            let diff: Vec<f64> = x.iter().zip(mu).map(|(xi, mi)| xi - alpha * mi).collect();
            let sq = linalg::norm_sq(&diff);
            logits.push(w.ln() - 0.5 * n * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * sq / var);
            comp_scores.push(diff.iter().map(|d| -d / var).collect());
            shrink.push(alpha * tau * tau / var);
        }
        let log_density = linalg::log_sum_exp(&logits);
        let resp = logits.iter().map(|l| (l - log_density).exp()).collect();
        Posterior {
            resp,
            comp_scores,
            shrink,
            log_density,
        }
    }

    /// Log-density of the forward marginal `p_t` at `x`.
    pub fn marginal_log_density(&self, x: &[f64], level: NoiseLevel) -> Result<f64> {
        check_dim("marginal_log_density", self.dim(), x.len())?;
        Ok(self.posterior(x, level).log_density)
    }

    /// Exact score `grad_x log p_t(x)`.
    pub fn score(&self, x: &[f64], level: NoiseLevel) -> Result<Vec<f64>> {
        check_dim("score", self.dim(), x.len())?;
        let post = self.posterior(x, level);
        let mut s = vec![0.0; x.len()];
        for (r, sk) in post.resp.iter().zip(&post.comp_scores) {
            linalg::axpy(&mut s, *r, sk);
        }
        Ok(s)
    }

    fn check_alpha(level: NoiseLevel) -> Result<()> {
        if !(level.alpha > 0.0) {
            return Err(Error::Singularity(format!(
                "data prediction undefined at alpha = {}",
                level.alpha
            )));
        }
        Ok(())
    }

    /// Posterior mean `E[x_0 | x_t = x]`, equal to `(x + sigma^2 score) / alpha`.
    pub fn denoise(&self, x: &[f64], level: NoiseLevel) -> Result<Vec<f64>> {
        check_dim("denoise", self.dim(), x.len())?;
        Self::check_alpha(level)?;
        Ok(self.posterior_mean(x, level))
    }

    /// `u^T (d denoise / d x)`.
    pub fn denoise_vjp(&self, x: &[f64], level: NoiseLevel, u: &[f64]) -> Result<Vec<f64>> {
        check_dim("denoise_vjp", self.dim(), x.len())?;
        check_dim("denoise_vjp cotangent", self.dim(), u.len())?;
        Self::check_alpha(level)?;
        Ok(self.posterior_mean_vjp(x, level, u))
    }

    // Evaluated componentwise as sum_k r_k (mu_k + c_k (x - alpha mu_k)),
    // which avoids dividing by a tiny alpha near t = T.
    fn component_means(&self, x: &[f64], level: NoiseLevel, post: &Posterior) -> Vec<Vec<f64>> {
        self.means
            .iter()
            .zip(&post.shrink)
            .map(|(mu, c)| {
                mu.iter()
                    .zip(x)
                    .map(|(m, xi)| m + c * (xi - level.alpha * m))
                    .collect()
            })
            .collect()
    }

    fn posterior_mean(&self, x: &[f64], level: NoiseLevel) -> Vec<f64> {
        let post = self.posterior(x, level);
        let comp = self.component_means(x, level, &post);
        let mut out = vec![0.0; x.len()];
        for (r, m) in post.resp.iter().zip(&comp) {
            linalg::axpy(&mut out, *r, m);
        }
        out
    }

    // J = (sum_k r_k c_k) I + sum_k r_k m_k (s_k - s_bar)^T, using
    // d r_k / dx = r_k (s_k - s_bar).
    fn posterior_mean_vjp(&self, x: &[f64], level: NoiseLevel, u: &[f64]) -> Vec<f64> {
        let post = self.posterior(x, level);
        let comp = self.component_means(x, level, &post);
        let n = x.len();
        let mut s_bar = vec![0.0; n];
        let mut m_bar = vec![0.0; n];
        for ((r, sk), mk) in post.resp.iter().zip(&post.comp_scores).zip(&comp) {
            linalg::axpy(&mut s_bar, *r, sk);
            linalg::axpy(&mut m_bar, *r, mk);
        }
        let diag: f64 = post.resp.iter().zip(&post.shrink).map(|(r, c)| r * c).sum();
        let mut out = linalg::scale(u, diag);
        for ((r, sk), mk) in post.resp.iter().zip(&post.comp_scores).zip(&comp) {
            if *r == 0.0 {
                continue;
            }
            let um: f64 = u
                .iter()
                .zip(mk.iter().zip(&m_bar))
                .map(|(ui, (a, b))| ui * (a - b))
                .sum();
            let coef = r * um;
            for ((o, a), b) in out.iter_mut().zip(sk).zip(&s_bar) {
                *o += coef * (a - b);
            }
        }
        out
    }

    /// `count` i.i.d. draws from the data distribution `p_0`.
    pub fn sample(&self, seed: u64, count: usize) -> Result<Vec<Vec<f64>>> {
        let mut rng = rng_from_seed(seed);
        self.sample_with(&mut rng, count)
    }

    pub fn sample_with(&self, rng: &mut impl Rng, count: usize) -> Result<Vec<Vec<f64>>> {
        if count == 0 {
            return Err(Error::config("sample count must be at least 1"));
        }
        let pick = WeightedIndex::new(&self.weights)
            .map_err(|e| Error::config(format!("invalid mixture weights: {e}")))?;
        Ok((0..count)
            .map(|_| {
                let k = pick.sample(rng);
                let z = standard_normal_vec(rng, self.dim());
                self.means[k]
                    .iter()
                    .zip(z)
                    .map(|(m, zi)| m + self.stddevs[k] * zi)
                    .collect()
            })
            .collect())
    }
}

impl Denoiser for GmmPrior {
    fn dim(&self) -> usize {
        GmmPrior::dim(self)
    }

    fn predict(&self, x: &[f64], level: NoiseLevel) -> Vec<f64> {
        self.posterior_mean(x, level)
    }

    fn vjp(&self, x: &[f64], level: NoiseLevel, u: &[f64]) -> Vec<f64> {
        self.posterior_mean_vjp(x, level, u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(mu: f64, tau: f64) -> GmmPrior {
        GmmPrior::gaussian(vec![mu], tau).unwrap()
    }

    #[test]
    fn standard_normal_at_mode() {
        let p = single(0.0, 1.0);
        let v = p.marginal_log_density(&[0.0], NoiseLevel::custom(1.0, 0.0)).unwrap();
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn duplicated_component_is_degenerate() {
        let mu = vec![0.3, -0.2];
        let a = GmmPrior::new(vec![1.0], vec![mu.clone()], vec![0.4]).unwrap();
        let b = GmmPrior::new(vec![0.5, 0.5], vec![mu.clone(), mu], vec![0.4, 0.4]).unwrap();
        let lvl = NoiseLevel::custom(0.7, 0.5);
        let x = [1.1, 0.4];
        let da = a.marginal_log_density(&x, lvl).unwrap();
        let db = b.marginal_log_density(&x, lvl).unwrap();
        assert!((da - db).abs() < 1e-14);
    }

    #[test]
    fn two_components_match_naive_sum() {
        let p = GmmPrior::new(vec![0.3, 0.7], vec![vec![1.0, 0.0], vec![-0.5, 0.5]], vec![0.5, 0.8])
            .unwrap();
        let (alpha, sigma) = (0.8, 0.6);
        let x = [0.2, -0.3];
        let mut total = 0.0;
        for k in 0..2 {
            let v: f64 = alpha * alpha * p.stddevs[k].powi(2) + sigma * sigma;
            let d2: f64 = (0..2).map(|j| (x[j] - alpha * p.means[k][j]).powi(2)).sum();
            total += p.weights[k] * (-(d2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v);
        }
        let got = p.marginal_log_density(&x, NoiseLevel::custom(alpha, sigma)).unwrap();
        assert!((got - total.ln()).abs() < 1e-13);
    }

    #[test]
    fn single_gaussian_closed_forms() {
        let p = single(2.0, 1.0);
        let lvl = NoiseLevel::custom(0.8, 0.6);
        assert!((p.score(&[1.0], lvl).unwrap()[0] - 0.6).abs() < 1e-14);
        assert!((p.denoise(&[1.0], lvl).unwrap()[0] - 1.52).abs() < 1e-14);
        // Jacobian is alpha tau^2 / (alpha^2 tau^2 + sigma^2) = 0.8
        assert!((p.denoise_vjp(&[1.0], lvl, &[2.0]).unwrap()[0] - 1.6).abs() < 1e-14);
        assert_eq!(p.score(&[1.6], lvl).unwrap()[0], 0.0);
    }

    #[test]
    fn denoise_matches_quadrature_posterior_mean() {
        // E[x0 | xt] by trapezoidal quadrature of prior(x0) * N(xt; alpha x0, sigma^2).
        let p = GmmPrior::new(vec![0.4, 0.6], vec![vec![-1.0], vec![1.5]], vec![0.3, 0.5]).unwrap();
        let (alpha, sigma, xt) = (0.7, 0.5, 0.4);
        let dens = |x0: f64| {
            let prior: f64 = (0..2)
                .map(|k| {
                    let s = p.stddevs[k];
                    p.weights[k] * (-(x0 - p.means[k][0]).powi(2) / (2.0 * s * s)).exp() / s
                })
                .sum();
            prior * (-(xt - alpha * x0).powi(2) / (2.0 * sigma * sigma)).exp()
        };
        let (lo, hi, m) = (-8.0, 8.0, 200_000);
        let h = (hi - lo) / m as f64;
        let (mut z, mut first) = (0.0, 0.0);
        for i in 0..=m {
            let x0 = lo + i as f64 * h;
            let w = if i == 0 || i == m { 0.5 } else { 1.0 };
            z += w * dens(x0);
            first += w * x0 * dens(x0);
        }
        let want = first / z;
        let got = p.denoise(&[xt], NoiseLevel::custom(alpha, sigma)).unwrap()[0];
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn noiseless_and_point_mass_limits() {
        let p = GmmPrior::toy(3, 4, 0.2, 1).unwrap();
        let x = [0.3, -0.1, 0.9, 0.2];
        let d = p.denoise(&x, NoiseLevel::custom(1.0, 1e-9)).unwrap();
        assert!(linalg::dist(&d, &x) < 1e-12);

        let q = GmmPrior::gaussian(vec![0.5, -0.5], 1e-8).unwrap();
        for x in [[3.0, 1.0], [-2.0, 0.0]] {
            let d = q.denoise(&x, NoiseLevel::custom(0.6, 0.8)).unwrap();
            assert!(linalg::dist(&d, &[0.5, -0.5]) < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let p = single(0.0, 1.0);
        assert!(matches!(
            p.score(&[0.0, 1.0], NoiseLevel::custom(0.5, 0.5)),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            p.denoise(&[0.0], NoiseLevel::custom(0.0, 1.0)),
            Err(Error::Singularity(_))
        ));
        assert!(GmmPrior::new(vec![0.5, 0.6], vec![vec![0.0]; 2], vec![1.0; 2]).is_err());
        assert!(GmmPrior::new(vec![1.0], vec![vec![0.0]], vec![0.0]).is_err());
    }

    #[test]
    fn vjp_is_zero_for_zero_cotangent() {
        let p = GmmPrior::toy(3, 5, 0.3, 2).unwrap();
        let v = p.denoise_vjp(&[0.1; 5], NoiseLevel::custom(0.6, 0.8), &[0.0; 5]).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn sampling() {
        let p = GmmPrior::new(vec![0.5, 0.5], vec![vec![1.0, 2.0], vec![-1.0, 0.0]], vec![1e-12; 2])
            .unwrap();
        for s in p.sample(5, 50).unwrap() {
            assert!(p.means.iter().any(|m| linalg::dist(m, &s) < 1e-9));
        }
        let q = GmmPrior::toy(4, 3, 0.1, 9).unwrap();
        assert_eq!(q.sample(11, 10).unwrap(), q.sample(11, 10).unwrap());
        assert!(q.sample(11, 0).is_err());
    }

    #[test]
    fn toy_means_are_scaled_into_unit_box() {
        let p = GmmPrior::toy(5, 16, 0.1, 3).unwrap();
        let peak = p.means.iter().map(|m| linalg::max_abs(m)).fold(0.0, f64::max);
        assert!((peak - 1.0).abs() < 1e-15);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_explicit_means() {
        let cfg: PriorConfig =
            serde_json::from_str(r#"{"n":2,"tau":0.5,"means":[[0,1],[1,0]],"weights":[0.25,0.75]}"#)
                .unwrap();
        let p = cfg.build().unwrap();
        assert_eq!(p.components(), 2);
        assert_eq!(p.weights(), &[0.25, 0.75]);
        let bad: PriorConfig = serde_json::from_str(r#"{"n":3,"means":[[0,1]]}"#).unwrap();
        assert!(bad.build().is_err());
    }
}
