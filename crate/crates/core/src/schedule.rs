//! Variance-preserving diffusion schedule: the time grid and the
//! `(alpha_t, sigma_t)` coefficient functions every sampling step consumes.
//!
//! `alpha(t) = exp(-(beta0 t + (beta1 - beta0) t^2 / 2) / 2)` and
//! `sigma(t) = sqrt(1 - alpha(t)^2)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw schedule parameters as they appear in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub beta0: f64,
    pub beta1: f64,
    pub epsilon: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    #[serde(rename = "N")]
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            beta0: 0.1,
            beta1: 20.0,
            epsilon: 1e-3,
            t_end: 1.0,
            steps: 3,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        Schedule::new(self.beta0, self.beta1, self.epsilon, self.t_end, self.steps)
    }
}

/// `(alpha_t, sigma_t)` at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
}

impl NoiseLevel {
    /// A level given directly by its coefficients, detached from any time grid.
    pub fn custom(alpha: f64, sigma: f64) -> Self {
        Self {
            t: f64::NAN,
            alpha,
            sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    beta0: f64,
    beta1: f64,
    epsilon: f64,
    t_end: f64,
    grid: Vec<f64>,
}

impl Schedule {
    pub fn new(beta0: f64, beta1: f64, epsilon: f64, t_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule.N must be at least 1"));
        }
        if !(epsilon > 0.0 && epsilon < t_end && t_end.is_finite()) {
            return Err(Error::config(format!(
                "schedule requires 0 < epsilon < T, got epsilon={epsilon}, T={t_end}"
            )));
        }
        if !(beta0 > 0.0 && beta0 < beta1 && beta1.is_finite()) {
            return Err(Error::config(format!(
                "schedule requires 0 < beta0 < beta1, got beta0={beta0}, beta1={beta1}"
            )));
        }
        let h = (t_end - epsilon) / steps as f64;
        let mut grid: Vec<f64> = (0..=steps).map(|i| epsilon + i as f64 * h).collect();
        grid[steps] = t_end;
        Ok(Self {
            beta0,
            beta1,
            epsilon,
            t_end,
            grid,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        ScheduleConfig {
            beta0: self.beta0,
            beta1: self.beta1,
            epsilon: self.epsilon,
            t_end: self.t_end,
            steps: self.steps(),
        }
    }

    /// Number of sampling steps `N`.
    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// `t_i` for `i` in `0..=N`.
    pub fn time(&self, i: usize) -> f64 {
        self.grid[i]
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    /// `log alpha(t)`.
    pub fn log_alpha(&self, t: f64) -> f64 {
        -0.5 * (self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t)
    }

    pub fn alpha(&self, t: f64) -> f64 {
        self.log_alpha(t).exp()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        // 1 - alpha^2 via expm1 keeps precision near t = 0.
        (-(2.0 * self.log_alpha(t)).exp_m1()).max(0.0).sqrt()
    }

    pub fn level(&self, t: f64) -> NoiseLevel {
        NoiseLevel {
            t,
            alpha: self.alpha(t),
            sigma: self.sigma(t),
        }
    }

    /// Noise level at `t`, rejecting times outside `[epsilon, T]`.
    pub fn checked_level(&self, t: f64) -> Result<NoiseLevel> {
        self.check_domain(t)?;
        Ok(self.level(t))
    }

    /// Noise level at grid index `i`.
    pub fn level_at(&self, i: usize) -> NoiseLevel {
        self.level(self.grid[i])
    }

    fn check_domain(&self, t: f64) -> Result<()> {
        if !(t >= self.epsilon && t <= self.t_end) {
            return Err(Error::Domain {
                what: "t",
                value: t,
                lo: self.epsilon,
                hi: self.t_end,
            });
        }
        Ok(())
    }

    /// `lambda_t = log(alpha_t / sigma_t)`, strictly decreasing in `t`.
    pub fn half_log_snr(&self, t: f64) -> Result<f64> {
        self.check_domain(t)?;
        Ok(self.log_alpha(t) - self.sigma(t).ln())
    }

    /// Inverse of [`Schedule::half_log_snr`] over `[epsilon, T]`.
    pub fn time_for_half_log_snr(&self, lambda: f64) -> Result<f64> {
        // alpha^2 = 1 / (1 + exp(-2 lambda))
        let log_alpha = -0.5 * (-2.0 * lambda).exp().ln_1p();
        let t = self.time_for_log_alpha(log_alpha);
        self.check_domain(t)?;
        Ok(t)
    }

    /// Solves `log alpha(t) = log_alpha` for `t >= 0`.
    pub fn time_for_log_alpha(&self, log_alpha: f64) -> f64 {
        let a = 0.5 * (self.beta1 - self.beta0);
        let b = self.beta0;
        let c = 2.0 * log_alpha;
        (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a)
    }
}

impl Default for Schedule {
    fn default() -> Self {
        ScheduleConfig::default()
            .build()
            .expect("default schedule is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vp() -> Schedule {
        Schedule::new(0.1, 20.0, 1e-3, 1.0, 4).unwrap()
    }

    #[test]
    fn clean_endpoint() {
        let s = vp();
        assert_eq!(s.alpha(0.0), 1.0);
        assert_eq!(s.sigma(0.0), 0.0);
    }

    #[test]
    fn closed_form_at_one() {
        // Independent evaluation of the closed form (Python, math.exp).
        let s = vp();
        assert!((s.alpha(1.0) - 0.006571586494929619).abs() < 1e-15);
        assert!((s.sigma(1.0) - 0.9999784068923386).abs() < 1e-14);
        let direct = (1.0 - s.alpha(1.0).powi(2)).sqrt();
        assert!((s.sigma(1.0) - direct).abs() < 1e-14);
        assert!((s.half_log_snr(1.0).unwrap() - (-5.024978406659204)).abs() < 1e-12);
    }

    #[test]
    fn uniform_grid() {
        let s = vp();
        let want = [0.001, 0.25075, 0.5005, 0.75025, 1.0];
        assert_eq!(s.grid().len(), 5);
        for (g, w) in s.grid().iter().zip(want) {
            assert!((g - w).abs() < 1e-15, "{g} vs {w}");
        }
    }

    #[test]
    fn half_log_snr_zero_where_alpha_equals_sigma() {
        let s = vp();
        let t = s.time_for_log_alpha(-0.5 * std::f64::consts::LN_2);
        assert!((t - 0.25896026243279663).abs() < 1e-12);
        assert!(s.half_log_snr(t).unwrap().abs() < 1e-12);
        let back = s.time_for_half_log_snr(0.0).unwrap();
        assert!((back - t).abs() < 1e-12);
    }

    #[test]
    fn half_log_snr_is_monotone_and_domain_checked() {
        let s = vp();
        assert!(s.half_log_snr(0.2).unwrap() > s.half_log_snr(0.3).unwrap());
        assert!(matches!(s.half_log_snr(0.0), Err(Error::Domain { .. })));
        assert!(matches!(s.half_log_snr(1.5), Err(Error::Domain { .. })));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(Schedule::new(0.1, 20.0, 1e-3, 1.0, 0).is_err());
        assert!(Schedule::new(0.1, 20.0, 1.0, 1.0, 3).is_err());
        assert!(Schedule::new(0.0, 20.0, 1e-3, 1.0, 3).is_err());
        assert!(Schedule::new(20.0, 20.0, 1e-3, 1.0, 3).is_err());
    }

    #[test]
    fn config_round_trip_uses_short_field_names() {
        let json = r#"{"beta0":0.1,"beta1":20.0,"epsilon":0.001,"T":1.0,"N":3}"#;
        let cfg: ScheduleConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg, ScheduleConfig::default());
        assert_eq!(cfg.build().unwrap().steps(), 3);
    }
}
