//! Forward measurement operators `y = A(x) + noise`, each with a
//! vector-Jacobian product. Linear operators' VJPs are their adjoints.

use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::rng::{rng_from_seed, standard_normal_vec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Identity,
    Mask,
    Downsample,
    CircConv,
    CircConv2d,
    Gaussian,
    Nonlinear,
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OperatorKind::Identity => "identity",
            OperatorKind::Mask => "mask",
            OperatorKind::Downsample => "downsample",
            OperatorKind::CircConv => "circ_conv",
            OperatorKind::CircConv2d => "circ_conv_2d",
            OperatorKind::Gaussian => "gaussian",
            OperatorKind::Nonlinear => "nonlinear",
        };
        f.write_str(s)
    }
}

/// A measurement map `R^n -> R^m`.
///
/// `apply` and `vjp` assume correctly sized inputs; use
/// [`apply_checked`]/[`vjp_checked`] at API boundaries.
pub trait ForwardOperator: Send + Sync + fmt::Debug {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn kind(&self) -> OperatorKind;
    fn is_linear(&self) -> bool;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    /// `u^T (dA / dx)` at `x`; for linear operators `A^T u` and `x` is unused.
    fn vjp(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
}

pub fn apply_checked(op: &dyn ForwardOperator, x: &[f64]) -> Result<Vec<f64>> {
    check_dim("operator input", op.in_dim(), x.len())?;
    Ok(op.apply(x))
}

pub fn vjp_checked(op: &dyn ForwardOperator, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    check_dim("operator input", op.in_dim(), x.len())?;
    check_dim("operator cotangent", op.out_dim(), u.len())?;
    Ok(op.vjp(x, u))
}

#[derive(Debug, Clone)]
pub struct IdentityOperator {
    n: usize,
}

impl IdentityOperator {
    pub fn new(n: usize) -> Self {
        Self { n }
    }
}

impl ForwardOperator for IdentityOperator {
    fn in_dim(&self) -> usize {
        self.n
    }
    fn out_dim(&self) -> usize {
        self.n
    }
    fn kind(&self) -> OperatorKind {
        OperatorKind::Identity
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
    fn vjp(&self, _x: &[f64], u: &[f64]) -> Vec<f64> {
        u.to_vec()
    }
}

/// Keeps a subset of coordinates (inpainting).
#[derive(Debug, Clone)]
pub struct MaskOperator {
    n: usize,
    keep: Vec<usize>,
}

impl MaskOperator {
    /// Keeps `ceil(keep_fraction * n)` coordinates chosen uniformly without
    /// replacement; kept indices are stored in increasing order.
    pub fn random(n: usize, keep_fraction: f64, seed: u64) -> Result<Self> {
        if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
            return Err(Error::config(format!(
                "task.keep_fraction must lie in (0, 1], got {keep_fraction}"
            )));
        }
        let count = (keep_fraction * n as f64).ceil() as usize;
        if count == 0 {
            return Err(Error::config("mask keeps no coordinates"));
        }
        let mut rng = rng_from_seed(seed);
        let mut keep = index::sample(&mut rng, n, count.min(n)).into_vec();
        keep.sort_unstable();
        Self::from_indices(n, keep)
    }

    pub fn from_indices(n: usize, keep: Vec<usize>) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::config("mask keeps no coordinates"));
        }
        if let Some(bad) = keep.iter().find(|&&i| i >= n) {
            return Err(Error::config(format!("mask index {bad} out of range for n = {n}")));
        }
        Ok(Self { n, keep })
    }

    pub fn kept(&self) -> &[usize] {
        &self.keep
    }
}

impl ForwardOperator for MaskOperator {
    fn in_dim(&self) -> usize {
        self.n
    }
    fn out_dim(&self) -> usize {
        self.keep.len()
    }
    fn kind(&self) -> OperatorKind {
        OperatorKind::Mask
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.keep.iter().map(|&i| x[i]).collect()
    }
    fn vjp(&self, _x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (&i, ui) in self.keep.iter().zip(u) {
            out[i] += ui;
        }
        out
    }
}

/// Box averaging over `factor` consecutive inputs (super-resolution analogue).
#[derive(Debug, Clone)]
pub struct DownsampleOperator {
    n: usize,
    factor: usize,
}

impl DownsampleOperator {
    pub fn new(n: usize, factor: usize) -> Result<Self> {
        if factor == 0 || !n.is_multiple_of(factor) {
            return Err(Error::config(format!(
                "task.factor = {factor} does not divide n = {n}"
            )));
        }
        Ok(Self { n, factor })
    }
}

impl ForwardOperator for DownsampleOperator {
    fn in_dim(&self) -> usize {
        self.n
    }
    fn out_dim(&self) -> usize {
        self.n / self.factor
    }
    fn kind(&self) -> OperatorKind {
        OperatorKind::Downsample
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.chunks(self.factor)
            .map(|c| c.iter().sum::<f64>() / self.factor as f64)
            .collect()
    }
    fn vjp(&self, _x: &[f64], u: &[f64]) -> Vec<f64> {
        let f = self.factor as f64;
        u.iter()
            .flat_map(|ui| std::iter::repeat_n(ui / f, self.factor))
            .collect()
    }
}

/// 1-D convolution kernel. Tap `a` acts at offset `a - origin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub taps: Vec<f64>,
    pub origin: usize,
}

impl Kernel {
    pub fn new(taps: Vec<f64>, origin: usize) -> Result<Self> {
        if taps.is_empty() || origin >= taps.len() {
            return Err(Error::config(format!(
                "kernel with {} taps cannot have origin {origin}",
                taps.len()
            )));
        }
        Ok(Self { taps, origin })
    }

    /// Offsets `0, 1, ..., len-1`.
    pub fn causal(taps: Vec<f64>) -> Result<Self> {
        Self::new(taps, 0)
    }

    /// Origin at the middle tap.
    pub fn centered(taps: Vec<f64>) -> Result<Self> {
        let origin = taps.len() / 2;
        Self::new(taps, origin)
    }

    pub fn delta(len: usize) -> Result<Self> {
        let mut taps = vec![0.0; len];
        if len > 0 {
            taps[len / 2] = 1.0;
        }
        Self::centered(taps)
    }

    /// Sampled Gaussian of standard deviation `width` (in taps), normalized to sum 1.
    pub fn gaussian(len: usize, width: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::config("gaussian kernel width must be positive"));
        }
        let c = (len / 2) as f64;
        let mut taps: Vec<f64> = (0..len)
            .map(|a| (-(a as f64 - c).powi(2) / (2.0 * width * width)).exp())
            .collect();
        let s: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= s);
        Self::centered(taps)
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    fn offset(&self, a: usize) -> isize {
        a as isize - self.origin as isize
    }

    /// `(k * x)_j = sum_a k_a x_{(j - off_a) mod n}`.
    pub fn convolve(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as isize;
        let mut y = vec![0.0; x.len()];
        for (a, ka) in self.taps.iter().enumerate() {
            let off = self.offset(a);
            for (j, yj) in y.iter_mut().enumerate() {
                *yj += ka * x[(j as isize - off).rem_euclid(n) as usize];
            }
        }
        y
    }

    /// Adjoint of [`Kernel::convolve`] in `x`: correlation with the kernel.
    pub fn correlate(&self, u: &[f64]) -> Vec<f64> {
        let n = u.len() as isize;
        let mut out = vec![0.0; u.len()];
        for (a, ka) in self.taps.iter().enumerate() {
            let off = self.offset(a);
            for (i, oi) in out.iter_mut().enumerate() {
                *oi += ka * u[(i as isize + off).rem_euclid(n) as usize];
            }
        }
        out
    }

    /// Gradient of `<u, k * x>` with respect to the taps.
    pub fn tap_gradient(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let n = x.len() as isize;
        (0..self.taps.len())
            .map(|a| {
                let off = self.offset(a);
                u.iter()
                    .enumerate()
                    .map(|(j, uj)| uj * x[(j as isize - off).rem_euclid(n) as usize])
                    .sum()
            })
            .collect()
    }
}

/// Circular convolution with a fixed kernel (deblurring).
#[derive(Debug, Clone)]
pub struct CircConvOperator {
    n: usize,
    kernel: Kernel,
}

impl CircConvOperator {
    pub fn new(n: usize, kernel: Kernel) -> Result<Self> {
        if kernel.len() > n {
            return Err(Error::config(format!(
                "kernel support {} exceeds signal length {n}",
                kernel.len()
            )));
        }
        Ok(Self { n, kernel })
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }
}

impl ForwardOperator for CircConvOperator {
    fn in_dim(&self) -> usize {
        self.n
    }
    fn out_dim(&self) -> usize {
        self.n
    }
    fn kind(&self) -> OperatorKind {
        OperatorKind::CircConv
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.kernel.convolve(x)
    }
    fn vjp(&self, _x: &[f64], u: &[f64]) -> Vec<f64> {
        self.kernel.correlate(u)
    }
}

/// 2-D circular convolution on a row-major `height x width` grid.
#[derive(Debug, Clone)]
pub struct CircConv2dOperator {
    height: usize,
    width: usize,
    /// Row-major `kh x kw` taps.
    taps: Vec<f64>,
    kh: usize,
    kw: usize,
    origin: (usize, usize),
}

impl CircConv2dOperator {
    pub fn new(height: usize, width: usize, taps: Vec<f64>, kh: usize, kw: usize) -> Result<Self> {
        if kh == 0 || kw == 0 || taps.len() != kh * kw {
            return Err(Error::config(format!(
                "2-D kernel needs {kh}x{kw} taps, got {}",
                taps.len()
            )));
        }
        if kh > height || kw > width {
            return Err(Error::config("2-D kernel support exceeds the grid"));
        }
        Ok(Self {
            height,
            width,
            taps,
            kh,
            kw,
            origin: (kh / 2, kw / 2),
        })
    }

    fn for_each_tap(&self, mut f: impl FnMut(f64, isize, isize)) {
        for a in 0..self.kh {
            for b in 0..self.kw {
                f(
                    self.taps[a * self.kw + b],
                    a as isize - self.origin.0 as isize,
                    b as isize - self.origin.1 as isize,
                );
            }
        }
    }

    fn wrap(&self, r: isize, c: isize) -> usize {
        let r = r.rem_euclid(self.height as isize) as usize;
        let c = c.rem_euclid(self.width as isize) as usize;
        r * self.width + c
    }
}

impl ForwardOperator for CircConv2dOperator {
    fn in_dim(&self) -> usize {
        self.height * self.width
    }
    fn out_dim(&self) -> usize {
        self.height * self.width
    }
    fn kind(&self) -> OperatorKind {
        OperatorKind::CircConv2d
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        self.for_each_tap(|k, dr, dc| {
            for r in 0..self.height {
                for c in 0..self.width {
                    y[r * self.width + c] += k * x[self.wrap(r as isize - dr, c as isize - dc)];
                }
            }
        });
        y
    }
    fn vjp(&self, _x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        self.for_each_tap(|k, dr, dc| {
            for r in 0..self.height {
                for c in 0..self.width {
                    out[r * self.width + c] += k * u[self.wrap(r as isize + dr, c as isize + dc)];
                }
            }
        });
        out
    }
}

/// Dense `m x n` matrix with i.i.d. `N(0, 1/m)` entries.
#[derive(Debug, Clone)]
pub struct GaussianOperator {
    m: usize,
    n: usize,
    /// Row-major.
    entries: Vec<f64>,
}

impl GaussianOperator {
    pub fn new(m: usize, n: usize, seed: u64) -> Result<Self> {
        Self::with_rng(m, n, &mut rng_from_seed(seed))
    }

    pub fn with_rng(m: usize, n: usize, rng: &mut impl Rng) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::config("gaussian operator needs m, n >= 1"));
        }
        let scale = 1.0 / (m as f64).sqrt();
        let entries = linalg::scale(&standard_normal_vec(rng, m * n), scale);
        Ok(Self { m, n, entries })
    }

    /// Wraps an explicit row-major matrix.
    pub fn from_matrix(m: usize, n: usize, entries: Vec<f64>) -> Result<Self> {
        check_dim("matrix entries", m * n, entries.len())?;
        Ok(Self { m, n, entries })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.entries[r * self.n..(r + 1) * self.n]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            m: self.m,
            n: self.n,
            entries: linalg::scale(&self.entries, c),
        }
    }
}

impl ForwardOperator for GaussianOperator {
    fn in_dim(&self) -> usize {
        self.n
    }
    fn out_dim(&self) -> usize {
        self.m
    }
    fn kind(&self) -> OperatorKind {
        OperatorKind::Gaussian
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.m).map(|r| linalg::dot(self.row(r), x)).collect()
    }
    fn vjp(&self, _x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (r, ur) in u.iter().enumerate() {
            linalg::axpy(&mut out, *ur, self.row(r));
        }
        out
    }
}

/// `tanh(gain * base(x))` elementwise; a smooth synthetic nonlinearity.
#[derive(Debug)]
pub struct NonlinearOperator {
    base: Box<dyn ForwardOperator>,
    gain: f64,
}

impl NonlinearOperator {
    pub fn new(base: Box<dyn ForwardOperator>, gain: f64) -> Result<Self> {
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::config(format!("task.gain must be positive, got {gain}")));
        }
        Ok(Self { base, gain })
    }
}

impl ForwardOperator for NonlinearOperator {
    fn in_dim(&self) -> usize {
        self.base.in_dim()
    }
    fn out_dim(&self) -> usize {
        self.base.out_dim()
    }
    fn kind(&self) -> OperatorKind {
        OperatorKind::Nonlinear
    }
    fn is_linear(&self) -> bool {
        false
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.base
            .apply(x)
            .into_iter()
            .map(|v| (self.gain * v).tanh())
            .collect()
    }
    fn vjp(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let inner = self.base.apply(x);
        let scaled: Vec<f64> = inner
            .iter()
            .zip(u)
            .map(|(v, ui)| {
                let t = (self.gain * v).tanh();
                ui * self.gain * (1.0 - t * t)
            })
            .collect();
        self.base.vjp(x, &scaled)
    }
}

/// `y + sigma z` with seeded standard normal `z`.
pub fn add_noise(y: &[f64], sigma: f64, seed: u64) -> Result<Vec<f64>> {
    add_noise_with(y, sigma, &mut rng_from_seed(seed))
}

pub fn add_noise_with(y: &[f64], sigma: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::config(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(y.to_vec());
    }
    let z = standard_normal_vec(rng, y.len());
    Ok(y.iter().zip(z).map(|(yi, zi)| yi + sigma * zi).collect())
}

/// Largest eigenvalue of `A^T A` by power iteration. Nonlinear operators are
/// linearized at the origin.
pub fn gram_spectral_radius(op: &dyn ForwardOperator, iters: usize, seed: u64) -> f64 {
    let n = op.in_dim();
    let zero = vec![0.0; n];
    let base = op.apply(&zero);
    let jvp = |v: &[f64]| -> Vec<f64> {
        if op.is_linear() {
            op.apply(v)
        } else {
            const H: f64 = 1e-7;
            let moved = op.apply(&linalg::scale(v, H));
            moved.iter().zip(&base).map(|(a, b)| (a - b) / H).collect()
        }
    };
    let mut v = standard_normal_vec(&mut rng_from_seed(seed), n);
    let mut est = 0.0;
    for _ in 0..iters.max(1) {
        let nv = linalg::norm(&v);
        if nv == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let w = op.vjp(&zero, &jvp(&v));
        est = linalg::dot(&v, &w);
        v = w;
    }
    est
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_examples() {
        let m = MaskOperator::from_indices(4, vec![0, 2]).unwrap();
        assert_eq!(m.apply(&[1.0, 2.0, 3.0, 4.0]), vec![1.0, 3.0]);
        assert_eq!(m.vjp(&[0.0; 4], &[5.0, 6.0]), vec![5.0, 0.0, 6.0, 0.0]);

        let full = MaskOperator::random(6, 1.0, 3).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut y = full.apply(&x);
        y.sort_by(f64::total_cmp);
        assert_eq!(y, x.to_vec());
        assert_eq!(full.vjp(&x, &full.apply(&x)), x.to_vec());

        let part = MaskOperator::random(64, 0.3, 1).unwrap();
        assert_eq!(part.out_dim(), 20);
        assert!(MaskOperator::random(4, 0.0, 1).is_err());
        assert!(MaskOperator::random(4, 1.5, 1).is_err());
    }

    #[test]
    fn downsample_examples() {
        let d = DownsampleOperator::new(4, 2).unwrap();
        assert_eq!(d.apply(&[1.0, 3.0, 5.0, 7.0]), vec![2.0, 6.0]);
        assert_eq!(d.apply(&[0.7; 4]), vec![0.7, 0.7]);
        assert_eq!(d.vjp(&[0.0; 4], &[1.0, 2.0]), vec![0.5, 0.5, 1.0, 1.0]);
        assert!(DownsampleOperator::new(5, 2).is_err());
    }

    #[test]
    fn conv_examples() {
        let id = CircConvOperator::new(4, Kernel::causal(vec![1.0]).unwrap()).unwrap();
        assert_eq!(id.apply(&[1.0, 2.0, 3.0, 4.0]), vec![1.0, 2.0, 3.0, 4.0]);
        let k = CircConvOperator::new(4, Kernel::causal(vec![0.5, 0.5]).unwrap()).unwrap();
        assert_eq!(k.apply(&[1.0, 0.0, 0.0, 0.0]), vec![0.5, 0.5, 0.0, 0.0]);
        assert!(CircConvOperator::new(3, Kernel::centered(vec![1.0; 5]).unwrap()).is_err());
        assert!(Kernel::new(vec![1.0], 1).is_err());
    }

    #[test]
    fn kernel_constructors() {
        let g = Kernel::gaussian(5, 1.0).unwrap();
        assert!((g.taps.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g.origin, 2);
        assert!((g.taps[0] - g.taps[4]).abs() < 1e-15);
        let d = Kernel::delta(5).unwrap();
        let x = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        assert_eq!(d.convolve(&x), x.to_vec());
    }

    #[test]
    fn nonlinear_examples() {
        let base = Box::new(GaussianOperator::new(3, 4, 1).unwrap());
        let op = NonlinearOperator::new(base.clone(), 2.0).unwrap();
        assert_eq!(op.apply(&[0.0; 4]), vec![0.0; 3]);
        let tiny = NonlinearOperator::new(base.clone(), 1e-6).unwrap();
        let x = [0.3, -0.2, 0.5, 0.1];
        let lin = linalg::scale(&base.apply(&x), 1e-6);
        assert!(linalg::dist(&tiny.apply(&x), &lin) < 1e-20);
        assert!(NonlinearOperator::new(base, 0.0).is_err());
    }

    #[test]
    fn noise() {
        let y = [1.0, 2.0];
        assert_eq!(add_noise(&y, 0.0, 5).unwrap(), y.to_vec());
        assert_eq!(add_noise(&y, 0.1, 5).unwrap(), add_noise(&y, 0.1, 5).unwrap());
        assert!(add_noise(&y, -1.0, 5).is_err());
    }

    #[test]
    fn spectral_radius_of_mask_and_downsample() {
        let m = MaskOperator::random(16, 0.5, 2).unwrap();
        assert!((gram_spectral_radius(&m, 20, 1) - 1.0).abs() < 1e-12);
        let d = DownsampleOperator::new(16, 4).unwrap();
        assert!((gram_spectral_radius(&d, 20, 1) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn checked_entry_points() {
        let d = DownsampleOperator::new(4, 2).unwrap();
        assert!(apply_checked(&d, &[1.0; 3]).is_err());
        assert!(vjp_checked(&d, &[1.0; 4], &[1.0; 4]).is_err());
        assert!(vjp_checked(&d, &[1.0; 4], &[1.0; 2]).is_ok());
    }
}
