use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_dim, Error, Result};
use crate::harness::config::Layout;
use crate::linalg;

/// Reconstruction quality of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mse: f64,
    /// `+inf` (written as `"inf"`) when `mse = 0`.
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    /// Grid layouts only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    /// Measurement residual `||y - A(x_hat)||`.
    pub residual: f64,
    pub peak: f64,
}

impl MetricSet {
    pub fn with_residual(mut self, residual: f64) -> Self {
        self.residual = residual;
        self
    }
}

/// `"inf"` for infinite PSNR, the number otherwise.
pub fn format_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        v.to_string()
    }
}

pub(crate) fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

pub(crate) fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad decibel value {t:?}"))),
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    linalg::norm_sq(&linalg::sub(a, b)) / a.len() as f64
}

/// `10 log10(peak^2 / mse)`.
pub fn psnr(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// `max(x) - min(x)`.
pub fn empirical_peak(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Mean SSIM over all `8 x 8` windows (stride 1) of a row-major image; the
/// window shrinks to the image when it is smaller.
pub fn ssim(a: &[f64], b: &[f64], height: usize, width: usize, peak: f64) -> Result<f64> {
    check_dim("ssim image", height * width, a.len())?;
    check_dim("ssim reference", height * width, b.len())?;
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let wh = height.min(8);
    let ww = width.min(8);
    let count = (wh * ww) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for r0 in 0..=height - wh {
        for c0 in 0..=width - ww {
            let (mut ma, mut mb) = (0.0, 0.0);
            for r in r0..r0 + wh {
                for c in c0..c0 + ww {
                    ma += a[r * width + c];
                    mb += b[r * width + c];
                }
            }
            ma /= count;
            mb /= count;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for r in r0..r0 + wh {
                for c in c0..c0 + ww {
                    let da = a[r * width + c] - ma;
                    let db = b[r * width + c] - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            // unbiased window statistics
            let norm = (count - 1.0).max(1.0);
            va /= norm;
            vb /= norm;
            cov /= norm;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// MSE, PSNR against `peak`, and SSIM for grid layouts. The residual field
/// is left at zero; see [`MetricSet::with_residual`].
pub fn compute_metrics(xhat: &[f64], xstar: &[f64], peak: f64, layout: Layout) -> Result<MetricSet> {
    check_dim("metrics", xstar.len(), xhat.len())?;
    if xstar.is_empty() {
        return Err(Error::config("metrics need non-empty signals"));
    }
    let m = mse(xhat, xstar);
    let ssim = match layout {
        Layout::Flat => None,
        Layout::Grid { height, width } => Some(ssim(xhat, xstar, height, width, peak)?),
    };
    Ok(MetricSet {
        mse: m,
        psnr: psnr(m, peak),
        ssim,
        residual: 0.0,
        peak,
    })
}
