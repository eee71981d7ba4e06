use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::operators::{
    CircConv2dOperator, CircConvOperator, DownsampleOperator, ForwardOperator, GaussianOperator,
    IdentityOperator, Kernel, MaskOperator, NonlinearOperator,
};
use crate::optim::InnerSettings;
use crate::prior::PriorConfig;
use crate::rng::{derive_seed, streams};
use crate::schedule::ScheduleConfig;
use crate::solvers::SolverSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Identity,
    Inpaint,
    Downsample,
    Deblur,
    Gaussian,
    Nonlinear,
    BlindDeblur,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::Identity => "identity",
            TaskKind::Inpaint => "inpaint",
            TaskKind::Downsample => "downsample",
            TaskKind::Deblur => "deblur",
            TaskKind::Gaussian => "gaussian",
            TaskKind::Nonlinear => "nonlinear",
            TaskKind::BlindDeblur => "blind_deblur",
        };
        f.write_str(s)
    }
}

/// Where the ground truth comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthSource {
    /// A draw from the prior.
    #[default]
    Prior,
    /// The sampler output `G(z)` for a fresh Gaussian `z`.
    Range,
}

/// Sparse additive spike on top of the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeConfig {
    pub count: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Layout {
    #[default]
    Flat,
    Grid { height: usize, width: usize },
}

/// Blur kernel of a (blind) deblurring task: explicit centered taps or a
/// named shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelSpec {
    Taps(Vec<f64>),
    Shape {
        shape: KernelShape,
        #[serde(default = "default_kernel_len")]
        len: usize,
        #[serde(default = "default_kernel_width")]
        width: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelShape {
    Gaussian,
    Delta,
    Box,
}

fn default_kernel_len() -> usize {
    5
}
fn default_kernel_width() -> f64 {
    1.0
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Shape {
            shape: KernelShape::Gaussian,
            len: default_kernel_len(),
            width: default_kernel_width(),
        }
    }
}

impl KernelSpec {
    pub fn build(&self) -> Result<Kernel> {
        match self {
            KernelSpec::Taps(t) => Kernel::centered(t.clone()),
            KernelSpec::Shape { shape, len, width } => match shape {
                KernelShape::Gaussian => Kernel::gaussian(*len, *width),
                KernelShape::Delta => Kernel::delta(*len),
                KernelShape::Box => Kernel::centered(vec![1.0 / *len as f64; *len]),
            },
        }
    }
}

/// `task` block: forward operator, noise and ground-truth generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    #[serde(default = "default_keep")]
    pub keep_fraction: f64,
    #[serde(default = "default_factor")]
    pub factor: usize,
    #[serde(default)]
    pub kernel: KernelSpec,
    /// Rows of the Gaussian matrix for `gaussian` and `nonlinear`; defaults to `n / 2`.
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default = "default_gain")]
    pub gain: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Fixes the operator across trials; otherwise each trial draws its own.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub truth: TruthSource,
    #[serde(default)]
    pub spike: Option<SpikeConfig>,
    #[serde(default)]
    pub layout: Layout,
    /// PSNR peak; defaults to the per-trial range `max(x*) - min(x*)`.
    #[serde(default)]
    pub peak: Option<f64>,
}

fn default_keep() -> f64 {
    0.3
}
fn default_factor() -> usize {
    4
}
fn default_gain() -> f64 {
    1.0
}

impl TaskConfig {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            keep_fraction: default_keep(),
            factor: default_factor(),
            kernel: KernelSpec::default(),
            m: None,
            gain: default_gain(),
            noise_sigma: 0.0,
            seed: None,
            truth: TruthSource::Prior,
            spike: None,
            layout: Layout::Flat,
            peak: None,
        }
    }

    /// Forward operator for signals of length `n`; `trial_seed` is used
    /// unless `task.seed` pins the operator.
    pub fn build_operator(&self, n: usize, trial_seed: u64) -> Result<Box<dyn ForwardOperator>> {
        let seed = self
            .seed
            .unwrap_or_else(|| derive_seed(trial_seed, streams::OPERATOR));
        let m = self.m.unwrap_or((n / 2).max(1));
        Ok(match self.kind {
            TaskKind::Identity => Box::new(IdentityOperator::new(n)),
            TaskKind::Inpaint => Box::new(MaskOperator::random(n, self.keep_fraction, seed)?),
            TaskKind::Downsample => Box::new(DownsampleOperator::new(n, self.factor)?),
            TaskKind::Deblur | TaskKind::BlindDeblur => {
                let k = self.kernel.build()?;
                match self.layout {
                    Layout::Grid { height, width } if self.kind == TaskKind::Deblur => {
                        let taps: Vec<f64> = k
                            .taps
                            .iter()
                            .flat_map(|a| k.taps.iter().map(move |b| a * b))
                            .collect();
                        Box::new(CircConv2dOperator::new(height, width, taps, k.len(), k.len())?)
                    }
                    _ => Box::new(CircConvOperator::new(n, k)?),
                }
            }
            TaskKind::Gaussian => Box::new(GaussianOperator::new(m, n, seed)?),
            TaskKind::Nonlinear => Box::new(NonlinearOperator::new(
                Box::new(GaussianOperator::new(m, n, seed)?),
                self.gain,
            )?),
        })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("task.noise_sigma must be a finite value >= 0"));
        }
        if let Layout::Grid { height, width } = self.layout {
            if height * width != n {
                return Err(Error::Shape {
                    context: "task.layout grid",
                    expected: n,
                    got: height * width,
                });
            }
        }
        if let Some(s) = self.spike {
            if s.count > n || !s.magnitude.is_finite() {
                return Err(Error::config("task.spike needs count <= n and a finite magnitude"));
            }
        }
        if let Some(p) = self.peak {
            if !(p > 0.0) {
                return Err(Error::config("task.peak must be positive"));
            }
        }
        self.build_operator(n, 0).map(|_| ())
    }
}

fn default_trials() -> usize {
    1
}
fn default_output() -> PathBuf {
    PathBuf::from("results")
}

/// Full experiment description, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    pub task: TaskConfig,
    #[serde(default)]
    pub optim: InnerSettings,
    pub solver: SolverSettings,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Directory receiving `results.json` and `results.csv`.
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Record wall-clock time; off by default so reruns are byte-identical.
    #[serde(default)]
    pub record_timing: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Checks every block before any run starts.
    pub fn validate(&self) -> Result<()> {
        let schedule = self.schedule.build()?;
        self.prior.build()?;
        self.task.validate(self.prior.n)?;
        self.optim.validate()?;
        self.solver.validate()?;
        if self.trials == 0 {
            return Err(Error::config("trials must be at least 1"));
        }
        if self.solver.kind.is_blind() != (self.task.kind == TaskKind::BlindDeblur) {
            return Err(Error::config(format!(
                "solver {} does not fit task {}",
                self.solver.kind, self.task.kind
            )));
        }
        if self.solver.kind.is_blind() && self.solver.kernel_len > self.prior.n {
            return Err(Error::config("solver.kernel_len exceeds the signal length"));
        }
        debug_assert!(schedule.steps() >= 1);
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring `output`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output");
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
