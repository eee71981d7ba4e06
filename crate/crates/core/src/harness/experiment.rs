use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, TaskKind, TruthSource};
use crate::harness::metrics::{compute_metrics, empirical_peak, format_db, de_db, ser_db};
use crate::linalg;
use crate::operators::{add_noise_with, ForwardOperator};
use crate::prior::GmmPrior;
use crate::rng::{derive_seed, standard_normal_vec, stream_rng, streams};
use crate::sampler::{sample_compose, RetainedContextCounter};
use crate::schedule::Schedule;
use crate::solvers::{run_solver, RunReport, SolverKind};

/// Fixed column order of `results.csv`.
pub const CSV_COLUMNS: [&str; 11] = [
    "trial",
    "seed",
    "solver",
    "task",
    "mse",
    "psnr",
    "ssim",
    "residual_init",
    "residual_final",
    "context_peak",
    "wall_ms",
];

/// Seed of trial `index`; depends only on the master seed and the index.
pub fn trial_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, index as u64)
}

/// Ground truth, measurements and operator of one trial.
pub struct Trial {
    pub index: usize,
    pub seed: u64,
    pub truth: Vec<f64>,
    pub measurements: Vec<f64>,
    pub operator: Box<dyn ForwardOperator>,
}

/// Draws `x*` (prior sample or sampler output), adding the configured spike.
pub fn generate_truth(
    cfg: &ExperimentConfig,
    schedule: &Schedule,
    prior: &GmmPrior,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = stream_rng(seed, streams::TRUTH);
    let mut x = match cfg.task.truth {
        TruthSource::Prior => prior.sample_with(&mut rng, 1)?.remove(0),
        TruthSource::Range => {
            let z = standard_normal_vec(&mut rng, prior.dim());
            let traj = sample_compose(schedule, prior, &z, &RetainedContextCounter::new(), false)?;
            traj.output().to_vec()
        }
    };
    if let Some(spike) = cfg.task.spike {
        let mut rng = stream_rng(seed, streams::SPIKE);
        for i in rand::seq::index::sample(&mut rng, x.len(), spike.count) {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            x[i] += sign * spike.magnitude;
        }
    }
    Ok(x)
}

pub fn prepare_trial(
    cfg: &ExperimentConfig,
    schedule: &Schedule,
    prior: &GmmPrior,
    index: usize,
) -> Result<Trial> {
    let seed = trial_seed(cfg.seed, index);
    let truth = generate_truth(cfg, schedule, prior, seed)?;
    let operator = cfg.task.build_operator(prior.dim(), seed)?;
    let clean = operator.apply(&truth);
    let measurements = add_noise_with(&clean, cfg.task.noise_sigma, &mut stream_rng(seed, streams::NOISE))?;
    Ok(Trial {
        index,
        seed,
        truth,
        measurements,
        operator,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub solver: SolverKind,
    pub task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<RunReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn config_hash(&self) -> Option<&str> {
        self.report.as_ref().map(|r| r.config_hash.as_str())
    }
}

fn run_trial(
    cfg: &ExperimentConfig,
    schedule: &Schedule,
    prior: &GmmPrior,
    index: usize,
    hash: &str,
) -> TrialRecord {
    let seed = trial_seed(cfg.seed, index);
    let outcome = (|| -> Result<RunReport> {
        let trial = prepare_trial(cfg, schedule, prior, index)?;
        let mut settings = cfg.solver.clone();
        settings.seed = derive_seed(trial.seed, 100 + cfg.solver.seed);
        let mut report = run_solver(
            &trial.measurements,
            trial.operator.as_ref(),
            schedule,
            prior,
            &settings,
            &cfg.optim,
        )?;
        let peak = cfg.task.peak.unwrap_or_else(|| empirical_peak(&trial.truth));
        let metrics = compute_metrics(&report.estimate, &trial.truth, peak, cfg.task.layout)?
            .with_residual(report.residual_final());
        report.metrics = Some(metrics);
        report.config_hash = hash.to_string();
        if !cfg.record_timing {
            report.wall_ms = 0.0;
        }
        Ok(report)
    })();
    let (report, error) = match outcome {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    TrialRecord {
        trial: index,
        seed,
        solver: cfg.solver.kind,
        task: cfg.task.kind,
        report,
        error,
    }
}

/// Median and interquartile range of one metric over successful trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub median: f64,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub q1: f64,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub q3: f64,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub iqr: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let q1 = linalg::quantile(values, 0.25);
        let q3 = linalg::quantile(values, 0.75);
        let iqr = if q1 == q3 { 0.0 } else { q3 - q1 };
        Self {
            median: linalg::median(values),
            q1,
            q3,
            iqr,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub trials: usize,
    pub succeeded: usize,
    pub failed: usize,
    /// `"empirical_range"` or the configured PSNR peak.
    pub peak: String,
    pub metrics: BTreeMap<String, Stat>,
}

pub fn summarize(cfg: &ExperimentConfig, records: &[TrialRecord]) -> Summary {
    let reports: Vec<&RunReport> = records.iter().filter_map(|r| r.report.as_ref()).collect();
    let mut metrics = BTreeMap::new();
    let mut put = |name: &str, values: Vec<f64>| {
        if !values.is_empty() {
            metrics.insert(name.to_string(), Stat::of(&values));
        }
    };
    let m = |f: fn(&RunReport) -> Option<f64>| reports.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
    put("mse", m(|r| r.metrics.map(|x| x.mse)));
    put("psnr", m(|r| r.metrics.map(|x| x.psnr)));
    put("ssim", m(|r| r.metrics.and_then(|x| x.ssim)));
    put("residual_init", m(|r| Some(r.residual_init)));
    put("residual_final", m(|r| Some(r.residual_final())));
    put("context_peak", m(|r| Some(r.context_peak as f64)));
    put("wall_ms", m(|r| Some(r.wall_ms)));
    Summary {
        trials: records.len(),
        succeeded: reports.len(),
        failed: records.len() - reports.len(),
        peak: cfg
            .task
            .peak
            .map_or_else(|| "empirical_range".to_string(), |p| p.to_string()),
        metrics,
    }
}

/// Everything one `solve` produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    pub config: ExperimentConfig,
    pub summary: Summary,
    pub trials: Vec<TrialRecord>,
}

impl ExperimentOutput {
    pub fn failed(&self) -> bool {
        self.summary.failed > 0
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_COLUMNS)?;
        for rec in &self.trials {
            let f = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
            let r = rec.report.as_ref();
            let met = r.and_then(|r| r.metrics);
            w.write_record([
                rec.trial.to_string(),
                rec.seed.to_string(),
                rec.solver.to_string(),
                rec.task.to_string(),
                f(met.map(|m| m.mse)),
                met.map_or_else(String::new, |m| format_db(m.psnr)),
                f(met.and_then(|m| m.ssim)),
                f(r.map(|r| r.residual_init)),
                f(r.map(|r| r.residual_final())),
                r.map_or_else(String::new, |r| r.context_peak.to_string()),
                f(r.map(|r| r.wall_ms)),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `results.json` and `results.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let io = |source| Error::Io {
            path: dir.to_path_buf(),
            source,
        };
        fs::create_dir_all(dir).map_err(io)?;
        let json = serde_json::to_string_pretty(self)?;
        fs::write(dir.join("results.json"), json).map_err(io)?;
        fs::write(dir.join("results.csv"), self.csv_string()?).map_err(io)?;
        Ok(())
    }
}

/// Validates `cfg`, runs every trial (concurrently, each on its own seed
/// stream), and summarizes. Trial failures are recorded, not propagated.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let schedule = cfg.schedule.build()?;
    let prior = cfg.prior.build()?;
    let hash = cfg.hash();
    let trials: Vec<TrialRecord> = (0..cfg.trials)
        .into_par_iter()
        .map(|i| run_trial(cfg, &schedule, &prior, i, &hash))
        .collect();
    Ok(ExperimentOutput {
        config_hash: hash,
        variant: None,
        config: cfg.clone(),
        summary: summarize(cfg, &trials),
        trials,
    })
}

/// Parses one ablation value: `on`/`off` map to booleans, anything else is
/// tried as JSON and falls back to a string.
pub fn parse_axis_value(raw: &str) -> serde_json::Value {
    match raw.trim() {
        "on" => serde_json::Value::Bool(true),
        "off" => serde_json::Value::Bool(false),
        s => serde_json::from_str(s).unwrap_or_else(|_| serde_json::Value::String(s.to_string())),
    }
}

/// Sets the dotted field `axis` (e.g. `solver.sparse_deviation`) in a
/// config's JSON form.
pub fn set_axis(cfg: &mut serde_json::Value, axis: &str, value: serde_json::Value) -> Result<()> {
    let mut parts: Vec<&str> = axis.split('.').filter(|p| !p.is_empty()).collect();
    let leaf = parts
        .pop()
        .ok_or_else(|| Error::config("ablation axis is empty"))?;
    let mut node = cfg;
    for p in parts {
        node = node
            .get_mut(p)
            .ok_or_else(|| Error::config(format!("ablation axis {axis:?}: no field {p:?}")))?;
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::config(format!("ablation axis {axis:?} does not name an object field")))?;
    obj.insert(leaf.to_string(), value);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationOutput {
    pub base_hash: String,
    pub axis: String,
    pub variants: Vec<ExperimentOutput>,
}

impl AblationOutput {
    pub fn failed(&self) -> bool {
        self.variants.iter().any(ExperimentOutput::failed)
    }

    /// `ablation.json` plus one `results.*` pair per variant in `<axis>=<value>/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for v in &self.variants {
            let label = v.variant.clone().unwrap_or_default().replace(['/', '\\'], "_");
            v.write(&dir.join(label))?;
        }
        let json = serde_json::to_string_pretty(self)?;
        fs::write(dir.join("ablation.json"), json).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })
    }
}

/// One experiment per value of `axis`. Trial seeds depend only on the master
/// seed and trial index, so variants are paired trial by trial.
pub fn run_ablation(base: &ExperimentConfig, axis: &str, values: &[String]) -> Result<AblationOutput> {
    if values.is_empty() {
        return Err(Error::config("ablation needs at least one value"));
    }
    base.validate()?;
    let base_json = serde_json::to_value(base)?;
    let mut configs = Vec::with_capacity(values.len());
    for raw in values {
        let mut v = base_json.clone();
        set_axis(&mut v, axis, parse_axis_value(raw))?;
        let cfg: ExperimentConfig = serde_json::from_value(v)?;
        cfg.validate()?;
        configs.push((format!("{axis}={}", raw.trim()), cfg));
    }
    let variants = configs
        .into_iter()
        .map(|(label, cfg)| {
            let mut out = run_experiment(&cfg)?;
            out.variant = Some(label);
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationOutput {
        base_hash: base.hash(),
        axis: axis.to_string(),
        variants,
    })
}

/// Any results file the `report` subcommand accepts.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
#[allow(clippy::large_enum_variant)]
pub enum ResultsFile {
    Ablation(AblationOutput),
    Single(ExperimentOutput),
    Many(Vec<ExperimentOutput>),
}

fn check_consistent(outputs: &[&ExperimentOutput]) -> Result<()> {
    let Some(first) = outputs.first() else {
        return Err(Error::config("results file holds no experiments"));
    };
    for out in outputs {
        if out.config_hash != first.config_hash {
            return Err(Error::config(format!(
                "results mix configs {} and {}",
                first.config_hash, out.config_hash
            )));
        }
        for t in &out.trials {
            if let Some(h) = t.config_hash() {
                if h != out.config_hash {
                    return Err(Error::config(format!(
                        "trial {} echoes config {h}, expected {}",
                        t.trial, out.config_hash
                    )));
                }
            }
        }
    }
    Ok(())
}

fn table_rows(label: Option<&str>, outputs: &[&ExperimentOutput], table: &mut String) {
    let mut by_solver: BTreeMap<SolverKind, Vec<&TrialRecord>> = BTreeMap::new();
    for out in outputs {
        for t in &out.trials {
            by_solver.entry(t.solver).or_default().push(t);
        }
    }
    for (solver, recs) in by_solver {
        let reports: Vec<&RunReport> = recs.iter().filter_map(|r| r.report.as_ref()).collect();
        let med = |f: &dyn Fn(&RunReport) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(|r| f(r)).collect();
            if v.is_empty() {
                "-".to_string()
            } else {
                let m = linalg::median(&v);
                if m.is_infinite() {
                    format_db(m)
                } else {
                    format!("{m:.4e}")
                }
            }
        };
        let name = match label {
            Some(l) => format!("{solver} [{l}]"),
            None => solver.to_string(),
        };
        let _ = writeln!(
            table,
            "{:<36} {:>6} {:>6} {:>12} {:>12} {:>12} {:>12} {:>6}",
            name,
            recs.len(),
            recs.len() - reports.len(),
            med(&|r| r.metrics.map(|m| m.mse)),
            med(&|r| r.metrics.map(|m| m.psnr)),
            med(&|r| r.metrics.and_then(|m| m.ssim)),
            med(&|r| Some(r.residual_final())),
            med(&|r| Some(r.context_peak as f64)),
        );
    }
}

/// Plain-text table with one row per solver kind (per variant for ablations).
pub fn render_report(file: &ResultsFile) -> Result<String> {
    let mut table = format!(
        "{:<36} {:>6} {:>6} {:>12} {:>12} {:>12} {:>12} {:>6}\n",
        "solver", "trials", "failed", "mse", "psnr", "ssim", "residual", "peak"
    );
    match file {
        ResultsFile::Single(out) => {
            check_consistent(&[out])?;
            table_rows(None, &[out], &mut table);
        }
        ResultsFile::Many(outs) => {
            let refs: Vec<&ExperimentOutput> = outs.iter().collect();
            check_consistent(&refs)?;
            table_rows(None, &refs, &mut table);
        }
        ResultsFile::Ablation(ab) => {
            for v in &ab.variants {
                check_consistent(&[v])?;
                table_rows(v.variant.as_deref(), &[v], &mut table);
            }
        }
    }
    Ok(table)
}

pub fn load_results(path: &Path) -> Result<ResultsFile> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| {
        Error::config(format!("{} is not a results file: {e}", path.display()))
    })
}
