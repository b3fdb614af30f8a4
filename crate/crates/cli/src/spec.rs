//! Experiment configuration files.

use std::sync::Arc;

use kou_sgm::mixture::GaussianMixture;
use kou_sgm::oracle::{OracleKind, OracleSpec, Process, ScoreOracle};
use kou_sgm::rng;
use kou_sgm::sampler::RunConfig;
use kou_sgm::schedule::{make_schedule, ScheduleKind};
use kou_sgm::verify;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Checks a `run` can request besides the named verification suites.
pub const RUN_CHECKS: [&str; 5] = ["sharpness", "monotone_h", "bound", "sampler_agreement", "ledger"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// `γ^d`, dimension from the `d` axis.
    Standard,
    /// `N(m, I)` with `m = (norm/√d)(1, …, 1)`, dimension from the `d` axis.
    ShiftedGaussian { norm: f64 },
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    Mixture { mixture: GaussianMixture },
}

impl DataSpec {
    fn fixed_dim(&self) -> Option<usize> {
        match self {
            DataSpec::Standard | DataSpec::ShiftedGaussian { .. } => None,
            DataSpec::Gaussian { mean, .. } => Some(mean.len()),
            DataSpec::Mixture { mixture } => Some(mixture.dim()),
        }
    }

    pub fn build(&self, d: usize) -> Result<GaussianMixture, String> {
        match self {
            DataSpec::Standard => Ok(GaussianMixture::standard(d)),
            DataSpec::ShiftedGaussian { norm } => {
                if !norm.is_finite() {
                    return Err("data.norm must be finite".into());
                }
                Ok(verify::shifted_gaussian(d, *norm))
            }
            DataSpec::Gaussian { mean, cov } => {
                let n = mean.len();
                if cov.len() != n || cov.iter().any(|r| r.len() != n) {
                    return Err(format!("data.cov must be {n}x{n}"));
                }
                let c = DMatrix::from_fn(n, n, |i, j| cov[i][j]);
                GaussianMixture::gaussian(DVector::from_column_slice(mean), c).map_err(|e| format!("data: {e}"))
            }
            DataSpec::Mixture { mixture } => Ok(mixture.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    /// Constant step `h` from the `h` axis.
    Constant,
    /// Exponential-then-constant; the `h` axis supplies the scale `c`.
    ExpThenConst { a: f64 },
}

impl ScheduleSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleSpec::Constant => "constant",
            ScheduleSpec::ExpThenConst { .. } => "exp_then_const",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub h: Vec<f64>,
    #[serde(rename = "T")]
    pub horizon: Vec<f64>,
    /// Oracle magnitude: `ε` for bias and noise oracles, `ρ` for scaling.
    #[serde(default)]
    pub eps: Option<Vec<f64>>,
    #[serde(default)]
    pub d: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schema: u32,
    #[serde(default)]
    pub name: String,
    pub data: DataSpec,
    pub process: Process,
    pub oracle: OracleSpec,
    pub schedule: ScheduleSpec,
    pub sweep: SweepSpec,
    #[serde(default)]
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub early_stop_delta: f64,
    #[serde(default)]
    pub checks: Vec<String>,
    #[serde(default)]
    pub output: Option<String>,
    /// Frozen constant of the `bound` check.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Monte Carlo budget of the error ledger.
    #[serde(default = "default_ledger_samples")]
    pub ledger_samples: usize,
}

fn default_kappa() -> f64 {
    10.0
}

fn default_ledger_samples() -> usize {
    2000
}

/// One fully specified sweep point.
#[derive(Debug, Clone)]
pub struct Point {
    pub index: usize,
    pub d: usize,
    pub h: f64,
    pub horizon: f64,
    pub eps: f64,
    pub data: Arc<GaussianMixture>,
    pub config: RunConfig,
}

impl Point {
    pub fn kind(&self) -> &OracleKind {
        self.config.oracle.kind()
    }
}

fn axis<'a, T>(name: &str, values: &'a [T]) -> Result<&'a [T], String> {
    if values.is_empty() {
        Err(format!("sweep axis '{name}' empty"))
    } else {
        Ok(values)
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("spec does not parse: {e}"))
    }

    fn dims(&self) -> Result<Vec<usize>, String> {
        let fixed = self.data.fixed_dim();
        let dims = match (&self.sweep.d, fixed) {
            (Some(ds), _) => axis("d", ds)?.to_vec(),
            (None, Some(n)) => vec![n],
            (None, None) => return Err("sweep axis 'd' required for this data kind".into()),
        };
        for &d in &dims {
            if d == 0 {
                return Err("sweep axis 'd' contains 0".into());
            }
            if let Some(n) = fixed {
                if d != n {
                    return Err(format!("sweep axis 'd' value {d} does not match data dimension {n}"));
                }
            }
        }
        Ok(dims)
    }

    fn magnitudes(&self) -> Result<Vec<Option<f64>>, String> {
        match &self.sweep.eps {
            Some(e) => Ok(axis("eps", e)?.iter().map(|v| Some(*v)).collect()),
            None => Ok(vec![None]),
        }
    }

    fn oracle_kind(&self, eps: Option<f64>, d: usize) -> Result<OracleKind, String> {
        let mut spec = self.oracle.clone();
        let out_dim = d;
        match (spec.kind.as_str(), eps) {
            ("exact", Some(e)) if e != 0.0 => {
                return Err(format!("oracle.kind 'exact' cannot take eps = {e}"));
            }
            ("absolute_bias" | "isotropic_noise", Some(e)) => spec.epsilon = Some(e),
            ("relative_scaling", Some(e)) => spec.rho = Some(e),
            _ => {}
        }
        if let Some(dir) = &spec.direction {
            if dir.len() != out_dim {
                return Err(format!("oracle.direction has length {}, expected {out_dim}", dir.len()));
            }
        }
        spec.to_kind(out_dim).map_err(|e| format!("oracle: {e}"))
    }

    /// Expands and validates the sweep in row order `d, T, eps, h`.
    pub fn points(&self) -> Result<Vec<Point>, String> {
        if self.schema != SCHEMA_VERSION {
            return Err(format!("schema must be {SCHEMA_VERSION}, got {}", self.schema));
        }
        let hs = axis("h", &self.sweep.h)?;
        let ts = axis("T", &self.sweep.horizon)?;
        let dims = self.dims()?;
        let mags = self.magnitudes()?;
        for c in &self.checks {
            if !RUN_CHECKS.contains(&c.as_str()) && !verify::SUITES.contains(&c.as_str()) {
                return Err(format!("checks: unknown check '{c}'"));
            }
        }
        if self.checks.iter().any(|c| c == "sampler_agreement") && self.n_paths == 0 {
            return Err("checks: 'sampler_agreement' needs n_paths > 0".into());
        }
        if !(self.kappa > 0.0) {
            return Err("kappa must be > 0".into());
        }
        let mut out = Vec::new();
        for &d in &dims {
            let data = Arc::new(self.data.build(d)?);
            for &horizon in ts {
                for &eps in &mags {
                    let kind = self.oracle_kind(eps, d)?;
                    let magnitude = kind.magnitude();
                    let oracle = ScoreOracle::new(kind, self.process, data.clone()).map_err(|e| format!("oracle: {e}"))?;
                    for &h in hs {
                        let kind = match self.schedule {
                            ScheduleSpec::Constant => ScheduleKind::Constant { h },
                            ScheduleSpec::ExpThenConst { a } => ScheduleKind::ExpThenConst {
                                c: h,
                                a,
                                stop_delta: self.early_stop_delta,
                            },
                        };
                        let schedule = make_schedule(kind, horizon).map_err(|e| format!("schedule (h = {h}, T = {horizon}): {e}"))?;
                        let index = out.len();
                        let config = RunConfig {
                            schedule,
                            oracle: oracle.clone(),
                            n_paths: self.n_paths.max(1),
                            seed: rng::derive_seed(self.seed, index as u64),
                            early_stop_delta: self.early_stop_delta,
                        };
                        config.validate().map_err(|e| format!("run config (h = {h}, T = {horizon}): {e}"))?;
                        out.push(Point {
                            index,
                            d,
                            h,
                            horizon,
                            eps: magnitude,
                            data: data.clone(),
                            config,
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}
