//! Score oracles consumed by the backward samplers.
//!
//! The exact oracle returns the relative score target: `2 ∇ log p̃_s(x)` for
//! OU and `4 ∇_v log p̃_s(x, v)` for kinetic OU, where `p̃_s = p_s / γ` and
//! `p_s` is the analytic forward marginal of the data mixture. Wrappers add a
//! controlled error of known size on top of it.

use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::rng::{self, Purpose};
use crate::schedule::Schedule;
use crate::stats::{self, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Process {
    #[serde(rename = "OU")]
    Ou,
    #[serde(rename = "kOU")]
    Kou,
}

impl Process {
    /// Dimension of the sampler state for data of dimension `d`.
    pub fn state_dim(self, d: usize) -> usize {
        match self {
            Process::Ou => d,
            Process::Kou => 2 * d,
        }
    }

    /// Factor in front of the relative score target (2 for OU, 4 for kOU).
    pub fn target_scale(self) -> f64 {
        match self {
            Process::Ou => 2.0,
            Process::Kou => 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleKind {
    Exact,
    /// `exact + ε·u` with `‖u‖ = 1`.
    AbsoluteBias { epsilon: f64, direction: DVector<f64> },
    /// `exact + (ε/√d)·ζ`, with `ζ` standard normal keyed by `(seed, forward_time)`.
    IsotropicNoise { epsilon: f64, seed: u64 },
    /// `(1 + ρ)·exact`.
    RelativeScaling { rho: f64 },
}

impl OracleKind {
    pub fn name(&self) -> &'static str {
        match self {
            OracleKind::Exact => "exact",
            OracleKind::AbsoluteBias { .. } => "absolute_bias",
            OracleKind::IsotropicNoise { .. } => "isotropic_noise",
            OracleKind::RelativeScaling { .. } => "relative_scaling",
        }
    }

    /// Size parameter of the perturbation (`ε` or `ρ`; zero for exact).
    pub fn magnitude(&self) -> f64 {
        match self {
            OracleKind::Exact => 0.0,
            OracleKind::AbsoluteBias { epsilon, .. } | OracleKind::IsotropicNoise { epsilon, .. } => *epsilon,
            OracleKind::RelativeScaling { rho } => *rho,
        }
    }
}

/// JSON layout: `{"kind": "...", "epsilon": e, "direction": [...] | "seed": n, "rho": r}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
}

impl OracleSpec {
    pub fn exact() -> Self {
        Self {
            kind: "exact".into(),
            epsilon: None,
            direction: None,
            seed: None,
            rho: None,
        }
    }

    /// Builds the kind for an oracle whose output has dimension `out_dim`.
    pub fn to_kind(&self, out_dim: usize) -> Result<OracleKind> {
        let eps = || -> Result<f64> {
            let e = self
                .epsilon
                .ok_or_else(|| Error::param("epsilon", "missing for this oracle kind"))?;
            if !(e >= 0.0) || !e.is_finite() {
                return Err(Error::param("epsilon", format!("must be finite and >= 0, got {e}")));
            }
            Ok(e)
        };
        match self.kind.as_str() {
            "exact" => Ok(OracleKind::Exact),
            "absolute_bias" => {
                let epsilon = eps()?;
                let direction = match &self.direction {
                    Some(v) => DVector::from_column_slice(v),
                    None => {
                        let mut u = DVector::zeros(out_dim);
                        u[0] = 1.0;
                        u
                    }
                };
                Ok(OracleKind::AbsoluteBias { epsilon, direction })
            }
            "isotropic_noise" => Ok(OracleKind::IsotropicNoise {
                epsilon: eps()?,
                seed: self
                    .seed
                    .ok_or_else(|| Error::param("seed", "isotropic_noise needs a seed"))?,
            }),
            "relative_scaling" => {
                let rho = self
                    .rho
                    .ok_or_else(|| Error::param("rho", "missing for relative_scaling"))?;
                if !rho.is_finite() {
                    return Err(Error::param("rho", "must be finite"));
                }
                Ok(OracleKind::RelativeScaling { rho })
            }
            other => Err(Error::param("kind", format!("unknown oracle kind '{other}'"))),
        }
    }
}

/// A relative-score oracle for one process over one data distribution.
#[derive(Debug, Clone)]
pub struct ScoreOracle {
    kind: OracleKind,
    process: Process,
    data: Arc<GaussianMixture>,
    /// Initial law of the forward process: `μ*` (OU) or `μ* ⊗ γ^d` (kOU).
    initial: Arc<GaussianMixture>,
}

/// `(forward_time, point)`; the oracle is never queried at `s = 0`.
#[derive(Debug, Clone)]
pub struct OracleQuery {
    pub forward_time: f64,
    pub point: DVector<f64>,
}

impl ScoreOracle {
    pub fn new(kind: OracleKind, process: Process, data: Arc<GaussianMixture>) -> Result<Self> {
        let d = data.dim();
        match &kind {
            OracleKind::AbsoluteBias { epsilon, direction } => {
                if !(*epsilon >= 0.0) {
                    return Err(Error::param("epsilon", "must be >= 0"));
                }
                if direction.len() != d {
                    return Err(Error::param(
                        "direction",
                        format!("has length {}, oracle output has dimension {d}", direction.len()),
                    ));
                }
                if (direction.norm() - 1.0).abs() > 1e-12 {
                    return Err(Error::param("direction", "must have unit norm"));
                }
            }
            OracleKind::IsotropicNoise { epsilon, .. } => {
                if !(*epsilon >= 0.0) {
                    return Err(Error::param("epsilon", "must be >= 0"));
                }
            }
            OracleKind::RelativeScaling { rho } => {
                if !rho.is_finite() {
                    return Err(Error::param("rho", "must be finite"));
                }
            }
            OracleKind::Exact => {}
        }
        let initial = match process {
            Process::Ou => data.clone(),
            Process::Kou => Arc::new(data.product_with_standard(d)),
        };
        Ok(Self {
            kind,
            process,
            data,
            initial,
        })
    }

    pub fn exact(process: Process, data: Arc<GaussianMixture>) -> Self {
        Self::new(OracleKind::Exact, process, data).expect("exact oracle is always valid")
    }

    pub fn kind(&self) -> &OracleKind {
        &self.kind
    }

    pub fn process(&self) -> Process {
        self.process
    }

    pub fn data(&self) -> &Arc<GaussianMixture> {
        &self.data
    }

    /// `μ*` for OU, `μ* ⊗ γ^d` for kOU.
    pub fn initial_law(&self) -> &Arc<GaussianMixture> {
        &self.initial
    }

    /// Data dimension `d` (the oracle output dimension).
    pub fn out_dim(&self) -> usize {
        self.data.dim()
    }

    pub fn state_dim(&self) -> usize {
        self.process.state_dim(self.data.dim())
    }

    /// Forward marginal at time `s`.
    pub fn marginal(&self, s: f64) -> Result<GaussianMixture> {
        match self.process {
            Process::Ou => self.initial.ou_pushforward(s),
            Process::Kou => self.initial.kou_pushforward(s),
        }
    }

    /// Precomputes everything that depends only on the forward time.
    pub fn at_time(&self, forward_time: f64) -> Result<FrozenOracle<'_>> {
        if !(forward_time > 0.0) || !forward_time.is_finite() {
            return Err(Error::OracleQuery(format!(
                "forward time must be > 0, got {forward_time}"
            )));
        }
        let marginal = self.marginal(forward_time)?;
        let noise = match &self.kind {
            OracleKind::IsotropicNoise { epsilon, seed } => {
                let d = self.out_dim();
                let mut rng = rng::stream(
                    rng::derive_seed(*seed, forward_time.to_bits()),
                    Purpose::OracleNoise,
                    0,
                );
                let scale = epsilon / (d as f64).sqrt();
                Some(DVector::from_fn(d, |_, _| scale * rng.sample::<f64, _>(StandardNormal)))
            }
            _ => None,
        };
        Ok(FrozenOracle {
            oracle: self,
            forward_time,
            marginal,
            noise,
        })
    }

    pub fn eval(&self, q: &OracleQuery) -> Result<DVector<f64>> {
        self.at_time(q.forward_time)?.eval(&q.point)
    }

    pub fn eval_ou(&self, q: &OracleQuery) -> Result<DVector<f64>> {
        if self.process != Process::Ou {
            return Err(Error::OracleQuery("eval_ou called on a kOU oracle".into()));
        }
        self.eval(q)
    }

    pub fn eval_kou(&self, q: &OracleQuery) -> Result<DVector<f64>> {
        if self.process != Process::Kou {
            return Err(Error::OracleQuery("eval_kou called on an OU oracle".into()));
        }
        self.eval(q)
    }
}

/// An oracle with the forward marginal at one forward time precomputed.
#[derive(Debug, Clone)]
pub struct FrozenOracle<'a> {
    oracle: &'a ScoreOracle,
    forward_time: f64,
    marginal: GaussianMixture,
    noise: Option<DVector<f64>>,
}

impl FrozenOracle<'_> {
    pub fn forward_time(&self) -> f64 {
        self.forward_time
    }

    pub fn marginal(&self) -> &GaussianMixture {
        &self.marginal
    }

    /// Exact relative score target at `point`.
    pub fn exact(&self, point: &DVector<f64>) -> Result<DVector<f64>> {
        let rel = self.marginal.relative_score(point)?;
        Ok(match self.oracle.process {
            Process::Ou => rel * 2.0,
            Process::Kou => {
                let d = self.oracle.out_dim();
                rel.rows(d, d).into_owned() * 4.0
            }
        })
    }

    /// Oracle value at `point`.
    pub fn eval(&self, point: &DVector<f64>) -> Result<DVector<f64>> {
        let exact = self.exact(point)?;
        let out = match &self.oracle.kind {
            OracleKind::Exact => exact,
            OracleKind::AbsoluteBias { epsilon, direction } => exact + direction * *epsilon,
            OracleKind::IsotropicNoise { .. } => exact + self.noise.as_ref().expect("noise drawn at freeze"),
            OracleKind::RelativeScaling { rho } => exact * (1.0 + rho),
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::OracleQuery(format!(
                "non-finite score at forward time {}",
                self.forward_time
            )));
        }
        Ok(out)
    }
}

/// Per-step realized score error along a schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RealizedError {
    /// `E‖s̃ - target‖²` at forward time `T - t_k`, `k = 0..N-1`.
    pub absolute_mse: Vec<Estimate>,
    /// `E‖s̃ - target‖² / E‖target‖²`.
    pub relative_ratio: Vec<Estimate>,
}

/// Monte Carlo estimate of the oracle error against its target at each grid
/// point, sampling the state from the analytic forward marginal.
pub fn realized_error(oracle: &ScoreOracle, schedule: &Schedule, n_samples: usize, seed: u64) -> Result<RealizedError> {
    if n_samples < 1000 {
        return Err(Error::param("n_samples", format!("must be >= 1000, got {n_samples}")));
    }
    let mut absolute_mse = Vec::with_capacity(schedule.len());
    let mut relative_ratio = Vec::with_capacity(schedule.len());
    for k in 0..schedule.len() {
        let frozen = oracle.at_time(schedule.forward_time(k))?;
        match oracle.kind() {
            OracleKind::Exact => {
                absolute_mse.push(Estimate::exact(0.0));
                relative_ratio.push(Estimate::exact(0.0));
                continue;
            }
            OracleKind::AbsoluteBias { epsilon, .. } => {
                // Constant bias of norm ε.
                absolute_mse.push(Estimate::exact(epsilon * epsilon));
            }
            _ => {}
        }
        let key = rng::derive_seed(seed, k as u64);
        let failure = std::sync::Mutex::new(None);
        let acc = stats::chunked_mc(n_samples, 2, key, Purpose::RealizedError, |rng, out| {
            let x = frozen.marginal().sample(rng);
            match (frozen.exact(&x), frozen.eval(&x)) {
                (Ok(t), Ok(s)) => {
                    out[0] = (&s - &t).norm_squared();
                    out[1] = t.norm_squared();
                }
                (Err(e), _) | (_, Err(e)) => {
                    *failure.lock().unwrap() = Some(e);
                    out[0] = f64::NAN;
                    out[1] = f64::NAN;
                }
            }
        });
        if let Some(e) = failure.into_inner().unwrap() {
            return Err(e);
        }
        if !matches!(oracle.kind(), OracleKind::AbsoluteBias { .. }) {
            absolute_mse.push(acc.estimate(0));
        }
        relative_ratio.push(acc.ratio(0, 1));
    }
    Ok(RealizedError {
        absolute_mse,
        relative_ratio,
    })
}
