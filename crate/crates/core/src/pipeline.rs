//! Exact moment propagation for Gaussian data.
//!
//! When the data law is a single Gaussian, every affine-compatible oracle is
//! an affine function of the state, `s̃(s, u) = G_s u + g_s`, and each
//! exponential-integrator step maps a Gaussian law to a Gaussian law. This
//! module propagates the mean and covariance through a whole run and
//! evaluates `KL(μ* | p_T^θ)` in closed form. It also computes the path-space
//! KL between the true backward process and the scheme, which the
//! Girsanov error decomposition bounds.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, KineticStep};
use crate::linalg::{self, one_minus_exp_neg};
use crate::oracle::{OracleKind, Process, ScoreOracle};
use crate::quadrature;
use crate::sampler::RunConfig;

/// `s̃(s, u) = gain·u + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineScore {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianState {
    pub fn standard(n: usize) -> Self {
        Self {
            mean: DVector::zeros(n),
            cov: DMatrix::identity(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn single_gaussian(oracle: &ScoreOracle) -> Result<()> {
    if !oracle.data().is_single_gaussian() {
        return Err(Error::Unsupported(
            "the exact pipeline needs a single-Gaussian data distribution".into(),
        ));
    }
    Ok(())
}

/// Exact target `scale·∇ log p̃_s` for Gaussian data, as an affine map.
fn exact_affine(oracle: &ScoreOracle, s: f64) -> Result<AffineScore> {
    single_gaussian(oracle)?;
    let marginal = oracle.marginal(s)?;
    let comp = &marginal.components()[0];
    let n = comp.mean.len();
    let precision = linalg::cholesky_strict(&comp.cov, "forward marginal covariance")?.inverse();
    // ∇ log p̃(u) = (I - P^{-1}) u + P^{-1} μ
    let full_gain = DMatrix::identity(n, n) - &precision;
    let full_offset = &precision * &comp.mean;
    let scale = oracle.process().target_scale();
    let (gain, offset) = match oracle.process() {
        Process::Ou => (full_gain, full_offset),
        Process::Kou => {
            let d = oracle.out_dim();
            (full_gain.rows(d, d).into_owned(), full_offset.rows(d, d).into_owned())
        }
    };
    Ok(AffineScore {
        gain: gain * scale,
        offset: offset * scale,
    })
}

/// Affine realization of an oracle over Gaussian data at forward time `s`.
pub fn affine_score_of(oracle: &ScoreOracle, s: f64) -> Result<AffineScore> {
    let exact = exact_affine(oracle, s)?;
    match oracle.kind() {
        OracleKind::Exact => Ok(exact),
        OracleKind::AbsoluteBias { epsilon, direction } => Ok(AffineScore {
            offset: exact.offset + direction * *epsilon,
            gain: exact.gain,
        }),
        OracleKind::RelativeScaling { rho } => Ok(AffineScore {
            gain: exact.gain * (1.0 + rho),
            offset: exact.offset * (1.0 + rho),
        }),
        OracleKind::IsotropicNoise { .. } => Err(Error::Unsupported(
            "isotropic_noise is not affine with shared randomness; use the sampler".into(),
        )),
    }
}

/// `KL(p | q)` between Gaussians.
pub fn kl_gaussian(p: &GaussianState, q: &GaussianState) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    let n = p.dim() as f64;
    let cq = linalg::cholesky_strict(&q.cov, "KL second argument")?;
    let cp = linalg::cholesky_strict(&p.cov, "KL first argument")?;
    let trace = cq.solve(&p.cov).trace();
    let dm = &q.mean - &p.mean;
    let maha = dm.dot(&cq.solve(&dm));
    let logdet_q = linalg::log_det_cholesky(&cq.l());
    let logdet_p = linalg::log_det_cholesky(&cp.l());
    Ok((0.5 * (trace + maha - n + logdet_q - logdet_p)).max(0.0))
}

/// One row of the optional propagation trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    pub t_k: f64,
    pub mean_norm: f64,
    pub cov_frobenius: f64,
    pub kl_to_data: f64,
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "k,t_k,mean_norm,cov_frobenius,kl_to_data")?;
    for r in rows {
        writeln!(
            w,
            "{},{:?},{:?},{:?},{:?}",
            r.k, r.t_k, r.mean_norm, r.cov_frobenius, r.kl_to_data
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Propagation {
    pub final_state: GaussianState,
    /// Law the output is compared with: `μ*` (or `μ* ⊗ γ^d`), pushed forward
    /// by the stopping offset δ.
    pub target: GaussianState,
    /// `KL(target | final_state)`.
    pub kl: f64,
    pub trace: Vec<TraceRow>,
}

fn state_of(mix: &crate::mixture::GaussianMixture) -> GaussianState {
    let c = &mix.components()[0];
    GaussianState {
        mean: c.mean.clone(),
        cov: c.cov.clone(),
    }
}

/// Law of the data at the stopping time: `μ* P_δ` (OU) or `(μ* ⊗ γ^d) P_δ`.
pub fn target_state(config: &RunConfig) -> Result<GaussianState> {
    single_gaussian(&config.oracle)?;
    let law = config.oracle.marginal(config.early_stop_delta)?;
    Ok(state_of(&law))
}

/// Affine map `u ↦ M u + c` plus noise `Q` of one scheme step.
fn step_affine(process: Process, h: f64, score: &AffineScore) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    match process {
        Process::Ou => {
            let n = score.gain.nrows();
            let decay = (-h).exp();
            let gain = one_minus_exp_neg(h);
            let m = DMatrix::identity(n, n) * decay + &score.gain * gain;
            let c = &score.offset * gain;
            let q = DMatrix::identity(n, n) * one_minus_exp_neg(2.0 * h);
            Ok((m, c, q))
        }
        Process::Kou => {
            let d = score.gain.nrows();
            let step = KineticStep::new(h, d)?;
            let m = &step.transition + &step.forcing * &score.gain;
            let c = &step.forcing * &score.offset;
            Ok((m, c, step.noise_cov))
        }
    }
}

/// Exact law of the scheme output for Gaussian data.
pub fn propagate(config: &RunConfig) -> Result<Propagation> {
    propagate_with_trace(config, false)
}

pub fn propagate_with_trace(config: &RunConfig, trace: bool) -> Result<Propagation> {
    config.validate()?;
    let oracle = &config.oracle;
    let process = oracle.process();
    let n = oracle.state_dim();
    let target = target_state(config)?;
    let lengths = config.step_lengths();

    let mut state = GaussianState::standard(n);
    let mut rows = Vec::new();
    let mut record = |k: usize, t: f64, st: &GaussianState| -> Result<()> {
        if trace {
            rows.push(TraceRow {
                k,
                t_k: t,
                mean_norm: st.mean.norm(),
                cov_frobenius: linalg::frobenius(&st.cov),
                kl_to_data: kl_gaussian(&target, st)?,
            });
        }
        Ok(())
    };
    record(0, 0.0, &state)?;
    for (k, &h) in lengths.iter().enumerate() {
        let score = affine_score_of(oracle, config.schedule.forward_time(k))?;
        let (m, c, q) = step_affine(process, h, &score)?;
        let mut cov = &m * &state.cov * m.transpose() + q;
        linalg::symmetrize(&mut cov);
        if cov.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite(format!(
                "scheme covariance lost positive definiteness at step {k}; configuration is unstable"
            )));
        }
        state = GaussianState {
            mean: &m * &state.mean + c,
            cov,
        };
        record(k + 1, config.schedule.knots[k] + h, &state)?;
    }
    let kl = kl_gaussian(&target, &state)?;
    Ok(Propagation {
        final_state: state,
        target,
        kl,
        trace: rows,
    })
}

/// Path-space KL between the true backward process and the scheme,
/// `KL(←P | P^θ)` on `[0, T - δ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathKl {
    /// `KL(p_T | γ)`, the initialization mismatch.
    pub initial: f64,
    /// `(1/2σ²) ∫ E‖drift_true - drift_scheme‖² dt`.
    pub drift: f64,
    pub total: f64,
}

/// Gauss-Legendre nodes per step for the drift integral.
const PATH_KL_NODES: usize = 6;

pub fn path_kl(config: &RunConfig) -> Result<PathKl> {
    config.validate()?;
    let oracle = &config.oracle;
    let process = oracle.process();
    let d = oracle.out_dim();
    let n = oracle.state_dim();
    let horizon = config.schedule.horizon;
    let forward_t = state_of(&oracle.marginal(horizon)?);
    let initial = kl_gaussian(&forward_t, &GaussianState::standard(n))?;

    // 1/(2σ²) on the forced coordinates: σ² = 2 (OU), 4 (kOU velocity).
    let weight = match process {
        Process::Ou => 0.25,
        Process::Kou => 0.125,
    };
    let rule = quadrature::gauss_legendre(PATH_KL_NODES);
    let lengths = config.step_lengths();
    let mut drift = 0.0;
    for (k, &len) in lengths.iter().enumerate() {
        let t_k = config.schedule.knots[k];
        let scheme = affine_score_of(oracle, horizon - t_k)?;
        let mut err: Option<Error> = None;
        let integral = quadrature::composite_gauss_legendre(&rule, t_k, t_k + len, 1, |t| {
            match drift_gap(oracle, process, d, horizon, t, t_k, &scheme) {
                Ok(v) => v,
                Err(e) => {
                    err.get_or_insert(e);
                    f64::NAN
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        drift += integral;
    }
    drift *= weight;
    Ok(PathKl {
        initial,
        drift,
        total: initial + drift,
    })
}

/// `E‖Y_t - s̃(T - t_k, X̄_{t_k})‖²` under the true backward law.
fn drift_gap(
    oracle: &ScoreOracle,
    process: Process,
    d: usize,
    horizon: f64,
    t: f64,
    t_k: f64,
    scheme: &AffineScore,
) -> Result<f64> {
    // Backward times t_k < t correspond to forward times T - t < T - t_k,
    // so X̄_{t_k} = K X̄_t + W with K the forward kernel over gap t - t_k.
    let exact = exact_affine(oracle, horizon - t)?;
    let law = state_of(&oracle.marginal(horizon - t)?);
    let gap = t - t_k;
    let kernel = match process {
        Process::Ou => kernels::ou_kernel(gap, d)?,
        Process::Kou => kernels::kou_kernel(gap, d)?,
    };
    let b = &exact.gain - &scheme.gain * &kernel.map;
    let bias = &b * &law.mean + &exact.offset - &scheme.offset;
    let spread = (&b * &law.cov * b.transpose()).trace();
    let noise = (&scheme.gain * &kernel.noise_cov * scheme.gain.transpose()).trace();
    Ok(bias.norm_squared() + spread + noise)
}
