//! Gaussian mixtures, their Ornstein-Uhlenbeck and kinetic-OU pushforwards,
//! and closed-form log-density, score and Hessian evaluation.
//!
//! Every component carries a Cholesky factor of its covariance, computed once
//! at construction. Densities are evaluated with log-sum-exp over components so
//! that scores stay finite far in the tails.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::linalg::{self, one_minus_exp_neg};

pub const WEIGHT_SUM_TOL: f64 = 1e-12;
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone)]
struct Factor {
    chol: DMatrix<f64>,
    precision: DMatrix<f64>,
    /// `ln w - ½ ln det Σ - (d/2) ln 2π`
    log_norm: f64,
}

/// A finite mixture of full-covariance Gaussians.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MixtureSpec", into = "MixtureSpec")]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
    factors: Vec<Factor>,
}

/// Pointwise evaluation of a mixture: log-density, score and (optionally)
/// the Hessian of the log-density.
#[derive(Debug, Clone)]
pub struct PointEval {
    pub log_density: f64,
    pub score: DVector<f64>,
    pub hessian: Option<DMatrix<f64>>,
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidMixture("no components".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidMixture("dimension must be positive".into()));
        }
        let mut weight_sum = 0.0;
        let mut factors = Vec::with_capacity(components.len());
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.cov.nrows() != dim || c.cov.ncols() != dim {
                return Err(Error::InvalidMixture(format!(
                    "component {i} has dimension {} / {}x{}, expected {dim}",
                    c.mean.len(),
                    c.cov.nrows(),
                    c.cov.ncols()
                )));
            }
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::InvalidMixture(format!(
                    "component {i} weight {} is not strictly positive",
                    c.weight
                )));
            }
            if c.mean.iter().chain(c.cov.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidMixture(format!("component {i} has non-finite entries")));
            }
            let asym = linalg::max_asymmetry(&c.cov);
            if asym > SYMMETRY_TOL {
                return Err(Error::InvalidMixture(format!(
                    "component {i} covariance asymmetric by {asym:e}"
                )));
            }
            let chol = linalg::cholesky_strict(&c.cov, "component covariance").map_err(|_| {
                Error::InvalidMixture(format!("component {i} covariance is not positive definite"))
            })?;
            let l = chol.l();
            let log_norm =
                c.weight.ln() - 0.5 * linalg::log_det_cholesky(&l) - 0.5 * dim as f64 * (2.0 * PI).ln();
            let precision = chol.inverse();
            factors.push(Factor {
                chol: l,
                precision,
                log_norm,
            });
            weight_sum += c.weight;
        }
        if (weight_sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidMixture(format!(
                "weights sum to {weight_sum}, not 1"
            )));
        }
        Ok(Self {
            dim,
            components,
            factors,
        })
    }

    /// Single Gaussian `N(mean, cov)`.
    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![Component {
            weight: 1.0,
            mean,
            cov,
        }])
    }

    /// The standard Gaussian `γ^d`.
    pub fn standard(dim: usize) -> Self {
        Self::gaussian(DVector::zeros(dim), DMatrix::identity(dim, dim))
            .expect("standard Gaussian is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn is_single_gaussian(&self) -> bool {
        self.components.len() == 1
    }

    /// Product `self ⊗ γ^extra`, the kinetic initialization `μ ⊗ γ^d` when
    /// `extra == dim`.
    pub fn product_with_standard(&self, extra: usize) -> Self {
        let comps = self
            .components
            .iter()
            .map(|c| {
                let mut mean = DVector::zeros(self.dim + extra);
                mean.rows_mut(0, self.dim).copy_from(&c.mean);
                Component {
                    weight: c.weight,
                    mean,
                    cov: linalg::block_diag(&c.cov, &DMatrix::identity(extra, extra)),
                }
            })
            .collect();
        Self::new(comps).expect("product of valid mixture with standard Gaussian is valid")
    }

    /// Law at time `t` of the OU process `dX = -X dt + √2 dB` started from
    /// this mixture: each component maps to
    /// `(w, e^{-t} m, e^{-2t} Σ + (1 - e^{-2t}) I)`.
    pub fn ou_pushforward(&self, t: f64) -> Result<Self> {
        if !(t >= 0.0) {
            return Err(Error::param("t", format!("time must be >= 0, got {t}")));
        }
        let decay = (-t).exp();
        let decay2 = (-2.0 * t).exp();
        let noise = one_minus_exp_neg(2.0 * t);
        let comps = self
            .components
            .iter()
            .map(|c| {
                let mut cov = &c.cov * decay2;
                for i in 0..self.dim {
                    cov[(i, i)] += noise;
                }
                linalg::symmetrize(&mut cov);
                Component {
                    weight: c.weight,
                    mean: &c.mean * decay,
                    cov,
                }
            })
            .collect();
        Self::new(comps)
    }

    /// Law at time `t` of the kinetic OU process on `(x, v)` started from this
    /// `2d`-dimensional mixture.
    pub fn kou_pushforward(&self, t: f64) -> Result<Self> {
        if self.dim % 2 != 0 {
            return Err(Error::param(
                "mix",
                format!("kinetic pushforward needs an even total dimension, got {}", self.dim),
            ));
        }
        if !(t >= 0.0) {
            return Err(Error::param("t", format!("time must be >= 0, got {t}")));
        }
        let d = self.dim / 2;
        let map = kernels::kou_transition_map(t, d);
        let noise = kernels::kou_cov(t, d);
        let comps = self
            .components
            .iter()
            .map(|c| {
                let mut cov = &map * &c.cov * map.transpose() + &noise;
                linalg::symmetrize(&mut cov);
                Component {
                    weight: c.weight,
                    mean: &map * &c.mean,
                    cov,
                }
            })
            .collect();
        Self::new(comps)
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Log-density, score and optionally the Hessian of the log-density at `x`.
    pub fn evaluate(&self, x: &DVector<f64>, with_hessian: bool) -> Result<PointEval> {
        self.check_dim(x)?;
        let k = self.components.len();
        let mut log_terms = Vec::with_capacity(k);
        let mut comp_scores = Vec::with_capacity(k);
        for (c, f) in self.components.iter().zip(&self.factors) {
            let diff = x - &c.mean;
            let z = f
                .chol
                .solve_lower_triangular(&diff)
                .expect("Cholesky factor has a positive diagonal");
            let quad = z.norm_squared();
            log_terms.push(f.log_norm - 0.5 * quad);
            // -Σ^{-1}(x - m) = -L^{-T} z
            let s = f
                .chol
                .tr_solve_lower_triangular(&z)
                .expect("Cholesky factor has a positive diagonal");
            comp_scores.push(-s);
        }
        let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        let resp: Vec<f64> = log_terms
            .iter()
            .map(|l| {
                let e = (l - max).exp();
                denom += e;
                e
            })
            .collect();
        let log_density = max + denom.ln();
        let resp: Vec<f64> = resp.into_iter().map(|e| e / denom).collect();

        let mut score = DVector::zeros(self.dim);
        for (r, s) in resp.iter().zip(&comp_scores) {
            score.axpy(*r, s, 1.0);
        }
        let hessian = if with_hessian {
            let mut h = -(&score * score.transpose());
            for ((r, s), f) in resp.iter().zip(&comp_scores).zip(&self.factors) {
                if *r == 0.0 {
                    continue;
                }
                h += (s * s.transpose() - &f.precision) * *r;
            }
            linalg::symmetrize(&mut h);
            Some(h)
        } else {
            None
        };
        Ok(PointEval {
            log_density,
            score,
            hessian,
        })
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.evaluate(x, false)?.log_density)
    }

    /// `∇ log p(x)`.
    pub fn score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.evaluate(x, false)?.score)
    }

    /// `∇² log p(x)`.
    pub fn hessian_log_density(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self
            .evaluate(x, true)?
            .hessian
            .expect("hessian requested"))
    }

    /// Score relative to the standard Gaussian: `∇ log(p/γ)(x) = ∇ log p(x) + x`.
    pub fn relative_score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.score(x)? + x)
    }

    /// Hessian of `log(p/γ)`: `∇² log p + I`.
    pub fn relative_hessian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut h = self.hessian_log_density(x)?;
        for i in 0..self.dim {
            h[(i, i)] += 1.0;
        }
        Ok(h)
    }

    /// `M2² = Σ w_i (‖m_i‖² + tr Σ_i)`.
    pub fn second_moment(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * (c.mean.norm_squared() + c.cov.trace()))
            .sum()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for c in &self.components {
            m.axpy(c.weight, &c.mean, 1.0);
        }
        m
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut cov = DMatrix::zeros(self.dim, self.dim);
        for c in &self.components {
            let dm = &c.mean - &mean;
            cov += (&c.cov + &dm * dm.transpose()) * c.weight;
        }
        cov
    }

    /// Draws one point.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let idx = self.pick_component(rng.random::<f64>());
        self.sample_component(idx, rng)
    }

    pub(crate) fn pick_component(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                return i;
            }
        }
        self.components.len() - 1
    }

    pub(crate) fn sample_component<R: Rng + ?Sized>(&self, idx: usize, rng: &mut R) -> DVector<f64> {
        let xi = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.components[idx].mean + &self.factors[idx].chol * xi
    }

    /// `m_idx + L_idx ξ`, the point a standard normal `ξ` maps to in
    /// component `idx`.
    pub(crate) fn component_point(&self, idx: usize, xi: &DVector<f64>) -> DVector<f64> {
        &self.components[idx].mean + &self.factors[idx].chol * xi
    }

    /// Component-wise maximum absolute difference of weights, means and
    /// covariances. `None` if the shapes differ.
    pub fn max_component_diff(&self, other: &Self) -> Option<f64> {
        if self.dim != other.dim || self.components.len() != other.components.len() {
            return None;
        }
        let mut worst = 0.0_f64;
        for (a, b) in self.components.iter().zip(&other.components) {
            worst = worst.max((a.weight - b.weight).abs());
            worst = worst.max(linalg::max_abs_diff(&a.mean, &b.mean));
            for (x, y) in a.cov.iter().zip(b.cov.iter()) {
                worst = worst.max((x - y).abs());
            }
        }
        Some(worst)
    }
}

/// JSON layout: `{"dim": d, "components": [{"weight": w, "mean": [...], "cov": [[...]]}]}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MixtureSpec {
    pub dim: usize,
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl TryFrom<MixtureSpec> for GaussianMixture {
    type Error = Error;

    fn try_from(spec: MixtureSpec) -> Result<Self> {
        let mut comps = Vec::with_capacity(spec.components.len());
        for (i, c) in spec.components.into_iter().enumerate() {
            if c.mean.len() != spec.dim || c.cov.len() != spec.dim || c.cov.iter().any(|r| r.len() != spec.dim) {
                return Err(Error::InvalidMixture(format!(
                    "component {i} does not match declared dim {}",
                    spec.dim
                )));
            }
            let cov = DMatrix::from_fn(spec.dim, spec.dim, |r, col| c.cov[r][col]);
            comps.push(Component {
                weight: c.weight,
                mean: DVector::from_vec(c.mean),
                cov,
            });
        }
        GaussianMixture::new(comps)
    }
}

impl From<GaussianMixture> for MixtureSpec {
    fn from(m: GaussianMixture) -> Self {
        MixtureSpec {
            dim: m.dim,
            components: m
                .components
                .into_iter()
                .map(|c| ComponentSpec {
                    weight: c.weight,
                    mean: c.mean.iter().cloned().collect(),
                    cov: (0..c.cov.nrows())
                        .map(|r| c.cov.row(r).iter().cloned().collect())
                        .collect(),
                })
                .collect(),
        }
    }
}

impl PartialEq for GaussianMixture {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.components == other.components
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn two_component() -> GaussianMixture {
        GaussianMixture::new(vec![
            Component {
                weight: 0.3,
                mean: DVector::from_vec(vec![1.5, -0.5]),
                cov: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.8]),
            },
            Component {
                weight: 0.7,
                mean: DVector::from_vec(vec![-1.0, 1.0]),
                cov: DMatrix::from_row_slice(2, 2, &[1.2, -0.3, -0.3, 0.6]),
            },
        ])
        .unwrap()
    }

    #[test]
    fn rejects_bad_weights_and_covariances() {
        let bad_sum = GaussianMixture::new(vec![Component {
            weight: 0.9,
            mean: DVector::zeros(1),
            cov: DMatrix::identity(1, 1),
        }]);
        assert!(matches!(bad_sum, Err(Error::InvalidMixture(_))));
        let indefinite = GaussianMixture::gaussian(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
        );
        assert!(indefinite.is_err());
        let asym = GaussianMixture::gaussian(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
        );
        assert!(asym.is_err());
        let neg = GaussianMixture::new(vec![
            Component { weight: -0.5, mean: DVector::zeros(1), cov: DMatrix::identity(1, 1) },
            Component { weight: 1.5, mean: DVector::zeros(1), cov: DMatrix::identity(1, 1) },
        ]);
        assert!(neg.is_err());
    }

    #[test]
    fn standard_gaussian_scores() {
        let g = GaussianMixture::standard(3);
        let x = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        let s = g.score(&x).unwrap();
        assert!(linalg::max_abs_diff(&s, &(-&x)) < 1e-15);
        assert!(g.relative_score(&x).unwrap().norm() < 1e-15);
        let h = g.hessian_log_density(&x).unwrap();
        assert!(linalg::frobenius_diff(&h, &(-DMatrix::identity(3, 3))) < 1e-14);
    }

    #[test]
    fn ou_pushforward_identity_and_stationarity() {
        let m = two_component();
        assert_eq!(m.ou_pushforward(0.0).unwrap(), m);
        let g = GaussianMixture::standard(2);
        let p = g.ou_pushforward(0.37).unwrap();
        assert!(p.max_component_diff(&g).unwrap() < 1e-15);
        assert!(m.ou_pushforward(-1.0).is_err());
    }

    #[test]
    fn relative_score_of_shifted_gaussian_is_constant() {
        let mvec = DVector::from_vec(vec![0.6, -0.8]);
        let mix = GaussianMixture::gaussian(mvec.clone(), DMatrix::identity(2, 2)).unwrap();
        let t = 0.8;
        let p = mix.ou_pushforward(t).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-4.0..4.0));
            let rs = p.relative_score(&x).unwrap();
            assert!(linalg::max_abs_diff(&rs, &(&mvec * (-t).exp())) < 1e-13);
        }
    }

    #[test]
    fn far_tail_score_is_finite() {
        let m = two_component();
        let x = DVector::from_vec(vec![1e3, -2e3]);
        let e = m.evaluate(&x, true).unwrap();
        assert!(e.log_density.is_finite());
        assert!(e.score.iter().all(|v| v.is_finite()));
        assert!(e.hessian.unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = two_component();
        let err = m.score(&DVector::zeros(3)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 2, got: 3 }));
        assert!(m.kou_pushforward(0.5).is_ok());
        assert!(GaussianMixture::standard(3).kou_pushforward(0.5).is_err());
    }

    #[test]
    fn json_layout() {
        let m = two_component();
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.starts_with("{\"dim\":2,\"components\":[{\"weight\":0.3,"));
        let back: GaussianMixture = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        let bad = r#"{"dim":2,"components":[{"weight":1.0,"mean":[0.0],"cov":[[1.0]]}]}"#;
        assert!(serde_json::from_str::<GaussianMixture>(bad).is_err());
    }

    #[test]
    fn second_moment_and_moments() {
        let m = two_component();
        let expected = 0.3 * (1.5f64 * 1.5 + 0.25 + 1.3) + 0.7 * (2.0 + 1.8);
        assert!((m.second_moment() - expected).abs() < 1e-14);
        let c = m.covariance();
        let mu = m.mean();
        assert!(((c.trace() + mu.norm_squared()) - expected).abs() < 1e-13);
    }
}
