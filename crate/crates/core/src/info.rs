//! Relative Fisher information, relative entropy and second moment of a
//! mixture with respect to the standard Gaussian.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mixture::GaussianMixture;
use crate::quadrature::{self, Rule};
use crate::rng::Purpose;
use crate::stats::{self, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoSummary {
    /// `I(μ|γ^d) = ∫‖∇ log(dμ/dγ^d)‖² dμ`.
    pub fisher_rel_gauss: f64,
    /// `KL(μ|γ^d)`.
    pub kl_rel_gauss: f64,
    /// `M2² = ∫‖x‖² dμ`.
    pub second_moment: f64,
    pub fisher_std_error: f64,
    pub kl_std_error: f64,
}

impl InfoSummary {
    /// `0.5·I - KL`, nonnegative up to estimator error by log-Sobolev.
    pub fn log_sobolev_slack(&self) -> f64 {
        0.5 * self.fisher_rel_gauss - self.kl_rel_gauss
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoOptions {
    /// Monte Carlo budget for `d > 2`.
    pub mc_samples: usize,
    pub seed: u64,
    /// Largest acceptable standard error of either estimate.
    pub tolerance: Option<f64>,
}

impl Default for InfoOptions {
    fn default() -> Self {
        Self {
            mc_samples: 1 << 18,
            seed: 0,
            tolerance: None,
        }
    }
}

pub fn info_summary(mix: &GaussianMixture) -> Result<InfoSummary> {
    info_summary_with(mix, &InfoOptions::default())
}

pub fn info_summary_with(mix: &GaussianMixture, opts: &InfoOptions) -> Result<InfoSummary> {
    let second_moment = mix.second_moment();
    let (fisher, kl) = if mix.is_single_gaussian() {
        let (f, k) = gaussian_closed_form(mix)?;
        (Estimate::exact(f), Estimate::exact(k))
    } else if mix.dim() <= 2 {
        gauss_hermite_info(mix)?
    } else {
        monte_carlo_info(mix, opts)?
    };
    if let Some(tol) = opts.tolerance {
        let worst = fisher.std_error.max(kl.std_error);
        if worst > tol {
            return Err(Error::Estimator(format!(
                "info_summary standard error {worst:.3e} exceeds tolerance {tol:.3e} at {} samples",
                opts.mc_samples
            )));
        }
    }
    Ok(InfoSummary {
        fisher_rel_gauss: fisher.value.max(0.0),
        kl_rel_gauss: kl.value.max(0.0),
        second_moment,
        fisher_std_error: fisher.std_error,
        kl_std_error: kl.std_error,
    })
}

fn gaussian_closed_form(mix: &GaussianMixture) -> Result<(f64, f64)> {
    let c = &mix.components()[0];
    let d = mix.dim();
    let chol = linalg::cholesky_strict(&c.cov, "component covariance")?;
    let precision = chol.inverse();
    // ∇ log(dμ/dγ)(x) = (I - Σ^{-1}) x + Σ^{-1} m, whose mean is m.
    let a = DMatrix::identity(d, d) - &precision;
    let fisher = c.mean.norm_squared() + (&a * &c.cov * a.transpose()).trace();
    let logdet = linalg::log_det_cholesky(&chol.l());
    let kl = 0.5 * (c.cov.trace() + c.mean.norm_squared() - d as f64 - logdet);
    Ok((fisher, kl.max(0.0)))
}

/// `(‖∇ log(dμ/dγ)‖², log(dμ/dγ))` at `x`.
fn integrands(mix: &GaussianMixture, x: &DVector<f64>) -> Result<(f64, f64)> {
    let eval = mix.evaluate(x, false)?;
    let rel = eval.score + x;
    let log_gauss = -0.5 * x.norm_squared() - 0.5 * mix.dim() as f64 * (2.0 * PI).ln();
    Ok((rel.norm_squared(), eval.log_density - log_gauss))
}

fn tensor_gh(mix: &GaussianMixture, rule: &Rule) -> Result<(f64, f64)> {
    let d = mix.dim();
    let n = rule.nodes.len();
    let (mut fisher, mut kl) = (0.0, 0.0);
    for (idx, comp) in mix.components().iter().enumerate() {
        let (mut f_c, mut k_c) = (0.0, 0.0);
        let total = n.pow(d as u32);
        for flat in 0..total {
            let mut rem = flat;
            let mut w = 1.0;
            let mut xi = DVector::zeros(d);
            for j in 0..d {
                let a = rem % n;
                rem /= n;
                xi[j] = rule.nodes[a];
                w *= rule.weights[a];
            }
            if w == 0.0 {
                continue;
            }
            let x = mix.component_point(idx, &xi);
            let (f, k) = integrands(mix, &x)?;
            f_c += w * f;
            k_c += w * k;
        }
        fisher += comp.weight * f_c;
        kl += comp.weight * k_c;
    }
    Ok((fisher, kl))
}

const GH_START: usize = 40;
const GH_MAX: usize = 320;
const GH_RTOL: f64 = 1e-10;

/// Per-component tensor Gauss-Hermite, doubling the node count until two
/// successive rules agree. The last difference is reported as the error.
fn gauss_hermite_info(mix: &GaussianMixture) -> Result<(Estimate, Estimate)> {
    let mut n = GH_START;
    let mut prev = tensor_gh(mix, &quadrature::gauss_hermite(n))?;
    loop {
        n *= 2;
        let cur = tensor_gh(mix, &quadrature::gauss_hermite(n))?;
        let df = (cur.0 - prev.0).abs();
        let dk = (cur.1 - prev.1).abs();
        let done = df <= GH_RTOL * cur.0.abs().max(1e-300) && dk <= GH_RTOL * cur.1.abs().max(1e-300);
        if done || n >= GH_MAX {
            return Ok((
                Estimate { value: cur.0, std_error: df },
                Estimate { value: cur.1, std_error: dk },
            ));
        }
        prev = cur;
    }
}

/// Monte Carlo with the control variate `‖x‖² - d`, whose mean under μ is
/// `M2² - d`.
fn monte_carlo_info(mix: &GaussianMixture, opts: &InfoOptions) -> Result<(Estimate, Estimate)> {
    if opts.mc_samples < 2 {
        return Err(Error::param("mc_samples", "need at least 2 samples"));
    }
    let d = mix.dim();
    let failure = std::sync::Mutex::new(None);
    let acc = stats::chunked_mc(opts.mc_samples, 3, opts.seed, Purpose::InfoSummary, |rng, out| {
        let idx = mix.pick_component(rng.random::<f64>());
        let xi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = mix.component_point(idx, &xi);
        match integrands(mix, &x) {
            Ok((f, k)) => {
                out[0] = f;
                out[1] = k;
            }
            Err(e) => {
                *failure.lock().unwrap() = Some(e);
                out[0] = f64::NAN;
                out[1] = f64::NAN;
            }
        }
        out[2] = x.norm_squared() - d as f64;
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let cv_mean = mix.second_moment() - d as f64;
    let var_c = acc.cov(2, 2);
    let adjust = |i: usize| -> Estimate {
        let beta = if var_c > 0.0 { acc.cov(i, 2) / var_c } else { 0.0 };
        let est = acc.linear(&[(i, 1.0), (2, -beta)]);
        Estimate {
            value: est.value + beta * cv_mean,
            std_error: est.std_error,
        }
    };
    Ok((adjust(0), adjust(1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::Component;

    fn symmetric_pair() -> GaussianMixture {
        let comp = |m: f64| Component {
            weight: 0.5,
            mean: DVector::from_element(1, m),
            cov: DMatrix::identity(1, 1),
        };
        GaussianMixture::new(vec![comp(2.0), comp(-2.0)]).unwrap()
    }

    #[test]
    fn standard_gaussian_is_exact() {
        for d in [1, 3, 7] {
            let s = info_summary(&GaussianMixture::standard(d)).unwrap();
            assert_eq!((s.fisher_rel_gauss, s.kl_rel_gauss, s.second_moment), (0.0, 0.0, d as f64));
        }
    }

    #[test]
    fn shifted_gaussian_closed_form() {
        let m = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let mix = GaussianMixture::gaussian(m.clone(), DMatrix::identity(3, 3)).unwrap();
        let s = info_summary(&mix).unwrap();
        let m2 = m.norm_squared();
        assert!((s.fisher_rel_gauss - m2).abs() < 1e-14);
        assert!((s.kl_rel_gauss - m2 / 2.0).abs() < 1e-14);
        assert!((s.second_moment - (m2 + 3.0)).abs() < 1e-14);
    }

    #[test]
    fn symmetric_pair_golden() {
        // Frozen from an independent adaptive quadrature at 1e-13.
        let s = info_summary(&symmetric_pair()).unwrap();
        assert!((s.fisher_rel_gauss - 3.725610364837045).abs() < 1e-9, "{}", s.fisher_rel_gauss);
        assert!((s.kl_rel_gauss - 1.367279806263133).abs() < 1e-9, "{}", s.kl_rel_gauss);
        assert_eq!(s.second_moment, 5.0);
        assert!(s.log_sobolev_slack() > 0.0);
    }

    #[test]
    fn monte_carlo_agrees_with_quadrature_through_padding() {
        // Padding with standard coordinates leaves both functionals unchanged.
        let padded = symmetric_pair().product_with_standard(2);
        let opts = InfoOptions {
            mc_samples: 1 << 17,
            seed: 3,
            tolerance: Some(0.05),
        };
        let s = info_summary_with(&padded, &opts).unwrap();
        assert!((s.fisher_rel_gauss - 3.725610364837045).abs() < 4.0 * s.fisher_std_error);
        assert!((s.kl_rel_gauss - 1.367279806263133).abs() < 4.0 * s.kl_std_error);
        let strict = InfoOptions { tolerance: Some(1e-9), ..opts };
        assert!(matches!(info_summary_with(&padded, &strict), Err(Error::Estimator(_))));
    }
}
