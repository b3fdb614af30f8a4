//! Named property suites over a built-in test matrix.
//!
//! Each suite returns one [`CheckReport`] per check. Suites: `prop3`,
//! `prop6`, `eq25`, `lemma3`, `denoising`, `schedule`, `kernels`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde_json::json;

use crate::diagnostics::{self, CheckReport};
use crate::error::{Error, Result};
use crate::kernels;
use crate::linalg;
use crate::mixture::{Component, GaussianMixture};
use crate::oracle::Process;
use crate::quadrature;
use crate::rng::{self, Purpose};
use crate::schedule::{make_schedule, ScheduleKind};

pub const SUITES: [&str; 7] = ["prop3", "prop6", "eq25", "lemma3", "denoising", "schedule", "kernels"];

/// Samples used by the Monte Carlo checks on mixtures.
pub const MIXTURE_SAMPLES: usize = 100_000;

/// Two-component mixture in two dimensions with correlated covariances.
pub fn pair_2d() -> GaussianMixture {
    GaussianMixture::new(vec![
        Component {
            weight: 0.4,
            mean: DVector::from_vec(vec![1.5, 0.5]),
            cov: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
        },
        Component {
            weight: 0.6,
            mean: DVector::from_vec(vec![-1.0, -1.0]),
            cov: DMatrix::from_row_slice(2, 2, &[0.8, -0.2, -0.2, 0.6]),
        },
    ])
    .expect("valid mixture")
}

/// `0.5 N(-2, 1) + 0.5 N(2, 1)`.
pub fn symmetric_pair_1d() -> GaussianMixture {
    let comp = |m: f64| Component {
        weight: 0.5,
        mean: DVector::from_element(1, m),
        cov: DMatrix::identity(1, 1),
    };
    GaussianMixture::new(vec![comp(-2.0), comp(2.0)]).expect("valid mixture")
}

/// `N(m, I)` with `m = (norm/√d)(1, …, 1)`.
pub fn shifted_gaussian(d: usize, norm: f64) -> GaussianMixture {
    let m = DVector::from_element(d, norm / (d as f64).sqrt());
    GaussianMixture::gaussian(m, DMatrix::identity(d, d)).expect("valid Gaussian")
}

pub fn run_suite(name: &str, seed: u64) -> Result<Vec<CheckReport>> {
    match name {
        "prop3" => prop3(seed),
        "prop6" => prop6(seed),
        "eq25" => eq25(seed),
        "lemma3" => lemma3(seed),
        "denoising" => denoising(seed),
        "schedule" => schedule(seed),
        "kernels" => kernels_suite(),
        other => Err(Error::Unsupported(format!("unknown suite '{other}'"))),
    }
}

fn tag(mut r: CheckReport, instance: &str) -> CheckReport {
    if let serde_json::Value::Object(map) = &mut r.params {
        map.insert("instance".into(), json!(instance));
    }
    r
}

/// Ten-point grid on `[0, T)`.
pub fn g_grid(horizon: f64) -> Vec<f64> {
    (0..10).map(|i| horizon * i as f64 / 10.0).collect()
}

pub const PROP_HORIZON: f64 = 2.0;
pub const PROP6_CAP: f64 = 20.0;

fn prop3(seed: u64) -> Result<Vec<CheckReport>> {
    let grid = g_grid(PROP_HORIZON);
    let standard = diagnostics::estimate_g(&GaussianMixture::standard(2), Process::Ou, PROP_HORIZON, &grid, 1000, seed)?;
    let gauss = diagnostics::gaussian_g_curve(&shifted_gaussian(2, 1.0), Process::Ou, PROP_HORIZON, &grid)?;
    let mix = diagnostics::estimate_g(&pair_2d(), Process::Ou, PROP_HORIZON, &grid, MIXTURE_SAMPLES, seed)?;
    Ok(vec![
        tag(diagnostics::check_contraction(&standard, 2.0, None)?, "standard_2d"),
        tag(diagnostics::check_contraction(&gauss, 2.0, None)?, "gaussian_closed_form"),
        tag(diagnostics::check_contraction(&mix, 2.0, None)?, "pair_2d"),
    ])
}

fn prop6(seed: u64) -> Result<Vec<CheckReport>> {
    let grid = g_grid(PROP_HORIZON);
    let gauss = diagnostics::gaussian_g_curve(&shifted_gaussian(2, 1.0), Process::Kou, PROP_HORIZON, &grid)?;
    let mix = diagnostics::estimate_g(&pair_2d(), Process::Kou, PROP_HORIZON, &grid, MIXTURE_SAMPLES, seed)?;
    Ok(vec![
        tag(diagnostics::check_contraction(&gauss, 0.5, Some(PROP6_CAP))?, "gaussian_closed_form"),
        tag(diagnostics::check_contraction(&mix, 0.5, Some(PROP6_CAP))?, "pair_2d"),
    ])
}

fn eq25(seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for (name, data, n) in [
        ("standard_2d", GaussianMixture::standard(2), 1000),
        ("gaussian", shifted_gaussian(2, 1.0), 1000),
        ("pair_2d", pair_2d(), MIXTURE_SAMPLES),
    ] {
        let r = diagnostics::check_integral_identity(&data, Process::Ou, 2.0, 0.2, 0.8, n, seed)?;
        out.push(tag(r, name));
    }
    let r = diagnostics::check_integral_identity(&pair_2d(), Process::Kou, 2.0, 0.2, 0.8, MIXTURE_SAMPLES, seed)?;
    out.push(tag(r, "pair_2d"));
    Ok(out)
}

/// Eight-point grid for the `lemma3` suite plus `T - 0.05` and `T - 1e-3`.
pub fn lemma3_grid(horizon: f64) -> Vec<f64> {
    let mut g: Vec<f64> = (0..8).map(|i| horizon * i as f64 / 8.0).collect();
    g.push(horizon - 0.05);
    g.push(horizon - 1e-3);
    g
}

fn lemma3(seed: u64) -> Result<Vec<CheckReport>> {
    let horizon = 2.0;
    let grid = lemma3_grid(horizon);
    let mut out = Vec::new();
    for (name, data, n) in [
        ("standard_2d", GaussianMixture::standard(2), 1000),
        ("gaussian", shifted_gaussian(2, 1.0), 1000),
        ("symmetric_pair_1d", symmetric_pair_1d(), MIXTURE_SAMPLES),
        ("pair_2d", pair_2d(), MIXTURE_SAMPLES),
    ] {
        out.push(tag(diagnostics::lemma3_check(&data, horizon, &grid, n, seed)?, name));
    }
    Ok(out)
}

pub const DENOISING_SAMPLES: usize = 200_000;

/// Five query points drawn from the OU marginal at `s`.
pub fn denoising_points(data: &GaussianMixture, s: f64, seed: u64) -> Result<Vec<DVector<f64>>> {
    let marginal = data.ou_pushforward(s)?;
    let mut rng = rng::stream(seed, Purpose::Verify, s.to_bits());
    Ok((0..5).map(|_| marginal.sample(&mut rng)).collect())
}

fn denoising(seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for (name, data) in [("gaussian", shifted_gaussian(2, 1.0)), ("pair_2d", pair_2d())] {
        for s in [0.3, 1.0] {
            let pts = denoising_points(&data, s, seed)?;
            let r = diagnostics::denoising_score_check(&data, s, &pts, DENOISING_SAMPLES, seed)?;
            out.push(tag(r, name));
        }
    }
    Ok(out)
}

/// One shape violation of an exponential-then-constant schedule.
fn schedule_violation(horizon: f64, c: f64, a: f64) -> Result<Option<String>> {
    let s = make_schedule(ScheduleKind::ExpThenConst { c, a, stop_delta: 0.0 }, horizon)?;
    let k0 = ((horizon - 1.0) / c).ceil() as usize;
    if s.counts.k0 != k0 {
        return Ok(Some(format!("k0 = {} expected {k0}", s.counts.k0)));
    }
    if s.knots[k0] != horizon - 1.0 {
        return Ok(Some("t_k0 != T - 1".into()));
    }
    if s.steps[..k0 - 1].iter().any(|&h| h != c) || s.steps[k0 - 1] > c {
        return Ok(Some("constant phase".into()));
    }
    for k in 1..=s.counts.k1 {
        let h = s.steps[k0 + k - 1];
        if h != c * (1.0 + c).powi(-(k as i32)) {
            return Ok(Some(format!("geometric step {k}")));
        }
        // h_k = c·min{max{T - t_k, a}, 1} at the right knot
        let shape = c * (horizon - s.knots[k0 + k]).max(a).min(1.0);
        if (h - shape).abs() > 1e-12 {
            return Ok(Some(format!("geometric step {k} off shape by {}", (h - shape).abs())));
        }
    }
    let tail = &s.steps[k0 + s.counts.k1..];
    if let Some((last, body)) = tail.split_last() {
        if body.iter().any(|&h| h != c * a) || *last > c * a * (1.0 + 1e-9) {
            return Ok(Some("final constant phase".into()));
        }
    }
    let cap = 4.0 * ((1.0 / a).ln() + horizon) / c;
    if s.counts.n as f64 > cap {
        return Ok(Some(format!("N = {} exceeds {cap}", s.counts.n)));
    }
    Ok(None)
}

pub const SCHEDULE_TRIPLES: usize = 200;

/// Random valid `(T, c, a)`: `c ∈ (0.01, 0.5]`, `T ∈ [1 + 2c, 10]`,
/// `a = 10^{-u}` with `u ∈ [0, 3]`.
pub fn schedule_triples(seed: u64) -> Vec<(f64, f64, f64)> {
    let mut rng = rng::stream(seed, Purpose::Verify, 0x5c4e);
    (0..SCHEDULE_TRIPLES)
        .map(|_| {
            let c = 0.01 + 0.49 * (1.0 - rng.random::<f64>());
            let horizon = 1.0 + 2.0 * c + (9.0 - 2.0 * c) * rng.random::<f64>();
            let a = 10f64.powf(-3.0 * rng.random::<f64>());
            (horizon, c, a)
        })
        .collect()
}

fn schedule(seed: u64) -> Result<Vec<CheckReport>> {
    let triples = schedule_triples(seed);
    let mut failures = Vec::new();
    for &(horizon, c, a) in &triples {
        if let Some(msg) = schedule_violation(horizon, c, a)? {
            failures.push(json!({"T": horizon, "c": c, "a": a, "violation": msg}));
        }
    }
    Ok(vec![CheckReport {
        check: "schedule".into(),
        params: json!({"triples": triples.len(), "failures": failures}),
        estimate: failures.len() as f64,
        std_error: 0.0,
        bound: 0.0,
        margin: 0.0,
        pass: failures.is_empty(),
    }])
}

pub const KERNEL_TIMES: [f64; 4] = [0.1, 0.5, 1.0, 3.0];

/// `∫_0^t e^{-Aᵀr} diag(0, 4I) e^{-Ar} dr` by composite Gauss-Legendre on the
/// numerically exponentiated generator.
pub fn kou_cov_by_quadrature(t: f64, d: usize) -> DMatrix<f64> {
    let a = kernels::kou_generator(d);
    let mut diffusion = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        diffusion[(d + i, d + i)] = 4.0;
    }
    let rule = quadrature::gauss_legendre(20);
    let panels = 16;
    let mut out = DMatrix::zeros(2 * d, 2 * d);
    let width = t / panels as f64;
    for p in 0..panels {
        let lo = p as f64 * width;
        for (x, w) in rule.nodes.iter().zip(&rule.weights) {
            let r = lo + 0.5 * width * (x + 1.0);
            let e = (-a.transpose() * r).exp();
            out += (&e * &diffusion * e.transpose()) * (0.5 * width * w);
        }
    }
    out
}

fn kernel_report(name: &str, params: serde_json::Value, err: f64, bound: f64) -> CheckReport {
    CheckReport {
        check: name.into(),
        params,
        estimate: err,
        std_error: 0.0,
        bound,
        margin: 0.0,
        pass: err <= bound,
    }
}

fn kernels_suite() -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for d in [1, 3] {
        let a = kernels::kou_generator(d);
        let mut expm_err = 0.0_f64;
        let mut cov_err = 0.0_f64;
        for &t in &KERNEL_TIMES {
            let numeric = (-&a * t).exp();
            expm_err = expm_err.max(linalg::frobenius_diff(&kernels::kou_expm(t, d), &numeric));
            cov_err = cov_err.max(linalg::frobenius_diff(&kernels::kou_cov(t, d), &kou_cov_by_quadrature(t, d)));
        }
        out.push(kernel_report("kou_expm", json!({"d": d, "times": KERNEL_TIMES}), expm_err, 1e-12));
        out.push(kernel_report("kou_cov", json!({"d": d, "times": KERNEL_TIMES}), cov_err, 1e-10));
        let stat = linalg::frobenius_diff(&kernels::kou_cov(30.0, d), &DMatrix::identity(2 * d, 2 * d));
        out.push(kernel_report("kou_stationary", json!({"d": d, "t": 30.0}), stat, 1e-12));
        let mut ck = 0.0_f64;
        for (s, t) in [(0.1, 0.5), (0.5, 1.0), (1.0, 3.0), (0.3, 0.3)] {
            let composed = kernels::kou_kernel(s, d)?.then(&kernels::kou_kernel(t, d)?)?;
            let direct = kernels::kou_kernel(s + t, d)?;
            ck = ck.max(linalg::frobenius_diff(&composed.map, &direct.map));
            ck = ck.max(linalg::frobenius_diff(&composed.noise_cov, &direct.noise_cov));
            let ou = kernels::ou_kernel(s, d)?.then(&kernels::ou_kernel(t, d)?)?;
            let ou_direct = kernels::ou_kernel(s + t, d)?;
            ck = ck.max(linalg::frobenius_diff(&ou.noise_cov, &ou_direct.noise_cov));
        }
        out.push(kernel_report("chapman_kolmogorov", json!({"d": d}), ck, 1e-11));
    }
    Ok(out)
}
