//! Sweep evaluation, result rows, checks and slope fits.

use std::collections::BTreeMap;

use kou_sgm::diagnostics::{self, CheckReport, LedgerOptions};
use kou_sgm::info::{self, InfoSummary};
use kou_sgm::oracle::{OracleKind, Process};
use kou_sgm::pipeline;
use kou_sgm::sampler;
use kou_sgm::stats::{self, LinearFit};
use kou_sgm::verify;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::spec::{ExperimentSpec, Point};

/// One evaluated sweep point. Missing metrics are `None` and written as
/// empty CSV fields.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub index: usize,
    pub process: String,
    pub d: usize,
    pub schedule: String,
    pub h: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub eps: f64,
    pub oracle: String,
    pub n_steps: usize,
    pub kl_exact: Option<f64>,
    pub path_kl: Option<f64>,
    pub path_kl_initial: Option<f64>,
    pub path_kl_drift: Option<f64>,
    pub bound_shape: f64,
    pub bound_ratio: Option<f64>,
    pub fisher_rel_gauss: f64,
    pub g_at_0: f64,
    pub g_at_t_minus: f64,
    #[serde(rename = "E1")]
    pub e1: Option<f64>,
    #[serde(rename = "E2")]
    pub e2: Option<f64>,
    #[serde(rename = "E3")]
    pub e3: Option<f64>,
    #[serde(rename = "E3_std_error")]
    pub e3_std_error: Option<f64>,
    #[serde(rename = "C_T_eps")]
    pub c_t_eps: f64,
    pub kl_bound: Option<f64>,
    pub n_paths: usize,
    pub sample_mean_norm: Option<f64>,
    pub sample_max_z: Option<f64>,
}

pub const CSV_HEADER: [&str; 27] = [
    "index",
    "process",
    "d",
    "schedule",
    "h",
    "T",
    "eps",
    "oracle",
    "n_steps",
    "kl_exact",
    "path_kl",
    "path_kl_initial",
    "path_kl_drift",
    "bound_shape",
    "bound_ratio",
    "fisher_rel_gauss",
    "g_at_0",
    "g_at_t_minus",
    "E1",
    "E2",
    "E3",
    "E3_std_error",
    "C_T_eps",
    "kl_bound",
    "n_paths",
    "sample_mean_norm",
    "sample_max_z",
];

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

impl ResultRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.index.to_string(),
            self.process.clone(),
            self.d.to_string(),
            self.schedule.clone(),
            num(self.h),
            num(self.horizon),
            num(self.eps),
            self.oracle.clone(),
            self.n_steps.to_string(),
            opt(self.kl_exact),
            opt(self.path_kl),
            opt(self.path_kl_initial),
            opt(self.path_kl_drift),
            num(self.bound_shape),
            opt(self.bound_ratio),
            num(self.fisher_rel_gauss),
            num(self.g_at_0),
            num(self.g_at_t_minus),
            opt(self.e1),
            opt(self.e2),
            opt(self.e3),
            opt(self.e3_std_error),
            num(self.c_t_eps),
            opt(self.kl_bound),
            self.n_paths.to_string(),
            opt(self.sample_mean_norm),
            opt(self.sample_max_z),
        ]
    }
}

fn process_name(p: Process) -> &'static str {
    match p {
        Process::Ou => "OU",
        Process::Kou => "kOU",
    }
}

/// `C(T, ε)`: `Tε²` for absolute errors, `ρ² I` for relative scaling.
fn c_t_eps(kind: &OracleKind, horizon: f64, fisher: f64) -> f64 {
    match kind {
        OracleKind::Exact => 0.0,
        OracleKind::AbsoluteBias { epsilon, .. } | OracleKind::IsotropicNoise { epsilon, .. } => horizon * epsilon * epsilon,
        OracleKind::RelativeScaling { rho } => rho * rho * fisher,
    }
}

/// Shape of the KL bound: `e^{-2T} KL(μ*|γ) + C + h I` (OU) or
/// `e^{-T/2} I + C + h I` (kOU).
fn bound_shape(process: Process, horizon: f64, h: f64, c: f64, info: &InfoSummary) -> f64 {
    let fisher = info.fisher_rel_gauss;
    match process {
        Process::Ou => (-2.0 * horizon).exp() * info.kl_rel_gauss + c + h * fisher,
        Process::Kou => (-horizon / 2.0).exp() * fisher + c + h * fisher,
    }
}

/// Largest z-score of sample mean and covariance entries against the exact
/// Gaussian law of the scheme output.
pub fn moment_z(batch: &sampler::SampleBatch, state: &pipeline::GaussianState) -> f64 {
    let n = batch.points.len() as f64;
    let (mean, cov) = batch.moments();
    let c = &state.cov;
    let mut worst = 0.0_f64;
    for i in 0..mean.len() {
        let se = (c[(i, i)] / n).sqrt();
        worst = worst.max((mean[i] - state.mean[i]).abs() / se);
        for j in i..mean.len() {
            let se = ((c[(i, i)] * c[(j, j)] + c[(i, j)] * c[(i, j)]) / n).sqrt();
            worst = worst.max((cov[(i, j)] - c[(i, j)]).abs() / se);
        }
    }
    worst
}

pub fn evaluate(spec: &ExperimentSpec, point: &Point, info: &InfoSummary) -> Result<ResultRow, String> {
    let cfg = &point.config;
    let process = cfg.process();
    let kind = point.kind();
    let affine = point.data.is_single_gaussian() && !matches!(kind, OracleKind::IsotropicNoise { .. });
    let ctx = |e: kou_sgm::Error| format!("row {} (d = {}, h = {}, T = {}, eps = {}): {e}", point.index, point.d, point.h, point.horizon, point.eps);

    let (prop, path) = if affine {
        let prop = pipeline::propagate(cfg).map_err(ctx)?;
        let path = pipeline::path_kl(cfg).map_err(ctx)?;
        (Some(prop), Some(path))
    } else {
        (None, None)
    };
    let kl_exact = prop.as_ref().map(|p| p.kl);
    let c = c_t_eps(kind, point.horizon, info.fisher_rel_gauss);
    let shape = bound_shape(process, point.horizon, point.h, c, info);
    let bound_ratio = kl_exact.map(|k| if shape > 0.0 { k / shape } else if k == 0.0 { 0.0 } else { f64::INFINITY });

    let g_times = [0.0, point.horizon - 1e-3];
    let g = match diagnostics::gaussian_g_curve(&point.data, process, point.horizon, &g_times) {
        Ok(curve) => curve.values,
        Err(_) => diagnostics::estimate_g(&point.data, process, point.horizon, &g_times, 10_000, cfg.seed).map_err(ctx)?.values,
    };

    let ledger = if spec.checks.iter().any(|c| c == "ledger") {
        let opts = LedgerOptions {
            n_samples: spec.ledger_samples,
            seed: cfg.seed,
            ..LedgerOptions::default()
        };
        Some(diagnostics::error_ledger(cfg, info, &opts).map_err(ctx)?)
    } else {
        None
    };

    let (sample_mean_norm, sample_max_z) = if spec.n_paths > 0 {
        let batch = sampler::run(cfg).map_err(ctx)?;
        let (mean, _) = batch.moments();
        let z = prop.as_ref().map(|p| moment_z(&batch, &p.final_state));
        (Some(mean.norm()), z)
    } else {
        (None, None)
    };

    Ok(ResultRow {
        index: point.index,
        process: process_name(process).into(),
        d: point.d,
        schedule: spec.schedule.name().into(),
        h: point.h,
        horizon: point.horizon,
        eps: point.eps,
        oracle: kind.name().into(),
        n_steps: cfg.schedule.len(),
        kl_exact,
        path_kl: path.map(|p| p.total),
        path_kl_initial: path.map(|p| p.initial),
        path_kl_drift: path.map(|p| p.drift),
        bound_shape: shape,
        bound_ratio,
        fisher_rel_gauss: info.fisher_rel_gauss,
        g_at_0: g[0],
        g_at_t_minus: g[1],
        e1: ledger.as_ref().map(|l| l.e1),
        e2: ledger.as_ref().map(|l| l.e2),
        e3: ledger.as_ref().map(|l| l.e3),
        e3_std_error: ledger.as_ref().map(|l| l.e3_std_error),
        c_t_eps: c,
        kl_bound: ledger.as_ref().map(|l| l.kl_bound),
        n_paths: spec.n_paths,
        sample_mean_norm,
        sample_max_z,
    })
}

/// Evaluates every point on the current rayon pool; rows come back in
/// sweep order.
pub fn evaluate_all(spec: &ExperimentSpec, points: &[Point]) -> Result<Vec<ResultRow>, String> {
    let mut infos: BTreeMap<usize, InfoSummary> = BTreeMap::new();
    for p in points {
        if !infos.contains_key(&p.d) {
            let s = info::info_summary_with(
                &p.data,
                &info::InfoOptions {
                    seed: spec.seed,
                    ..info::InfoOptions::default()
                },
            )
            .map_err(|e| format!("info summary (d = {}): {e}", p.d))?;
            infos.insert(p.d, s);
        }
    }
    points.par_iter().map(|p| evaluate(spec, p, &infos[&p.d])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub check: String,
    pub pass: bool,
    pub detail: String,
}

fn outcome(check: &str, failures: Vec<String>, ok_detail: String) -> CheckOutcome {
    CheckOutcome {
        check: check.into(),
        pass: failures.is_empty(),
        detail: if failures.is_empty() { ok_detail } else { failures.join("; ") },
    }
}

fn instance(r: &ResultRow) -> String {
    format!("row {} (d = {}, h = {}, T = {}, eps = {})", r.index, r.d, r.h, r.horizon, r.eps)
}

pub const SHARPNESS_TOL: f64 = 1e-10;
pub const MONOTONE_TOL: f64 = 1e-12;
pub const AGREEMENT_Z: f64 = 4.0;

/// Key of every axis except `h`.
fn key_without_h(r: &ResultRow) -> (usize, u64, u64) {
    (r.d, r.horizon.to_bits(), r.eps.to_bits())
}

pub fn run_check(name: &str, spec: &ExperimentSpec, rows: &[ResultRow], seed: u64) -> Result<Vec<CheckOutcome>, String> {
    let needs_kl = |r: &ResultRow| r.kl_exact.ok_or_else(|| format!("{}: no exact KL (needs Gaussian data and an affine oracle)", instance(r)));
    let out = match name {
        "sharpness" => {
            let mut fails = Vec::new();
            let mut worst = 0.0_f64;
            for r in rows {
                match needs_kl(r) {
                    Ok(k) if k <= SHARPNESS_TOL => worst = worst.max(k),
                    Ok(k) => fails.push(format!("{}: kl_exact = {k:e} > {SHARPNESS_TOL:e}", instance(r))),
                    Err(e) => fails.push(e),
                }
            }
            vec![outcome(name, fails, format!("max kl_exact = {worst:e}"))]
        }
        "monotone_h" => {
            let mut groups: BTreeMap<(usize, u64, u64), Vec<&ResultRow>> = BTreeMap::new();
            for r in rows {
                groups.entry(key_without_h(r)).or_default().push(r);
            }
            let mut fails = Vec::new();
            for g in groups.values_mut() {
                g.sort_by(|a, b| b.h.total_cmp(&a.h));
                for w in g.windows(2) {
                    match (needs_kl(w[0]), needs_kl(w[1])) {
                        (Ok(a), Ok(b)) if b > a + MONOTONE_TOL => {
                            fails.push(format!("{}: kl rises from {a:e} to {b:e}", instance(w[1])))
                        }
                        (Err(e), _) | (_, Err(e)) => fails.push(e),
                        _ => {}
                    }
                }
            }
            vec![outcome(name, fails, format!("{} groups nonincreasing", groups.len()))]
        }
        "bound" => {
            let mut fails = Vec::new();
            let mut fitted = 0.0_f64;
            for r in rows {
                match (needs_kl(r), r.bound_ratio) {
                    (Ok(_), Some(ratio)) => {
                        fitted = fitted.max(ratio);
                        if ratio > spec.kappa {
                            fails.push(format!("{}: ratio {ratio:e} > kappa {}", instance(r), spec.kappa));
                        }
                    }
                    (Err(e), _) => fails.push(e),
                    _ => {}
                }
            }
            vec![outcome(name, fails, format!("fitted kappa = {fitted:e} <= {}", spec.kappa))]
        }
        "sampler_agreement" => {
            let mut fails = Vec::new();
            let mut worst = 0.0_f64;
            for r in rows {
                match r.sample_max_z {
                    Some(z) if z <= AGREEMENT_Z => worst = worst.max(z),
                    Some(z) => fails.push(format!("{}: moment z-score {z:.2} > {AGREEMENT_Z}", instance(r))),
                    None => fails.push(format!("{}: no exact moments to compare", instance(r))),
                }
            }
            vec![outcome(name, fails, format!("max z = {worst:.3}"))]
        }
        "ledger" => {
            let mut fails = Vec::new();
            for r in rows {
                if let (Some(k), Some(b)) = (r.kl_exact, r.kl_bound) {
                    if k > b {
                        fails.push(format!("{}: kl_exact {k:e} > ledger bound {b:e}", instance(r)));
                    }
                }
            }
            vec![outcome(name, fails, "ledger bound holds where exact KL is known".into())]
        }
        suite => {
            let reports: Vec<CheckReport> = verify::run_suite(suite, seed).map_err(|e| format!("suite {suite}: {e}"))?;
            reports
                .into_iter()
                .map(|r| CheckOutcome {
                    check: format!("{suite}:{}", r.check),
                    pass: r.pass,
                    detail: r.to_json(),
                })
                .collect()
        }
    };
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeFit {
    pub metric: String,
    pub axis: String,
    pub group: serde_json::Value,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

fn fit_groups<K: Ord + Clone>(
    rows: &[ResultRow],
    key: impl Fn(&ResultRow) -> K,
    group_json: impl Fn(&ResultRow) -> serde_json::Value,
    xy: impl Fn(&[&ResultRow]) -> (Vec<f64>, Vec<f64>),
    metric: &str,
    axis: &str,
) -> Vec<SlopeFit> {
    let mut groups: BTreeMap<K, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(key(r)).or_default().push(r);
    }
    let mut out = Vec::new();
    for g in groups.values() {
        let (xs, ys) = xy(g);
        if xs.len() < 2 || xs.iter().all(|x| *x == xs[0]) {
            continue;
        }
        if let Some(LinearFit { slope, intercept, r_squared }) = stats::ols(&xs, &ys) {
            out.push(SlopeFit {
                metric: metric.into(),
                axis: axis.into(),
                group: group_json(g[0]),
                slope,
                intercept,
                r_squared,
                points: xs.len(),
            });
        }
    }
    out
}

/// Log-log slopes of the exact KL against `h`, `ε²` (excess over the
/// `ε = 0` row when present) and `e^{-2T}`.
pub fn slopes(rows: &[ResultRow]) -> Vec<SlopeFit> {
    let positive = |v: Option<f64>| v.filter(|k| *k > 0.0 && k.is_finite());
    let mut out = fit_groups(
        rows,
        key_without_h,
        |r| json!({"d": r.d, "T": r.horizon, "eps": r.eps}),
        |g| {
            g.iter()
                .filter_map(|r| positive(r.kl_exact).map(|k| (r.h.ln(), k.ln())))
                .unzip()
        },
        "kl_exact",
        "h",
    );
    out.extend(fit_groups(
        rows,
        |r| (r.d, r.horizon.to_bits(), r.h.to_bits()),
        |r| json!({"d": r.d, "T": r.horizon, "h": r.h}),
        |g| {
            let base = g.iter().find(|r| r.eps == 0.0).and_then(|r| r.kl_exact);
            g.iter()
                .filter(|r| r.eps > 0.0)
                .filter_map(|r| {
                    let y = match base {
                        Some(b) => r.kl_exact.map(|k| k - b),
                        None => r.kl_exact,
                    };
                    positive(y).map(|y| ((r.eps * r.eps).ln(), y.ln()))
                })
                .unzip()
        },
        "kl_exact_excess",
        "eps2",
    ));
    out.extend(fit_groups(
        rows,
        |r| (r.d, r.h.to_bits(), r.eps.to_bits()),
        |r| json!({"d": r.d, "h": r.h, "eps": r.eps}),
        |g| {
            g.iter()
                .filter_map(|r| positive(r.kl_exact).map(|k| (-2.0 * r.horizon, k.ln())))
                .unzip()
        },
        "kl_exact",
        "exp_neg2T",
    ));
    out
}
