//! Exponential-integrator backward samplers for OU and kinetic OU.
//!
//! On each interval `[t_k, t_{k+1}]` the oracle is evaluated once at the left
//! endpoint, `s = s̃(T - t_k, X_{t_k})`, and the remaining linear SDE is
//! integrated exactly:
//!
//! * OU: `dX = (-X + s) dt + √2 dB`, giving
//!   `X' = e^{-h} X + (1 - e^{-h}) s + √(1 - e^{-2h}) ξ`.
//! * kOU: `dX = -V dt`, `dV = (X - 2V + s) dt + 2 dB`, integrated with
//!   [`KineticStep`].

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KineticStep;
use crate::linalg::one_minus_exp_neg;
use crate::oracle::{FrozenOracle, Process, ScoreOracle};
use crate::rng::{self, Purpose};
use crate::schedule::{Schedule, ScheduleKind};

fn normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// One exact OU step with the score frozen at `s_val`, driven by `xi`.
pub fn ei_step_ou_with(x: &DVector<f64>, s_val: &DVector<f64>, h: f64, xi: &DVector<f64>) -> DVector<f64> {
    let decay = (-h).exp();
    let gain = one_minus_exp_neg(h);
    let sd = one_minus_exp_neg(2.0 * h).sqrt();
    x * decay + s_val * gain + xi * sd
}

pub fn ei_step_ou<R: Rng + ?Sized>(x: &DVector<f64>, s_val: &DVector<f64>, h: f64, rng: &mut R) -> DVector<f64> {
    let xi = normals(x.len(), rng);
    ei_step_ou_with(x, s_val, h, &xi)
}

/// One exact kinetic step on the stacked state `(x, v)`, driven by `xi`.
pub fn ei_step_kou_with(step: &KineticStep, state: &DVector<f64>, s_val: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
    &step.transition * state + &step.forcing * s_val + &step.noise_chol * xi
}

pub fn ei_step_kou<R: Rng + ?Sized>(state: &DVector<f64>, s_val: &DVector<f64>, h: f64, rng: &mut R) -> Result<DVector<f64>> {
    if state.len() != 2 * s_val.len() {
        return Err(Error::DimensionMismatch {
            expected: 2 * s_val.len(),
            got: state.len(),
        });
    }
    let step = KineticStep::new(h, s_val.len())?;
    let xi = normals(state.len(), rng);
    Ok(ei_step_kou_with(&step, state, s_val, &xi))
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub schedule: Schedule,
    pub oracle: ScoreOracle,
    pub n_paths: usize,
    pub seed: u64,
    /// Stop the backward run at `T - δ`.
    pub early_stop_delta: f64,
}

impl RunConfig {
    pub fn process(&self) -> Process {
        self.oracle.process()
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.n_paths == 0 {
            return Err(Error::param("n_paths", "must be >= 1"));
        }
        let delta = self.early_stop_delta;
        if !(delta >= 0.0) {
            return Err(Error::param("early_stop_delta", format!("must be >= 0, got {delta}")));
        }
        if !(delta < self.schedule.last_step()) {
            return Err(Error::param(
                "early_stop_delta",
                format!("must be < last step {}, got {delta}", self.schedule.last_step()),
            ));
        }
        if let ScheduleKind::ExpThenConst { a, .. } = self.schedule.kind {
            if a == 0.0 && delta == 0.0 {
                return Err(Error::param("early_stop_delta", "a = 0 requires delta > 0"));
            }
        }
        Ok(())
    }

    /// Integration lengths actually used on each step (last one shortened by δ).
    pub fn step_lengths(&self) -> Vec<f64> {
        let mut h = self.schedule.steps.clone();
        if let Some(last) = h.last_mut() {
            *last -= self.early_stop_delta;
        }
        h
    }

    /// Time at which the run stops, `T - δ`.
    pub fn stop_time(&self) -> f64 {
        self.schedule.horizon - self.early_stop_delta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathSeed {
    pub path_index: usize,
    /// Key seed of the sampler stream family.
    pub key: u64,
    /// Stream index within the family.
    pub stream: u64,
}

#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub process: Process,
    pub data_dim: usize,
    pub points: Vec<DVector<f64>>,
    pub seeds: Vec<PathSeed>,
    pub stop_time: f64,
}

impl SampleBatch {
    /// Header `path_index,x_0,…,x_{d-1}[,v_0,…,v_{d-1}]`.
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["path_index".to_string()];
        cols.extend((0..self.data_dim).map(|i| format!("x_{i}")));
        if self.process == Process::Kou {
            cols.extend((0..self.data_dim).map(|i| format!("v_{i}")));
        }
        cols.join(",")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", self.csv_header())?;
        for (i, p) in self.points.iter().enumerate() {
            write!(w, "{i}")?;
            for v in p.iter() {
                write!(w, ",{v:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Empirical mean and covariance of the points.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        empirical_moments(&self.points)
    }
}

pub fn empirical_moments(points: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = points.len() as f64;
    let dim = points.first().map_or(0, |p| p.len());
    let mut mean = DVector::zeros(dim);
    for p in points {
        mean += p;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for p in points {
        let d = p - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n - 1.0).max(1.0);
    (mean, cov)
}

enum StepOperator {
    Ou,
    Kou(KineticStep),
}

/// Runs `n_paths` independent backward chains from `γ` (OU) or `γ^{2d}`
/// (kOU). Path `i` draws from stream `(seed, SamplerPaths, i)`, so the output
/// is identical for any number of worker threads.
pub fn run(config: &RunConfig) -> Result<SampleBatch> {
    config.validate()?;
    let oracle = &config.oracle;
    let process = oracle.process();
    let d = oracle.out_dim();
    let n_state = oracle.state_dim();
    let lengths = config.step_lengths();

    let frozen: Vec<FrozenOracle<'_>> = (0..config.schedule.len())
        .map(|k| oracle.at_time(config.schedule.forward_time(k)))
        .collect::<Result<_>>()?;
    let ops: Vec<StepOperator> = lengths
        .iter()
        .map(|&h| match process {
            Process::Ou => Ok(StepOperator::Ou),
            Process::Kou => KineticStep::new(h, d).map(StepOperator::Kou),
        })
        .collect::<Result<_>>()?;

    let key = rng::derive_seed(config.seed, Purpose::SamplerPaths as u64);
    let points: Vec<DVector<f64>> = (0..config.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(config.seed, Purpose::SamplerPaths, i as u64);
            let mut x = normals(n_state, &mut rng);
            for (k, (op, &h)) in ops.iter().zip(&lengths).enumerate() {
                let s = frozen[k].eval(&x).map_err(|e| Error::PathAborted {
                    path: i,
                    step: k,
                    source: Box::new(e),
                })?;
                let xi = normals(n_state, &mut rng);
                x = match op {
                    StepOperator::Ou => ei_step_ou_with(&x, &s, h, &xi),
                    StepOperator::Kou(step) => ei_step_kou_with(step, &x, &s, &xi),
                };
            }
            Ok(x)
        })
        .collect::<Result<_>>()?;

    let seeds = (0..config.n_paths)
        .map(|i| PathSeed {
            path_index: i,
            key,
            stream: i as u64,
        })
        .collect();
    Ok(SampleBatch {
        process,
        data_dim: d,
        points,
        seeds,
        stop_time: config.stop_time(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::GaussianMixture;
    use crate::schedule::make_schedule;
    use std::sync::Arc;

    #[test]
    fn tiny_step_is_near_identity() {
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let s = DVector::from_vec(vec![3.0, 3.0]);
        let zero = DVector::zeros(2);
        let y = ei_step_ou_with(&x, &s, 1e-12, &zero);
        assert!((y - &x).norm() < 1e-11);
    }

    #[test]
    fn deterministic_part_is_convex_combination() {
        let x = DVector::from_vec(vec![1.0]);
        let s = DVector::from_vec(vec![2.0]);
        let zero = DVector::zeros(1);
        let mut prev = 1.0;
        for h in [0.01, 0.1, 0.5, 1.0, 3.0] {
            let y = ei_step_ou_with(&x, &s, h, &zero)[0];
            assert!(y > prev && y < 2.0);
            prev = y;
        }
    }

    #[test]
    fn zero_kinetic_step_is_identity() {
        let mut rng = rng::stream(3, Purpose::Verify, 0);
        let state = DVector::from_vec(vec![0.3, -0.2, 1.0, 2.0]);
        let s = DVector::from_vec(vec![5.0, 5.0]);
        let out = ei_step_kou(&state, &s, 0.0, &mut rng).unwrap();
        assert_eq!(out, state);
    }

    #[test]
    fn config_validation() {
        let data = Arc::new(GaussianMixture::standard(1));
        let sched = make_schedule(ScheduleKind::Constant { h: 0.5 }, 2.0).unwrap();
        let mut cfg = RunConfig {
            schedule: sched,
            oracle: ScoreOracle::exact(Process::Ou, data),
            n_paths: 4,
            seed: 1,
            early_stop_delta: 0.5,
        };
        assert!(cfg.validate().is_err());
        cfg.early_stop_delta = 0.1;
        cfg.validate().unwrap();
        cfg.n_paths = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csv_layout() {
        let data = Arc::new(GaussianMixture::standard(2));
        let cfg = RunConfig {
            schedule: make_schedule(ScheduleKind::Constant { h: 0.5 }, 1.0).unwrap(),
            oracle: ScoreOracle::exact(Process::Kou, data),
            n_paths: 3,
            seed: 9,
            early_stop_delta: 0.0,
        };
        let batch = run(&cfg).unwrap();
        let mut buf = Vec::new();
        batch.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path_index,x_0,x_1,v_0,v_1");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("2,"));
        assert_eq!(lines[1].split(',').count(), 5);
    }
}
