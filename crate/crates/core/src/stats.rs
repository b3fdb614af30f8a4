//! Monte Carlo accumulation, chunked deterministic parallel evaluation and
//! least-squares slope fitting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Purpose, StreamRng};

/// Samples per Monte Carlo chunk. Part of the reproducibility contract:
/// chunk `j` always draws from stream `(seed, purpose, j)`.
pub const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            std_error: 0.0,
        }
    }
}

/// Running sums and cross sums of a fixed number of per-sample statistics.
#[derive(Debug, Clone)]
pub struct MultiAcc {
    pub n: usize,
    pub sum: Vec<f64>,
    cross: Vec<f64>,
}

impl MultiAcc {
    pub fn new(k: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; k],
            cross: vec![0.0; k * k],
        }
    }

    pub fn width(&self) -> usize {
        self.sum.len()
    }

    pub fn push(&mut self, values: &[f64]) {
        let k = self.width();
        debug_assert_eq!(values.len(), k);
        self.n += 1;
        for i in 0..k {
            self.sum[i] += values[i];
            for j in i..k {
                self.cross[i * k + j] += values[i] * values[j];
            }
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.n += other.n;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.cross.iter_mut().zip(&other.cross) {
            *a += b;
        }
    }

    /// Raw sum of squares of statistic `i`.
    pub fn sum_sq(&self, i: usize) -> f64 {
        self.cross[i * self.width() + i]
    }

    pub fn mean(&self, i: usize) -> f64 {
        self.sum[i] / self.n as f64
    }

    /// Sample covariance of statistics `i` and `j`.
    pub fn cov(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        let k = self.width();
        let n = self.n as f64;
        if self.n < 2 {
            return 0.0;
        }
        let c = (self.cross[i * k + j] - self.sum[i] * self.sum[j] / n) / (n - 1.0);
        if i == j {
            c.max(0.0)
        } else {
            c
        }
    }

    pub fn estimate(&self, i: usize) -> Estimate {
        Estimate {
            value: self.mean(i),
            std_error: (self.cov(i, i) / self.n as f64).sqrt(),
        }
    }

    /// Mean of `Σ_i c_i X_i` with its standard error.
    pub fn linear(&self, coeffs: &[(usize, f64)]) -> Estimate {
        let value = coeffs.iter().map(|(i, c)| c * self.mean(*i)).sum();
        let mut var = 0.0;
        for (i, ci) in coeffs {
            for (j, cj) in coeffs {
                var += ci * cj * self.cov(*i, *j);
            }
        }
        Estimate {
            value,
            std_error: (var.max(0.0) / self.n as f64).sqrt(),
        }
    }

    /// Ratio of means `E X_i / E X_j` with a delta-method standard error.
    pub fn ratio(&self, i: usize, j: usize) -> Estimate {
        let (a, b) = (self.mean(i), self.mean(j));
        if a == 0.0 && b == 0.0 {
            return Estimate::exact(0.0);
        }
        if b == 0.0 {
            return Estimate {
                value: f64::INFINITY,
                std_error: f64::INFINITY,
            };
        }
        let r = a / b;
        let var = (self.cov(i, i) - 2.0 * r * self.cov(i, j) + r * r * self.cov(j, j)) / (b * b);
        Estimate {
            value: r,
            std_error: (var.max(0.0) / self.n as f64).sqrt(),
        }
    }
}

/// Evaluates `n` samples in fixed-size chunks on the current rayon pool and
/// merges the chunk accumulators in chunk order. The result does not depend
/// on the number of worker threads.
pub fn chunked_mc<F>(n: usize, width: usize, seed: u64, purpose: Purpose, f: F) -> MultiAcc
where
    F: Fn(&mut StreamRng, &mut Vec<f64>) + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let parts: Vec<MultiAcc> = (0..chunks)
        .into_par_iter()
        .map(|j| {
            let count = CHUNK.min(n - j * CHUNK);
            let mut rng = rng::stream(seed, purpose, j as u64);
            let mut acc = MultiAcc::new(width);
            let mut buf = vec![0.0; width];
            for _ in 0..count {
                f(&mut rng, &mut buf);
                acc.push(&buf);
            }
            acc
        })
        .collect();
    let mut total = MultiAcc::new(width);
    for p in &parts {
        total.merge(p);
    }
    total
}

/// Ordinary least squares `y ≈ intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn ols(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

/// OLS on `(ln x, ln y)`; `None` if any value is not strictly positive.
pub fn log_log_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    ols(&lx, &ly)
}
