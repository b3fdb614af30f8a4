//! Time grids for the backward samplers.
//!
//! Two kinds are supported: a constant step `h` (the final step truncated so
//! the grid lands on `T`), and the exponential-then-constant grid
//!
//! ```text
//! h_k = c                    1 ≤ k ≤ k0        (k0 = ⌈(T - 1)/c⌉)
//! h_{k0+k} = c (1 + c)^{-k}  1 ≤ k ≤ k1        (k1 = ⌊ln(1/a) / ln(1 + c)⌋)
//! h_k = c a                  k > k0 + k1
//! ```
//!
//! The last constant step of the first phase is shortened so that
//! `t_{k0} = T - 1` exactly, which makes the geometric phase satisfy
//! `h_{k0+k} = c (T - t_{k0+k})` with `T - t_{k0+k} = (1 + c)^{-k}`. The
//! final step of the last phase is truncated to land on `T`. With `a = 0`
//! the geometric phase runs until the remaining time drops to the stopping
//! offset `δ`, and the remainder is taken as one final step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant {
        h: f64,
    },
    ExpThenConst {
        c: f64,
        a: f64,
        /// Early-stopping offset; required (positive) when `a = 0`.
        #[serde(default)]
        stop_delta: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub k0: usize,
    pub k1: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub horizon: f64,
    /// `t_0 = 0 < t_1 < … < t_N = T`.
    pub knots: Vec<f64>,
    /// `steps[k] = h_{k+1} = t_{k+1} - t_k`.
    pub steps: Vec<f64>,
    pub kind: ScheduleKind,
    pub counts: Counts,
}

/// Relative slack when deciding whether `T/h` is an integer.
const GRID_SLACK: f64 = 1e-9;

pub fn make_schedule(kind: ScheduleKind, horizon: f64) -> Result<Schedule> {
    if !(horizon >= 1.0) || !horizon.is_finite() {
        return Err(Error::param("T", format!("horizon must satisfy T >= 1, got {horizon}")));
    }
    match kind {
        ScheduleKind::Constant { h } => constant(h, horizon, kind),
        ScheduleKind::ExpThenConst { c, a, stop_delta } => exp_then_const(c, a, stop_delta, horizon, kind),
    }
}

fn constant(h: f64, horizon: f64, kind: ScheduleKind) -> Result<Schedule> {
    if !(h > 0.0 && h <= 1.0) {
        return Err(Error::param("h", format!("step must satisfy 0 < h <= 1, got {h}")));
    }
    let ratio = horizon / h;
    let full = (ratio + GRID_SLACK).floor() as usize;
    let exact = (ratio - full as f64).abs() <= GRID_SLACK;
    let n = if exact { full } else { full + 1 };
    let mut knots: Vec<f64> = (0..n).map(|k| k as f64 * h).collect();
    knots.push(horizon);
    let mut steps = vec![h; n];
    steps[n - 1] = horizon - knots[n - 1];
    Ok(Schedule {
        horizon,
        knots,
        steps,
        kind,
        counts: Counts { k0: n, k1: 0, n },
    })
}

fn exp_then_const(c: f64, a: f64, delta: f64, horizon: f64, kind: ScheduleKind) -> Result<Schedule> {
    if !(c > 0.0 && c <= 0.5) {
        return Err(Error::param("c", format!("must satisfy 0 < c <= 1/2, got {c}")));
    }
    if !(horizon >= 1.0 + 2.0 * c) {
        return Err(Error::param(
            "T",
            format!("exp_then_const needs T >= 1 + 2c = {}, got {horizon}", 1.0 + 2.0 * c),
        ));
    }
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::param("a", format!("must satisfy 0 <= a <= 1, got {a}")));
    }
    if a == 0.0 && !(delta > 0.0 && delta < 1.0) {
        return Err(Error::param(
            "a",
            "a = 0 requires an early-stopping offset 0 < stop_delta < 1",
        ));
    }

    let mut knots = vec![0.0];
    let mut steps = Vec::new();

    // Constant phase, landing on T - 1.
    let k0 = ((horizon - 1.0) / c).ceil() as usize;
    for k in 1..=k0 {
        if k < k0 {
            steps.push(c);
            knots.push(k as f64 * c);
        } else {
            steps.push((horizon - 1.0) - (k0 - 1) as f64 * c);
            knots.push(horizon - 1.0);
        }
    }

    // Geometric phase: remaining time (1 + c)^{-k}.
    let growth = (1.0 + c).ln();
    let k1 = if a > 0.0 {
        ((1.0 / a).ln() / growth).floor() as usize
    } else {
        // largest k with (1 + c)^{-k} > δ
        let raw = ((1.0 / delta).ln() / growth).ceil() as usize;
        let mut k = raw.saturating_sub(1);
        while (1.0 + c).powi(-((k + 1) as i32)) > delta {
            k += 1;
        }
        while k > 0 && (1.0 + c).powi(-(k as i32)) <= delta {
            k -= 1;
        }
        k
    };
    for k in 1..=k1 {
        let remaining = (1.0 + c).powi(-(k as i32));
        steps.push(c * remaining);
        knots.push(horizon - remaining);
    }
    let remaining = (1.0 + c).powi(-(k1 as i32));

    if a > 0.0 {
        let h = c * a;
        let ratio = remaining / h;
        let full = (ratio + GRID_SLACK).floor() as usize;
        let exact = (ratio - full as f64).abs() <= GRID_SLACK;
        let n3 = if exact { full } else { full + 1 };
        let start = horizon - remaining;
        for j in 1..n3 {
            steps.push(h);
            knots.push(start + j as f64 * h);
        }
        let last = *knots.last().expect("grid is nonempty");
        steps.push(horizon - last);
        knots.push(horizon);
    } else {
        steps.push(remaining);
        knots.push(horizon);
    }

    let n = steps.len();
    let sched = Schedule {
        horizon,
        knots,
        steps,
        kind,
        counts: Counts { k0, k1, n },
    };
    sched.validate()?;
    Ok(sched)
}

impl Schedule {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Forward time `T - t_k` at which the oracle is queried on step `k`.
    pub fn forward_time(&self, k: usize) -> f64 {
        self.horizon - self.knots[k]
    }

    pub fn last_step(&self) -> f64 {
        *self.steps.last().expect("schedule has at least one step")
    }

    /// Checks the grid invariants: positive steps, increasing knots ending at
    /// `T`, and `Σ h_k = T` within `1e-12`.
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() || self.knots.len() != self.steps.len() + 1 {
            return Err(Error::param("schedule", "knots and steps are inconsistent"));
        }
        if self.knots[0] != 0.0 || *self.knots.last().unwrap() != self.horizon {
            return Err(Error::param("schedule", "grid must start at 0 and end at T"));
        }
        if let Some(k) = self.steps.iter().position(|h| !(*h > 0.0)) {
            return Err(Error::param("schedule", format!("step {} is not positive", k + 1)));
        }
        if self.knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::param("schedule", "knots are not strictly increasing"));
        }
        let total: f64 = self.steps.iter().sum();
        if (total - self.horizon).abs() > 1e-12 * self.horizon.max(1.0) {
            return Err(Error::param(
                "schedule",
                format!("steps sum to {total}, horizon is {}", self.horizon),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_quarter_grid() {
        let s = make_schedule(ScheduleKind::Constant { h: 0.25 }, 1.0).unwrap();
        assert_eq!(s.knots, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(s.counts.n, 4);
        s.validate().unwrap();
    }

    #[test]
    fn constant_truncates_last_step() {
        let s = make_schedule(ScheduleKind::Constant { h: 0.3 }, 1.0).unwrap();
        assert_eq!(s.len(), 4);
        assert!((s.last_step() - 0.1).abs() < 1e-12);
        s.validate().unwrap();
    }

    #[test]
    fn exp_then_const_k0() {
        let s = make_schedule(
            ScheduleKind::ExpThenConst { c: 0.5, a: 0.1, stop_delta: 0.0 },
            5.0,
        )
        .unwrap();
        assert_eq!(s.counts.k0, 8);
        // ⌊ln 10 / ln 1.5⌋ = 5
        assert_eq!(s.counts.k1, 5);
        for k in 1..=s.counts.k1 {
            let expected = 0.5 * 1.5f64.powi(-(k as i32));
            assert_eq!(s.steps[s.counts.k0 + k - 1], expected);
        }
        s.validate().unwrap();
    }

    #[test]
    fn geometric_phase_follows_recursion() {
        let s = make_schedule(
            ScheduleKind::ExpThenConst { c: 0.2, a: 0.05, stop_delta: 0.0 },
            3.7,
        )
        .unwrap();
        let c = 0.2;
        for k in 1..=s.counts.k1 {
            let idx = s.counts.k0 + k;
            let prev = s.knots[idx - 1];
            let rec = c * (s.horizon - prev) / (1.0 + c);
            assert!((s.steps[idx - 1] - rec).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_floor_needs_delta() {
        let kind = ScheduleKind::ExpThenConst { c: 0.3, a: 0.0, stop_delta: 0.0 };
        assert!(make_schedule(kind, 2.0).is_err());
        let kind = ScheduleKind::ExpThenConst { c: 0.3, a: 0.0, stop_delta: 0.01 };
        let s = make_schedule(kind, 2.0).unwrap();
        assert!(s.last_step() > 0.01);
        assert!(s.last_step() <= 0.01 * 1.3 + 1e-15);
    }

    #[test]
    fn preconditions_are_named() {
        let err = make_schedule(ScheduleKind::Constant { h: 2.0 }, 4.0).unwrap_err();
        assert!(err.to_string().contains("`h`"));
        let err = make_schedule(ScheduleKind::ExpThenConst { c: 0.7, a: 0.1, stop_delta: 0.0 }, 4.0)
            .unwrap_err();
        assert!(err.to_string().contains("`c`"));
        let err = make_schedule(ScheduleKind::ExpThenConst { c: 0.5, a: 0.1, stop_delta: 0.0 }, 1.5)
            .unwrap_err();
        assert!(err.to_string().contains("`T`"));
        assert!(make_schedule(ScheduleKind::Constant { h: 0.1 }, 0.5).is_err());
    }
}
