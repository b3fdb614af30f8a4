//! Exact transition laws of the OU and kinetic OU forward processes.
//!
//! OU: `dX = -X dt + √2 dB`, so `X_t | X_0 ~ N(e^{-t} X_0, (1 - e^{-2t}) I)`.
//!
//! Kinetic OU on `u = (x, v)`: `dx = v dt`, `dv = -(x + 2v) dt + 2 dB`. With
//! `A = [[0, I], [-I, 2I]]` the forward drift is `-Aᵀ u`, so for column
//! vectors `u_t | u_0 ~ N(e^{-Aᵀt} u_0, Σ_t)`. Because `(A - I)² = 0`,
//!
//! ```text
//! e^{-At}  = e^{-t} (I - t (A - I))   = e^{-t} [[1+t, -t], [ t, 1-t]] ⊗ I
//! e^{-Aᵀt} = e^{-t} (I - t (Aᵀ - I))  = e^{-t} [[1+t,  t], [-t, 1-t]] ⊗ I
//! ```
//!
//! and the noise covariance `Σ_t = ∫_0^t e^{-Aᵀr} diag(0, 4I) e^{-Ar} dr`
//! integrates in closed form. Writing `φ(r) = e^{-r}(r, 1 - r)` for the second
//! column of `e^{-Aᵀr}`, the integrand is `4 φ φᵀ` and
//!
//! ```text
//! Σ_xx = 1 - e^{-2t}(1 + 2t + 2t²)
//! Σ_xv = 2t² e^{-2t}
//! Σ_vv = 1 - e^{-2t}(1 - 2t + 2t²)
//! ```
//!
//! each times `I_d`. `Σ_xx` vanishes like `4t³/3`, so it switches to its
//! Taylor series below `t = 0.5`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{self, one_minus_exp_neg};

const SERIES_CUTOFF: f64 = 0.5;
const SERIES_TERMS: usize = 40;

/// Conditional law `y | x ~ N(map·x + offset, noise_cov)` over a time gap.
#[derive(Debug, Clone)]
pub struct AffineGaussianKernel {
    pub map: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub noise_cov: DMatrix<f64>,
    pub gap: f64,
    noise_chol: DMatrix<f64>,
}

impl AffineGaussianKernel {
    pub fn new(map: DMatrix<f64>, offset: DVector<f64>, noise_cov: DMatrix<f64>, gap: f64) -> Result<Self> {
        let n = map.nrows();
        if map.ncols() != n || offset.len() != n || noise_cov.nrows() != n || noise_cov.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: noise_cov.nrows(),
            });
        }
        if !(gap >= 0.0) {
            return Err(Error::param("gap", format!("must be >= 0, got {gap}")));
        }
        if linalg::max_asymmetry(&noise_cov) > 1e-12 {
            return Err(Error::NotPositiveDefinite("kernel noise covariance is not symmetric".into()));
        }
        let noise_chol = if noise_cov.iter().all(|v| *v == 0.0) {
            DMatrix::zeros(n, n)
        } else {
            linalg::cholesky_lower(&noise_cov, "kernel noise covariance")?
        };
        Ok(Self {
            map,
            offset,
            noise_cov,
            gap,
            noise_chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.map.nrows()
    }

    /// Kernel over `self.gap + later.gap`: first `self`, then `later`.
    pub fn then(&self, later: &Self) -> Result<Self> {
        let mut noise = &later.map * &self.noise_cov * later.map.transpose() + &later.noise_cov;
        linalg::symmetrize(&mut noise);
        Self::new(
            &later.map * &self.map,
            &later.map * &self.offset + &later.offset,
            noise,
            self.gap + later.gap,
        )
    }

    /// Pushes a Gaussian `(mean, cov)` through the kernel.
    pub fn push_moments(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let mut c = &self.map * cov * self.map.transpose() + &self.noise_cov;
        linalg::symmetrize(&mut c);
        (&self.map * mean + &self.offset, c)
    }

    /// `map·x0 + offset + chol(noise_cov)·ξ`.
    pub fn sample_transition<R: Rng + ?Sized>(&self, x0: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        if x0.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x0.len(),
            });
        }
        if self.gap == 0.0 {
            return Ok(x0.clone());
        }
        let xi = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok(&self.map * x0 + &self.offset + &self.noise_chol * xi)
    }
}

/// Plain-text layout: a header line `kernel gap=<gap> dim=<n>`, then the
/// sections `map:`, `offset:` and `noise_cov:`, each row on its own line with
/// entries in `{:+.12e}` separated by single spaces.
impl fmt::Display for AffineGaussianKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn row(f: &mut fmt::Formatter<'_>, vals: impl Iterator<Item = f64>) -> fmt::Result {
            let cells: Vec<String> = vals.map(|v| format!("{v:+.12e}")).collect();
            writeln!(f, "  {}", cells.join(" "))
        }
        writeln!(f, "kernel gap={} dim={}", self.gap, self.dim())?;
        writeln!(f, "map:")?;
        for r in 0..self.dim() {
            row(f, self.map.row(r).iter().cloned())?;
        }
        writeln!(f, "offset:")?;
        row(f, self.offset.iter().cloned())?;
        writeln!(f, "noise_cov:")?;
        for r in 0..self.dim() {
            row(f, self.noise_cov.row(r).iter().cloned())?;
        }
        Ok(())
    }
}

/// OU kernel: `map = e^{-t} I`, `noise_cov = (1 - e^{-2t}) I`.
pub fn ou_kernel(t: f64, d: usize) -> Result<AffineGaussianKernel> {
    if !(t >= 0.0) {
        return Err(Error::param("t", format!("must be >= 0, got {t}")));
    }
    let map = DMatrix::identity(d, d) * (-t).exp();
    let noise = DMatrix::identity(d, d) * one_minus_exp_neg(2.0 * t);
    AffineGaussianKernel::new(map, DVector::zeros(d), noise, t)
}

/// Kinetic OU kernel over gap `t` on `R^{2d}`.
pub fn kou_kernel(t: f64, d: usize) -> Result<AffineGaussianKernel> {
    if !(t >= 0.0) {
        return Err(Error::param("t", format!("must be >= 0, got {t}")));
    }
    AffineGaussianKernel::new(kou_transition_map(t, d), DVector::zeros(2 * d), kou_cov(t, d), t)
}

/// Expands a 2×2 block pattern `[[a, b], [c, e]]` into `[[aI, bI], [cI, eI]]`.
pub(crate) fn kron_blocks(block: [[f64; 2]; 2], d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        m[(i, i)] = block[0][0];
        m[(i, d + i)] = block[0][1];
        m[(d + i, i)] = block[1][0];
        m[(d + i, d + i)] = block[1][1];
    }
    m
}

/// `A = [[0, I], [-I, 2I]]`.
pub fn kou_generator(d: usize) -> DMatrix<f64> {
    kron_blocks([[0.0, 1.0], [-1.0, 2.0]], d)
}

/// `e^{-At} = e^{-t}(I - t(A - I))`.
pub fn kou_expm(t: f64, d: usize) -> DMatrix<f64> {
    let e = (-t).exp();
    kron_blocks([[e * (1.0 + t), -e * t], [e * t, e * (1.0 - t)]], d)
}

/// Column-vector transition map `e^{-Aᵀt}` of the kinetic OU process.
pub fn kou_transition_map(t: f64, d: usize) -> DMatrix<f64> {
    kou_expm(t, d).transpose()
}

fn series(t: f64, start: usize, coeff: impl Fn(usize) -> f64) -> f64 {
    let mut acc = 0.0;
    let mut pow = t.powi(start as i32);
    for n in start..start + SERIES_TERMS {
        acc += coeff(n) * pow;
        pow *= t;
    }
    acc
}

/// `(-2)^n / n!`, zero for negative `n`.
fn neg2_pow_over_fact(n: isize) -> f64 {
    if n < 0 {
        return 0.0;
    }
    let mut v = 1.0;
    for k in 1..=n {
        v *= -2.0 / k as f64;
    }
    v
}

/// `1 - e^{-2t}(1 + 2t + 2t²)`.
pub(crate) fn kou_sigma_xx(t: f64) -> f64 {
    if t < SERIES_CUTOFF {
        series(t, 3, |n| {
            let n = n as isize;
            -(neg2_pow_over_fact(n) + 2.0 * neg2_pow_over_fact(n - 1) + 2.0 * neg2_pow_over_fact(n - 2))
        })
    } else {
        1.0 - (-2.0 * t).exp() * (1.0 + 2.0 * t + 2.0 * t * t)
    }
}

/// `1 - e^{-2t}(1 - 2t + 2t²)`.
pub(crate) fn kou_sigma_vv(t: f64) -> f64 {
    one_minus_exp_neg(2.0 * t) + (-2.0 * t).exp() * (2.0 * t - 2.0 * t * t)
}

pub(crate) fn kou_sigma_xv(t: f64) -> f64 {
    2.0 * t * t * (-2.0 * t).exp()
}

/// Closed-form noise covariance of the kinetic OU kernel over gap `t`.
pub fn kou_cov(t: f64, d: usize) -> DMatrix<f64> {
    if t == 0.0 {
        return DMatrix::zeros(2 * d, 2 * d);
    }
    let xv = kou_sigma_xv(t);
    kron_blocks([[kou_sigma_xx(t), xv], [xv, kou_sigma_vv(t)]], d)
}

/// `1 - e^{-h}(1 + h)`.
fn one_minus_exp_times_1p(h: f64) -> f64 {
    if h < SERIES_CUTOFF {
        series(h, 2, |n| {
            let mut inv_fact = 1.0;
            for k in 1..=n {
                inv_fact /= k as f64;
            }
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            // -[(-1)^n/n! + (-1)^{n-1}/(n-1)!] = (-1)^n (n - 1)/n!
            sign * (n as f64 - 1.0) * inv_fact
        })
    } else {
        1.0 - (-h).exp() * (1.0 + h)
    }
}

/// Exact one-step propagator of the backward kinetic dynamics
/// `d(x, v) = A_b (x, v) dt + (0, s) dt + (0, 2) dB`, `A_b = [[0, -I], [I, -2I]]`,
/// over `[0, h]` with `s` frozen.
#[derive(Debug, Clone)]
pub struct KineticStep {
    /// `e^{A_b h} = e^{-h}(I + h(A_b + I))`, 2d×2d.
    pub transition: DMatrix<f64>,
    /// `∫_0^h e^{A_b(h-r)} dr · [0; I]`, 2d×d.
    pub forcing: DMatrix<f64>,
    /// `∫_0^h e^{A_b r} diag(0, 4I) e^{A_bᵀ r} dr`.
    pub noise_cov: DMatrix<f64>,
    pub noise_chol: DMatrix<f64>,
}

/// `A_b = [[0, -I], [I, -2I]]`.
pub fn kou_backward_generator(d: usize) -> DMatrix<f64> {
    kron_blocks([[0.0, -1.0], [1.0, -2.0]], d)
}

pub fn kou_backward_expm(h: f64, d: usize) -> DMatrix<f64> {
    let e = (-h).exp();
    kron_blocks([[e * (1.0 + h), -e * h], [e * h, e * (1.0 - h)]], d)
}

impl KineticStep {
    pub fn new(h: f64, d: usize) -> Result<Self> {
        if !(h >= 0.0) {
            return Err(Error::param("h", format!("must be >= 0, got {h}")));
        }
        let e = (-h).exp();
        let mut forcing = DMatrix::zeros(2 * d, d);
        let fx = -one_minus_exp_times_1p(h);
        let fv = h * e;
        for i in 0..d {
            forcing[(i, i)] = fx;
            forcing[(d + i, i)] = fv;
        }
        // Same integral as the forward covariance with the cross term negated.
        let noise_cov = if h == 0.0 {
            DMatrix::zeros(2 * d, 2 * d)
        } else {
            let xv = -kou_sigma_xv(h);
            kron_blocks([[kou_sigma_xx(h), xv], [xv, kou_sigma_vv(h)]], d)
        };
        let noise_chol = if h == 0.0 {
            DMatrix::zeros(2 * d, 2 * d)
        } else {
            linalg::cholesky_lower(&noise_cov, "kinetic step noise")?
        };
        Ok(Self {
            transition: kou_backward_expm(h, d),
            forcing,
            noise_cov,
            noise_chol,
        })
    }
}
