//! Gauss rules via Golub-Welsch, composite Gauss-Legendre and Simpson.

use nalgebra::DMatrix;

/// Nodes and weights of a one-dimensional quadrature rule.
#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn golub_welsch(off_diag: &[f64], total_mass: f64) -> Rule {
    let n = off_diag.len() + 1;
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for (k, &b) in off_diag.iter().enumerate() {
        jac[(k, k + 1)] = b;
        jac[(k + 1, k)] = b;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], total_mass * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Rule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

/// Gauss-Hermite rule for the standard normal weight: `Σ w_i f(x_i) ≈ E f(Z)`.
pub fn gauss_hermite(n: usize) -> Rule {
    assert!(n >= 1);
    let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    golub_welsch(&off, 1.0)
}

/// Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Rule {
    assert!(n >= 1);
    let off: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&off, 2.0)
}

/// Composite Gauss-Legendre over `[a, b]` split into `panels` equal panels.
pub fn composite_gauss_legendre<F>(rule: &Rule, a: f64, b: f64, panels: usize, mut f: F) -> f64
where
    F: FnMut(f64) -> f64,
{
    let width = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + width * p as f64;
        let mid = lo + 0.5 * width;
        let mut acc = 0.0;
        for (x, w) in rule.nodes.iter().zip(&rule.weights) {
            acc += w * f(mid + 0.5 * width * x);
        }
        total += 0.5 * width * acc;
    }
    total
}

/// Composite Simpson rule on equally spaced samples (odd count, at least 3).
pub fn simpson(values: &[f64], a: f64, b: f64) -> f64 {
    let n = values.len();
    assert!(n >= 3 && n % 2 == 1, "simpson needs an odd number of samples >= 3");
    let h = (b - a) / (n - 1) as f64;
    let mut acc = values[0] + values[n - 1];
    for (i, v) in values.iter().enumerate().take(n - 1).skip(1) {
        acc += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    acc * h / 3.0
}

/// Trapezoid rule on arbitrary abscissae.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_moments() {
        let r = gauss_hermite(20);
        let m = |p: i32| -> f64 {
            r.nodes
                .iter()
                .zip(&r.weights)
                .map(|(x, w)| w * x.powi(p))
                .sum()
        };
        assert!((m(0) - 1.0).abs() < 1e-13);
        assert!(m(1).abs() < 1e-13);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
        assert!((m(6) - 15.0).abs() < 1e-10);
    }

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        let r = gauss_legendre(5);
        let v = composite_gauss_legendre(&r, 0.0, 2.0, 1, |x| x.powi(9));
        assert!((v - 2f64.powi(10) / 10.0).abs() < 1e-10);
        let e = composite_gauss_legendre(&r, 0.0, 1.0, 8, f64::exp);
        assert!((e - (1f64.exp() - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn simpson_is_exact_on_cubics() {
        let xs: Vec<f64> = (0..5).map(|i| i as f64 * 0.25).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * x * x - x).collect();
        assert!((simpson(&ys, 0.0, 1.0) - (0.25 - 0.5)).abs() < 1e-15);
    }
}
