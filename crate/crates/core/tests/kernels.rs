use kou_sgm::kernels::{
    kou_backward_expm, kou_backward_generator, kou_cov, kou_expm, kou_generator, kou_kernel, kou_transition_map,
    ou_kernel, KineticStep,
};
use kou_sgm::linalg::frobenius_diff;
use kou_sgm::quadrature::{composite_gauss_legendre, gauss_legendre};
use kou_sgm::rng::{stream, Purpose};
use kou_sgm::sampler::empirical_moments;
use kou_sgm::verify::kou_cov_by_quadrature;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn closed_form_expm_matches_pade(t in 0.0f64..6.0, d in 1usize..4) {
        let numeric = (-kou_generator(d) * t).exp();
        prop_assert!(frobenius_diff(&kou_expm(t, d), &numeric) <= 1e-12);
        prop_assert!(frobenius_diff(&kou_transition_map(t, d), &numeric.transpose()) <= 1e-12);
        let back = (kou_backward_generator(d) * t).exp();
        prop_assert!(frobenius_diff(&kou_backward_expm(t, d), &back) <= 1e-12);
    }

    #[test]
    fn chapman_kolmogorov(s in 0.0f64..3.0, t in 0.0f64..3.0, d in 1usize..3) {
        let composed = kou_kernel(s, d).unwrap().then(&kou_kernel(t, d).unwrap()).unwrap();
        let direct = kou_kernel(s + t, d).unwrap();
        prop_assert!(frobenius_diff(&composed.map, &direct.map) <= 1e-11);
        prop_assert!(frobenius_diff(&composed.noise_cov, &direct.noise_cov) <= 1e-11);
        let ou = ou_kernel(s, d).unwrap().then(&ou_kernel(t, d).unwrap()).unwrap();
        let ou_direct = ou_kernel(s + t, d).unwrap();
        prop_assert!(frobenius_diff(&ou.map, &ou_direct.map) <= 1e-12);
        prop_assert!(frobenius_diff(&ou.noise_cov, &ou_direct.noise_cov) <= 1e-12);
    }

    #[test]
    fn covariance_is_stationary_fixed_point(t in 0.0f64..4.0) {
        // γ^{2d} is invariant: M I Mᵀ + Σ_t = I.
        let d = 2;
        let m = kou_transition_map(t, d);
        let pushed = &m * m.transpose() + kou_cov(t, d);
        prop_assert!(frobenius_diff(&pushed, &DMatrix::identity(2 * d, 2 * d)) <= 1e-12);
    }
}

#[test]
fn kou_cov_matches_quadrature() {
    for d in [1, 2] {
        for t in [1e-3, 0.05, 0.1, 0.49, 0.5, 1.0, 3.0] {
            let err = frobenius_diff(&kou_cov(t, d), &kou_cov_by_quadrature(t, d));
            assert!(err <= 1e-10, "t = {t}: {err:e}");
        }
        let stat = frobenius_diff(&kou_cov(30.0, d), &DMatrix::identity(2 * d, 2 * d));
        assert!(stat <= 1e-12);
    }
}

#[test]
fn small_time_position_variance_is_cubic() {
    for t in [1e-4, 1e-3, 1e-2] {
        let sxx = kou_cov(t, 1)[(0, 0)];
        let lead = 4.0 * t.powi(3) / 3.0;
        assert!((sxx / lead - 1.0).abs() < 2.0 * t, "t = {t}: {sxx:e}");
    }
}

#[test]
fn ou_kernel_closed_form() {
    let k = ou_kernel(0.4, 3).unwrap();
    let e = (-0.4f64).exp();
    assert!(frobenius_diff(&k.map, &(DMatrix::identity(3, 3) * e)) < 1e-15);
    assert!(frobenius_diff(&k.noise_cov, &(DMatrix::identity(3, 3) * (1.0 - e * e))) < 1e-15);
    assert!(k.offset.amax() == 0.0);
}

/// `∫_0^h e^{A_b r} diag(0, 4I) e^{A_bᵀ r} dr` and `∫_0^h e^{A_b r} dr · [0; I]`
/// by quadrature on the Padé exponential.
fn backward_step_by_quadrature(h: f64, d: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let ab = kou_backward_generator(d);
    let rule = gauss_legendre(20);
    let mut noise = DMatrix::zeros(2 * d, 2 * d);
    let mut forcing = DMatrix::zeros(2 * d, d);
    for i in 0..2 * d {
        for j in 0..2 * d {
            noise[(i, j)] = composite_gauss_legendre(&rule, 0.0, h, 8, |r| {
                let e = (&ab * r).exp();
                let mut acc = 0.0;
                for k in 0..d {
                    acc += 4.0 * e[(i, d + k)] * e[(j, d + k)];
                }
                acc
            });
        }
        for j in 0..d {
            forcing[(i, j)] = composite_gauss_legendre(&rule, 0.0, h, 8, |r| (&ab * r).exp()[(i, d + j)]);
        }
    }
    (noise, forcing)
}

#[test]
fn kinetic_step_matches_quadrature() {
    for d in [1, 2] {
        for h in [0.01, 0.2, 0.7, 2.0] {
            let step = KineticStep::new(h, d).unwrap();
            let (noise, forcing) = backward_step_by_quadrature(h, d);
            assert!(frobenius_diff(&step.transition, &(kou_backward_generator(d) * h).exp()) <= 1e-12);
            assert!(frobenius_diff(&step.noise_cov, &noise) <= 1e-11, "noise h = {h}");
            assert!(frobenius_diff(&step.forcing, &forcing) <= 1e-11, "forcing h = {h}");
            let l = &step.noise_chol;
            assert!(frobenius_diff(&(l * l.transpose()), &step.noise_cov) <= 1e-12);
        }
    }
}

#[test]
fn sampled_transition_matches_kernel_moments() {
    let d = 1;
    let k = kou_kernel(0.3, d).unwrap();
    let x0 = DVector::from_vec(vec![1.5, -0.5]);
    let mut rng = stream(4, Purpose::Verify, 0);
    let n = 100_000;
    let pts: Vec<DVector<f64>> = (0..n).map(|_| k.sample_transition(&x0, &mut rng).unwrap()).collect();
    let (m, c) = empirical_moments(&pts);
    let mean = &k.map * &x0 + &k.offset;
    for i in 0..2 {
        let se = (k.noise_cov[(i, i)] / n as f64).sqrt();
        assert!((m[i] - mean[i]).abs() < 4.0 * se);
        for j in 0..2 {
            let s = &k.noise_cov;
            let se_c = ((s[(i, i)] * s[(j, j)] + s[(i, j)].powi(2)) / n as f64).sqrt();
            assert!((c[(i, j)] - s[(i, j)]).abs() < 4.0 * se_c);
        }
    }
}

#[test]
fn negative_times_are_rejected() {
    assert!(ou_kernel(-0.1, 2).is_err());
    assert!(kou_kernel(-0.1, 2).is_err());
    assert!(KineticStep::new(-1.0, 1).is_err());
}
