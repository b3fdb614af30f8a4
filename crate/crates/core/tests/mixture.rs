use kou_sgm::info::info_summary;
use kou_sgm::mixture::MixtureSpec;
use kou_sgm::sampler::empirical_moments;
use kou_sgm::rng::{stream, Purpose};
use kou_sgm::verify::{pair_2d, symmetric_pair_1d};
use kou_sgm::{Component, GaussianMixture};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn mixture_strategy(dim: usize) -> impl Strategy<Value = GaussianMixture> {
    let comp = (
        0.1f64..1.0,
        prop::collection::vec(-2.0f64..2.0, dim),
        prop::collection::vec(-0.6f64..0.6, dim * dim),
        prop::collection::vec(0.2f64..1.5, dim),
    );
    prop::collection::vec(comp, 1..4).prop_map(move |raw| {
        let total: f64 = raw.iter().map(|c| c.0).sum();
        let comps = raw
            .into_iter()
            .map(|(w, m, b, diag)| {
                let b = DMatrix::from_vec(dim, dim, b);
                let cov = &b * b.transpose() + DMatrix::from_diagonal(&DVector::from_vec(diag));
                Component {
                    weight: w / total,
                    mean: DVector::from_vec(m),
                    cov,
                }
            })
            .collect();
        GaussianMixture::new(comps).unwrap()
    })
}

fn central_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, eps: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[i] += eps;
        lo[i] -= eps;
        (f(&hi) - f(&lo)) / (2.0 * eps)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn score_matches_finite_difference(mix in mixture_strategy(3), x in prop::collection::vec(-3.0f64..3.0, 3)) {
        let x = DVector::from_vec(x);
        let fd = central_gradient(|p| mix.log_density(p).unwrap(), &x, 1e-5);
        let score = mix.score(&x).unwrap();
        prop_assert!((&score - &fd).amax() <= 1e-6 * (1.0 + score.amax()), "score {score} fd {fd}");
    }

    #[test]
    fn hessian_matches_finite_difference(mix in mixture_strategy(2), x in prop::collection::vec(-3.0f64..3.0, 2)) {
        let x = DVector::from_vec(x);
        let hess = mix.hessian_log_density(&x).unwrap();
        for j in 0..2 {
            let fd = central_gradient(|p| mix.score(p).unwrap()[j], &x, 1e-5);
            for i in 0..2 {
                prop_assert!((hess[(j, i)] - fd[i]).abs() <= 1e-6 * (1.0 + hess.amax()));
            }
        }
        prop_assert!((&hess - hess.transpose()).amax() <= 1e-12 * (1.0 + hess.amax()));
    }

    #[test]
    fn relative_quantities_shift_by_identity(mix in mixture_strategy(2), x in prop::collection::vec(-3.0f64..3.0, 2)) {
        let x = DVector::from_vec(x);
        let rel = mix.relative_score(&x).unwrap();
        prop_assert!((rel - (mix.score(&x).unwrap() + &x)).amax() <= 1e-12 * (1.0 + x.amax()));
        let rh = mix.relative_hessian(&x).unwrap();
        let h = mix.hessian_log_density(&x).unwrap();
        prop_assert!((rh - h - DMatrix::identity(2, 2)).amax() <= 1e-12);
    }

    #[test]
    fn ou_pushforward_is_a_semigroup(mix in mixture_strategy(2), s in 0.0f64..2.0, t in 0.0f64..2.0) {
        let two_step = mix.ou_pushforward(s).unwrap().ou_pushforward(t).unwrap();
        let one_step = mix.ou_pushforward(s + t).unwrap();
        prop_assert!(two_step.max_component_diff(&one_step).unwrap() <= 1e-12);
    }

    #[test]
    fn kou_pushforward_is_a_semigroup(mix in mixture_strategy(2), s in 0.0f64..2.0, t in 0.0f64..2.0) {
        let init = mix.product_with_standard(2);
        let two_step = init.kou_pushforward(s).unwrap().kou_pushforward(t).unwrap();
        let one_step = init.kou_pushforward(s + t).unwrap();
        prop_assert!(two_step.max_component_diff(&one_step).unwrap() <= 1e-11);
    }

    #[test]
    fn json_roundtrip_is_bit_faithful(mix in mixture_strategy(3)) {
        let text = serde_json::to_string(&mix).unwrap();
        let back: GaussianMixture = serde_json::from_str(&text).unwrap();
        let a = MixtureSpec::from(mix);
        let b = MixtureSpec::from(back);
        for (ca, cb) in a.components.iter().zip(&b.components) {
            prop_assert_eq!(ca.weight.to_bits(), cb.weight.to_bits());
            for (x, y) in ca.mean.iter().zip(&cb.mean) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in ca.cov.iter().flatten().zip(cb.cov.iter().flatten()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

#[test]
fn score_vanishes_relative_to_standard() {
    let g = GaussianMixture::standard(4);
    let x = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.0]);
    assert!(g.relative_score(&x).unwrap().amax() < 1e-15);
    assert!(g.relative_hessian(&x).unwrap().amax() < 1e-15);
}

#[test]
fn invalid_mixtures_are_rejected() {
    let cov = DMatrix::identity(2, 2);
    let bad_weight = vec![Component {
        weight: 0.9,
        mean: DVector::zeros(2),
        cov: cov.clone(),
    }];
    assert!(GaussianMixture::new(bad_weight).is_err());
    let mut asym = cov.clone();
    asym[(0, 1)] = 0.5;
    let bad_cov = vec![Component {
        weight: 1.0,
        mean: DVector::zeros(2),
        cov: asym,
    }];
    assert!(GaussianMixture::new(bad_cov).is_err());
    let singular = vec![Component {
        weight: 1.0,
        mean: DVector::zeros(2),
        cov: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
    }];
    assert!(GaussianMixture::new(singular).is_err());
    assert!(GaussianMixture::new(vec![]).is_err());
    assert!(serde_json::from_str::<GaussianMixture>(r#"{"dim": 2, "components": [{"weight": 1.0, "mean": [0.0], "cov": [[1.0]]}]}"#).is_err());
}

/// Fine Euler-Maruyama for `dX = -X dt + √2 dB` from mixture samples.
fn euler_maruyama_ou(mix: &GaussianMixture, t: f64, steps: usize, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let dt = t / steps as f64;
    let amp = (2.0 * dt).sqrt();
    (0..n)
        .map(|i| {
            let mut rng = stream(seed, Purpose::Verify, i as u64);
            let mut x = mix.sample(&mut rng);
            for _ in 0..steps {
                for j in 0..x.len() {
                    let z: f64 = rng.sample(StandardNormal);
                    x[j] += -x[j] * dt + amp * z;
                }
            }
            x
        })
        .collect()
}

#[test]
fn ou_pushforward_matches_simulated_sde() {
    let mix = pair_2d();
    let t = 0.7;
    let n = 40_000;
    let pts = euler_maruyama_ou(&mix, t, 400, n, 11);
    let (m, c) = empirical_moments(&pts);
    let push = mix.ou_pushforward(t).unwrap();
    let (pm, pc) = (push.mean(), push.covariance());
    for i in 0..2 {
        let se = (pc[(i, i)] / n as f64).sqrt();
        // EM bias at dt = 1.75e-3 is O(dt), well under one SE here.
        assert!((m[i] - pm[i]).abs() < 4.0 * se, "mean {i}: {} vs {}", m[i], pm[i]);
        let var_se = pc[(i, i)] * (2.0 / n as f64).sqrt();
        assert!((c[(i, i)] - pc[(i, i)]).abs() < 4.0 * var_se + 2e-3, "var {i}: {} vs {}", c[(i, i)], pc[(i, i)]);
    }
}

#[test]
fn kou_pushforward_matches_simulated_sde() {
    // d(x, v) = (v, -x - 2v) dt + (0, 2 dB)
    let mix = symmetric_pair_1d().product_with_standard(1);
    let t = 1.0;
    let steps = 1000;
    let dt = t / steps as f64;
    let n = 40_000;
    let pts: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            let mut rng = stream(12, Purpose::Verify, i as u64);
            let s = mix.sample(&mut rng);
            let (mut x, mut v) = (s[0], s[1]);
            for _ in 0..steps {
                let z: f64 = rng.sample(StandardNormal);
                let nx = x + v * dt;
                let nv = v + (-x - 2.0 * v) * dt + 2.0 * dt.sqrt() * z;
                x = nx;
                v = nv;
            }
            DVector::from_vec(vec![x, v])
        })
        .collect();
    let (m, c) = empirical_moments(&pts);
    let push = mix.kou_pushforward(t).unwrap();
    let (pm, pc) = (push.mean(), push.covariance());
    for i in 0..2 {
        let se = (pc[(i, i)] / n as f64).sqrt();
        assert!((m[i] - pm[i]).abs() < 4.0 * se + 1e-3);
        for j in 0..2 {
            let se_c = ((pc[(i, i)] * pc[(j, j)] + pc[(i, j)].powi(2)) / n as f64).sqrt();
            assert!((c[(i, j)] - pc[(i, j)]).abs() < 4.0 * se_c + 5e-3, "cov ({i},{j}): {} vs {}", c[(i, j)], pc[(i, j)]);
        }
    }
}

#[test]
fn log_sobolev_holds_on_testbeds() {
    for mix in [pair_2d(), symmetric_pair_1d(), GaussianMixture::standard(3)] {
        let s = info_summary(&mix).unwrap();
        assert!(s.log_sobolev_slack() >= -1e-12, "slack {}", s.log_sobolev_slack());
        assert!(s.kl_rel_gauss >= 0.0 && s.fisher_rel_gauss >= 0.0);
    }
}

#[test]
fn second_moment_matches_sampling() {
    let mix = pair_2d();
    let mut rng = stream(5, Purpose::Verify, 0);
    let n = 200_000;
    let mut acc = 0.0;
    let mut acc2 = 0.0;
    for _ in 0..n {
        let x = mix.sample(&mut rng);
        let q = x.norm_squared();
        acc += q;
        acc2 += q * q;
    }
    let mean = acc / n as f64;
    let se = ((acc2 / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - mix.second_moment()).abs() < 4.0 * se);
}
