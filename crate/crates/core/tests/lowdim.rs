use drlogit_core::lowdim::{estimate_lowdim, fit_alpha_glm, fit_gamma_mle, LowdimOptions};
use drlogit_core::math::{expit, mean, variance};
use drlogit_core::simulate::Dgp;
use drlogit_core::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
}

#[test]
fn null_outcome_gives_null_logistic_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 20_000;
    let x = normal_matrix(&mut rng, n, 2);
    let a: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random::<bool>())).collect();
    let fit = fit_gamma_mle(&Dataset::new(y, a, x, None).unwrap(), true).unwrap();
    // 4 standard errors of a coefficient at this n.
    let tol = 4.0 * 2.0 / (n as f64).sqrt();
    assert!(fit.beta_init.abs() < tol);
    assert!(fit.gamma.intercept.abs() < tol);
    assert!(fit.gamma.coef.amax() < tol);
}

#[test]
fn logistic_mle_recovers_generating_coefficients() {
    let n = 100_000;
    let dgp = Dgp::new(&DgpSpec::standard(n, 3)).unwrap();
    let data = dgp.sample(n, 5).unwrap();
    let fit = fit_gamma_mle(&data, true).unwrap();
    let (_, gamma0) = dgp.truth().gamma0().unwrap();
    assert!((fit.beta_init - dgp.truth().beta0).abs() < 0.03, "{}", fit.beta_init);
    for (j, g) in gamma0.iter().enumerate().take(3) {
        assert!((fit.gamma.coef[j] - g).abs() < 0.03, "gamma {j}: {}", fit.gamma.coef[j]);
    }
    assert!(fit.gradient_norm <= 1e-8);
}

#[test]
fn rank_deficient_covariates_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 200;
    let mut x = normal_matrix(&mut rng, n, 3);
    let c0 = x.column(0).into_owned();
    x.set_column(2, &(c0 * 2.0));
    let a: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let data = Dataset::new(y, a, x, None).unwrap();
    let err = fit_gamma_mle(&data, true).unwrap_err();
    assert!(err.to_string().contains("rank deficient"), "{err}");
    assert!(fit_alpha_glm(&data, LinkFunction::Identity, true).is_err());
}

#[test]
fn identity_link_is_least_squares_on_controls() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 500;
    let x = normal_matrix(&mut rng, n, 3);
    let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random::<bool>())).collect();
    let a: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.5 * x[(i, 0)] - x[(i, 2)] + rng.sample::<f64, _>(StandardNormal))
        .collect();
    let data = Dataset::new(y.clone(), a.clone(), x.clone(), None).unwrap();
    let fit = fit_alpha_glm(&data, LinkFunction::Identity, true).unwrap();

    let ctrl: Vec<usize> = (0..n).filter(|&i| y[i] == 0.0).collect();
    let z = DMatrix::from_fn(ctrl.len(), 4, |r, c| if c == 0 { 1.0 } else { x[(ctrl[r], c - 1)] });
    let ya = DVector::from_iterator(ctrl.len(), ctrl.iter().map(|&i| a[i]));
    let ls = (z.transpose() * &z).cholesky().unwrap().solve(&(z.transpose() * ya));
    assert!((fit.alpha.intercept - ls[0]).abs() < 1e-8);
    for j in 0..3 {
        assert!((fit.alpha.coef[j] - ls[j + 1]).abs() < 1e-8);
    }
}

#[test]
fn constant_exposure_gives_intercept_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 100;
    let x = normal_matrix(&mut rng, n, 2);
    let y: Vec<f64> = (0..n).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let data = Dataset::new(y, vec![2.5; n], x, None).unwrap();
    let fit = fit_alpha_glm(&data, LinkFunction::Identity, true).unwrap();
    assert!((fit.alpha.intercept - 2.5).abs() < 1e-10);
    assert!(fit.alpha.coef.amax() < 1e-10);
}

#[test]
fn expit_link_recovers_binary_exposure_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 60_000;
    let alpha0 = [0.8, -0.6];
    let x = normal_matrix(&mut rng, n, 2);
    let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random::<bool>())).collect();
    let a: Vec<f64> = (0..n)
        .map(|i| {
            let p = expit(-0.3 + alpha0[0] * x[(i, 0)] + alpha0[1] * x[(i, 1)]);
            f64::from(rng.random::<f64>() < p)
        })
        .collect();
    let fit = fit_alpha_glm(&Dataset::new(y, a, x, None).unwrap(), LinkFunction::LogisticExpit, true).unwrap();
    assert!((fit.alpha.intercept + 0.3).abs() < 0.05);
    assert!((fit.alpha.coef[0] - alpha0[0]).abs() < 0.05);
    assert!((fit.alpha.coef[1] - alpha0[1]).abs() < 0.05);
}

#[test]
fn efficiency_weighting_does_not_move_the_estimand() {
    let n = 1000;
    let dgp = Dgp::new(&DgpSpec::standard(n, 5)).unwrap();
    let opts = LowdimOptions::default();
    let diffs: Vec<f64> = (0..200)
        .map(|r| {
            let data = dgp.sample(n, 7_000 + r).unwrap();
            let none = estimate_lowdim(&data, LinkFunction::Identity, PhiKind::None, &opts).unwrap();
            let simp = estimate_lowdim(&data, LinkFunction::Identity, PhiKind::Simp, &opts).unwrap();
            simp.beta_hat - none.beta_hat
        })
        .collect();
    let se = (variance(&diffs) / diffs.len() as f64).sqrt();
    assert!(mean(&diffs).abs() < 3.0 * se, "mean difference {} (se {se})", mean(&diffs));
}

#[test]
fn report_carries_a_valid_interval() {
    let n = 800;
    let dgp = Dgp::new(&DgpSpec::standard(n, 5)).unwrap();
    let data = dgp.sample(n, 11).unwrap();
    let rep = estimate_lowdim(&data, LinkFunction::Identity, PhiKind::Opt, &LowdimOptions::default()).unwrap();
    assert!(rep.converged);
    assert!(rep.ci_lower < rep.beta_hat && rep.beta_hat < rep.ci_upper);
    assert!(rep.diagnostics.contains_key("beta_pilot"));
    assert!(rep.diagnostics.contains_key("se_nuisance_fixed"));
}
