use drlogit_core::hd_sparse::*;
use drlogit_core::lowdim::fit_gamma_mle;
use drlogit_core::math::expit;
use drlogit_core::simulate::Dgp;
use drlogit_core::*;
use nalgebra::{DMatrix, DVector};

fn draw(n: usize, p: usize, seed: u64) -> Dataset {
    Dgp::new(&DgpSpec::standard(n, p)).unwrap().sample(n, seed).unwrap()
}

fn sd(x: &DMatrix<f64>, j: usize) -> f64 {
    let n = x.nrows() as f64;
    let m = x.column(j).sum() / n;
    (x.column(j).iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn plain() -> HdConfig {
    HdConfig {
        intercept: false,
        standardize: false,
        ..HdConfig::default()
    }
}

#[test]
fn huge_initial_penalty_leaves_univariate_logistic() {
    let data = draw(300, 20, 1);
    let fit = fit_gamma_initial(&data, Lambda::Value(1e6), &HdConfig::default()).unwrap();
    assert_eq!(fit.gamma_tilde.s_hat(), 0);
    let only_a = Dataset::new(data.y().to_vec(), data.a().to_vec(), DMatrix::zeros(300, 0), None).unwrap();
    let uni = fit_gamma_mle(&only_a, true).unwrap();
    assert!((fit.beta_tilde - uni.beta_init).abs() < 1e-6);
    assert!((fit.gamma_tilde.intercept - uni.gamma.intercept).abs() < 1e-6);
}

#[test]
fn vanishing_initial_penalty_matches_mle() {
    let data = draw(2000, 2, 2);
    let fit = fit_gamma_initial(&data, Lambda::Value(1e-10), &HdConfig::default()).unwrap();
    let mle = fit_gamma_mle(&data, true).unwrap();
    assert!((fit.beta_tilde - mle.beta_init).abs() < 1e-4);
    assert!((fit.gamma_tilde.intercept - mle.gamma.intercept).abs() < 1e-4);
    for j in 0..2 {
        assert!((fit.gamma_tilde.get(j) - mle.gamma.coef[j]).abs() < 1e-4);
    }
}

#[test]
fn initial_fit_satisfies_kkt() {
    let data = draw(200, 60, 3);
    let cfg = HdConfig::default();
    let fit = fit_gamma_initial(&data, Lambda::Auto, &cfg).unwrap();
    let (n, x) = (data.n(), data.x());
    let eta: Vec<f64> = (0..n)
        .map(|i| fit.gamma_tilde.eval_row(&data.x_row(i)) + fit.beta_tilde * data.a()[i])
        .collect();
    let resid: Vec<f64> = (0..n).map(|i| expit(eta[i]) - data.y()[i]).collect();
    let grad = |col: &dyn Fn(usize) -> f64| (0..n).map(|i| resid[i] * col(i)).sum::<f64>() / n as f64;
    assert!(grad(&|_| 1.0).abs() < 1e-6);
    assert!(grad(&|i| data.a()[i]).abs() < 1e-6);
    for j in 0..data.p() {
        let g = grad(&|i| x[(i, j)]);
        let bound = fit.lambda * sd(x, j);
        let c = fit.gamma_tilde.get(j);
        if c == 0.0 {
            assert!(g.abs() <= bound + 1e-6, "column {j}: {g} > {bound}");
        } else {
            assert!((g + bound * c.signum()).abs() < 1e-6, "column {j}: {g} vs {bound}");
        }
    }
}

#[test]
fn dantzig_returns_zero_above_the_critical_level() {
    let data = draw(300, 10, 4);
    let gt = SparseCoef::from_dense(0.0, &[0.2; 10]).unwrap();
    let n = data.n() as f64;
    let crit = (0..data.p())
        .map(|j| {
            (0..data.n())
                .map(|i| (1.0 - data.y()[i]) * gt.eval_row(&data.x_row(i)).exp() * data.a()[i] * data.x()[(i, j)])
                .sum::<f64>()
                .abs()
                / n
        })
        .fold(0.0, f64::max);
    let fit = fit_alpha_dantzig(&data, &gt, LinkFunction::Identity, Lambda::Value(crit * 1.0001), None, &plain()).unwrap();
    assert_eq!(fit.alpha.s_hat(), 0);
    assert_eq!(fit.alpha.intercept, 0.0);
}

#[test]
fn dantzig_with_vanishing_penalty_is_weighted_least_squares() {
    let data = draw(1500, 3, 5);
    let gt = SparseCoef::from_dense(0.1, &[0.3, -0.2, 0.1]).unwrap();
    let fit = fit_alpha_dantzig(&data, &gt, LinkFunction::Identity, Lambda::Value(1e-11), None, &HdConfig::default()).unwrap();

    let ctrl: Vec<usize> = (0..data.n()).filter(|&i| data.y()[i] == 0.0).collect();
    let z = DMatrix::from_fn(ctrl.len(), 4, |r, c| if c == 0 { 1.0 } else { data.x()[(ctrl[r], c - 1)] });
    let w = DVector::from_iterator(ctrl.len(), ctrl.iter().map(|&i| gt.eval_row(&data.x_row(i)).exp()));
    let a = DVector::from_iterator(ctrl.len(), ctrl.iter().map(|&i| data.a()[i]));
    let zw = DMatrix::from_fn(z.nrows(), 4, |r, c| z[(r, c)] * w[r]);
    let wls = (zw.transpose() * &z).cholesky().unwrap().solve(&(zw.transpose() * a));
    assert!((fit.alpha.intercept - wls[0]).abs() < 1e-6);
    for j in 0..3 {
        assert!((fit.alpha.get(j) - wls[j + 1]).abs() < 1e-6, "{j}: {} vs {}", fit.alpha.get(j), wls[j + 1]);
    }
}

#[test]
fn fits_are_feasible_on_random_instances() {
    let link = LinkFunction::Identity;
    for s in 0..4 {
        let data = draw(150, 300, 60 + s);
        let cfg = HdConfig::default();
        let init = fit_gamma_initial(&data, Lambda::Auto, &cfg).unwrap();
        let w: Vec<f64> = (0..data.n()).map(|i| 0.5 + (i % 7) as f64 / 7.0).collect();
        let weights = (s % 2 == 1).then_some(w.as_slice());
        let dz = fit_alpha_dantzig(&data, &init.gamma_tilde, link, Lambda::Auto, weights, &cfg).unwrap();
        let joint =
            fit_gamma_beta_joint(&data, &dz.alpha, link, Lambda::Auto, init.beta_tilde, &cfg, weights).unwrap();
        let f = check_feasibility(
            &data,
            &init.gamma_tilde,
            &dz.alpha,
            &joint.gamma_hat,
            joint.beta_hat,
            link,
            dz.lambda,
            joint.lambda,
            weights,
            &cfg,
        );
        assert!(f.alpha_slack <= FEASIBILITY_SLACK, "alpha slack {}", f.alpha_slack);
        assert!(f.gamma_slack <= FEASIBILITY_SLACK, "gamma slack {}", f.gamma_slack);
        assert!(f.equation_residual.abs() < 1e-8, "equation {}", f.equation_residual);
    }
}

#[test]
fn huge_gamma_penalty_reduces_to_one_equation() {
    let data = draw(400, 30, 7);
    let cfg = plain();
    let alpha = SparseCoef::from_dense(0.0, &{
        let mut v = vec![0.0; 30];
        v[0] = 0.4;
        v
    })
    .unwrap();
    let joint = fit_gamma_beta_joint(&data, &alpha, LinkFunction::Identity, Lambda::Value(1e6), 0.0, &cfg, None).unwrap();
    assert_eq!(joint.gamma_hat.s_hat(), 0);
    let m = alpha.eval_all(data.x());
    let preds = NuisancePredictions::new(vec![0.0; data.n()], m).unwrap();
    let direct = solve_beta(&data, &preds, &BracketConfig::default()).unwrap();
    assert!((joint.beta_hat - direct.beta_hat).abs() < 1e-9);
}

#[test]
fn joint_fit_matches_brute_force_in_one_dimension() {
    let data = draw(300, 1, 8);
    let cfg = plain();
    let alpha = SparseCoef::from_dense(0.0, &[0.5]).unwrap();
    let joint = fit_gamma_beta_joint(&data, &alpha, LinkFunction::Identity, Lambda::Value(1e-9), 0.0, &cfg, None).unwrap();

    let (y, a, x) = (data.y(), data.a(), data.x());
    let n = data.n() as f64;
    let resid = |b: f64, g: f64| -> f64 {
        let (mut mom, mut eq) = (0.0, 0.0);
        for i in 0..data.n() {
            let lead = y[i] * (-b * a[i]).exp() - (1.0 - y[i]) * (g * x[(i, 0)]).exp();
            mom += lead * x[(i, 0)];
            eq += lead * (a[i] - 0.5 * x[(i, 0)]);
        }
        (mom / n).abs().max((eq / n).abs())
    };
    let search = |lo: (f64, f64), step: f64, k: usize| {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for u in 0..=k {
            for v in 0..=k {
                let (b, g) = (lo.0 + u as f64 * step, lo.1 + v as f64 * step);
                let r = resid(b, g);
                if r < best.0 {
                    best = (r, b, g);
                }
            }
        }
        best
    };
    let coarse = search((-2.0, -2.0), 0.02, 200);
    let fine = search((coarse.1 - 0.03, coarse.2 - 0.03), 0.0005, 120);
    assert!((joint.beta_hat - fine.1).abs() < 1e-3, "{} vs {}", joint.beta_hat, fine.1);
    assert!((joint.gamma_hat.get(0) - fine.2).abs() < 1e-3, "{} vs {}", joint.gamma_hat.get(0), fine.2);
}

#[test]
fn joint_fit_reports_the_last_iterate_when_it_runs_out_of_sweeps() {
    let data = draw(200, 50, 9);
    let cfg = HdConfig {
        max_outer: 1,
        ..HdConfig::default()
    };
    let init = fit_gamma_initial(&data, Lambda::Auto, &cfg).unwrap();
    let dz = fit_alpha_dantzig(&data, &init.gamma_tilde, LinkFunction::Identity, Lambda::Auto, None, &cfg).unwrap();
    match fit_gamma_beta_joint(&data, &dz.alpha, LinkFunction::Identity, Lambda::Auto, init.beta_tilde, &cfg, None) {
        Err(Error::JointNotConverged { sweeps, beta, .. }) => {
            assert_eq!(sweeps, 1);
            assert!(beta.is_finite());
        }
        other => panic!("expected non-convergence, got {other:?}"),
    }
}

#[test]
fn debiased_fit_beats_the_penalized_logistic_coefficient() {
    let (n, p) = (500, 1000);
    let dgp = Dgp::new(&DgpSpec::standard(n, p)).unwrap();
    let beta0 = dgp.truth().beta0;
    let reps = 200;
    let (mut hd, mut naive) = (0.0, 0.0);
    for r in 0..reps {
        let data = dgp.sample(n, 40_000 + r).unwrap();
        let rep = estimate_hd(&data, LinkFunction::Identity, &HdConfig::default(), PhiKind::None, false).unwrap();
        hd += rep.beta_hat;
        naive += rep.diagnostics["beta_tilde"];
    }
    let (hd_bias, naive_bias) = ((hd / reps as f64 - beta0).abs(), (naive / reps as f64 - beta0).abs());
    assert!(hd_bias < naive_bias, "hd bias {hd_bias} vs lasso bias {naive_bias}");
}

#[test]
fn alpha_l1_error_shrinks_with_n() {
    let p = 200;
    let spec = DgpSpec::standard(1000, p);
    let dgp = Dgp::new(&spec).unwrap();
    let (m_int, a0) = dgp.truth().alpha0().unwrap();
    let truth = SparseCoef::from_dense(m_int, a0).unwrap();
    let cfg = HdConfig::default();
    let mut medians = vec![];
    for n in [250, 500, 1000] {
        let mut errs: Vec<f64> = (0..21)
            .map(|r| {
                let data = dgp.sample(n, 30_000 + r).unwrap();
                let init = fit_gamma_initial(&data, Lambda::Auto, &cfg).unwrap();
                let dz = fit_alpha_dantzig(&data, &init.gamma_tilde, LinkFunction::Identity, Lambda::Auto, None, &cfg)
                    .unwrap();
                dz.alpha.l1_distance(&truth)
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        medians.push(errs[10]);
    }
    assert!(medians[0] > medians[1] && medians[1] > medians[2], "{medians:?}");
}

#[test]
fn full_pipeline_reports_feasibility() {
    let data = draw(120, 300, 10);
    for phi in [PhiKind::None, PhiKind::Simp, PhiKind::Opt] {
        let rep = estimate_hd(&data, LinkFunction::Identity, &HdConfig::default(), phi, true).unwrap();
        assert!(rep.diagnostics["feasibility_slack_alpha"] <= FEASIBILITY_SLACK);
        assert!(rep.diagnostics["feasibility_slack_gamma"] <= FEASIBILITY_SLACK);
        assert!(rep.se > 0.0 && rep.ci_lower < rep.ci_upper);
    }
}

#[test]
fn config_rejects_unknown_keys_and_parses_auto() {
    let cfg: HdConfig = serde_json::from_str(r#"{"lambda_alpha": "auto", "lambda_gamma": 0.05}"#).unwrap();
    assert_eq!(cfg.lambda_alpha, Lambda::Auto);
    assert_eq!(cfg.lambda_gamma, Lambda::Value(0.05));
    assert!(serde_json::from_str::<HdConfig>(r#"{"lambda": 1}"#).is_err());
    let negative: HdConfig = serde_json::from_str(r#"{"lambda_alpha": -1.0}"#).unwrap();
    assert!(negative.validate().is_err());
}
