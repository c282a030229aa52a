use drlogit_core::estimating::EstimatingEquation;
use drlogit_core::simulate::{log_log_slope, Dgp};
use drlogit_core::*;
use nalgebra::DMatrix;

fn standard_draw(n: usize, seed: u64) -> (Dataset, NuisancePredictions, f64) {
    let dgp = Dgp::new(&DgpSpec::standard(n, 5)).unwrap();
    let data = dgp.sample(n, seed).unwrap();
    let preds = dgp.truth().oracle(&data).unwrap();
    (data, preds, dgp.truth().beta0)
}

/// Root of the equation by scanning `[-5, 5]` with step 1e-4 and bisecting the
/// sign change closest to the minimum of `|equation|`.
fn grid_root(eq: &EstimatingEquation) -> f64 {
    let steps = 100_000;
    let grid: Vec<f64> = (0..=steps).map(|k| -5.0 + 10.0 * k as f64 / steps as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|&b| eq.value(b).0).collect();
    let best = (0..grid.len()).min_by(|&i, &j| vals[i].abs().total_cmp(&vals[j].abs())).unwrap();
    let k = if best + 1 < grid.len() && vals[best].signum() != vals[best + 1].signum() {
        best
    } else {
        best - 1
    };
    let (mut lo, mut hi) = (grid[k], grid[k + 1]);
    let f_lo = eq.value(lo).0;
    assert!(f_lo.signum() != eq.value(hi).0.signum(), "no sign change near the grid minimum");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if eq.value(mid).0.signum() == f_lo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn solve_beta_matches_grid_scan() {
    let mut worst: f64 = 0.0;
    for s in 0..50 {
        let (data, preds, _) = standard_draw(50, 1000 + s);
        let sol = solve_beta(&data, &preds, &BracketConfig::default()).unwrap();
        assert!(sol.converged, "instance {s}");
        let oracle = grid_root(&EstimatingEquation::new(&data, &preds).unwrap());
        worst = worst.max((sol.beta_hat - oracle).abs());
    }
    assert!(worst < 1e-8, "largest disagreement {worst:e}");
}

#[test]
fn permuting_rows_leaves_the_root_unchanged() {
    let (data, preds, _) = standard_draw(300, 7);
    let n = data.n();
    let perm: Vec<usize> = (0..n).map(|i| (i * 37 + 11) % n).collect();
    let x = DMatrix::from_fn(n, data.p(), |i, j| data.x()[(perm[i], j)]);
    let pick = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let shuffled = Dataset::new(pick(data.y()), pick(data.a()), x, None).unwrap();
    let preds2 = NuisancePredictions::new(pick(preds.r_hat()), pick(preds.m_hat())).unwrap();
    let b1 = solve_beta(&data, &preds, &BracketConfig::default()).unwrap().beta_hat;
    let b2 = solve_beta(&shuffled, &preds2, &BracketConfig::default()).unwrap().beta_hat;
    assert!((b1 - b2).abs() < 1e-9, "{b1} vs {b2}");
}

#[test]
fn duplicating_the_sample_scales_se_by_root_two() {
    let (data, preds, _) = standard_draw(400, 3);
    let twice = |v: &[f64]| [v, v].concat();
    let n = data.n();
    let x = DMatrix::from_fn(2 * n, data.p(), |i, j| data.x()[(i % n, j)]);
    let big = Dataset::new(twice(data.y()), twice(data.a()), x, None).unwrap();
    let big_preds = NuisancePredictions::new(twice(preds.r_hat()), twice(preds.m_hat())).unwrap();

    let cfg = BracketConfig::default();
    let b1 = solve_beta(&data, &preds, &cfg).unwrap().beta_hat;
    let b2 = solve_beta(&big, &big_preds, &cfg).unwrap().beta_hat;
    let se1 = sandwich_se(&data, &preds, b1).unwrap();
    let se2 = sandwich_se(&big, &big_preds, b2).unwrap();
    let ratio = se2 / se1 * 2f64.sqrt();
    assert!((ratio - 1.0).abs() < 1e-6, "ratio {ratio}");
}

#[test]
fn equation_at_truth_vanishes_at_root_n_rate() {
    let reps = 200;
    let mut pts = vec![];
    for n in [500usize, 2000, 8000] {
        let dgp = Dgp::new(&DgpSpec::standard(n, 5)).unwrap();
        let ms: f64 = (0..reps)
            .map(|r| {
                let data = dgp.sample(n, 90_000 + r).unwrap();
                let preds = dgp.truth().oracle(&data).unwrap();
                let v = EstimatingEquation::new(&data, &preds).unwrap().value(dgp.truth().beta0).0;
                v * v
            })
            .sum::<f64>()
            / reps as f64;
        pts.push((n as f64, ms.sqrt()));
    }
    let slope = log_log_slope(pts.into_iter()).unwrap();
    assert!((-0.6..=-0.4).contains(&slope), "slope {slope}");
}

#[test]
fn oracle_sandwich_tracks_monte_carlo_spread() {
    let n = 2000;
    let dgp = Dgp::new(&DgpSpec::standard(n, 5)).unwrap();
    let (betas, ses): (Vec<f64>, Vec<f64>) = (0..500)
        .map(|r| {
            let data = dgp.sample(n, 50_000 + r).unwrap();
            let preds = dgp.truth().oracle(&data).unwrap();
            let b = solve_beta(&data, &preds, &BracketConfig::default()).unwrap().beta_hat;
            (b, sandwich_se(&data, &preds, b).unwrap())
        })
        .unzip();
    let sd = math::variance(&betas).sqrt();
    let mean_se = math::mean(&ses);
    assert!((sd / mean_se - 1.0).abs() < 0.15, "sd {sd} mean se {mean_se}");
}
