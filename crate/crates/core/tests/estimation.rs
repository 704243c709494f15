use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vcboot_core::{
    fit_nested, mle_full, mle_null, simulate_dataset, Dataset, FitOptions, Individual, LinearPredictor, Model,
    QuadratureConfig, TestSpec, Theta,
};

fn design(n: usize, j: usize) -> Vec<Vec<Vec<f64>>> {
    (0..n).map(|_| (1..=j).map(|x| vec![x as f64]).collect()).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    0.5 * (v[(n - 1) / 2] + v[n / 2])
}

#[test]
fn estimates_concentrate_around_the_truth() {
    let model = Model::new(LinearPredictor::polynomial(1));
    let theta0 = Theta::diagonal(vec![0.0, 7.0], &[1.3f64.sqrt(), 0.0], 2.25).unwrap();
    let quad = QuadratureConfig::default();
    let opts = FitOptions {
        n_starts: 1,
        ..FitOptions::default()
    };
    let mut err = vec![Vec::new(); 4];
    for k in 0..150 {
        let mut rng = ChaCha8Rng::seed_from_u64(k);
        let data = simulate_dataset(&model, &theta0, &design(100, 5), &mut rng).unwrap();
        let fit = mle_full(&model, &data, &quad, &opts).unwrap();
        let t = &fit.theta_hat;
        err[0].push((t.beta()[0] - 0.0).abs());
        err[1].push((t.beta()[1] - 7.0).abs());
        err[2].push((t.sigma2().sqrt() - 1.5).abs());
        err[3].push((t.lambda()[(0, 0)] - 1.3f64.sqrt()).abs());
    }
    let m: Vec<f64> = err.into_iter().map(median).collect();
    assert!(m[0] <= 0.15 && m[1] <= 0.15 && m[2] <= 0.15, "{m:?}");
    assert!(m[3] <= 0.3, "{m:?}");
}

#[test]
fn fully_restricted_fit_is_least_squares() {
    let model = Model::new(LinearPredictor::polynomial(2));
    let theta = Theta::diagonal(vec![0.0, 7.0, 3.0], &[1.3f64.sqrt(), 0.0, 0.0], 2.25).unwrap();
    let data = simulate_dataset(&model, &theta, &design(40, 5), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let spec = TestSpec::new(vec![0, 1, 2], 3).unwrap();
    let fit = mle_null(
        &model,
        &data,
        &spec,
        &QuadratureConfig::default(),
        &FitOptions::default(),
    )
    .unwrap();

    let rows: Vec<(f64, f64)> = data
        .individuals()
        .iter()
        .flat_map(|i| i.x.iter().map(|x| x[0]).zip(i.y.iter().copied()))
        .collect();
    let x = DMatrix::from_fn(rows.len(), 3, |r, k| rows[r].0.powi(k as i32));
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let xtx = x.transpose() * &x;
    let beta = xtx.cholesky().unwrap().solve(&(x.transpose() * &y));
    let rss = (&y - &x * &beta).norm_squared();
    for k in 0..3 {
        assert!(
            (fit.theta_hat.beta()[k] - beta[k]).abs() < 1e-5,
            "{:?} vs {beta}",
            fit.theta_hat.beta()
        );
    }
    let s2 = rss / rows.len() as f64;
    assert!((fit.theta_hat.sigma2() - s2).abs() < 1e-6 * s2);
    assert!(fit.theta_hat.lambda().iter().all(|v| *v == 0.0));
}

#[test]
fn single_individual_fits() {
    let model = Model::new(LinearPredictor::polynomial(1));
    let ind = Individual::new(
        "only",
        vec![1.0, 2.2, 2.8, 4.1],
        (1..=4).map(|x| vec![x as f64]).collect(),
    )
    .unwrap();
    let data = Dataset::new(vec![ind]).unwrap();
    let spec = TestSpec::new(vec![1], 2).unwrap();
    let (null, full) = fit_nested(
        &model,
        &data,
        &spec,
        &QuadratureConfig::default(),
        &FitOptions::default(),
    )
    .unwrap();
    assert!(null.loglik.is_finite() && full.loglik.is_finite());
    assert!(full.loglik >= null.loglik - 1e-9);
}
