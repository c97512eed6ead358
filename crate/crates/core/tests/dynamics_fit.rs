use emgps_core::dynamics::{
    bayes_update, condition_gaussian, empirical_moments, fit_model, FitConfig, NiwPrior,
    TimeVaryingLinearModel,
};
use emgps_core::linalg;
use emgps_core::seed;
use emgps_core::sim::{
    collect_batch, CostModel, GaussianActionPolicy, InitialCondition, SimConfig, Trajectory,
};
use nalgebra::{DMatrix, DVector};

fn exploration_batch(noise_factor: f64, count: usize, seed: u64) -> (SimConfig, Vec<Trajectory>) {
    let cfg = SimConfig {
        noise_factor,
        ..SimConfig::default()
    };
    let policy = GaussianActionPolicy {
        mean: cfg.hover_action(),
        covariance: DMatrix::identity(2, 2),
        horizon: cfg.horizon,
    };
    let ic = InitialCondition::at_rest([0.0, 5.0], 0.01);
    let batch = collect_batch(&policy, &ic, &cfg, &CostModel::default(), count, seed).unwrap();
    (cfg, batch)
}

fn stacked(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    t.view_mut((0, 0), a.shape()).copy_from(a);
    t.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    t
}

fn mean_rel_error(model: &TimeVaryingLinearModel, cfg: &SimConfig) -> f64 {
    let (a, b, _) = cfg.euler_matrices();
    let truth = stacked(&a, &b);
    let total: f64 = model
        .steps
        .iter()
        .map(|s| (stacked(&s.a, &s.b) - &truth).norm() / truth.norm())
        .sum();
    total / model.horizon() as f64
}

#[test]
fn noiseless_plant_is_recovered() {
    let (cfg, batch) = exploration_batch(0.0, 50, 1);
    let model = fit_model(&batch, &FitConfig::default()).unwrap();
    let (a, b, c) = cfg.euler_matrices();
    for (k, s) in model.steps.iter().enumerate() {
        let err = (&s.a - &a)
            .amax()
            .max((&s.b - &b).amax())
            .max((&s.c - &c).amax());
        assert!(err <= 1e-3, "step {k}: {err:e}");
    }
}

#[test]
fn model_round_trips_through_json() {
    let (_, batch) = exploration_batch(0.3, 20, 2);
    let model = fit_model(&batch, &FitConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    assert_eq!(TimeVaryingLinearModel::load(&path).unwrap(), model);
}

#[test]
fn constant_cost_hits_the_floor() {
    let (_, mut batch) = exploration_batch(0.3, 50, 3);
    for t in &mut batch {
        t.cost_observations.iter_mut().for_each(|y| *y = 0.25);
        t.running_costs.iter_mut().for_each(|c| *c = 4f64.ln());
    }
    let model = fit_model(&batch, &FitConfig::default()).unwrap();
    for s in &model.steps {
        assert_eq!(s.sigma_y, linalg::JITTER_BASE);
        assert!(s.a_y.amax() < 1e-6 && s.b_y.amax() < 1e-6);
    }
}

#[test]
fn more_data_does_not_hurt_on_average() {
    let average = |m: usize| -> f64 {
        (0..10)
            .map(|s| {
                let (cfg, batch) = exploration_batch(0.0, m, 100 + s);
                mean_rel_error(&fit_model(&batch, &FitConfig::default()).unwrap(), &cfg)
            })
            .sum::<f64>()
            / 10.0
    };
    let (small, large) = (average(25), average(50));
    assert!(large <= small, "M=25: {small:e}, M=50: {large:e}");
}

#[test]
fn conditioning_matches_least_squares_on_plant_data() {
    let mut rng = seed::rng(11);
    let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]);
    let b = DMatrix::from_row_slice(2, 1, &[0.5, 1.0]);
    let rows: Vec<DVector<f64>> = (0..500)
        .map(|_| {
            let x = linalg::standard_normal_vec(2, &mut rng);
            let u = linalg::standard_normal_vec(1, &mut rng);
            let next = &a * &x + &b * &u + linalg::standard_normal_vec(2, &mut rng) * 0.1;
            let y = 0.3 * x[0] + linalg::standard_normal_vec(1, &mut rng)[0] * 0.1;
            DVector::from_iterator(
                6,
                x.iter()
                    .chain(u.iter())
                    .chain(next.iter())
                    .copied()
                    .chain([y]),
            )
        })
        .collect();
    let emp = empirical_moments(&rows).unwrap();
    let prior = NiwPrior {
        mean: emp.mean.clone(),
        scatter: emp.covariance.clone(),
        n0: 8.0,
        k0: 1.0,
    };
    let post = bayes_update(&prior, &emp, false).unwrap();
    let (step, _) = condition_gaussian(&post.mean, &post.covariance, 2, 1, 0).unwrap();
    let truth = stacked(&a, &b);
    let rel = (stacked(&step.a, &step.b) - &truth).norm() / truth.norm();
    assert!(rel < 0.1, "{rel}");
}

/// Ordinary least squares of `[x'; y]` on `[x; u; 1]`.
fn ols(rows: &[DVector<f64>], n_in: usize) -> DMatrix<f64> {
    let n_out = rows[0].len() - n_in;
    let design = DMatrix::from_fn(rows.len(), n_in + 1, |r, c| {
        if c < n_in {
            rows[r][c]
        } else {
            1.0
        }
    });
    let target = DMatrix::from_fn(rows.len(), n_out, |r, c| rows[r][n_in + c]);
    let xtx = design.transpose() * &design;
    (xtx.cholesky()
        .unwrap()
        .solve(&(design.transpose() * target)))
    .transpose()
}

#[test]
fn weak_prior_limit_is_least_squares() {
    for case in 0..20u64 {
        let mut rng = seed::rng(seed::derive(77, &[case]));
        let (nx, nu) = (2, 1);
        let d = 2 * nx + nu + 1;
        let mix = DMatrix::from_fn(d, d, |_, _| linalg::standard_normal_vec(1, &mut rng)[0]);
        let rows: Vec<DVector<f64>> = (0..40)
            .map(|_| &mix * linalg::standard_normal_vec(d, &mut rng))
            .collect();
        let emp = empirical_moments(&rows).unwrap();
        // The prior carries the same scatter, so only κ (→0 with k₀) can bias the result.
        let prior = NiwPrior {
            mean: DVector::from_element(d, 3.0),
            scatter: emp.covariance.clone(),
            n0: d as f64,
            k0: 1e-12,
        };
        let post = bayes_update(&prior, &emp, false).unwrap();
        let (step, _) = condition_gaussian(&post.mean, &post.covariance, nx, nu, 0).unwrap();
        let reference = ols(&rows, nx + nu);
        let mut fitted = DMatrix::zeros(nx + 1, nx + nu + 1);
        fitted
            .view_mut((0, 0), (nx + 1, nx + nu))
            .copy_from(&step.joint_gain());
        fitted.view_mut((0, nx + nu), (nx, 1)).copy_from(&step.c);
        fitted[(nx, nx + nu)] = step.c_y;
        let diff = (fitted - reference).amax();
        assert!(diff <= 1e-6, "case {case}: {diff:e}");
    }
}
