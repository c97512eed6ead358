#![allow(dead_code)]

use emgps_core::linalg;
use emgps_core::trajopt::{ClosedLoopModel, ClosedLoopStep};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn normal_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let v = linalg::standard_normal_vec(rows * cols, rng);
    DMatrix::from_column_slice(rows, cols, v.as_slice()) * scale
}

pub fn random_spd(n: usize, floor: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let l = normal_matrix(n, n, 0.7, rng);
    &l * l.transpose() + DMatrix::identity(n, n) * floor
}

/// Random linear-Gaussian state-space model with `nx` states, `ny`
/// observations and `k` observed steps.
pub fn random_system(nx: usize, ny: usize, k: usize, rng: &mut ChaCha8Rng) -> ClosedLoopModel {
    ClosedLoopModel {
        init_mean: linalg::standard_normal_vec(nx, rng),
        init_cov: random_spd(nx, 0.2, rng),
        steps: (0..k)
            .map(|_| ClosedLoopStep {
                transition: DMatrix::identity(nx, nx) * 0.8 + normal_matrix(nx, nx, 0.3, rng),
                drift: linalg::standard_normal_vec(nx, rng) * 0.5,
                process_cov: random_spd(nx, 0.1, rng),
                observation: normal_matrix(ny, nx, 1.0, rng),
                obs_offset: linalg::standard_normal_vec(ny, rng) * 0.2,
                obs_cov: random_spd(ny, 0.1, rng) * rng.random_range(0.1..2.0),
            })
            .collect(),
    }
}

/// Posterior of `x_1..x_{K+1}` given `y_1..y_K` by conditioning the dense
/// joint Gaussian. Returns (means, covariances, cross covariances
/// `Cov(x_{k+1}, x_k | Y)`).
pub fn dense_posterior(
    clm: &ClosedLoopModel,
    ys: &[DVector<f64>],
) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let n = clm.init_mean.len();
    let p = ys[0].len();
    let k = clm.steps.len();
    let dim_x = n * (k + 1);
    let dim_z = dim_x + p * k;
    let dim_e = n * (k + 1) + p * k;

    // z = m + G e with e ~ N(0, D), D block diagonal.
    let mut m = DVector::zeros(dim_z);
    let mut g = DMatrix::zeros(dim_z, dim_e);
    let mut d = DMatrix::zeros(dim_e, dim_e);
    m.rows_mut(0, n).copy_from(&clm.init_mean);
    g.view_mut((0, 0), (n, n)).fill_with_identity();
    d.view_mut((0, 0), (n, n)).copy_from(&clm.init_cov);
    for (j, s) in clm.steps.iter().enumerate() {
        let xj = m.rows(j * n, n).into_owned();
        let gj = g.rows(j * n, n).into_owned();
        m.rows_mut((j + 1) * n, n)
            .copy_from(&(&s.transition * &xj + &s.drift));
        let next = &s.transition * &gj;
        g.rows_mut((j + 1) * n, n).copy_from(&next);
        let w = (j + 1) * n;
        g.view_mut(((j + 1) * n, w), (n, n)).fill_with_identity();
        d.view_mut((w, w), (n, n)).copy_from(&s.process_cov);

        let yr = dim_x + j * p;
        m.rows_mut(yr, p)
            .copy_from(&(&s.observation * &xj + &s.obs_offset));
        let gy = &s.observation * &gj;
        g.rows_mut(yr, p).copy_from(&gy);
        let v = n * (k + 1) + j * p;
        g.view_mut((yr, v), (p, p)).fill_with_identity();
        d.view_mut((v, v), (p, p)).copy_from(&s.obs_cov);
    }
    let cov = &g * &d * g.transpose();
    let sxx = cov.view((0, 0), (dim_x, dim_x)).into_owned();
    let sxy = cov.view((0, dim_x), (dim_x, p * k)).into_owned();
    let syy = cov.view((dim_x, dim_x), (p * k, p * k)).into_owned();
    let mut y = DVector::zeros(p * k);
    for (j, yj) in ys.iter().enumerate() {
        y.rows_mut(j * p, p).copy_from(yj);
    }
    let chol = syy.cholesky().expect("observation covariance is PD");
    let gain = chol.solve(&sxy.transpose()).transpose();
    let mean = m.rows(0, dim_x) + &gain * (y - m.rows(dim_x, p * k));
    let post = sxx - &gain * sxy.transpose();

    let means = (0..=k).map(|j| mean.rows(j * n, n).into_owned()).collect();
    let covs = (0..=k)
        .map(|j| post.view((j * n, j * n), (n, n)).into_owned())
        .collect();
    let cross = (0..k)
        .map(|j| post.view(((j + 1) * n, j * n), (n, n)).into_owned())
        .collect();
    (means, covs, cross)
}

/// Draws observations from the model itself.
pub fn sample_observations(clm: &ClosedLoopModel, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let mut x = linalg::sample_gaussian(
        &clm.init_mean,
        &linalg::psd_sqrt(&clm.init_cov).unwrap(),
        rng,
    );
    clm.steps
        .iter()
        .map(|s| {
            let y = linalg::sample_gaussian(
                &(&s.observation * &x + &s.obs_offset),
                &linalg::psd_sqrt(&s.obs_cov).unwrap(),
                rng,
            );
            x = linalg::sample_gaussian(
                &(&s.transition * &x + &s.drift),
                &linalg::psd_sqrt(&s.process_cov).unwrap(),
                rng,
            );
            y
        })
        .collect()
}

/// Component-wise relative error with a floor on the denominator.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
