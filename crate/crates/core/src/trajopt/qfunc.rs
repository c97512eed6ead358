use nalgebra::{DMatrix, DVector};

use super::closed_loop::{closed_loop_step, ClosedLoopModel, ClosedLoopStep};
use super::controller::{ControllerParams, ControllerStep};
use super::kalman::SmootherResult;
use crate::dynamics::{StepModel, TimeVaryingLinearModel};
use crate::error::{Error, Result};
use crate::linalg;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `E[log N(z; 0, cov)]` for `z` with mean `mu` and covariance `var`.
fn expected_gaussian_log(mu: &DVector<f64>, var: &DMatrix<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let (chol, _) = linalg::cholesky_jittered(cov)?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let second = var + mu * mu.transpose();
    let quad = chol.solve(&second).trace();
    Ok(-0.5 * (mu.len() as f64 * LN_2PI + log_det + quad))
}

/// Expected log-density of the first state under the smoothed posterior.
pub fn q_initial(
    clm_init_mean: &DVector<f64>,
    clm_init_cov: &DMatrix<f64>,
    sm: &SmootherResult,
) -> Result<f64> {
    expected_gaussian_log(&(&sm.means[0] - clm_init_mean), &sm.covs[0], clm_init_cov)
}

/// Transition and observation terms of step `k` for a given closed-loop step.
pub fn q_term(s: &ClosedLoopStep, sm: &SmootherResult, k: usize, y: &DVector<f64>) -> Result<f64> {
    if k >= sm.cross_covs.len() {
        return Err(Error::Dimension(format!(
            "step {k} outside the smoothed horizon"
        )));
    }
    let (m, p) = (&sm.means[k], &sm.covs[k]);
    let (m1, p1) = (&sm.means[k + 1], &sm.covs[k + 1]);
    let cross = &sm.cross_covs[k];

    let mu = m1 - &s.transition * m - &s.drift;
    let var = p1 - cross * s.transition.transpose() - &s.transition * cross.transpose()
        + &s.transition * p * s.transition.transpose();
    let transition = expected_gaussian_log(&mu, &linalg::symmetrize(&var), &s.process_cov)?;

    let mu_y = y - &s.observation * m - &s.obs_offset;
    let var_y = &s.observation * p * s.observation.transpose();
    let observation = expected_gaussian_log(&mu_y, &var_y, &s.obs_cov)?;
    Ok(transition + observation)
}

/// Step-`k` term as a function of that step's controller only.
pub fn q_step(
    model: &StepModel,
    ctrl: &ControllerStep,
    sm: &SmootherResult,
    k: usize,
    y: &DVector<f64>,
) -> Result<f64> {
    q_term(&closed_loop_step(model, ctrl), sm, k, y)
}

/// `L(θ, θ̂^i)` on a generic state-space model, with `sm` computed under θ̂^i.
pub fn q_value_clm(clm: &ClosedLoopModel, sm: &SmootherResult, ys: &[DVector<f64>]) -> Result<f64> {
    if ys.len() != clm.horizon() || sm.means.len() != clm.horizon() + 1 {
        return Err(Error::Dimension(
            "smoother, model and observations disagree on the horizon".into(),
        ));
    }
    let mut total = q_initial(&clm.init_mean, &clm.init_cov, sm)?;
    for (k, (s, y)) in clm.steps.iter().zip(ys).enumerate() {
        total += q_term(s, sm, k, y)?;
    }
    Ok(total)
}

/// Joint mixture likelihood `L(θ, θ̂^i) = E_{θ̂^i}[log p_θ(X, Y) | Y]`.
pub fn q_function(
    model: &TimeVaryingLinearModel,
    theta: &ControllerParams,
    sm: &SmootherResult,
    ys: &[DVector<f64>],
) -> Result<f64> {
    let clm = super::closed_loop::closed_loop(model, theta)?;
    q_value_clm(&clm, sm, ys)
}

/// Per-step terms plus the initial term, in that order of the returned tuple.
pub fn q_terms(
    model: &TimeVaryingLinearModel,
    theta: &ControllerParams,
    sm: &SmootherResult,
    ys: &[DVector<f64>],
) -> Result<(f64, Vec<f64>)> {
    let init = q_initial(&model.init_mean, &model.init_cov, sm)?;
    let terms = model
        .steps
        .iter()
        .zip(&theta.steps)
        .zip(ys)
        .enumerate()
        .map(|(k, ((m, c), y))| q_step(m, c, sm, k, y))
        .collect::<Result<Vec<_>>>()?;
    Ok((init, terms))
}
