use nalgebra::{DMatrix, DVector};

use super::closed_loop::ClosedLoopModel;
use crate::error::{Error, Result};
use crate::linalg;

/// Forward pass output. `predicted_*` has `K+1` entries (`x_{k|k−1}`, with
/// `x_{1|0}` the prior), `filtered_*` has `K` entries (`x_{k|k}`).
#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub predicted_means: Vec<DVector<f64>>,
    pub predicted_covs: Vec<DMatrix<f64>>,
    pub filtered_means: Vec<DVector<f64>>,
    pub filtered_covs: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

/// Posterior moments of `x_1..x_{K+1}` given `y_1..y_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherResult {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    /// `cross_covs[k] = Cov(x_{k+1}, x_k | Y)`, `K` entries.
    pub cross_covs: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
    pub filter: FilterResult,
}

fn check_observations(clm: &ClosedLoopModel, ys: &[DVector<f64>]) -> Result<()> {
    clm.validate()?;
    if ys.len() != clm.horizon() {
        return Err(Error::Dimension(format!(
            "{} observations for horizon {}",
            ys.len(),
            clm.horizon()
        )));
    }
    if ys
        .iter()
        .any(|y| y.len() != clm.obs_dim() || !linalg::all_finite_v(y))
    {
        return Err(Error::Domain(
            "observations must be finite with the model's dimension".into(),
        ));
    }
    Ok(())
}

/// Predict/update recursion with Joseph-form covariance updates and the
/// innovation form of the log-likelihood.
pub fn kalman_filter(clm: &ClosedLoopModel, ys: &[DVector<f64>]) -> Result<FilterResult> {
    check_observations(clm, ys)?;
    let n = clm.state_dim();
    let eye = DMatrix::<f64>::identity(n, n);
    let k_len = clm.horizon();
    let mut out = FilterResult {
        predicted_means: Vec::with_capacity(k_len + 1),
        predicted_covs: Vec::with_capacity(k_len + 1),
        filtered_means: Vec::with_capacity(k_len),
        filtered_covs: Vec::with_capacity(k_len),
        log_likelihood: 0.0,
    };
    let mut mean = clm.init_mean.clone();
    let mut cov = linalg::symmetrize(&clm.init_cov);
    for (k, (s, y)) in clm.steps.iter().zip(ys).enumerate() {
        out.predicted_means.push(mean.clone());
        out.predicted_covs.push(cov.clone());

        let innovation = y - (&s.observation * &mean + &s.obs_offset);
        let pct = &cov * s.observation.transpose();
        let innov_cov = linalg::symmetrize(&(&s.observation * &pct + &s.obs_cov));
        let (chol, _) = linalg::cholesky_jittered(&innov_cov)
            .map_err(|e| Error::Numerical(format!("innovation covariance at step {k}: {e}")))?;
        let gain = chol.solve(&pct.transpose()).transpose();
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let p = innovation.len() as f64;
        out.log_likelihood -= 0.5
            * (p * (2.0 * std::f64::consts::PI).ln()
                + log_det
                + innovation.dot(&chol.solve(&innovation)));

        mean += &gain * innovation;
        let joseph = &eye - &gain * &s.observation;
        cov = linalg::symmetrize(
            &(&joseph * &cov * joseph.transpose() + &gain * &s.obs_cov * gain.transpose()),
        );
        out.filtered_means.push(mean.clone());
        out.filtered_covs.push(cov.clone());

        mean = &s.transition * &mean + &s.drift;
        cov =
            linalg::symmetrize(&(&s.transition * &cov * s.transition.transpose() + &s.process_cov));
        if !linalg::all_finite_v(&mean) || !linalg::all_finite_m(&cov) {
            return Err(Error::Numerical(format!("filter diverged at step {k}")));
        }
    }
    out.predicted_means.push(mean);
    out.predicted_covs.push(cov);
    if !out.log_likelihood.is_finite() {
        return Err(Error::Numerical(
            "filter log-likelihood is not finite".into(),
        ));
    }
    Ok(out)
}

/// Log-likelihood of `ys` for a run of steps starting from the predicted
/// moments `(mean, cov)` of their first state.
pub fn log_likelihood_from(
    steps: &[super::closed_loop::ClosedLoopStep],
    ys: &[DVector<f64>],
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<f64> {
    let clm = ClosedLoopModel {
        init_mean: mean.clone(),
        init_cov: cov.clone(),
        steps: steps.to_vec(),
    };
    Ok(kalman_filter(&clm, ys)?.log_likelihood)
}

/// Rauch–Tung–Striebel backward pass with lag-one cross-covariances.
pub fn rts_smoother(clm: &ClosedLoopModel, filter: FilterResult) -> Result<SmootherResult> {
    let k_len = clm.horizon();
    let mut means = vec![DVector::zeros(0); k_len + 1];
    let mut covs = vec![DMatrix::zeros(0, 0); k_len + 1];
    let mut cross_covs = vec![DMatrix::zeros(0, 0); k_len];
    means[k_len] = filter.predicted_means[k_len].clone();
    covs[k_len] = filter.predicted_covs[k_len].clone();
    for k in (0..k_len).rev() {
        let s = &clm.steps[k];
        let pred_cov = &filter.predicted_covs[k + 1];
        let (chol, _) = linalg::cholesky_jittered(pred_cov)
            .map_err(|e| Error::Numerical(format!("smoother at step {k}: {e}")))?;
        // J = P_{k|k} Āᵀ P_{k+1|k}⁻¹.
        let smoother_gain = chol
            .solve(&(&s.transition * &filter.filtered_covs[k]))
            .transpose();
        means[k] = &filter.filtered_means[k]
            + &smoother_gain * (&means[k + 1] - &filter.predicted_means[k + 1]);
        covs[k] = linalg::symmetrize(
            &(&filter.filtered_covs[k]
                + &smoother_gain * (&covs[k + 1] - pred_cov) * smoother_gain.transpose()),
        );
        cross_covs[k] = &covs[k + 1] * smoother_gain.transpose();
    }
    Ok(SmootherResult {
        means,
        covs,
        cross_covs,
        log_likelihood: filter.log_likelihood,
        filter,
    })
}

pub fn smooth(clm: &ClosedLoopModel, ys: &[DVector<f64>]) -> Result<SmootherResult> {
    let filter = kalman_filter(clm, ys)?;
    rts_smoother(clm, filter)
}
