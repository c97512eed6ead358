use nalgebra::{DMatrix, DVector};

use super::controller::{ControllerParams, ControllerStep};
use crate::dynamics::{StepModel, TimeVaryingLinearModel};
use crate::error::{Error, Result};
use crate::linalg;

/// One step of a linear-Gaussian state-space model: `y_k` observes `x_k`,
/// then the state moves to `x_{k+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopStep {
    /// Ā_k.
    pub transition: DMatrix<f64>,
    /// b̄_k.
    pub drift: DVector<f64>,
    /// Q̄_k.
    pub process_cov: DMatrix<f64>,
    /// C̄_k (p × n_x).
    pub observation: DMatrix<f64>,
    /// d̄_k.
    pub obs_offset: DVector<f64>,
    /// R̄_k (p × p).
    pub obs_cov: DMatrix<f64>,
}

/// State-space model with `K` observed steps and an unobserved final state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopModel {
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
    pub steps: Vec<ClosedLoopStep>,
}

impl ClosedLoopModel {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn state_dim(&self) -> usize {
        self.init_mean.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.steps.first().map_or(0, |s| s.observation.nrows())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        if self.init_cov.shape() != (n, n) {
            return Err(Error::Dimension("initial covariance shape".into()));
        }
        let p = self.obs_dim();
        for (k, s) in self.steps.iter().enumerate() {
            let ok = s.transition.shape() == (n, n)
                && s.drift.len() == n
                && s.process_cov.shape() == (n, n)
                && s.observation.shape() == (p, n)
                && s.obs_offset.len() == p
                && s.obs_cov.shape() == (p, p);
            if !ok {
                return Err(Error::Dimension(format!(
                    "closed-loop step {k} has inconsistent shapes"
                )));
            }
        }
        Ok(())
    }
}

/// Substitutes `u = F x + e + ε`, `ε ~ N(0, Σ)` into one model step.
pub fn closed_loop_step(m: &StepModel, c: &ControllerStep) -> ClosedLoopStep {
    let b_sigma = &m.b * &c.covariance;
    let by_sigma = &m.b_y * &c.covariance;
    ClosedLoopStep {
        transition: &m.a + &m.b * &c.gain,
        drift: &m.b * &c.offset + &m.c,
        process_cov: linalg::symmetrize(&(&m.sigma_d + b_sigma * m.b.transpose())),
        observation: &m.a_y + &m.b_y * &c.gain,
        obs_offset: DVector::from_element(1, (&m.b_y * &c.offset)[0] + m.c_y),
        obs_cov: DMatrix::from_element(1, 1, m.sigma_y + (by_sigma * m.b_y.transpose())[(0, 0)]),
    }
}

pub fn closed_loop(
    model: &TimeVaryingLinearModel,
    theta: &ControllerParams,
) -> Result<ClosedLoopModel> {
    if model.horizon() != theta.horizon()
        || model.state_dim() != theta.state_dim()
        || model.action_dim() != theta.action_dim()
    {
        return Err(Error::Dimension(format!(
            "model (K={}, n_x={}, n_u={}) and controller (K={}, n_x={}, n_u={}) disagree",
            model.horizon(),
            model.state_dim(),
            model.action_dim(),
            theta.horizon(),
            theta.state_dim(),
            theta.action_dim()
        )));
    }
    Ok(ClosedLoopModel {
        init_mean: model.init_mean.clone(),
        init_cov: model.init_cov.clone(),
        steps: model
            .steps
            .iter()
            .zip(&theta.steps)
            .map(|(m, c)| closed_loop_step(m, c))
            .collect(),
    })
}
