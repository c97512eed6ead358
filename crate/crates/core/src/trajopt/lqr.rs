use nalgebra::{DMatrix, DVector};

use super::controller::{ControllerParams, ControllerStep, ThetaBounds};
use crate::dynamics::TimeVaryingLinearModel;
use crate::error::{Error, Result};
use crate::linalg;
use crate::sim::CostModel;

/// Affine dynamics `x' = A x + B u + c` for one step.
#[derive(Debug, Clone)]
pub struct AffineStep {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
}

/// Finite-horizon tracking LQR for
/// `Σ_k (x_k−x*)ᵀQ_x(x_k−x*) + (u_k−u*)ᵀQ_u(u_k−u*) + (x_{K+1}−x*)ᵀQ_x(x_{K+1}−x*)`.
///
/// Returns the gains `F_k` and offsets `e_k` of `u_k = F_k x_k + e_k`.
pub fn riccati_gains(
    steps: &[AffineStep],
    q_x: &DMatrix<f64>,
    q_u: &DMatrix<f64>,
    x_target: &DVector<f64>,
    u_target: &DVector<f64>,
) -> Result<Vec<(DMatrix<f64>, DVector<f64>)>> {
    // Value function V(x) = xᵀP x + 2 pᵀx + const.
    let mut p_mat = q_x.clone();
    let mut p_vec = -(q_x * x_target);
    let mut out = vec![(DMatrix::zeros(0, 0), DVector::zeros(0)); steps.len()];
    for (k, s) in steps.iter().enumerate().rev() {
        let pa = &p_mat * &s.a;
        let pc = &p_mat * &s.c + &p_vec;
        let quu = linalg::symmetrize(&(q_u + s.b.transpose() * &p_mat * &s.b));
        let qux = s.b.transpose() * &pa;
        let qu = s.b.transpose() * &pc - q_u * u_target;
        let qxx = q_x + s.a.transpose() * &pa;
        let qx = -(q_x * x_target) + s.a.transpose() * &pc;

        let chol = nalgebra::Cholesky::new(quu).ok_or_else(|| {
            Error::Numerical(format!("Riccati Q_uu not positive definite at step {k}"))
        })?;
        let gain = -chol.solve(&qux);
        let offset = -chol.solve(&qu);
        if !linalg::all_finite_m(&gain) || !linalg::all_finite_v(&offset) {
            return Err(Error::Numerical(format!(
                "Riccati gain is not finite at step {k}"
            )));
        }
        p_mat = linalg::symmetrize(&(qxx + qux.transpose() * &gain));
        p_vec = qx + qux.transpose() * &offset;
        out[k] = (gain, offset);
    }
    Ok(out)
}

/// Seeds θ̂⁰ with the LQR solution on the fitted model and `Σ_k = init_cov·I`.
pub fn init_controller_lqr(
    model: &TimeVaryingLinearModel,
    cm: &CostModel,
    init_cov: f64,
    bounds: ThetaBounds,
) -> Result<ControllerParams> {
    if !(init_cov > 0.0) {
        return Err(Error::Config(format!(
            "initial controller covariance must be positive, got {init_cov}"
        )));
    }
    let steps: Vec<AffineStep> = model
        .steps
        .iter()
        .map(|s| AffineStep {
            a: s.a.clone(),
            b: s.b.clone(),
            c: s.c.clone(),
        })
        .collect();
    let gains = riccati_gains(
        &steps,
        &cm.q_x,
        &cm.q_u,
        &cm.target_state,
        &cm.target_action,
    )?;
    let nu = model.action_dim();
    let root = DMatrix::identity(nu, nu) * init_cov.sqrt();
    let steps = gains
        .into_iter()
        .map(|(f, e)| ControllerStep::new(f, e, root.clone()).project(&bounds))
        .collect();
    ControllerParams::new(steps, bounds)
}
