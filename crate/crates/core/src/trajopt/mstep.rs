use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::controller::{ControllerParams, ControllerStep, ThetaBounds};
use super::kalman::SmootherResult;
use super::qfunc::q_step;
use crate::dynamics::TimeVaryingLinearModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MStepConfig {
    /// Relative central-difference step for gradients.
    pub fd_rel_step: f64,
    pub max_iters: usize,
    /// Stop when the projected gradient max-norm falls below this.
    pub grad_tol: f64,
}

impl Default for MStepConfig {
    fn default() -> Self {
        Self {
            fd_rel_step: 1e-5,
            max_iters: 200,
            grad_tol: 1e-8,
        }
    }
}

/// Outcome of the bounded ascent for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAscent {
    pub point: DVector<f64>,
    pub value: f64,
    pub start_value: f64,
    pub iterations: usize,
    /// False when no ascent was found and the start point was returned.
    pub progressed: bool,
}

pub fn central_gradient<F>(f: &F, x: &DVector<f64>, rel_step: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let mut g = DVector::zeros(x.len());
    for j in 0..x.len() {
        let h = rel_step * x[j].abs().max(1.0);
        let mut plus = x.clone();
        plus[j] += h;
        let mut minus = x.clone();
        minus[j] -= h;
        g[j] = (f(&plus)? - f(&minus)?) / (2.0 * h);
    }
    Ok(g)
}

fn project_box(x: &DVector<f64>, bound: f64) -> DVector<f64> {
    x.map(|v| v.clamp(-bound, bound))
}

/// Gradient with components that push against an active bound zeroed.
fn projected_gradient(x: &DVector<f64>, g: &DVector<f64>, bound: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |j, _| {
        if (x[j] >= bound && g[j] > 0.0) || (x[j] <= -bound && g[j] < 0.0) {
            0.0
        } else {
            g[j]
        }
    })
}

/// Maximizes `f` over the box `[-bound, bound]ⁿ` by projected BFGS with
/// finite-difference gradients and an Armijo backtracking search.
/// Never returns a point worse than `x0`.
pub fn bounded_ascent<F>(
    f: &F,
    x0: &DVector<f64>,
    bound: f64,
    cfg: &MStepConfig,
) -> Result<StepAscent>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let start = project_box(x0, bound);
    let start_value = f(&start)?;
    if !start_value.is_finite() {
        return Err(Error::Numerical(
            "objective is not finite at the start point".into(),
        ));
    }
    let n = start.len();
    let mut x = start.clone();
    let mut fx = start_value;
    let mut g = central_gradient(f, &x, cfg.fd_rel_step)?;
    // Inverse Hessian approximation of −f.
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        let pg = projected_gradient(&x, &g, bound);
        if pg.amax() < cfg.grad_tol {
            break;
        }
        iterations += 1;
        let mut direction = &h_inv * &g;
        if direction.dot(&g) <= 0.0 {
            h_inv = DMatrix::identity(n, n);
            direction = g.clone();
        }
        let mut t = if first { 1.0 / g.norm().max(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let cand = project_box(&(&x + &direction * t), bound);
            let step = &cand - &x;
            if step.amax() == 0.0 {
                break;
            }
            let fc = f(&cand)?;
            if fc.is_finite() && fc >= fx + 1e-4 * g.dot(&step) && fc > fx {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            if first {
                break;
            }
            // Restart from steepest ascent once before giving up.
            h_inv = DMatrix::identity(n, n);
            first = true;
            continue;
        };
        let g_new = central_gradient(f, &x_new, cfg.fd_rel_step)?;
        let s = &x_new - &x;
        let y = &g - &g_new;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                h_inv = DMatrix::identity(n, n) * (sy / y.dot(&y));
            }
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - &s * y.transpose() * rho;
            h_inv = &left * &h_inv * left.transpose() + &s * s.transpose() * rho;
        }
        first = false;
        let gain = f_new - fx;
        x = x_new;
        fx = f_new;
        g = g_new;
        if gain <= 1e-15 * fx.abs().max(1.0) {
            break;
        }
    }
    if fx >= start_value {
        Ok(StepAscent {
            point: x,
            value: fx,
            start_value,
            iterations,
            progressed: fx > start_value,
        })
    } else {
        Ok(StepAscent {
            point: start,
            value: start_value,
            start_value,
            iterations,
            progressed: false,
        })
    }
}

/// Result of one M-step over all time steps.
#[derive(Debug, Clone)]
pub struct MStepOutcome {
    /// Candidate θ̂^{i+1}: new `(F, e)`, σ components carried over from θ̂^i.
    pub theta: ControllerParams,
    pub step_results: Vec<StepAscent>,
}

impl MStepOutcome {
    pub fn progressed(&self) -> bool {
        self.step_results.iter().any(|r| r.progressed)
    }
}

/// Maximizes `L(·, θ̂^i)` over the `(F, e)` components. The objective splits
/// into independent per-step terms, so each step is optimized separately.
pub fn m_step(
    model: &TimeVaryingLinearModel,
    theta: &ControllerParams,
    sm: &SmootherResult,
    ys: &[DVector<f64>],
    cfg: &MStepConfig,
) -> Result<MStepOutcome> {
    let (nx, nu) = (theta.state_dim(), theta.action_dim());
    let fe_len = nu * nx + nu;
    let bounds: ThetaBounds = theta.bounds;
    let results: Vec<(ControllerStep, StepAscent)> = (0..theta.horizon())
        .into_par_iter()
        .map(|k| {
            let current = &theta.steps[k];
            let full = current.theta();
            let objective = |z: &DVector<f64>| -> Result<f64> {
                let mut t = full.clone();
                t.rows_mut(0, fe_len).copy_from(z);
                let c = ControllerStep::from_theta(&t, nx, nu)?;
                q_step(&model.steps[k], &c, sm, k, &ys[k])
            };
            let z0 = full.rows(0, fe_len).into_owned();
            let ascent = bounded_ascent(&objective, &z0, bounds.gain, cfg)?;
            let mut t = full.clone();
            t.rows_mut(0, fe_len).copy_from(&ascent.point);
            Ok((ControllerStep::from_theta(&t, nx, nu)?, ascent))
        })
        .collect::<Result<_>>()?;
    let (steps, step_results): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(MStepOutcome {
        theta: ControllerParams::new(steps, bounds)?,
        step_results,
    })
}
