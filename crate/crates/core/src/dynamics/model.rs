use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::niw::{bayes_update, build_niw_prior, empirical_moments};
use super::vbgmm::{fit_gmm_vb, GmmConfig};
use crate::error::{Error, Result};
use crate::linalg;
use crate::serde_mat;
use crate::sim::Trajectory;

pub const MODEL_SCHEMA_VERSION: u32 = 1;
/// Largest accepted condition number of the `(x, u)` block before conditioning.
pub const MAX_INPUT_CONDITION: f64 = 1e12;

/// Conditional Gaussian for one step:
/// `x_{k+1} ~ N(A x + B u + c, Σ^d)`, `y_k ~ N(A^y x + B^y u + c^y, Σ^y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepModel {
    #[serde(with = "serde_mat::mat")]
    pub a: DMatrix<f64>,
    #[serde(with = "serde_mat::mat")]
    pub b: DMatrix<f64>,
    #[serde(with = "serde_mat::vector")]
    pub c: DVector<f64>,
    #[serde(with = "serde_mat::mat")]
    pub sigma_d: DMatrix<f64>,
    /// Row vector `A^y` (1 × n_x).
    #[serde(with = "serde_mat::mat")]
    pub a_y: DMatrix<f64>,
    /// Row vector `B^y` (1 × n_u).
    #[serde(with = "serde_mat::mat")]
    pub b_y: DMatrix<f64>,
    pub c_y: f64,
    pub sigma_y: f64,
}

impl StepModel {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Stacked `A^P = [[A, B], [A^y, B^y]]`.
    pub fn joint_gain(&self) -> DMatrix<f64> {
        let (nx, nu) = (self.state_dim(), self.action_dim());
        let mut g = DMatrix::zeros(nx + 1, nx + nu);
        g.view_mut((0, 0), (nx, nx)).copy_from(&self.a);
        g.view_mut((0, nx), (nx, nu)).copy_from(&self.b);
        g.view_mut((nx, 0), (1, nx)).copy_from(&self.a_y);
        g.view_mut((nx, nx), (1, nu)).copy_from(&self.b_y);
        g
    }

    /// Block-diagonal `Σ^P` (the cross block is zero by construction).
    pub fn joint_covariance(&self) -> DMatrix<f64> {
        let nx = self.state_dim();
        let mut s = DMatrix::zeros(nx + 1, nx + 1);
        s.view_mut((0, 0), (nx, nx)).copy_from(&self.sigma_d);
        s[(nx, nx)] = self.sigma_y;
        s
    }

    /// Enforces the type invariants: positive-definite noise, `BᵀB ≻ 0`, and
    /// controllability of `(A, B)`.
    pub fn validate(&self, step: usize) -> Result<()> {
        let fail = |reason: String| Err(Error::Fit { step, reason });
        if linalg::min_sym_eigenvalue(&self.sigma_d) <= 0.0 {
            return fail("Σ^d is not positive definite".into());
        }
        if !(self.sigma_y > 0.0) {
            return fail("Σ^y is not positive".into());
        }
        let btb = self.b.transpose() * &self.b;
        if linalg::min_sym_eigenvalue(&btb) <= 1e-12 * btb.amax().max(1e-300) {
            return fail("BᵀB is singular".into());
        }
        if !is_controllable(&self.a, &self.b) {
            return fail("(A, B) is not controllable".into());
        }
        Ok(())
    }
}

/// Rank test on `[B, AB, …, A^{n−1}B]` with a relative singular-value tolerance.
pub fn is_controllable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let m = b.ncols();
    let mut ctrb = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for i in 0..n {
        ctrb.view_mut((0, i * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    let sv = ctrb.singular_values();
    let max = sv.max();
    max > 0.0 && sv.iter().filter(|&&s| s > 1e-10 * max).count() == n
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub elbo_trace: Vec<f64>,
    /// Condition number of the `(x, u)` block per step.
    pub condition_numbers: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Fitted per-step model plus the distribution of the first state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeVaryingLinearModel {
    pub schema_version: u32,
    pub steps: Vec<StepModel>,
    #[serde(with = "serde_mat::vector")]
    pub init_mean: DVector<f64>,
    #[serde(with = "serde_mat::mat")]
    pub init_cov: DMatrix<f64>,
    pub diagnostics: FitDiagnostics,
}

impl TimeVaryingLinearModel {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn state_dim(&self) -> usize {
        self.init_mean.len()
    }

    pub fn action_dim(&self) -> usize {
        self.steps.first().map_or(0, |s| s.action_dim())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported model schema {}",
                m.schema_version
            )));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub gmm: GmmConfig,
    /// NIW strength n₀; defaults to `dim + 2`.
    pub n0: Option<f64>,
    pub k0: f64,
    /// Use `(Λ⁰)⁻¹` in the covariance update instead of the scale `n₀Λ⁰`.
    pub bayes_update_literal: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            gmm: GmmConfig::default(),
            n0: None,
            k0: 1.0,
            bayes_update_literal: false,
        }
    }
}

/// Splits a joint Gaussian over `[x; u; x'; y]` into the conditional model of
/// `(x', y)` given `(x, u)`. The cross-covariance between `x'` and `y` is dropped.
pub fn condition_gaussian(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    state_dim: usize,
    action_dim: usize,
    step: usize,
) -> Result<(StepModel, f64)> {
    let n_in = state_dim + action_dim;
    let n_out = state_dim + 1;
    if mean.len() != n_in + n_out || cov.shape() != (n_in + n_out, n_in + n_out) {
        return Err(Error::Dimension(format!(
            "joint Gaussian of size {} cannot be split as {n_in} + {n_out}",
            mean.len()
        )));
    }
    let l11 = linalg::symmetrize(&cov.view((0, 0), (n_in, n_in)).into_owned());
    let l21 = cov.view((n_in, 0), (n_out, n_in)).into_owned();
    let l22 = cov.view((n_in, n_in), (n_out, n_out)).into_owned();
    let cond = linalg::sym_condition_number(&l11);
    if !(cond <= MAX_INPUT_CONDITION) {
        return Err(Error::Fit {
            step,
            reason: format!(
                "(x,u) block condition number {cond:.3e} exceeds {MAX_INPUT_CONDITION:e}"
            ),
        });
    }
    let l11_inv = linalg::spd_inverse(&l11)?;
    let gain = &l21 * &l11_inv;
    let schur = linalg::symmetrize(&(&l22 - &gain * l21.transpose()));
    let intercept = mean.rows(n_in, n_out) - &gain * mean.rows(0, n_in);

    let sigma_d = linalg::make_pd(&schur.view((0, 0), (state_dim, state_dim)).into_owned())?;
    let sigma_y = schur[(state_dim, state_dim)].max(linalg::JITTER_BASE);
    let model = StepModel {
        a: gain.view((0, 0), (state_dim, state_dim)).into_owned(),
        b: gain
            .view((0, state_dim), (state_dim, action_dim))
            .into_owned(),
        c: intercept.rows(0, state_dim).into_owned(),
        sigma_d,
        a_y: gain.view((state_dim, 0), (1, state_dim)).into_owned(),
        b_y: gain
            .view((state_dim, state_dim), (1, action_dim))
            .into_owned(),
        c_y: intercept[state_dim],
        sigma_y,
    };
    Ok((model, cond))
}

/// Rows `[x_k; u_k; x_{k+1}; y_k]` of every trajectory at step `k`, using observed states.
pub fn dataset_slice(batch: &[Trajectory], k: usize) -> Vec<DVector<f64>> {
    batch
        .iter()
        .map(|t| {
            let mut row =
                Vec::with_capacity(2 * t.observed_states[k].len() + t.actions[k].len() + 1);
            row.extend_from_slice(&t.observed_states[k]);
            row.extend_from_slice(&t.actions[k]);
            row.extend_from_slice(&t.observed_states[k + 1]);
            row.push(t.cost_observations[k]);
            DVector::from_vec(row)
        })
        .collect()
}

fn check_batch(batch: &[Trajectory]) -> Result<usize> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Config("empty trajectory batch".into()))?;
    let horizon = first.horizon();
    for t in batch {
        t.validate()?;
        if t.horizon() != horizon {
            return Err(Error::Dimension(
                "trajectories have different horizons".into(),
            ));
        }
    }
    Ok(horizon)
}

/// Fits the model with the GMM prior built on `batch` itself.
pub fn fit_model(batch: &[Trajectory], cfg: &FitConfig) -> Result<TimeVaryingLinearModel> {
    fit_model_with_prior(batch, batch, cfg)
}

/// Fits the per-step model on `batch`, with the GMM prior fitted on the
/// pooled rows of `prior_data` (all steps, all trajectories).
pub fn fit_model_with_prior(
    batch: &[Trajectory],
    prior_data: &[Trajectory],
    cfg: &FitConfig,
) -> Result<TimeVaryingLinearModel> {
    let horizon = check_batch(batch)?;
    let prior_horizon = check_batch(prior_data)?;
    if batch.len() < 2 {
        return Err(Error::Config(
            "dynamics fitting needs at least 2 trajectories".into(),
        ));
    }
    let state_dim = batch[0].observed_states[0].len();
    let action_dim = batch[0].actions[0].len();
    let dim = 2 * state_dim + action_dim + 1;

    let pooled: Vec<DVector<f64>> = (0..prior_horizon)
        .flat_map(|k| dataset_slice(prior_data, k))
        .collect();
    let gmm = fit_gmm_vb(&pooled, &cfg.gmm)?;
    let prior = build_niw_prior(&gmm, cfg.n0.unwrap_or(dim as f64 + 2.0), cfg.k0)?;

    let fitted: Vec<(
        StepModel,
        f64,
        Vec<String>,
        Option<(DVector<f64>, DMatrix<f64>)>,
    )> = (0..horizon)
        .into_par_iter()
        .map(|k| {
            let emp = empirical_moments(&dataset_slice(batch, k))?;
            let joint = bayes_update(&prior, &emp, cfg.bayes_update_literal)?;
            let (step, cond) =
                condition_gaussian(&joint.mean, &joint.covariance, state_dim, action_dim, k)?;
            step.validate(k)?;
            let init = (k == 0).then(|| {
                (
                    joint.mean.rows(0, state_dim).into_owned(),
                    joint
                        .covariance
                        .view((0, 0), (state_dim, state_dim))
                        .into_owned(),
                )
            });
            Ok((step, cond, joint.warnings, init))
        })
        .collect::<Result<_>>()?;

    let mut diagnostics = FitDiagnostics {
        elbo_trace: gmm.elbo_trace.clone(),
        condition_numbers: Vec::with_capacity(horizon),
        warnings: gmm.warnings.clone(),
    };
    let mut steps = Vec::with_capacity(horizon);
    let mut init = None;
    for (k, (step, cond, warnings, first)) in fitted.into_iter().enumerate() {
        diagnostics.condition_numbers.push(cond);
        diagnostics
            .warnings
            .extend(warnings.into_iter().map(|w| format!("step {k}: {w}")));
        if first.is_some() {
            init = first;
        }
        steps.push(step);
    }
    let (init_mean, init_cov) = init.expect("horizon >= 1");
    Ok(TimeVaryingLinearModel {
        schema_version: MODEL_SCHEMA_VERSION,
        steps,
        init_mean,
        init_cov: linalg::make_pd(&init_cov)?,
        diagnostics,
    })
}
