use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::closed_loop::closed_loop;
use super::controller::ControllerParams;
use super::information::{covariance_update, information_matrix, InformationConfig};
use super::kalman::smooth;
use super::mstep::{m_step, MStepConfig};
use super::qfunc::q_function;
use crate::dynamics::TimeVaryingLinearModel;
use crate::error::{Error, Result};
use crate::linalg;
use crate::seed;
use crate::sim::{running_cost, CostModel, Trajectory};

/// Which cost-observation sequence ȳ the E-step conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationPolicy {
    /// ȳ_k = 1, the cost observation of a zero-cost step.
    Target,
    /// ȳ_k = mean observed y_k over the latest batch.
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub iterations: usize,
    pub observations: ObservationPolicy,
    pub m_step: MStepConfig,
    pub information: InformationConfig,
    /// Rollouts on the fitted model used for the surrogate cost.
    pub surrogate_rollouts: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            iterations: 9,
            observations: ObservationPolicy::Target,
            m_step: MStepConfig::default(),
            information: InformationConfig::default(),
            surrogate_rollouts: 100,
        }
    }
}

/// Diagnostics of one EM iteration `θ̂^i → θ̂^{i+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmIterationRecord {
    pub iteration: usize,
    /// L(θ̂^i, θ̂^i).
    pub q_start: f64,
    /// L(θ̂^{i+1}, θ̂^i) at the M-step output (σ still at θ̂^i).
    pub q_mstep: f64,
    /// L(·, θ̂^i) after the covariance update as well.
    pub q_updated: f64,
    /// Observed-data log-likelihood L_{θ̂^i}(ȳ).
    pub log_likelihood: f64,
    /// Σ_k Tr Σ_k before and after the update.
    pub trace_before: f64,
    pub trace_after: f64,
    /// Monte-Carlo estimate of V(x₁, π_{θ̂^i}) on the fitted model.
    pub surrogate_cost: f64,
    pub info_eig_min: f64,
    pub info_eig_max: f64,
    pub mstep_progress: bool,
}

/// Builds ȳ of length `horizon`.
pub fn observation_sequence(
    policy: ObservationPolicy,
    batch: &[Trajectory],
    horizon: usize,
) -> Result<Vec<DVector<f64>>> {
    match policy {
        ObservationPolicy::Target => Ok(vec![DVector::from_element(1, 1.0); horizon]),
        ObservationPolicy::Empirical => {
            if batch.is_empty() {
                return Err(Error::Config(
                    "empirical observations need a non-empty batch".into(),
                ));
            }
            (0..horizon)
                .map(|k| {
                    let mut sum = 0.0;
                    for t in batch {
                        sum += *t.cost_observations.get(k).ok_or_else(|| {
                            Error::Dimension(format!("trajectory shorter than step {k}"))
                        })?;
                    }
                    Ok(DVector::from_element(1, sum / batch.len() as f64))
                })
                .collect()
        }
    }
}

/// Mean cost-to-go of `rollouts` simulations of the closed loop on the fitted
/// model (actions on the model state, costs from `cm`).
pub fn surrogate_cost(
    model: &TimeVaryingLinearModel,
    theta: &ControllerParams,
    cm: &CostModel,
    rollouts: usize,
    master_seed: u64,
) -> Result<f64> {
    if rollouts == 0 {
        return Err(Error::Config(
            "surrogate cost needs at least one rollout".into(),
        ));
    }
    let init_sqrt = linalg::psd_sqrt(&model.init_cov)?;
    let noise_sqrt = model
        .steps
        .iter()
        .map(|s| linalg::psd_sqrt(&s.sigma_d))
        .collect::<Result<Vec<_>>>()?;
    let costs: Vec<f64> = (0..rollouts)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(seed::derive(master_seed, &[r as u64]));
            let mut x = linalg::sample_gaussian(&model.init_mean, &init_sqrt, &mut rng);
            let mut total = 0.0;
            for (k, (m, c)) in model.steps.iter().zip(&theta.steps).enumerate() {
                let mean = &c.gain * &x + &c.offset;
                let u = mean
                    + c.sqrt_cov.transpose()
                        * linalg::standard_normal_vec(c.action_dim(), &mut rng);
                total += running_cost(&x, &u, cm);
                x = &m.a * &x
                    + &m.b * &u
                    + &m.c
                    + &noise_sqrt[k] * linalg::standard_normal_vec(x.len(), &mut rng);
            }
            total
        })
        .collect();
    let mean = costs.iter().sum::<f64>() / rollouts as f64;
    if !mean.is_finite() {
        return Err(Error::Numerical("surrogate cost is not finite".into()));
    }
    Ok(mean)
}

/// One E-step / M-step / covariance update.
pub fn em_iteration(
    model: &TimeVaryingLinearModel,
    theta: &ControllerParams,
    ys: &[DVector<f64>],
    cm: &CostModel,
    cfg: &EmConfig,
    iteration: usize,
    surrogate_seed: u64,
) -> Result<(ControllerParams, EmIterationRecord)> {
    let clm = closed_loop(model, theta)?;
    let sm = smooth(&clm, ys)?;
    let q_start = q_function(model, theta, &sm, ys)?;
    let mstep = m_step(model, theta, &sm, ys, &cfg.m_step)?;
    let q_mstep = q_function(model, &mstep.theta, &sm, ys)?;
    let info = information_matrix(model, theta, &mstep.theta, &sm, ys, &cfg.information)?;
    let steps = mstep
        .theta
        .steps
        .iter()
        .zip(&info)
        .map(|(s, i)| Ok(covariance_update(s, &i.sigma)?.project(&theta.bounds)))
        .collect::<Result<Vec<_>>>()?;
    let next = ControllerParams::new(steps, theta.bounds)?;
    let q_updated = q_function(model, &next, &sm, ys)?;
    let eigs = info.iter().flat_map(|i| i.eigenvalues.iter().copied());
    let (eig_min, eig_max) = eigs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    let record = EmIterationRecord {
        iteration,
        q_start,
        q_mstep,
        q_updated,
        log_likelihood: sm.log_likelihood,
        trace_before: theta.total_trace(),
        trace_after: next.total_trace(),
        surrogate_cost: surrogate_cost(model, theta, cm, cfg.surrogate_rollouts, surrogate_seed)?,
        info_eig_min: eig_min,
        info_eig_max: eig_max,
        mstep_progress: mstep.progressed(),
    };
    Ok((next, record))
}

/// Runs `cfg.iterations` EM iterations on a fixed model. Records are pushed
/// into `records` as they complete, so they survive a failure.
pub fn em_optimize(
    model: &TimeVaryingLinearModel,
    theta0: &ControllerParams,
    ys: &[DVector<f64>],
    cm: &CostModel,
    cfg: &EmConfig,
    master_seed: u64,
    records: &mut Vec<EmIterationRecord>,
) -> Result<ControllerParams> {
    if cfg.iterations == 0 {
        return Err(Error::Config("EM needs at least one iteration".into()));
    }
    let mut theta = theta0.clone();
    for i in 0..cfg.iterations {
        let seed = seed::derive(master_seed, &[seed::stream::SURROGATE, i as u64]);
        let (next, record) = em_iteration(model, &theta, ys, cm, cfg, i, seed)?;
        records.push(record);
        theta = next;
    }
    Ok(theta)
}

pub fn write_em_csv(path: &Path, records: &[EmIterationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record(EM_CSV_HEADER)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_em_csv(path: &Path) -> Result<Vec<EmIterationRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub const EM_CSV_HEADER: [&str; 11] = [
    "iteration",
    "q_start",
    "q_mstep",
    "q_updated",
    "log_likelihood",
    "trace_before",
    "trace_after",
    "surrogate_cost",
    "info_eig_min",
    "info_eig_max",
    "mstep_progress",
];
