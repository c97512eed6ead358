use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    cost_observation, observe_state, running_cost, step_dynamics, CostModel, InitialCondition,
    SimConfig, SimState,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::seed;

pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;

/// A time-indexed Gaussian action law `u_k ~ N(mean_k(x), Σ_k)` evaluated on
/// the observed state.
pub trait ActionPolicy: Sync {
    /// Number of steps the policy is defined for.
    fn horizon(&self) -> usize;
    fn action_mean(&self, step: usize, observed: &DVector<f64>) -> DVector<f64>;
    fn action_covariance(&self, step: usize) -> DMatrix<f64>;
}

/// State-independent Gaussian actions, used for the initial exploration batch.
#[derive(Debug, Clone)]
pub struct GaussianActionPolicy {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub horizon: usize,
}

impl ActionPolicy for GaussianActionPolicy {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn action_mean(&self, _step: usize, _observed: &DVector<f64>) -> DVector<f64> {
        self.mean.clone()
    }

    fn action_covariance(&self, _step: usize) -> DMatrix<f64> {
        self.covariance.clone()
    }
}

/// One episode. `true_states` and `observed_states` have `K+1` entries (the
/// last observation is taken after the final step), every other sequence `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub true_states: Vec<Vec<f64>>,
    pub observed_states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub action_means: Vec<Vec<f64>>,
    pub running_costs: Vec<f64>,
    pub cost_observations: Vec<f64>,
    pub seed: u64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn observed(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.observed_states[k])
    }

    pub fn action(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.actions[k])
    }

    pub fn true_state(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.true_states[k])
    }

    pub fn cost_to_go(&self) -> f64 {
        self.running_costs.iter().sum()
    }

    /// Checks the length and cost-observation invariants.
    pub fn validate(&self) -> Result<()> {
        let k = self.horizon();
        let lengths_ok = self.true_states.len() == k + 1
            && self.observed_states.len() == k + 1
            && self.action_means.len() == k
            && self.running_costs.len() == k
            && self.cost_observations.len() == k;
        if !lengths_ok {
            return Err(Error::Dimension(
                "trajectory sequence lengths disagree".into(),
            ));
        }
        for (big, small) in self.running_costs.iter().zip(&self.cost_observations) {
            if !(*big >= 0.0) || (cost_observation(*big)? - small).abs() > 1e-15 {
                return Err(Error::Domain(
                    "cost observation does not equal exp(-Y)".into(),
                ));
            }
        }
        Ok(())
    }
}

/// On-disk batch of trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub schema_version: u32,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryBatch {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        Self {
            schema_version: TRAJECTORY_SCHEMA_VERSION,
            trajectories,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let batch: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if batch.schema_version != TRAJECTORY_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported trajectory schema version {}",
                batch.schema_version
            )));
        }
        for t in &batch.trajectories {
            t.validate()?;
        }
        Ok(batch)
    }
}

fn policy_sqrt_factors(policy: &dyn ActionPolicy, horizon: usize) -> Result<Vec<DMatrix<f64>>> {
    if policy.horizon() < horizon {
        return Err(Error::Config(format!(
            "policy defined for {} steps, episode needs {horizon}",
            policy.horizon()
        )));
    }
    (0..horizon)
        .map(|k| {
            let cov = policy.action_covariance(k);
            if (&cov - cov.transpose()).amax() > 1e-9 * cov.amax().max(1.0) {
                return Err(Error::Domain(format!(
                    "policy covariance at step {k} is not symmetric"
                )));
            }
            linalg::psd_sqrt(&cov)
                .map_err(|_| Error::Domain(format!("policy covariance at step {k} is not PSD")))
        })
        .collect()
}

/// Runs one episode. Actions are drawn from the policy evaluated on the
/// noisy observation; costs are charged on the true state.
pub fn rollout(
    policy: &dyn ActionPolicy,
    ic: &InitialCondition,
    cfg: &SimConfig,
    cm: &CostModel,
    seed: u64,
) -> Result<Trajectory> {
    cfg.validate()?;
    cm.validate()?;
    ic.validate()?;
    let horizon = cfg.horizon;
    let action_sqrt = policy_sqrt_factors(policy, horizon)?;
    let mut rng = seed::rng(seed);

    let x1 = linalg::sample_gaussian(&ic.mean, &linalg::psd_sqrt(&ic.covariance)?, &mut rng);
    let mut state = SimState::from_vector(&x1)?;

    let mut traj = Trajectory {
        true_states: Vec::with_capacity(horizon + 1),
        observed_states: Vec::with_capacity(horizon + 1),
        actions: Vec::with_capacity(horizon),
        action_means: Vec::with_capacity(horizon),
        running_costs: Vec::with_capacity(horizon),
        cost_observations: Vec::with_capacity(horizon),
        seed,
    };
    for (k, sqrt_cov) in action_sqrt.iter().enumerate() {
        let x_true = state.to_vector();
        let x_obs = observe_state(&x_true, cfg.noise_factor, &mut rng);
        let mean = policy.action_mean(k, &x_obs);
        let u = linalg::sample_gaussian(&mean, sqrt_cov, &mut rng);
        let cost = running_cost(&x_true, &u, cm);
        let next = step_dynamics(&state, &u, cfg)?;

        traj.true_states.push(x_true.as_slice().to_vec());
        traj.observed_states.push(x_obs.as_slice().to_vec());
        traj.action_means.push(mean.as_slice().to_vec());
        traj.actions.push(u.as_slice().to_vec());
        traj.running_costs.push(cost);
        traj.cost_observations.push(cost_observation(cost)?);
        state = next;
    }
    let x_final = state.to_vector();
    let obs_final = observe_state(&x_final, cfg.noise_factor, &mut rng);
    traj.true_states.push(x_final.as_slice().to_vec());
    traj.observed_states.push(obs_final.as_slice().to_vec());
    Ok(traj)
}

/// `count` independent rollouts from the same initial condition. Rollout `m`
/// uses the seed `derive(master_seed, [m])`; results are in index order.
pub fn collect_batch(
    policy: &dyn ActionPolicy,
    ic: &InitialCondition,
    cfg: &SimConfig,
    cm: &CostModel,
    count: usize,
    master_seed: u64,
) -> Result<Vec<Trajectory>> {
    if count == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    (0..count)
        .into_par_iter()
        .map(|m| rollout(policy, ic, cfg, cm, seed::derive(master_seed, &[m as u64])))
        .collect()
}
