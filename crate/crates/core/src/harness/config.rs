use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::FitConfig;
use crate::error::{Error, Result};
use crate::policy::{CovarianceMode, TrainConfig};
use crate::sim::{CostModel, InitialCondition, SimConfig};
use crate::trajopt::{EmConfig, ThetaBounds};

/// Axis-aligned ellipse `((a−c₀)/r₀)² + ((b−c₁)/r₁)² ≤ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub radii: [f64; 2],
}

impl Ellipse {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let a = (p[0] - self.center[0]) / self.radii[0];
        let b = (p[1] - self.center[1]) / self.radii[1];
        a * a + b * b <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessCriterion {
    pub position: Ellipse,
    pub action: Ellipse,
}

impl Default for SuccessCriterion {
    fn default() -> Self {
        Self {
            position: Ellipse {
                center: [5.0, 20.0],
                radii: [0.8, 2.0],
            },
            action: Ellipse {
                center: [0.0, 0.0],
                radii: [0.4, 1.5],
            },
        }
    }
}

impl SuccessCriterion {
    pub fn validate(&self) -> Result<()> {
        let radii = self.position.radii.iter().chain(&self.action.radii);
        if radii.clone().all(|r| *r > 0.0 && r.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(
                "success ellipse radii must be positive".into(),
            ))
        }
    }
}

/// Generalization test: `distributions` new initial-state means, each drawn
/// uniformly within `radius` of a training mean (cycling over conditions),
/// with `samples` rollouts per distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestProtocol {
    pub distributions: usize,
    pub samples: usize,
    pub radius: f64,
    pub criterion: SuccessCriterion,
}

impl Default for TestProtocol {
    fn default() -> Self {
        Self {
            distributions: 10,
            samples: 10,
            radius: 1.0,
            criterion: SuccessCriterion::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub cost: CostModel,
    pub fit: FitConfig,
    pub em: EmConfig,
    pub train: TrainConfig,
    /// One entry per local controller, C.
    pub initial_conditions: Vec<InitialCondition>,
    /// Outer GPS iterations, I.
    pub iterations: usize,
    /// EM iterations run on each freshly fitted model inside one outer iteration.
    pub em_steps_per_iteration: usize,
    /// Rollouts per batch used to fit the dynamics, M.
    pub batch_size: usize,
    /// Rollouts per condition used as training samples, S.
    pub samples_per_condition: usize,
    /// Variance of the state-independent exploration actions of the first batch.
    pub exploration_variance: f64,
    /// Σ_k of the LQR-seeded controller, as a multiple of the identity.
    pub init_controller_cov: f64,
    pub bounds: ThetaBounds,
    pub covariance_mode: CovarianceMode,
    pub test: TestProtocol,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            cost: CostModel::default(),
            fit: FitConfig::default(),
            em: EmConfig::default(),
            train: TrainConfig::default(),
            initial_conditions: vec![
                InitialCondition::at_rest([0.0, 5.0], 1e-2),
                InitialCondition::at_rest([2.0, 5.5], 1e-2),
            ],
            iterations: 9,
            em_steps_per_iteration: 1,
            batch_size: 50,
            samples_per_condition: 10,
            exploration_variance: 25.0,
            init_controller_cov: 1.0,
            bounds: ThetaBounds::default(),
            covariance_mode: CovarianceMode::default(),
            test: TestProtocol::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.cost.validate()?;
        self.train.validate()?;
        self.test.criterion.validate()?;
        if self.initial_conditions.is_empty() {
            return Err(Error::Config(
                "at least one initial condition is required".into(),
            ));
        }
        for ic in &self.initial_conditions {
            ic.validate()?;
            if ic.mean.len() != self.cost.state_dim() {
                return Err(Error::Config(
                    "initial condition dimension differs from the cost target".into(),
                ));
            }
        }
        if self.iterations == 0 || self.em_steps_per_iteration == 0 {
            return Err(Error::Config(
                "iterations and em_steps_per_iteration must be positive".into(),
            ));
        }
        if self.batch_size < 2 || self.samples_per_condition == 0 {
            return Err(Error::Config(
                "batch_size must be at least 2 and samples_per_condition positive".into(),
            ));
        }
        if !(self.exploration_variance > 0.0) || !(self.init_controller_cov > 0.0) {
            return Err(Error::Config(
                "exploration and initial controller variances must be positive".into(),
            ));
        }
        if self.test.distributions == 0 || self.test.samples == 0 || !(self.test.radius >= 0.0) {
            return Err(Error::Config(
                "test protocol needs positive counts and a nonnegative radius".into(),
            ));
        }
        if self.em.surrogate_rollouts == 0 {
            return Err(Error::Config("surrogate_rollouts must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// SHA-256 of the compact JSON serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(serde_json::to_vec(self)?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
