use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpGradient};
use crate::error::{Error, Result};
use crate::linalg;
use crate::serde_mat;

pub const POLICY_SCHEMA_VERSION: u32 = 1;

/// Smallest per-coordinate scale used when standardizing inputs.
const MIN_INPUT_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.step_size > 0.0
            && self.step_size.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid Adam hyperparameters {self:?}"
            )))
        }
    }
}

/// First and second moment estimates over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: DVector<f64>,
    v: DVector<f64>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: usize) -> Self {
        Self {
            cfg,
            m: DVector::zeros(params),
            v: DVector::zeros(params),
            t: 0,
        }
    }

    /// One descent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut DVector<f64>, grad: &DVector<f64>) {
        let c = self.cfg;
        self.t += 1;
        self.m = &self.m * c.beta1 + grad * (1.0 - c.beta1);
        self.v = &self.v * c.beta2 + grad.map(|g| g * g) * (1.0 - c.beta2);
        let m_corr = 1.0 - c.beta1.powi(self.t);
        let v_corr = 1.0 - c.beta2.powi(self.t);
        for i in 0..params.len() {
            let m_hat = self.m[i] / m_corr;
            let v_hat = self.v[i] / v_corr;
            params[i] -= c.step_size * m_hat / (v_hat.sqrt() + c.epsilon);
        }
    }
}

/// MLP mean function with its input standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub mlp: Mlp,
    #[serde(with = "serde_mat::vector")]
    pub input_mean: DVector<f64>,
    #[serde(with = "serde_mat::vector")]
    pub input_scale: DVector<f64>,
    pub adam: AdamConfig,
}

impl PolicyNet {
    /// Identity standardization.
    pub fn new(mlp: Mlp, adam: AdamConfig) -> Self {
        let n = mlp.input_dim();
        Self {
            mlp,
            input_mean: DVector::zeros(n),
            input_scale: DVector::from_element(n, 1.0),
            adam,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Sets the standardization to the per-coordinate mean and standard
    /// deviation of `states`.
    pub fn fit_standardization(&mut self, states: &[&DVector<f64>]) -> Result<()> {
        if states.is_empty() {
            return Err(Error::Domain("no states to standardize".into()));
        }
        let n = self.input_dim();
        let count = states.len() as f64;
        let mut mean = DVector::zeros(n);
        for s in states {
            if s.len() != n {
                return Err(Error::Dimension(format!(
                    "state of length {} for input {n}",
                    s.len()
                )));
            }
            mean += *s;
        }
        mean /= count;
        let mut var = DVector::zeros(n);
        for s in states {
            var += (*s - &mean).map(|d| d * d);
        }
        self.input_scale = (var / count).map(|v| v.sqrt().max(MIN_INPUT_SCALE));
        self.input_mean = mean;
        Ok(())
    }

    pub fn standardize(&self, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.input_mean).component_div(&self.input_scale)
    }

    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        let n = self.input_dim();
        if self.input_mean.len() != n || self.input_scale.len() != n {
            return Err(Error::Dimension(
                "standardization statistics do not match the input size".into(),
            ));
        }
        if !linalg::all_finite_v(&self.input_mean)
            || self
                .input_scale
                .iter()
                .any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::Domain(
                "standardization statistics must be finite with positive scale".into(),
            ));
        }
        self.adam.validate()
    }
}

/// μ^L(x).
pub fn mlp_forward(net: &PolicyNet, x: &DVector<f64>) -> DVector<f64> {
    net.mlp.forward(&net.standardize(x))
}

/// Gradient of `upstreamᵀ μ^L(x)` with respect to the network parameters.
pub fn mlp_backward(net: &PolicyNet, x: &DVector<f64>, upstream: &DVector<f64>) -> MlpGradient {
    net.mlp.backward(&net.standardize(x), upstream)
}

/// Gaussian policy `N(μ^L(x), Σ^L_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalPolicy {
    pub schema_version: u32,
    pub net: PolicyNet,
    #[serde(with = "serde_mat::mats")]
    pub covariances: Vec<DMatrix<f64>>,
}

impl GlobalPolicy {
    pub fn new(net: PolicyNet, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        let p = Self {
            schema_version: POLICY_SCHEMA_VERSION,
            net,
            covariances,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.covariances.is_empty() {
            return Err(Error::Config(
                "global policy needs at least one step".into(),
            ));
        }
        let nu = self.net.output_dim();
        for (k, c) in self.covariances.iter().enumerate() {
            if c.shape() != (nu, nu) {
                return Err(Error::Dimension(format!(
                    "Σ^L at step {k} has shape {:?}",
                    c.shape()
                )));
            }
            if !linalg::all_finite_m(c) || (c - c.transpose()).amax() > 1e-9 * c.amax().max(1.0) {
                return Err(Error::Domain(format!(
                    "Σ^L at step {k} is not finite and symmetric"
                )));
            }
            if c.clone().cholesky().is_none() {
                return Err(Error::Domain(format!(
                    "Σ^L at step {k} is not positive definite"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let p: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if p.schema_version != POLICY_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported policy schema version {}",
                p.schema_version
            )));
        }
        p.validate()?;
        Ok(p)
    }
}

impl crate::sim::ActionPolicy for GlobalPolicy {
    fn horizon(&self) -> usize {
        self.covariances.len()
    }

    fn action_mean(&self, _step: usize, observed: &DVector<f64>) -> DVector<f64> {
        mlp_forward(&self.net, observed)
    }

    fn action_covariance(&self, step: usize) -> DMatrix<f64> {
        self.covariances[step].clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut adam = Adam::new(
            AdamConfig {
                step_size: 0.05,
                ..Default::default()
            },
            2,
        );
        let mut p = DVector::from_vec(vec![3.0, -2.0]);
        for _ in 0..2000 {
            let g = p.map(|v| 2.0 * v);
            adam.step(&mut p, &g);
        }
        assert!(p.amax() < 1e-3);
    }

    #[test]
    fn standardization_centres_inputs() {
        let mut net = PolicyNet::new(Mlp::zeros(&[2, 3, 1]).unwrap(), AdamConfig::default());
        let xs = [
            DVector::from_vec(vec![1.0, 10.0]),
            DVector::from_vec(vec![3.0, 30.0]),
        ];
        net.fit_standardization(&xs.iter().collect::<Vec<_>>())
            .unwrap();
        assert_eq!(net.standardize(&xs[0]), DVector::from_vec(vec![-1.0, -1.0]));
    }
}
