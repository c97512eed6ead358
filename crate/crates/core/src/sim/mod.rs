//! Analytic 2-D point mass with noisy state observations, the quadratic
//! running cost and its exponential observation channel.
//!
//! State layout is `[x, y, ẋ, ẏ]`, action layout `[u₁, u₂]` (accelerations).

mod rollout;

pub use rollout::{
    collect_batch, rollout, ActionPolicy, GaussianActionPolicy, Trajectory, TrajectoryBatch,
    TRAJECTORY_SCHEMA_VERSION,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, all_finite_v};
use crate::serde_mat;

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Seconds per step.
    pub dt: f64,
    /// Vertical acceleration (negative is down).
    pub gravity: f64,
    /// Linear velocity damping, 1/s.
    pub damping: f64,
    /// ϖ: observation noise covariance is `ϖ·I₄`.
    pub noise_factor: f64,
    /// Steps per episode, K.
    pub horizon: usize,
    pub mass: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            gravity: -9.8,
            damping: 0.1,
            noise_factor: 0.3,
            horizon: 30,
            mass: 1.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dt > 0.0
            && self.dt.is_finite()
            && self.damping >= 0.0
            && self.noise_factor >= 0.0
            && self.horizon >= 1
            && self.mass > 0.0
            && self.gravity.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid simulator config: {self:?}")))
        }
    }

    /// Action that exactly cancels gravity.
    pub fn hover_action(&self) -> DVector<f64> {
        DVector::from_vec(vec![0.0, -self.gravity * self.mass])
    }

    /// The discrete update written as `x' = A x + B u + c`.
    pub fn euler_matrices(&self) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let dt = self.dt;
        let keep = 1.0 - dt * self.damping;
        let mut a = DMatrix::identity(STATE_DIM, STATE_DIM);
        a[(0, 2)] = dt * keep;
        a[(1, 3)] = dt * keep;
        a[(2, 2)] = keep;
        a[(3, 3)] = keep;
        let mut b = DMatrix::zeros(STATE_DIM, ACTION_DIM);
        b[(0, 0)] = dt * dt / self.mass;
        b[(1, 1)] = dt * dt / self.mass;
        b[(2, 0)] = dt / self.mass;
        b[(3, 1)] = dt / self.mass;
        let c = DVector::from_vec(vec![0.0, dt * dt * self.gravity, 0.0, dt * self.gravity]);
        (a, b, c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

impl SimState {
    pub fn from_vector(v: &DVector<f64>) -> Result<Self> {
        if v.len() != STATE_DIM {
            return Err(Error::Dimension(format!("state has length {}", v.len())));
        }
        Ok(Self {
            position: [v[0], v[1]],
            velocity: [v[2], v[3]],
        })
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![
            self.position[0],
            self.position[1],
            self.velocity[0],
            self.velocity[1],
        ])
    }

    pub fn is_finite(&self) -> bool {
        self.position
            .iter()
            .chain(self.velocity.iter())
            .all(|v| v.is_finite())
    }
}

/// Semi-implicit Euler step: velocity first, then position with the new velocity.
pub fn step_dynamics(state: &SimState, action: &DVector<f64>, cfg: &SimConfig) -> Result<SimState> {
    if action.len() != ACTION_DIM {
        return Err(Error::Dimension(format!(
            "action has length {}",
            action.len()
        )));
    }
    if !state.is_finite() || !all_finite_v(action) {
        return Err(Error::Domain("non-finite state or action".into()));
    }
    let dt = cfg.dt;
    let accel = [
        action[0] / cfg.mass - cfg.damping * state.velocity[0],
        action[1] / cfg.mass + cfg.gravity - cfg.damping * state.velocity[1],
    ];
    let velocity = [
        state.velocity[0] + dt * accel[0],
        state.velocity[1] + dt * accel[1],
    ];
    let position = [
        state.position[0] + dt * velocity[0],
        state.position[1] + dt * velocity[1],
    ];
    Ok(SimState { position, velocity })
}

/// Adds `N(0, ϖ·I)` noise to the true state. With `ϖ = 0` the state is
/// returned exactly, but the random stream is advanced identically.
pub fn observe_state<R: Rng + ?Sized>(
    true_state: &DVector<f64>,
    noise_factor: f64,
    rng: &mut R,
) -> DVector<f64> {
    let z = linalg::standard_normal_vec(true_state.len(), rng);
    if noise_factor == 0.0 {
        true_state.clone()
    } else {
        true_state + z * noise_factor.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    #[serde(with = "serde_mat::vector")]
    pub target_state: DVector<f64>,
    #[serde(with = "serde_mat::vector")]
    pub target_action: DVector<f64>,
    #[serde(with = "serde_mat::mat")]
    pub q_x: DMatrix<f64>,
    #[serde(with = "serde_mat::mat")]
    pub q_u: DMatrix<f64>,
    /// Rate of the exponential running-cost density; must exceed 1.
    pub lambda: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            target_state: DVector::from_vec(vec![5.0, 20.0, 0.0, 0.0]),
            target_action: DVector::zeros(ACTION_DIM),
            q_x: DMatrix::identity(STATE_DIM, STATE_DIM),
            q_u: DMatrix::identity(ACTION_DIM, ACTION_DIM) * 5e-5,
            lambda: 2.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let nx = self.target_state.len();
        let nu = self.target_action.len();
        if self.q_x.shape() != (nx, nx) || self.q_u.shape() != (nu, nu) {
            return Err(Error::Config(
                "cost weight shapes do not match targets".into(),
            ));
        }
        for (name, q) in [("Q_x", &self.q_x), ("Q_u", &self.q_u)] {
            if (q - q.transpose()).amax() > 1e-12 || linalg::min_sym_eigenvalue(q) <= 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be symmetric positive definite"
                )));
            }
        }
        if !(self.lambda > 1.0) {
            return Err(Error::Config(format!(
                "lambda must exceed 1, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.target_state.len()
    }

    pub fn action_dim(&self) -> usize {
        self.target_action.len()
    }
}

/// Quadratic running cost `(x−x*)ᵀQ_x(x−x*) + (u−u*)ᵀQ_u(u−u*)`.
pub fn running_cost(x: &DVector<f64>, u: &DVector<f64>, cm: &CostModel) -> f64 {
    let dx = x - &cm.target_state;
    let du = u - &cm.target_action;
    let value = dx.dot(&(&cm.q_x * &dx)) + du.dot(&(&cm.q_u * &du));
    // Rounding can only push an exactly-zero quadratic form slightly negative.
    value.max(0.0)
}

/// `y = e^{-Y}`.
pub fn cost_observation(running_cost: f64) -> Result<f64> {
    if !(running_cost >= 0.0) {
        return Err(Error::Domain(format!(
            "running cost must be nonnegative, got {running_cost}"
        )));
    }
    Ok((-running_cost).exp())
}

/// Exponential density `λ e^{-λY}` assumed for the running cost.
pub fn cost_pdf(running_cost: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 1.0) {
        return Err(Error::Config(format!("lambda must exceed 1, got {lambda}")));
    }
    if !(running_cost >= 0.0) {
        return Err(Error::Domain(format!(
            "running cost must be nonnegative, got {running_cost}"
        )));
    }
    Ok(lambda * (-lambda * running_cost).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialCondition {
    #[serde(with = "serde_mat::vector")]
    pub mean: DVector<f64>,
    #[serde(with = "serde_mat::mat")]
    pub covariance: DMatrix<f64>,
}

impl InitialCondition {
    /// Point-mass start at rest at `position` with covariance `spread·I₄`.
    pub fn at_rest(position: [f64; 2], spread: f64) -> Self {
        Self {
            mean: DVector::from_vec(vec![position[0], position[1], 0.0, 0.0]),
            covariance: DMatrix::identity(STATE_DIM, STATE_DIM) * spread,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mean.len();
        if self.covariance.shape() != (n, n) {
            return Err(Error::Dimension("initial covariance shape".into()));
        }
        if (&self.covariance - self.covariance.transpose()).amax() > 1e-12 {
            return Err(Error::Domain("initial covariance must be symmetric".into()));
        }
        linalg::psd_sqrt(&self.covariance).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn cfg_free() -> SimConfig {
        SimConfig {
            gravity: 0.0,
            damping: 0.0,
            ..SimConfig::default()
        }
    }

    #[test]
    fn resting_state_is_fixed_point_without_forces() {
        let s = SimState {
            position: [1.0, 2.0],
            velocity: [0.0, 0.0],
        };
        let next = step_dynamics(&s, &DVector::zeros(2), &cfg_free()).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn pure_drift_moves_by_velocity_times_dt() {
        let s = SimState {
            position: [0.0, 0.0],
            velocity: [1.0, 0.0],
        };
        let next = step_dynamics(&s, &DVector::zeros(2), &cfg_free()).unwrap();
        assert!((next.position[0] - 0.1).abs() < 1e-15);
        assert_eq!(next.position[1], 0.0);
    }

    #[test]
    fn thrust_cancels_gravity() {
        let cfg = SimConfig {
            mass: 2.5,
            ..SimConfig::default()
        };
        let s = SimState {
            position: [0.0, 5.0],
            velocity: [0.0, 0.0],
        };
        let next = step_dynamics(&s, &cfg.hover_action(), &cfg).unwrap();
        assert_eq!(next.velocity, [0.0, 0.0]);
        assert_eq!(next.position, [0.0, 5.0]);
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let s = SimState {
            position: [f64::NAN, 0.0],
            velocity: [0.0, 0.0],
        };
        assert!(matches!(
            step_dynamics(&s, &DVector::zeros(2), &SimConfig::default()),
            Err(Error::Domain(_))
        ));
        let ok = SimState {
            position: [0.0, 0.0],
            velocity: [0.0, 0.0],
        };
        let bad_u = DVector::from_vec(vec![f64::INFINITY, 0.0]);
        assert!(step_dynamics(&ok, &bad_u, &SimConfig::default()).is_err());
    }

    #[test]
    fn euler_matrices_agree_with_step() {
        let cfg = SimConfig::default();
        let (a, b, c) = cfg.euler_matrices();
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.7]);
        let u = DVector::from_vec(vec![1.5, -4.0]);
        let stepped = step_dynamics(&SimState::from_vector(&x).unwrap(), &u, &cfg).unwrap();
        let affine = &a * &x + &b * &u + c;
        assert!((stepped.to_vector() - affine).amax() < 1e-14);
    }

    #[test]
    fn zero_noise_observation_is_exact() {
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let mut rng = seed::rng(1);
        assert_eq!(observe_state(&x, 0.0, &mut rng), x);
    }

    #[test]
    fn observation_noise_variance_matches_factor() {
        let x = DVector::zeros(4);
        let mut rng = seed::rng(11);
        let n = 100_000;
        let mut sum = DVector::zeros(4);
        let mut sq = DVector::zeros(4);
        for _ in 0..n {
            let o = observe_state(&x, 0.3, &mut rng);
            sum += &o;
            sq += o.component_mul(&o);
        }
        for i in 0..4 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!(
                (var - 0.3).abs() / 0.3 < 0.05,
                "coordinate {i} variance {var}"
            );
            // Bias vanishes at rate 1/sqrt(N): allow 5 standard errors.
            assert!(mean.abs() < 5.0 * (0.3f64 / n as f64).sqrt());
        }
    }

    #[test]
    fn observation_is_seed_deterministic() {
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let a = observe_state(&x, 0.3, &mut seed::rng(5));
        let b = observe_state(&x, 0.3, &mut seed::rng(5));
        assert_eq!(a, b);
    }

    #[test]
    fn running_cost_cases() {
        let cm = CostModel::default();
        assert_eq!(running_cost(&cm.target_state, &cm.target_action, &cm), 0.0);
        let unit = CostModel {
            q_u: DMatrix::identity(2, 2),
            ..CostModel::default()
        };
        let x = &unit.target_state + DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        assert!((running_cost(&x, &unit.target_action, &unit) - 1.0).abs() < 1e-15);
        let u = DVector::from_vec(vec![1.0, 0.0]);
        assert!((running_cost(&cm.target_state, &u, &cm) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn cost_observation_cases() {
        assert_eq!(cost_observation(0.0).unwrap(), 1.0);
        assert!((cost_observation(1.0).unwrap() - 0.367_879_441_171_442_3).abs() < 1e-15);
        let mut prev = 1.0;
        for y in [1.0, 10.0, 100.0, 700.0, 800.0, 1e6] {
            let v = cost_observation(y).unwrap();
            assert!(v <= prev && v >= 0.0);
            prev = v;
        }
        assert!(matches!(cost_observation(-1e-3), Err(Error::Domain(_))));
    }

    #[test]
    fn cost_pdf_cases() {
        assert_eq!(cost_pdf(0.0, 3.0).unwrap(), 3.0);
        assert!((cost_pdf(std::f64::consts::LN_2 / 2.0, 2.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(cost_pdf(1.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(cost_pdf(1.0, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn cost_pdf_integrates_to_one() {
        // Composite Simpson on [0, 40/λ]; the tail beyond is e^{-40}.
        let lambda = 2.0;
        let upper = 40.0 / lambda;
        let n = 20_000;
        let h = upper / n as f64;
        let mut total = cost_pdf(0.0, lambda).unwrap() + cost_pdf(upper, lambda).unwrap();
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            total += w * cost_pdf(i as f64 * h, lambda).unwrap();
        }
        total *= h / 3.0;
        assert!((total - 1.0).abs() < 1e-9, "integral {total}");
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::default().validate().is_ok());
        assert!(SimConfig {
            dt: 0.0,
            ..SimConfig::default()
        }
        .validate()
        .is_err());
        assert!(SimConfig {
            horizon: 0,
            ..SimConfig::default()
        }
        .validate()
        .is_err());
        assert!(SimConfig {
            mass: -1.0,
            ..SimConfig::default()
        }
        .validate()
        .is_err());
        assert!(CostModel::default().validate().is_ok());
        assert!(CostModel {
            lambda: 1.0,
            ..CostModel::default()
        }
        .validate()
        .is_err());
    }
}
