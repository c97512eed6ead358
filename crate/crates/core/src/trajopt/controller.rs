use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::serde_mat;
use crate::sim::ActionPolicy;

pub const CONTROLLER_SCHEMA_VERSION: u32 = 1;
/// Eigenvalue floor applied to every controller covariance.
pub const COVARIANCE_FLOOR: f64 = 1e-8;

/// Box defining the compact parameter set Θ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThetaBounds {
    /// Bound on `|f|` and `|e|` entries.
    pub gain: f64,
    /// Largest singular value of `Σ^{1/2}`.
    pub max_singular: f64,
}

impl Default for ThetaBounds {
    fn default() -> Self {
        Self {
            gain: 1e3,
            max_singular: 10.0,
        }
    }
}

/// One step of a linear-Gaussian controller `u ~ N(F x + e, Σ)`, `Σ = SᵀS`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerStep {
    #[serde(with = "serde_mat::mat")]
    pub gain: DMatrix<f64>,
    #[serde(with = "serde_mat::vector")]
    pub offset: DVector<f64>,
    /// `Σ^{1/2}`, with `Σ = (Σ^{1/2})ᵀ Σ^{1/2}`.
    #[serde(with = "serde_mat::mat")]
    pub sqrt_cov: DMatrix<f64>,
    #[serde(with = "serde_mat::mat")]
    pub covariance: DMatrix<f64>,
}

impl ControllerStep {
    pub fn new(gain: DMatrix<f64>, offset: DVector<f64>, sqrt_cov: DMatrix<f64>) -> Self {
        let covariance = linalg::symmetrize(&(sqrt_cov.transpose() * &sqrt_cov));
        Self {
            gain,
            offset,
            sqrt_cov,
            covariance,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.gain.ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.gain.nrows()
    }

    /// Length of θ_k: `n_u·n_x + n_u + n_u²`.
    pub fn theta_len(&self) -> usize {
        theta_len(self.state_dim(), self.action_dim())
    }

    /// θ_k = col(vec F, e, vec Σ^{1/2}), column-major.
    pub fn theta(&self) -> DVector<f64> {
        let mut v = linalg::vec_of(&self.gain);
        v.extend(self.offset.iter());
        v.extend(linalg::vec_of(&self.sqrt_cov));
        DVector::from_vec(v)
    }

    pub fn from_theta(theta: &DVector<f64>, state_dim: usize, action_dim: usize) -> Result<Self> {
        let (nx, nu) = (state_dim, action_dim);
        if theta.len() != theta_len(nx, nu) {
            return Err(Error::Dimension(format!(
                "θ_k has {} entries, expected {}",
                theta.len(),
                theta_len(nx, nu)
            )));
        }
        let s = theta.as_slice();
        let gain = linalg::unvec(&s[..nu * nx], nu, nx);
        let offset = DVector::from_column_slice(&s[nu * nx..nu * nx + nu]);
        let sqrt_cov = linalg::unvec(&s[nu * nx + nu..], nu, nu);
        Ok(Self::new(gain, offset, sqrt_cov))
    }

    /// Index range of the σ components inside θ_k.
    pub fn sigma_range(state_dim: usize, action_dim: usize) -> std::ops::Range<usize> {
        let start = action_dim * state_dim + action_dim;
        start..start + action_dim * action_dim
    }

    /// Replaces `Σ^{1/2}` and refreshes Σ, applying the eigenvalue floor.
    pub fn with_sqrt_cov(&self, sqrt_cov: DMatrix<f64>) -> Self {
        let cov = linalg::symmetrize(&(sqrt_cov.transpose() * &sqrt_cov));
        let eig = nalgebra::SymmetricEigen::new(cov.clone());
        if eig.eigenvalues.iter().all(|&v| v >= COVARIANCE_FLOOR) {
            return Self::new(self.gain.clone(), self.offset.clone(), sqrt_cov);
        }
        let floored = eig.eigenvalues.map(|v| v.max(COVARIANCE_FLOOR).sqrt());
        // Symmetric root of the floored covariance.
        let root =
            &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
        Self::new(
            self.gain.clone(),
            self.offset.clone(),
            linalg::symmetrize(&root),
        )
    }

    /// Clips `F`, `e` to the box and the singular values of `Σ^{1/2}` to `(0, max]`.
    pub fn project(&self, bounds: &ThetaBounds) -> Self {
        let gain = self.gain.map(|v| v.clamp(-bounds.gain, bounds.gain));
        let offset = self.offset.map(|v| v.clamp(-bounds.gain, bounds.gain));
        let svd = self.sqrt_cov.clone().svd(true, true);
        let sqrt_cov = if svd
            .singular_values
            .iter()
            .all(|&s| s <= bounds.max_singular)
        {
            self.sqrt_cov.clone()
        } else {
            let clipped = svd.singular_values.map(|s| s.min(bounds.max_singular));
            svd.u.as_ref().expect("requested")
                * DMatrix::from_diagonal(&clipped)
                * svd.v_t.as_ref().expect("requested")
        };
        Self {
            gain,
            offset,
            ..self.clone()
        }
        .with_sqrt_cov(sqrt_cov)
    }
}

pub fn theta_len(state_dim: usize, action_dim: usize) -> usize {
    action_dim * state_dim + action_dim + action_dim * action_dim
}

/// Time-varying linear-Gaussian controller for one initial condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    pub schema_version: u32,
    pub steps: Vec<ControllerStep>,
    pub bounds: ThetaBounds,
}

impl ControllerParams {
    pub fn new(steps: Vec<ControllerStep>, bounds: ThetaBounds) -> Result<Self> {
        let p = Self {
            schema_version: CONTROLLER_SCHEMA_VERSION,
            steps,
            bounds,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn state_dim(&self) -> usize {
        self.steps.first().map_or(0, |s| s.state_dim())
    }

    pub fn action_dim(&self) -> usize {
        self.steps.first().map_or(0, |s| s.action_dim())
    }

    /// Σ_k Tr Σ_k.
    pub fn total_trace(&self) -> f64 {
        self.steps.iter().map(|s| s.covariance.trace()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, nu) = (self.state_dim(), self.action_dim());
        if self.steps.is_empty() {
            return Err(Error::Config("controller has no steps".into()));
        }
        for (k, s) in self.steps.iter().enumerate() {
            if s.gain.shape() != (nu, nx) || s.offset.len() != nu || s.sqrt_cov.shape() != (nu, nu)
            {
                return Err(Error::Dimension(format!(
                    "controller step {k} has inconsistent shapes"
                )));
            }
            if !linalg::all_finite_m(&s.gain)
                || !linalg::all_finite_v(&s.offset)
                || !linalg::all_finite_m(&s.sqrt_cov)
            {
                return Err(Error::Domain(format!("controller step {k} is not finite")));
            }
            if linalg::min_sym_eigenvalue(&s.covariance) <= 0.0 {
                return Err(Error::Domain(format!(
                    "controller covariance at step {k} is not positive definite"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if p.schema_version != CONTROLLER_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported controller schema {}",
                p.schema_version
            )));
        }
        p.validate()?;
        Ok(p)
    }
}

impl ActionPolicy for ControllerParams {
    fn horizon(&self) -> usize {
        self.steps.len()
    }

    fn action_mean(&self, step: usize, observed: &DVector<f64>) -> DVector<f64> {
        let s = &self.steps[step];
        &s.gain * observed + &s.offset
    }

    fn action_covariance(&self, step: usize) -> DMatrix<f64> {
        self.steps[step].covariance.clone()
    }
}
