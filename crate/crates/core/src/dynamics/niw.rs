use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::vbgmm::GmmModel;
use crate::error::{Error, Result};
use crate::linalg;
use crate::serde_mat;

/// Solitary normal-inverse-Wishart prior summarizing the GMM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiwPrior {
    /// ω⁰.
    #[serde(with = "serde_mat::vector")]
    pub mean: DVector<f64>,
    /// Λ⁰, the moment-matched mixture scatter.
    #[serde(with = "serde_mat::mat")]
    pub scatter: DMatrix<f64>,
    pub n0: f64,
    pub k0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMoments {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub count: usize,
}

/// Posterior joint Gaussian over `[x_k; u_k; x_{k+1}; y_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGaussian {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub warnings: Vec<String>,
}

/// `ω⁰ = Σ w_f ω_f`, `Λ⁰ = Σ w_f (Σ_f + (ω_f−ω⁰)(ω_f−ω⁰)ᵀ)`.
pub fn build_niw_prior(gmm: &GmmModel, n0: f64, k0: f64) -> Result<NiwPrior> {
    let d = gmm.dim();
    if d == 0 {
        return Err(Error::Config("empty GMM".into()));
    }
    if !(n0 > d as f64 - 1.0) || !(k0 > 0.0) {
        return Err(Error::Config(format!(
            "NIW strengths invalid: n0={n0}, k0={k0}, dim={d}"
        )));
    }
    let mean = gmm
        .components
        .iter()
        .fold(DVector::zeros(d), |acc, c| acc + &c.mean * c.weight);
    let mut scatter = DMatrix::zeros(d, d);
    for c in &gmm.components {
        if c.weight == 0.0 {
            continue;
        }
        let dm = &c.mean - &mean;
        scatter += (&c.covariance + &dm * dm.transpose()) * c.weight;
    }
    Ok(NiwPrior {
        mean,
        scatter: linalg::symmetrize(&scatter),
        n0,
        k0,
    })
}

/// Maximum-likelihood mean and covariance (1/M normalization) of the rows.
pub fn empirical_moments(rows: &[DVector<f64>]) -> Result<EmpiricalMoments> {
    let m = rows.len();
    if m < 2 {
        return Err(Error::Config(format!(
            "need at least 2 samples per step, got {m}"
        )));
    }
    let d = rows[0].len();
    if rows
        .iter()
        .any(|r| r.len() != d || !linalg::all_finite_v(r))
    {
        return Err(Error::Domain(
            "dataset rows must be finite and equally sized".into(),
        ));
    }
    let mean = rows.iter().fold(DVector::zeros(d), |acc, r| acc + r) / m as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let dr = r - &mean;
        cov.ger(1.0, &dr, &dr, 1.0);
    }
    cov /= m as f64;
    Ok(EmpiricalMoments {
        mean,
        covariance: linalg::symmetrize(&cov),
        count: m,
    })
}

/// Conjugate update of the joint Gaussian.
///
/// The default form treats the prior scale matrix as `n₀·Λ⁰`:
/// `Λ = (n₀Λ⁰ + MΛ_emp + κ)/(M+n₀)`. With `literal = true` the numerator uses
/// `(Λ⁰)⁻¹` in place of `n₀Λ⁰`.
pub fn bayes_update(
    prior: &NiwPrior,
    emp: &EmpiricalMoments,
    literal: bool,
) -> Result<JointGaussian> {
    let d = prior.mean.len();
    if emp.mean.len() != d {
        return Err(Error::Dimension("prior and data dimensions differ".into()));
    }
    let m = emp.count as f64;
    let (k0, n0) = (prior.k0, prior.n0);
    let mean = (&prior.mean * k0 + &emp.mean * m) / (k0 + m);
    let dm = &emp.mean - &prior.mean;
    let kappa = &dm * dm.transpose() * (k0 * m / (k0 + m));
    let mut warnings = Vec::new();
    let prior_term = if literal {
        match nalgebra::Cholesky::new(linalg::symmetrize(&prior.scatter)) {
            Some(c) => c.inverse(),
            None => {
                warnings.push("singular prior scatter regularized before inversion".to_string());
                log::warn!("singular prior scatter regularized before inversion");
                linalg::spd_inverse(
                    &(&prior.scatter + DMatrix::identity(d, d) * linalg::JITTER_BASE),
                )?
            }
        }
    } else {
        &prior.scatter * n0
    };
    let cov = (prior_term + &emp.covariance * m + kappa) / (m + n0);
    Ok(JointGaussian {
        mean,
        covariance: linalg::make_pd(&cov)?,
        warnings,
    })
}
