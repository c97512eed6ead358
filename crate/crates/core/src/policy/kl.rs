use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::net::{mlp_forward, PolicyNet};
use crate::error::{Error, Result};
use crate::linalg;
use crate::serde_mat;
use crate::sim::Trajectory;
use crate::trajopt::ControllerParams;

/// One supervised pair `(x_k^{i,c,s}, μ_k^{i,c,s})` with weight `(Σ̂_k^{i,c})⁻¹`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    #[serde(with = "serde_mat::vector")]
    pub state: DVector<f64>,
    #[serde(with = "serde_mat::vector")]
    pub target: DVector<f64>,
    #[serde(with = "serde_mat::mat")]
    pub weight: DMatrix<f64>,
    pub step: usize,
    pub condition: usize,
    pub sample: usize,
    pub iteration: usize,
}

impl TrainingSample {
    pub fn validate(&self) -> Result<()> {
        let nu = self.target.len();
        if self.weight.shape() != (nu, nu) {
            return Err(Error::Dimension(format!(
                "weight shape {:?} for a {nu}-dim target",
                self.weight.shape()
            )));
        }
        if !linalg::all_finite_v(&self.state) || !linalg::all_finite_v(&self.target) {
            return Err(Error::Domain(
                "training sample has non-finite entries".into(),
            ));
        }
        check_pd(&self.weight, "sample weight")
    }
}

fn check_pd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !linalg::all_finite_m(m) || (m - m.transpose()).amax() > 1e-9 * m.amax().max(1.0) {
        return Err(Error::Domain(format!("{what} is not finite and symmetric")));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::Domain(format!("{what} is not positive definite")));
    }
    Ok(())
}

/// KL between `N(μ^L(x), Σ^L_k)` and the local policy `N(μ, Σ̂)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlLoss {
    /// ½(μ^L − μ)ᵀ Σ̂⁻¹ (μ^L − μ), the only term that depends on the network.
    pub quadratic: f64,
    /// The standard Gaussian KL including the covariance terms.
    pub full: f64,
}

/// `KL(N(mp, cp) ‖ N(mq, cq))`.
pub fn gaussian_kl(
    mp: &DVector<f64>,
    cp: &DMatrix<f64>,
    mq: &DVector<f64>,
    cq: &DMatrix<f64>,
) -> Result<f64> {
    check_pd(cp, "first covariance")?;
    check_pd(cq, "second covariance")?;
    let chol_q = cq.clone().cholesky().expect("checked above");
    let d = mp - mq;
    let trace = chol_q.solve(cp).trace();
    let log_det_q = 2.0 * chol_q.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_det_p = linalg::spd_log_det(cp)?;
    let kl = 0.5 * (trace + d.dot(&chol_q.solve(&d)) - mp.len() as f64 + log_det_q - log_det_p);
    Ok(kl.max(0.0))
}

pub fn kl_sample_loss(
    net: &PolicyNet,
    sample: &TrainingSample,
    sigma_l: &DMatrix<f64>,
) -> Result<KlLoss> {
    sample.validate()?;
    check_pd(sigma_l, "Σ^L")?;
    let mu = mlp_forward(net, &sample.state);
    if mu.len() != sample.target.len() || sigma_l.nrows() != mu.len() {
        return Err(Error::Dimension(
            "network output does not match the sample".into(),
        ));
    }
    let d = &mu - &sample.target;
    let quadratic = 0.5 * d.dot(&(&sample.weight * &d));
    let local_cov = linalg::spd_inverse(&sample.weight)?;
    let full = gaussian_kl(&mu, sigma_l, &sample.target, &local_cov)?;
    Ok(KlLoss { quadratic, full })
}

/// Rollouts of one initial condition under its local controller θ̂^{i,c}.
pub struct ConditionRollouts<'a> {
    pub condition: usize,
    pub controller: &'a ControllerParams,
    pub trajectories: &'a [Trajectory],
}

/// `K·C·S` samples pairing each observed state with the local policy's mean
/// at that state. `samples_per_condition` is S.
pub fn build_training_set(
    iteration: usize,
    rollouts: &[ConditionRollouts<'_>],
    samples_per_condition: usize,
) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for r in rollouts {
        let theta = r.controller;
        let weights = theta
            .steps
            .iter()
            .map(|s| linalg::spd_inverse(&s.covariance).map(|w| linalg::symmetrize(&w)))
            .collect::<Result<Vec<_>>>()?;
        for s in 0..samples_per_condition {
            let traj = r
                .trajectories
                .get(s)
                .filter(|t| {
                    t.horizon() >= theta.horizon() && t.observed_states.len() >= theta.horizon()
                })
                .ok_or_else(|| {
                    Error::Missing(format!("rollout for condition {} sample {s}", r.condition))
                })?;
            for (k, step) in theta.steps.iter().enumerate() {
                let state = traj.observed(k);
                out.push(TrainingSample {
                    target: &step.gain * &state + &step.offset,
                    state,
                    weight: weights[k].clone(),
                    step: k,
                    condition: r.condition,
                    sample: s,
                    iteration,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::mlp::Mlp;
    use crate::policy::net::AdamConfig;

    fn zero_net() -> PolicyNet {
        PolicyNet::new(Mlp::zeros(&[4, 3, 2]).unwrap(), AdamConfig::default())
    }

    fn sample(target: [f64; 2], weight: DMatrix<f64>) -> TrainingSample {
        TrainingSample {
            state: DVector::zeros(4),
            target: DVector::from_row_slice(&target),
            weight,
            step: 0,
            condition: 0,
            sample: 0,
            iteration: 0,
        }
    }

    #[test]
    fn identical_gaussians_have_zero_kl() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let s = sample([0.0, 0.0], linalg::spd_inverse(&cov).unwrap());
        let l = kl_sample_loss(&zero_net(), &s, &cov).unwrap();
        assert!(l.quadratic.abs() < 1e-15);
        assert!(l.full.abs() < 1e-12);
    }

    #[test]
    fn unit_deviation_quadratic_term() {
        let s = sample([1.0, 0.0], DMatrix::identity(2, 2));
        let l = kl_sample_loss(&zero_net(), &s, &DMatrix::identity(2, 2)).unwrap();
        assert!((l.quadratic - 0.5).abs() < 1e-15);
        assert!((l.full - 0.5).abs() < 1e-12);
    }

    #[test]
    fn indefinite_weight_is_rejected() {
        let s = sample(
            [0.0, 0.0],
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
        );
        assert!(kl_sample_loss(&zero_net(), &s, &DMatrix::identity(2, 2)).is_err());
    }
}
