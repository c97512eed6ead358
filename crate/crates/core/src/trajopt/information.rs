use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::closed_loop::{closed_loop, closed_loop_step, ClosedLoopModel};
use super::controller::{theta_len, ControllerParams, ControllerStep};
use super::kalman::{log_likelihood_from, FilterResult, SmootherResult};
use super::qfunc::q_step;
use crate::dynamics::TimeVaryingLinearModel;
use crate::error::{Error, Result};
use crate::linalg;

/// Where the two curvature matrices come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianSource {
    /// Finite-difference Hessians of `L(·, θ̂^i)` at θ̂^{i+1} and of the filter
    /// log-likelihood at θ̂^i.
    Observed,
    /// Complete-data and observed-data Fisher information of the σ block
    /// (expected negative Hessians), computed in closed form at θ̂^i.
    Expected,
}

/// How `I_Σ = I − A⁻¹B` is materialized from the curvatures `A`, `B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InformationForm {
    /// `I − A⁻¹B` as written.
    Direct,
    /// The similar matrix `I − A^{-1/2} B A^{-1/2}` (same spectrum, symmetric).
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InformationConfig {
    /// Central-difference step for Hessians.
    pub fd_step: f64,
    /// Allowed excursion of the spectrum outside `[0, 1]`.
    pub tol: f64,
    pub source: HessianSource,
    pub form: InformationForm,
}

impl Default for InformationConfig {
    fn default() -> Self {
        Self {
            fd_step: 1e-3,
            tol: 1e-6,
            source: HessianSource::Expected,
            form: InformationForm::Symmetric,
        }
    }
}

/// Information matrix of one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInformation {
    /// Full θ_k block, when it was computed.
    pub full: Option<DMatrix<f64>>,
    /// σ-principal minor `I_Σ`, after clamping.
    pub sigma: DMatrix<f64>,
    /// Eigenvalues of the σ minor before clamping (real parts).
    pub eigenvalues: Vec<f64>,
}

/// Central-difference Hessian with a fixed absolute step; entries are
/// evaluated in parallel into pre-indexed slots.
pub fn fd_hessian<F>(f: &F, x: &DVector<f64>, h: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64> + Sync,
{
    let n = x.len();
    let f0 = f(x)?;
    let shifted = |moves: &[(usize, f64)]| {
        let mut p = x.clone();
        for &(i, d) in moves {
            p[i] += d;
        }
        f(&p)
    };
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            if i == j {
                Ok((shifted(&[(i, h)])? - 2.0 * f0 + shifted(&[(i, -h)])?) / (h * h))
            } else {
                let pp = shifted(&[(i, h), (j, h)])?;
                let pm = shifted(&[(i, h), (j, -h)])?;
                let mp = shifted(&[(i, -h), (j, h)])?;
                let mm = shifted(&[(i, -h), (j, -h)])?;
                Ok((pp - pm - mp + mm) / (4.0 * h * h))
            }
        })
        .collect::<Result<_>>()?;
    let mut hess = DMatrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(values) {
        hess[(i, j)] = v;
        hess[(j, i)] = v;
    }
    Ok(hess)
}

/// Orthonormal basis of directions along which `Σ = SᵀS` does not change:
/// `δS = W S` for antisymmetric `W`. Embedded at `offset` in a vector of length `len`.
pub fn rotation_directions(
    sqrt_cov: &DMatrix<f64>,
    offset: usize,
    len: usize,
) -> Vec<DVector<f64>> {
    let nu = sqrt_cov.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for a in 0..nu {
        for b in a + 1..nu {
            let mut w = DMatrix::zeros(nu, nu);
            w[(a, b)] = 1.0;
            w[(b, a)] = -1.0;
            let ws = w * sqrt_cov;
            let mut v = DVector::zeros(len);
            v.rows_mut(offset, nu * nu).copy_from_slice(ws.as_slice());
            for q in &basis {
                v -= q * q.dot(&v);
            }
            let norm = v.norm();
            if norm > 1e-10 {
                basis.push(v / norm);
            }
        }
    }
    basis
}

/// `I − (−H_Q)⁻¹(−H_L)` restricted to the complement of `null` (directions
/// in which both curvatures vanish identically); `null` directions map to themselves.
pub fn information_from_hessians(
    h_q: &DMatrix<f64>,
    h_l: &DMatrix<f64>,
    null: &[DVector<f64>],
) -> Result<DMatrix<f64>> {
    let n = h_q.nrows();
    let (a, b) = project_out(&(-h_q), &(-h_l), null);
    let lu = a.lu();
    let ratio = lu
        .solve(&b)
        .ok_or_else(|| Error::Numerical("complete-data curvature is singular".into()))?;
    Ok(DMatrix::identity(n, n) - ratio)
}

fn project_out(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    null: &[DVector<f64>],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut proj = DMatrix::<f64>::identity(n, n);
    let mut keep = DMatrix::<f64>::zeros(n, n);
    for v in null {
        proj -= v * v.transpose();
        keep += v * v.transpose();
    }
    (&proj * a * &proj + keep, &proj * b * &proj)
}

/// Principal minor over `range`.
pub fn minor(m: &DMatrix<f64>, range: std::ops::Range<usize>) -> DMatrix<f64> {
    m.view((range.start, range.start), (range.len(), range.len()))
        .into_owned()
}

/// Real parts of the eigenvalues; fails if any imaginary part exceeds `tol`.
fn real_spectrum(m: &DMatrix<f64>, tol: f64, step: usize) -> Result<Vec<f64>> {
    let ev = m.complex_eigenvalues();
    if let Some(z) = ev.iter().find(|z| z.im.abs() > tol) {
        return Err(Error::InformationBound {
            step,
            eigenvalue: format!("{:.6e}{:+.6e}i", z.re, z.im),
        });
    }
    Ok(ev.iter().map(|z| z.re).collect())
}

fn check_bounds(eigenvalues: &[f64], tol: f64, step: usize) -> Result<()> {
    match eigenvalues
        .iter()
        .find(|&&v| !(v >= -tol && v <= 1.0 + tol))
    {
        Some(v) => Err(Error::InformationBound {
            step,
            eigenvalue: format!("{v:.6e}"),
        }),
        None => Ok(()),
    }
}

/// `I − A⁻¹B` for symmetric curvatures with `A ≻ 0`, built through the
/// symmetric matrix `M = A^{-1/2} B A^{-1/2}` whose spectrum is clamped to `[0, 1]`.
fn information_from_curvatures(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    form: InformationForm,
    tol: f64,
    step: usize,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = a.nrows();
    let eig_a = SymmetricEigen::new(linalg::symmetrize(a));
    if eig_a.eigenvalues.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Numerical(format!(
            "complete-data information at step {step} is not positive definite"
        )));
    }
    let root = &eig_a.eigenvectors
        * DMatrix::from_diagonal(&eig_a.eigenvalues.map(f64::sqrt))
        * eig_a.eigenvectors.transpose();
    let inv_root = &eig_a.eigenvectors
        * DMatrix::from_diagonal(&eig_a.eigenvalues.map(|v| 1.0 / v.sqrt()))
        * eig_a.eigenvectors.transpose();
    let m = SymmetricEigen::new(linalg::symmetrize(&(&inv_root * b * &inv_root)));
    let eigenvalues: Vec<f64> = m.eigenvalues.iter().map(|v| 1.0 - v).collect();
    check_bounds(&eigenvalues, tol, step)?;
    let clamped = m.eigenvalues.map(|v| 1.0 - (1.0 - v).clamp(0.0, 1.0));
    let m_clamped = &m.eigenvectors * DMatrix::from_diagonal(&clamped) * m.eigenvectors.transpose();
    let sym = DMatrix::identity(n, n) - m_clamped;
    let out = match form {
        InformationForm::Symmetric => linalg::symmetrize(&sym),
        InformationForm::Direct => inv_root * sym * root,
    };
    Ok((out, eigenvalues))
}

/// Derivative of `Σ = SᵀS` with respect to entry `i` of vec(S) (column-major).
fn d_sigma(sqrt_cov: &DMatrix<f64>, i: usize) -> DMatrix<f64> {
    let nu = sqrt_cov.nrows();
    let mut e = DMatrix::zeros(nu, nu);
    e[(i % nu, i / nu)] = 1.0;
    let left = e.transpose() * sqrt_cov;
    &left + left.transpose()
}

/// Complete-data Fisher information of the σ_k block.
pub fn complete_fisher_sigma(
    model: &TimeVaryingLinearModel,
    ctrl: &ControllerStep,
    k: usize,
) -> Result<DMatrix<f64>> {
    let m = &model.steps[k];
    let s = closed_loop_step(m, ctrl);
    let q_inv = linalg::spd_inverse(&s.process_cov)?;
    let r = s.obs_cov[(0, 0)];
    let n = ctrl.action_dim() * ctrl.action_dim();
    let dq: Vec<DMatrix<f64>> = (0..n)
        .map(|i| &q_inv * (&m.b * d_sigma(&ctrl.sqrt_cov, i) * m.b.transpose()))
        .collect();
    let dr: Vec<f64> = (0..n)
        .map(|i| (&m.b_y * d_sigma(&ctrl.sqrt_cov, i) * m.b_y.transpose())[(0, 0)] / r)
        .collect();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        0.5 * ((&dq[i] * &dq[j]).trace() + dr[i] * dr[j])
    }))
}

/// Marginal covariance of `(y_1..y_K)` and, for each step, the state
/// propagators needed to differentiate it.
struct MarginalY {
    cov_inv: DMatrix<f64>,
    /// `rows[j][k] = C̄_j Φ(j, k+1)` for `j > k`, i.e. how process noise
    /// entering after step `k` reaches `y_j`.
    reach: Vec<Vec<DMatrix<f64>>>,
}

fn marginal_y(clm: &ClosedLoopModel) -> Result<MarginalY> {
    let k_len = clm.horizon();
    let n = clm.state_dim();
    if clm.obs_dim() != 1 {
        return Err(Error::Dimension(
            "expected information needs a scalar observation channel".into(),
        ));
    }
    // Unconditional state covariances P_j.
    let mut p = vec![linalg::symmetrize(&clm.init_cov)];
    for s in &clm.steps {
        let last = p.last().expect("non-empty");
        p.push(linalg::symmetrize(
            &(&s.transition * last * s.transition.transpose() + &s.process_cov),
        ));
    }
    // Φ(j, l) C̄ products: cov(y_j, y_l) = C̄_j Φ(j,l) P_l C̄_lᵀ for j ≥ l.
    let mut cov = DMatrix::zeros(k_len, k_len);
    for l in 0..k_len {
        let mut prop = DMatrix::<f64>::identity(n, n);
        for j in l..k_len {
            let v =
                (&clm.steps[j].observation * &prop * &p[l] * clm.steps[l].observation.transpose())
                    [(0, 0)];
            cov[(j, l)] = v;
            cov[(l, j)] = v;
            prop = &clm.steps[j].transition * prop;
        }
        cov[(l, l)] += clm.steps[l].obs_cov[(0, 0)];
    }
    let mut reach = vec![Vec::new(); k_len];
    for (k, row) in reach.iter_mut().enumerate() {
        let mut prop = DMatrix::<f64>::identity(n, n);
        for j in k + 1..k_len {
            row.push(&clm.steps[j].observation * &prop);
            prop = &clm.steps[j].transition * prop;
        }
    }
    Ok(MarginalY {
        cov_inv: linalg::spd_inverse(&cov)?,
        reach,
    })
}

/// Observed-data Fisher information of the σ_k block given the marginal of Y.
fn observed_fisher_sigma(
    model: &TimeVaryingLinearModel,
    ctrl: &ControllerStep,
    k: usize,
    my: &MarginalY,
) -> DMatrix<f64> {
    let m = &model.steps[k];
    let k_len = my.cov_inv.nrows();
    let n = ctrl.action_dim() * ctrl.action_dim();
    let derivs: Vec<DMatrix<f64>> = (0..n)
        .map(|i| {
            let ds = d_sigma(&ctrl.sqrt_cov, i);
            let dq = &m.b * &ds * m.b.transpose();
            let mut d = DMatrix::zeros(k_len, k_len);
            for (a, ga) in my.reach[k].iter().enumerate() {
                for (b, gb) in my.reach[k].iter().enumerate() {
                    d[(k + 1 + a, k + 1 + b)] = (ga * &dq * gb.transpose())[(0, 0)];
                }
            }
            d[(k, k)] += (&m.b_y * &ds * m.b_y.transpose())[(0, 0)];
            &my.cov_inv * d
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| 0.5 * (&derivs[i] * &derivs[j]).trace())
}

/// Observed-data log-likelihood with step `k`'s controller replaced by θ_k.
#[allow(clippy::too_many_arguments)]
fn perturbed_log_likelihood(
    model: &TimeVaryingLinearModel,
    clm: &ClosedLoopModel,
    filter: &FilterResult,
    ys: &[DVector<f64>],
    k: usize,
    theta_k: &DVector<f64>,
    dims: (usize, usize),
    prefix: f64,
) -> Result<f64> {
    let ctrl = ControllerStep::from_theta(theta_k, dims.0, dims.1)?;
    let mut steps = clm.steps[k..].to_vec();
    steps[0] = closed_loop_step(&model.steps[k], &ctrl);
    Ok(prefix
        + log_likelihood_from(
            &steps,
            &ys[k..],
            &filter.predicted_means[k],
            &filter.predicted_covs[k],
        )?)
}

fn suffix_log_likelihood(
    clm: &ClosedLoopModel,
    filter: &FilterResult,
    ys: &[DVector<f64>],
    k: usize,
) -> Result<f64> {
    log_likelihood_from(
        &clm.steps[k..],
        &ys[k..],
        &filter.predicted_means[k],
        &filter.predicted_covs[k],
    )
}

/// Computes `I_Σ` for every step. `current` is θ̂^i (with its smoother and
/// filter), `candidate` the M-step output θ̂^{i+1}.
pub fn information_matrix(
    model: &TimeVaryingLinearModel,
    current: &ControllerParams,
    candidate: &ControllerParams,
    sm: &SmootherResult,
    ys: &[DVector<f64>],
    cfg: &InformationConfig,
) -> Result<Vec<StepInformation>> {
    let (nx, nu) = (current.state_dim(), current.action_dim());
    let sigma_range = ControllerStep::sigma_range(nx, nu);
    let clm = closed_loop(model, current)?;
    match cfg.source {
        HessianSource::Expected => {
            let my = marginal_y(&clm)?;
            (0..current.horizon())
                .into_par_iter()
                .map(|k| {
                    let ctrl = &current.steps[k];
                    let a = complete_fisher_sigma(model, ctrl, k)?;
                    let b = observed_fisher_sigma(model, ctrl, k, &my);
                    let null = rotation_directions(&ctrl.sqrt_cov, 0, nu * nu);
                    let (a, b) = project_out(&a, &b, &null);
                    let (sigma, eigenvalues) =
                        information_from_curvatures(&a, &b, cfg.form, cfg.tol, k)?;
                    Ok(StepInformation {
                        full: None,
                        sigma,
                        eigenvalues,
                    })
                })
                .collect()
        }
        HessianSource::Observed => {
            let filter = &sm.filter;
            let len = theta_len(nx, nu);
            (0..current.horizon())
                .into_par_iter()
                .map(|k| {
                    let q_at = candidate.steps[k].theta();
                    let q_obj = |t: &DVector<f64>| -> Result<f64> {
                        let c = ControllerStep::from_theta(t, nx, nu)?;
                        q_step(&model.steps[k], &c, sm, k, &ys[k])
                    };
                    let h_q = fd_hessian(&q_obj, &q_at, cfg.fd_step)?;
                    let l_at = current.steps[k].theta();
                    // Log-likelihood contribution of y_1..y_{k−1}, which θ_k cannot affect.
                    let prefix =
                        filter.log_likelihood - suffix_log_likelihood(&clm, filter, ys, k)?;
                    let l_obj = |t: &DVector<f64>| {
                        perturbed_log_likelihood(model, &clm, filter, ys, k, t, (nx, nu), prefix)
                    };
                    let h_l = fd_hessian(&l_obj, &l_at, cfg.fd_step)?;
                    let null =
                        rotation_directions(&current.steps[k].sqrt_cov, sigma_range.start, len);
                    let full = information_from_hessians(&h_q, &h_l, &null)?;
                    let raw = minor(&full, sigma_range.clone());
                    let eigenvalues = real_spectrum(&raw, cfg.tol, k)?;
                    check_bounds(&eigenvalues, cfg.tol, k)?;
                    let sigma = match cfg.form {
                        InformationForm::Direct => raw,
                        InformationForm::Symmetric => linalg::symmetrize(&raw),
                    };
                    Ok(StepInformation {
                        full: Some(full),
                        sigma,
                        eigenvalues,
                    })
                })
                .collect()
        }
    }
}

/// `σ^{i+1} = I_Σ σ^i`, reshaped into `Σ^{1/2}` with the covariance floor applied.
pub fn covariance_update(step: &ControllerStep, i_sigma: &DMatrix<f64>) -> Result<ControllerStep> {
    let nu = step.action_dim();
    if i_sigma.shape() != (nu * nu, nu * nu) {
        return Err(Error::Dimension(format!(
            "I_Σ is {:?}, expected {}×{}",
            i_sigma.shape(),
            nu * nu,
            nu * nu
        )));
    }
    let sigma = DVector::from_column_slice(step.sqrt_cov.as_slice());
    let next = i_sigma * sigma;
    Ok(step.with_sqrt_cov(linalg::unvec(next.as_slice(), nu, nu)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajopt::controller::COVARIANCE_FLOOR;

    #[test]
    fn flat_observed_likelihood_gives_identity() {
        let h_q = DMatrix::from_row_slice(2, 2, &[-3.0, 0.5, 0.5, -2.0]);
        let i = information_from_hessians(&h_q, &DMatrix::zeros(2, 2), &[]).unwrap();
        assert!((i - DMatrix::identity(2, 2)).amax() < 1e-15);
    }

    #[test]
    fn equal_curvatures_give_zero() {
        let h = DMatrix::from_row_slice(2, 2, &[-3.0, 0.5, 0.5, -2.0]);
        let i = information_from_hessians(&h, &h, &[]).unwrap();
        assert!(i.amax() < 1e-14);
    }

    #[test]
    fn scalar_quadratics() {
        for (h1, h2) in [(2.0, 0.5), (4.0, 1.0), (1.0, 1.0), (10.0, 0.0)] {
            let fq = |x: &DVector<f64>| -> Result<f64> { Ok(-0.5 * h1 * x[0] * x[0]) };
            let fl = |x: &DVector<f64>| -> Result<f64> { Ok(-0.5 * h2 * (x[0] - 0.3).powi(2)) };
            let x = DVector::from_element(1, 0.7);
            let hq = fd_hessian(&fq, &x, 1e-3).unwrap();
            let hl = fd_hessian(&fl, &x, 1e-3).unwrap();
            let i = information_from_hessians(&hq, &hl, &[]).unwrap();
            assert!((i[(0, 0)] - (1.0 - h2 / h1)).abs() < 1e-8, "{h1} {h2}");
        }
    }

    #[test]
    fn rotations_leave_covariance_unchanged() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.8]);
        let dirs = rotation_directions(&s, 0, 4);
        assert_eq!(dirs.len(), 1);
        let moved = &s + linalg::unvec(dirs[0].as_slice(), 2, 2) * 1e-6;
        let change = (moved.transpose() * &moved - s.transpose() * &s).amax();
        assert!(change < 1e-11);
    }

    #[test]
    fn covariance_update_cases() {
        let step = ControllerStep::new(
            DMatrix::zeros(2, 4),
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.7]),
        );
        let same = covariance_update(&step, &DMatrix::identity(4, 4)).unwrap();
        assert_eq!(same.sqrt_cov, step.sqrt_cov);
        let zero = covariance_update(&step, &DMatrix::zeros(4, 4)).unwrap();
        assert!((zero.covariance - DMatrix::identity(2, 2) * COVARIANCE_FLOOR).amax() < 1e-20);
    }

    #[test]
    fn curvature_form_spectrum_in_unit_interval() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        for form in [InformationForm::Direct, InformationForm::Symmetric] {
            let (i, ev) = information_from_curvatures(&a, &b, form, 1e-6, 0).unwrap();
            assert!(ev.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let direct = DMatrix::identity(2, 2) - a.clone().lu().solve(&b).unwrap();
            let mut got = i.complex_eigenvalues().map(|z| z.re).as_slice().to_vec();
            let mut want = direct
                .complex_eigenvalues()
                .map(|z| z.re)
                .as_slice()
                .to_vec();
            got.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }
}
