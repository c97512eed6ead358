use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// How the local covariances are combined into Σ^L_k.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    /// Harmonic mean of the full matrices.
    Full,
    /// Harmonic mean of the diagonal matrices of sorted eigenvalues.
    #[default]
    DiagEigen,
    /// Harmonic mean of the diagonal matrices of the diagonal entries.
    DiagEntries,
}

fn diagonalized(m: &DMatrix<f64>, mode: CovarianceMode) -> DMatrix<f64> {
    match mode {
        CovarianceMode::Full => m.clone(),
        CovarianceMode::DiagEigen => {
            let mut ev: Vec<f64> = linalg::sym_eigenvalues(m).iter().copied().collect();
            ev.sort_by(|a, b| a.total_cmp(b));
            DMatrix::from_diagonal(&nalgebra::DVector::from_vec(ev))
        }
        CovarianceMode::DiagEntries => DMatrix::from_diagonal(&m.diagonal()),
    }
}

fn strict_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !linalg::all_finite_m(m) {
        return Err(Error::Domain(format!("{what} is not finite")));
    }
    let chol = linalg::symmetrize(m)
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("{what} is singular or indefinite")))?;
    Ok(linalg::symmetrize(&chol.inverse()))
}

/// Σ^L_k = (1/C Σ_c D(Σ̂_k^{I,c})⁻¹)⁻¹, with `locals[c][k]` and `D` given by
/// `mode`.
pub fn global_covariance(
    locals: &[Vec<DMatrix<f64>>],
    mode: CovarianceMode,
) -> Result<Vec<DMatrix<f64>>> {
    let first = locals
        .first()
        .ok_or_else(|| Error::Domain("no local covariances".into()))?;
    let horizon = first.len();
    if horizon == 0 || locals.iter().any(|l| l.len() != horizon) {
        return Err(Error::Dimension(
            "every condition needs the same positive number of steps".into(),
        ));
    }
    let c_count = locals.len() as f64;
    (0..horizon)
        .map(|k| {
            let n = locals[0][k].nrows();
            let mut precision = DMatrix::zeros(n, n);
            for (c, l) in locals.iter().enumerate() {
                if l[k].shape() != (n, n) {
                    return Err(Error::Dimension(format!(
                        "covariance of condition {c} at step {k}"
                    )));
                }
                precision += strict_inverse(
                    &diagonalized(&l[k], mode),
                    &format!("covariance of condition {c} at step {k}"),
                )?;
            }
            strict_inverse(
                &(precision / c_count),
                &format!("averaged precision at step {k}"),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    /// Σ_k Tr[(Σ^L_k)⁻¹].
    pub lhs: f64,
    /// (n_u² K² / C) Σ_c (Σ_k Tr Σ̂_k^{0,c})⁻¹.
    pub rhs: f64,
    pub holds: bool,
}

/// Both sides of the trace inequality between the global covariance and the
/// initial local covariances `initial[c][k]`.
pub fn theorem1_check(
    sigma_l: &[DMatrix<f64>],
    initial: &[Vec<DMatrix<f64>>],
) -> Result<Theorem1Report> {
    if sigma_l.is_empty() || initial.is_empty() {
        return Err(Error::Domain("theorem check needs covariances".into()));
    }
    let k_len = sigma_l.len() as f64;
    let nu = sigma_l[0].nrows() as f64;
    let mut lhs = 0.0;
    for (k, s) in sigma_l.iter().enumerate() {
        lhs += strict_inverse(s, &format!("Σ^L at step {k}"))?.trace();
    }
    let inv_traces: f64 = initial
        .iter()
        .map(|c| 1.0 / c.iter().map(|m| m.trace()).sum::<f64>())
        .sum();
    let rhs = nu * nu * k_len * k_len / initial.len() as f64 * inv_traces;
    Ok(Theorem1Report {
        lhs,
        rhs,
        holds: lhs >= rhs - 1e-9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn harmonic_mean_of_one_and_three() {
        for mode in [
            CovarianceMode::Full,
            CovarianceMode::DiagEigen,
            CovarianceMode::DiagEntries,
        ] {
            let out = global_covariance(&[vec![scalar(1.0)], vec![scalar(3.0)]], mode).unwrap();
            assert!((out[0][(0, 0)] - 1.5).abs() < 1e-14);
        }
    }

    #[test]
    fn single_condition_is_returned() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let full = global_covariance(&[vec![m.clone()]], CovarianceMode::Full).unwrap();
        assert!((&full[0] - &m).amax() < 1e-14);
        let diag = global_covariance(&[vec![m.clone()]], CovarianceMode::DiagEigen).unwrap();
        assert!(
            (&diag[0] - DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 3.0])))
                .amax()
                < 1e-12
        );
        let entries = global_covariance(&[vec![m]], CovarianceMode::DiagEntries).unwrap();
        assert!((&entries[0] - DMatrix::identity(2, 2) * 2.0).amax() < 1e-14);
    }

    #[test]
    fn singular_input_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(global_covariance(&[vec![m]], CovarianceMode::Full).is_err());
    }

    #[test]
    fn equal_eigenvalue_case_is_tight() {
        let eye = DMatrix::identity(2, 2);
        let sigma_l = global_covariance(&[vec![eye.clone()]], CovarianceMode::DiagEigen).unwrap();
        let r = theorem1_check(&sigma_l, &[vec![eye]]).unwrap();
        assert!((r.lhs - 2.0).abs() < 1e-15 && (r.rhs - 2.0).abs() < 1e-15);
        assert!(r.holds);
    }
}
