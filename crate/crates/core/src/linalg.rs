//! Small dense linear-algebra helpers shared by the fitting, smoothing and
//! learning stages. Everything operates on dynamically sized `nalgebra`
//! matrices.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Base jitter added when a Cholesky factorization fails.
pub const JITTER_BASE: f64 = 1e-6;
/// Number of ×10 escalations after the base jitter.
pub const JITTER_ESCALATIONS: usize = 3;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn all_finite_m(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn all_finite_v(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Cholesky factorization with the jitter ladder `0, 1e-6, 1e-5, 1e-4, 1e-3`.
///
/// Returns the factor together with the jitter that was needed.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let sym = symmetrize(m);
    if !all_finite_m(&sym) {
        return Err(Error::Numerical(
            "non-finite matrix passed to Cholesky".into(),
        ));
    }
    if let Some(c) = Cholesky::new(sym.clone()) {
        return Ok((c, 0.0));
    }
    let n = sym.nrows();
    let mut jitter = JITTER_BASE;
    for _ in 0..=JITTER_ESCALATIONS {
        let shifted = &sym + DMatrix::identity(n, n) * jitter;
        if let Some(c) = Cholesky::new(shifted) {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "matrix not positive definite after jitter {:e}",
        jitter / 10.0
    )))
}

/// Symmetrizes `m` and adds the smallest ladder jitter that makes it positive definite.
pub fn make_pd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (_, jitter) = cholesky_jittered(m)?;
    let n = m.nrows();
    Ok(symmetrize(m) + DMatrix::identity(n, n) * jitter)
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (c, _) = cholesky_jittered(m)?;
    Ok(c.inverse())
}

/// `log |m|` for a symmetric positive-definite matrix.
pub fn spd_log_det(m: &DMatrix<f64>) -> Result<f64> {
    let (c, _) = cholesky_jittered(m)?;
    Ok(2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Eigenvalues of a symmetric matrix (ascending order is not guaranteed).
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    SymmetricEigen::new(symmetrize(m)).eigenvalues
}

pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Ratio of largest to smallest eigenvalue magnitude of a symmetric matrix.
pub fn sym_condition_number(m: &DMatrix<f64>) -> f64 {
    let ev = sym_eigenvalues(m);
    let max = ev.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let min = ev.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Square root factor `L` with `L Lᵀ = cov` for a symmetric PSD matrix.
///
/// Uses the eigen decomposition so that singular covariances (e.g. a zero
/// initial-condition spread) are accepted. Negative eigenvalues beyond
/// `-1e-9·scale` are rejected.
pub fn psd_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(cov));
    let scale = eig.eigenvalues.iter().map(|v| v.abs()).fold(1.0, f64::max);
    if eig
        .eigenvalues
        .iter()
        .any(|&v| v < -1e-9 * scale || !v.is_finite())
    {
        return Err(Error::Domain(
            "covariance is not positive semi-definite".into(),
        ));
    }
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals))
}

pub fn standard_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Draws from `N(mean, L Lᵀ)` given a precomputed square-root factor.
pub fn sample_gaussian<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    sqrt_cov: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let z = standard_normal_vec(sqrt_cov.ncols(), rng);
    mean + sqrt_cov * z
}

/// Column-major vectorization.
pub fn vec_of(m: &DMatrix<f64>) -> Vec<f64> {
    m.as_slice().to_vec()
}

pub fn unvec(values: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, values)
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

/// Log density of `N(mean, cov)` at `x`.
pub fn gaussian_log_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let (c, _) = cholesky_jittered(cov)?;
    let d = x - mean;
    let sol = c.solve(&d);
    let log_det = 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let n = x.len() as f64;
    Ok(-0.5 * (n * (2.0 * std::f64::consts::PI).ln() + log_det + d.dot(&sol)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn jitter_rescues_singular_psd() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (_, jitter) = cholesky_jittered(&m).unwrap();
        assert!(jitter > 0.0 && jitter <= 1e-3);
        assert!(min_sym_eigenvalue(&make_pd(&m).unwrap()) > 0.0);
    }

    #[test]
    fn indefinite_matrix_fails_after_ladder() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(cholesky_jittered(&m).is_err());
    }

    #[test]
    fn psd_sqrt_reconstructs() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let l = psd_sqrt(&m).unwrap();
        assert!(max_abs_diff(&(&l * l.transpose()), &m) < 1e-12);
        let zero = DMatrix::zeros(2, 2);
        assert_eq!(psd_sqrt(&zero).unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn log_pdf_standard_normal_at_origin() {
        let v = gaussian_log_pdf(
            &DVector::zeros(2),
            &DVector::zeros(2),
            &DMatrix::identity(2, 2),
        )
        .unwrap();
        assert!((v + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let l = DMatrix::identity(3, 3);
        let m = DVector::zeros(3);
        let a = sample_gaussian(&m, &l, &mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_gaussian(&m, &l, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn vec_roundtrip_is_column_major() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vec_of(&m), vec![1.0, 3.0, 2.0, 4.0]);
        assert_eq!(unvec(&vec_of(&m), 2, 2), m);
    }
}
