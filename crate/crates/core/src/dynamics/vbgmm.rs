//! Variational-Bayes Gaussian mixture with a Dirichlet prior on the weights
//! and a Gaussian-Wishart prior on each component (coordinate ascent on the
//! evidence lower bound).
//!
//! The data are standardized per coordinate before fitting and the fitted
//! component moments are mapped back, so the isotropic Wishart scale is
//! meaningful regardless of the raw units.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::linalg;
use crate::seed;
use crate::serde_mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    /// Initial number of components F.
    pub components: usize,
    pub max_iters: usize,
    /// Stop when the ELBO improves by less than `tol·|ELBO|`.
    pub tol: f64,
    /// Dirichlet concentration α₀ per component.
    pub alpha0: f64,
    /// Mean-precision scaling β₀.
    pub beta0: f64,
    /// Isotropic scale of the inverse Wishart matrix, in standardized units.
    pub scale_prior: f64,
    /// Components whose responsibility mass falls below this count are pruned.
    pub prune_mass: f64,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            components: 8,
            max_iters: 100,
            tol: 1e-8,
            alpha0: 1e-2,
            beta0: 1e-2,
            scale_prior: 1e-4,
            prune_mass: 1e-3,
            kmeans_iters: 10,
            seed: 0,
        }
    }
}

/// Posterior of one mixture component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    /// Expected mixing weight under the Dirichlet posterior.
    pub weight: f64,
    #[serde(with = "serde_mat::vector")]
    pub mean: DVector<f64>,
    /// Expected covariance `W⁻¹/(ν−D−1)`.
    #[serde(with = "serde_mat::mat")]
    pub covariance: DMatrix<f64>,
    /// Dirichlet concentration α_f.
    pub concentration: f64,
    /// Gaussian-Wishart posterior: β_f, ν_f and the inverse scale `W_f⁻¹`.
    pub beta: f64,
    pub dof: f64,
    #[serde(with = "serde_mat::mat")]
    pub inv_scale: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub components: Vec<GmmComponent>,
    pub elbo_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

impl GmmModel {
    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }
}

struct Posterior {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    nu: Vec<f64>,
    mean: Vec<DVector<f64>>,
    w: Vec<DMatrix<f64>>,
    w_inv: Vec<DMatrix<f64>>,
    // Sufficient statistics of the last M-step, needed by the bound.
    nk: Vec<f64>,
    xbar: Vec<DVector<f64>>,
    s: Vec<DMatrix<f64>>,
}

struct Prior {
    alpha0: f64,
    beta0: f64,
    nu0: f64,
    m0: DVector<f64>,
    w0_inv: DMatrix<f64>,
}

fn ln_wishart_norm(w_log_det: f64, nu: f64, d: usize) -> f64 {
    let df = d as f64;
    let mut s =
        nu * df / 2.0 * std::f64::consts::LN_2 + df * (df - 1.0) / 4.0 * std::f64::consts::PI.ln();
    for i in 1..=d {
        s += ln_gamma((nu + 1.0 - i as f64) / 2.0);
    }
    -nu / 2.0 * w_log_det - s
}

fn expected_log_det(nu: f64, w_log_det: f64, d: usize) -> f64 {
    (1..=d)
        .map(|i| digamma((nu + 1.0 - i as f64) / 2.0))
        .sum::<f64>()
        + d as f64 * std::f64::consts::LN_2
        + w_log_det
}

fn ln_dirichlet_norm(alpha: &[f64]) -> f64 {
    ln_gamma(alpha.iter().sum()) - alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>()
}

fn m_step(data: &[DVector<f64>], resp: &DMatrix<f64>, prior: &Prior) -> Result<Posterior> {
    let n = data.len();
    let kc = resp.ncols();
    let d = prior.m0.len();
    let mut post = Posterior {
        alpha: Vec::with_capacity(kc),
        beta: Vec::with_capacity(kc),
        nu: Vec::with_capacity(kc),
        mean: Vec::with_capacity(kc),
        w: Vec::with_capacity(kc),
        w_inv: Vec::with_capacity(kc),
        nk: Vec::with_capacity(kc),
        xbar: Vec::with_capacity(kc),
        s: Vec::with_capacity(kc),
    };
    for k in 0..kc {
        let nk: f64 = (0..n).map(|i| resp[(i, k)]).sum::<f64>() + 1e-12;
        let mut xbar = DVector::zeros(d);
        for (i, x) in data.iter().enumerate() {
            xbar.axpy(resp[(i, k)], x, 1.0);
        }
        xbar /= nk;
        let mut s = DMatrix::zeros(d, d);
        for (i, x) in data.iter().enumerate() {
            let r = resp[(i, k)];
            if r > 0.0 {
                let dx = x - &xbar;
                s.ger(r, &dx, &dx, 1.0);
            }
        }
        s /= nk;
        let beta = prior.beta0 + nk;
        let mean = (&prior.m0 * prior.beta0 + &xbar * nk) / beta;
        let dm = &xbar - &prior.m0;
        let w_inv = linalg::symmetrize(
            &(&prior.w0_inv
                + &s * nk
                + &dm * dm.transpose() * (prior.beta0 * nk / (prior.beta0 + nk))),
        );
        let w = linalg::spd_inverse(&w_inv)?;
        post.alpha.push(prior.alpha0 + nk);
        post.beta.push(beta);
        post.nu.push(prior.nu0 + nk);
        post.mean.push(mean);
        post.w.push(w);
        post.w_inv.push(w_inv);
        post.nk.push(nk);
        post.xbar.push(xbar);
        post.s.push(s);
    }
    Ok(post)
}

fn log_rho(data: &[DVector<f64>], post: &Posterior) -> Result<(DMatrix<f64>, Vec<f64>, Vec<f64>)> {
    let d = data[0].len();
    let kc = post.alpha.len();
    let alpha_sum: f64 = post.alpha.iter().sum();
    let mut ln_pi = Vec::with_capacity(kc);
    let mut ln_lambda = Vec::with_capacity(kc);
    for k in 0..kc {
        ln_pi.push(digamma(post.alpha[k]) - digamma(alpha_sum));
        let w_log_det = -linalg::spd_log_det(&post.w_inv[k])?;
        ln_lambda.push(expected_log_det(post.nu[k], w_log_det, d));
    }
    let half_log_2pi = 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
    let mut out = DMatrix::zeros(data.len(), kc);
    for k in 0..kc {
        let base = ln_pi[k] + 0.5 * ln_lambda[k] - half_log_2pi - 0.5 * d as f64 / post.beta[k];
        for (i, x) in data.iter().enumerate() {
            let dx = x - &post.mean[k];
            let quad = dx.dot(&(&post.w[k] * &dx));
            out[(i, k)] = base - 0.5 * post.nu[k] * quad;
        }
    }
    Ok((out, ln_pi, ln_lambda))
}

fn normalize_rows(log_rho: &DMatrix<f64>) -> DMatrix<f64> {
    let mut r = log_rho.clone();
    for mut row in r.row_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    r
}

/// Evidence lower bound for responsibilities `resp` and the posterior
/// obtained from them by `m_step`.
fn elbo(
    resp: &DMatrix<f64>,
    post: &Posterior,
    prior: &Prior,
    ln_pi: &[f64],
    ln_lambda: &[f64],
) -> Result<f64> {
    let kc = post.alpha.len();
    let d = prior.m0.len();
    let df = d as f64;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let w0_log_det = -linalg::spd_log_det(&prior.w0_inv)?;
    let ln_b0 = ln_wishart_norm(w0_log_det, prior.nu0, d);

    let mut e_log_px = 0.0;
    let mut e_log_pmu = 0.0;
    let mut e_log_qmu = 0.0;
    for k in 0..kc {
        let w = &post.w[k];
        let dx = &post.xbar[k] - &post.mean[k];
        e_log_px += 0.5
            * post.nk[k]
            * (ln_lambda[k]
                - df / post.beta[k]
                - post.nu[k] * (&post.s[k] * w).trace()
                - post.nu[k] * dx.dot(&(w * &dx))
                - df * ln_2pi);
        let dm = &post.mean[k] - &prior.m0;
        e_log_pmu += 0.5
            * (df * (prior.beta0 / (2.0 * std::f64::consts::PI)).ln() + ln_lambda[k]
                - df * prior.beta0 / post.beta[k]
                - prior.beta0 * post.nu[k] * dm.dot(&(w * &dm)))
            + 0.5 * (prior.nu0 - df - 1.0) * ln_lambda[k]
            - 0.5 * post.nu[k] * (&prior.w0_inv * w).trace();
        let w_log_det = -linalg::spd_log_det(&post.w_inv[k])?;
        let entropy = -ln_wishart_norm(w_log_det, post.nu[k], d)
            - 0.5 * (post.nu[k] - df - 1.0) * ln_lambda[k]
            + 0.5 * post.nu[k] * df;
        e_log_qmu += 0.5 * ln_lambda[k]
            + 0.5 * df * (post.beta[k] / (2.0 * std::f64::consts::PI)).ln()
            - 0.5 * df
            - entropy;
    }
    e_log_pmu += kc as f64 * ln_b0;

    let mut e_log_pz = 0.0;
    let mut e_log_qz = 0.0;
    for i in 0..resp.nrows() {
        for k in 0..kc {
            let r = resp[(i, k)];
            e_log_pz += r * ln_pi[k];
            if r > 0.0 {
                e_log_qz += r * r.ln();
            }
        }
    }
    let sum_ln_pi: f64 = ln_pi.iter().sum();
    let e_log_ppi = ln_dirichlet_norm(&vec![prior.alpha0; kc]) + (prior.alpha0 - 1.0) * sum_ln_pi;
    let e_log_qpi = post
        .alpha
        .iter()
        .zip(ln_pi)
        .map(|(a, lp)| (a - 1.0) * lp)
        .sum::<f64>()
        + ln_dirichlet_norm(&post.alpha);

    Ok(e_log_px + e_log_pz + e_log_ppi + e_log_pmu - e_log_qz - e_log_qpi - e_log_qmu)
}

/// Seeded k-means++ followed by Lloyd iterations; returns hard assignments.
fn kmeans_init(data: &[DVector<f64>], kc: usize, iters: usize, seed: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed);
    let n = data.len();
    let mut centers: Vec<DVector<f64>> = vec![data[rng.random_range(0..n)].clone()];
    while centers.len() < kc {
        let dist: Vec<f64> = data
            .iter()
            .map(|x| {
                centers
                    .iter()
                    .map(|c| (x - c).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            centers.push(data[rng.random_range(0..n)].clone());
            continue;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, dv) in dist.iter().enumerate() {
            if target < *dv {
                pick = i;
                break;
            }
            target -= dv;
        }
        centers.push(data[pick].clone());
    }
    let mut assign = vec![0usize; n];
    for _ in 0..iters.max(1) {
        for (i, x) in data.iter().enumerate() {
            assign[i] = centers
                .iter()
                .enumerate()
                .map(|(k, c)| (k, (x - c).norm_squared()))
                .fold(
                    (0, f64::INFINITY),
                    |best, cur| if cur.1 < best.1 { cur } else { best },
                )
                .0;
        }
        for (k, c) in centers.iter_mut().enumerate() {
            let members: Vec<&DVector<f64>> = data
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == k)
                .map(|(x, _)| x)
                .collect();
            if !members.is_empty() {
                *c = members
                    .iter()
                    .fold(DVector::zeros(c.len()), |acc, x| acc + *x)
                    / members.len() as f64;
            }
        }
    }
    assign
}

/// Fits a VB-GMM to the rows of `data`.
pub fn fit_gmm_vb(data: &[DVector<f64>], cfg: &GmmConfig) -> Result<GmmModel> {
    let n = data.len();
    if cfg.components == 0 {
        return Err(Error::Config("GMM needs at least one component".into()));
    }
    if n < cfg.components {
        return Err(Error::Config(format!(
            "{n} samples cannot support {} components",
            cfg.components
        )));
    }
    let d = data[0].len();
    if data
        .iter()
        .any(|x| x.len() != d || !linalg::all_finite_v(x))
    {
        return Err(Error::Domain(
            "GMM data rows must be finite and equally sized".into(),
        ));
    }

    // Standardize.
    let mean = data.iter().fold(DVector::zeros(d), |acc, x| acc + x) / n as f64;
    let scale = DVector::from_fn(d, |j, _| {
        let var = data.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
        var.sqrt().max(1e-8)
    });
    let z: Vec<DVector<f64>> = data
        .iter()
        .map(|x| (x - &mean).component_div(&scale))
        .collect();

    let kc = cfg.components;
    let nu0 = d as f64 + 2.0;
    let prior = Prior {
        alpha0: cfg.alpha0,
        beta0: cfg.beta0,
        nu0,
        m0: DVector::zeros(d),
        w0_inv: DMatrix::identity(d, d) * (cfg.scale_prior * nu0),
    };

    let assign = kmeans_init(&z, kc, cfg.kmeans_iters, cfg.seed);
    let mut resp = DMatrix::zeros(n, kc);
    for (i, &a) in assign.iter().enumerate() {
        resp[(i, a)] = 1.0;
    }
    let mut post = m_step(&z, &resp, &prior)?;
    let mut elbo_trace = Vec::new();
    for _ in 0..cfg.max_iters {
        let (lr, _, _) = log_rho(&z, &post)?;
        resp = normalize_rows(&lr);
        post = m_step(&z, &resp, &prior)?;
        let (_, ln_pi, ln_lambda) = log_rho(&z[..1], &post)?;
        let value = elbo(&resp, &post, &prior, &ln_pi, &ln_lambda)?;
        let converged = elbo_trace
            .last()
            .is_some_and(|&prev: &f64| (value - prev) < cfg.tol * prev.abs().max(1.0));
        elbo_trace.push(value);
        if converged {
            break;
        }
    }

    let mut warnings = Vec::new();
    let alpha_total: f64 = (0..kc)
        .filter(|&k| post.nk[k] >= cfg.prune_mass)
        .map(|k| post.alpha[k])
        .sum();
    let mut components = Vec::new();
    for k in 0..kc {
        if post.nk[k] < cfg.prune_mass {
            warnings.push(format!(
                "pruned component {k} with responsibility mass {:.3e}",
                post.nk[k]
            ));
            continue;
        }
        let cov_z = &post.w_inv[k] / (post.nu[k] - d as f64 - 1.0);
        let diag = DMatrix::from_diagonal(&scale);
        components.push(GmmComponent {
            weight: post.alpha[k] / alpha_total,
            mean: &mean + post.mean[k].component_mul(&scale),
            covariance: linalg::symmetrize(&(&diag * cov_z * &diag)),
            concentration: post.alpha[k],
            beta: post.beta[k],
            dof: post.nu[k],
            inv_scale: &diag * &post.w_inv[k] * &diag,
        });
    }
    if components.is_empty() {
        return Err(Error::Numerical("every GMM component was pruned".into()));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(GmmModel {
        components,
        elbo_trace,
        warnings,
    })
}
