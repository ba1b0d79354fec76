use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LN_2PI;
use crate::error::{Error, Result};
use crate::io::{Checkpoint, Manifest};
use crate::tensor::Tensor;

pub const RIDGE: f64 = 1e-6;
/// Components with less total responsibility than this are re-seeded.
pub const EMPTY_COMPONENT: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    pub components: Vec<usize>,
    /// Convergence threshold on the mean per-sample log-likelihood.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            components: vec![1, 2, 4, 8],
            tol: 0.1,
            max_iter: 500,
        }
    }
}

/// Full-covariance Gaussian mixture, evaluated in `f64`.
#[derive(Debug, Clone)]
pub struct GmmModel {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
    chol: Vec<Cholesky<f64, Dyn>>,
    log_norm: Vec<f64>,
}

fn points(z: &Tensor) -> Result<DMatrix<f64>> {
    match z.shape() {
        [n, d] if *n > 0 && *d > 0 => Ok(DMatrix::from_row_iterator(
            *n,
            *d,
            z.data().iter().map(|&v| v as f64),
        )),
        other => Err(Error::shape("gmm", format!("expected non-empty (n, d) points, got {other:?}"))),
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covs.len() != k {
            return Err(Error::invalid(format!(
                "{} weights, {} means, {} covariances",
                k,
                means.len(),
                covs.len()
            )));
        }
        let d = means[0].len();
        if means.iter().any(|m| m.len() != d) || covs.iter().any(|c| c.shape() != (d, d)) {
            return Err(Error::shape("gmm", "component dimensions disagree"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w > 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("mixture weights {weights:?} must be positive and sum to 1")));
        }
        let mut chol = Vec::with_capacity(k);
        let mut log_norm = Vec::with_capacity(k);
        for (c, cov) in covs.iter().enumerate() {
            let ch = Cholesky::new(cov.clone()).ok_or(Error::SingularCovariance { component: c })?;
            let log_det = 2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            if !log_det.is_finite() {
                return Err(Error::SingularCovariance { component: c });
            }
            log_norm.push(weights[c].ln() - 0.5 * (d as f64 * LN_2PI + log_det));
            chol.push(ch);
        }
        Ok(Self {
            weights,
            means,
            covs,
            chol,
            log_norm,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    /// `log pi_k + log N(z; mu_k, Sigma_k)` for every component.
    fn joint_log(&self, z: &DVector<f64>) -> Vec<f64> {
        (0..self.k())
            .map(|c| {
                let diff = z - &self.means[c];
                let y = self.chol[c]
                    .l_dirty()
                    .solve_lower_triangular(&diff)
                    .expect("Cholesky factor has a positive diagonal");
                self.log_norm[c] - 0.5 * y.norm_squared()
            })
            .collect()
    }

    fn check_dim(&self, z: &[f32]) -> Result<DVector<f64>> {
        if z.len() != self.dim() {
            return Err(Error::shape(
                "gmm",
                format!("point of dimension {} for a {}-dimensional model", z.len(), self.dim()),
            ));
        }
        Ok(DVector::from_iterator(z.len(), z.iter().map(|&v| v as f64)))
    }

    /// `-log sum_k pi_k N(z; mu_k, Sigma_k)`.
    pub fn nll(&self, z: &[f32]) -> Result<f64> {
        let z = self.check_dim(z)?;
        Ok(-log_sum_exp(&self.joint_log(&z)))
    }

    pub fn nll_batch(&self, z: &Tensor) -> Result<Vec<f64>> {
        let d = self.dim();
        if z.ndim() != 2 || z.shape()[1] != d {
            return Err(Error::shape("gmm", format!("expected (n, {d}), got {:?}", z.shape())));
        }
        z.data().chunks(d).map(|row| self.nll(row)).collect()
    }

    /// Gradient of [`GmmModel::nll`]: `sum_k r_k(z) Sigma_k^-1 (z - mu_k)`.
    pub fn nll_grad(&self, z: &[f32]) -> Result<Vec<f64>> {
        let zv = self.check_dim(z)?;
        let joint = self.joint_log(&zv);
        let lse = log_sum_exp(&joint);
        let mut grad = DVector::zeros(self.dim());
        for c in 0..self.k() {
            let r = (joint[c] - lse).exp();
            if r == 0.0 {
                continue;
            }
            grad += self.chol[c].solve(&(&zv - &self.means[c])) * r;
        }
        Ok(grad.iter().copied().collect())
    }

    /// Responsibilities `(n, K)` and per-sample log-likelihoods.
    pub fn e_step(&self, z: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let pts = points(z)?;
        if pts.ncols() != self.dim() {
            return Err(Error::shape("gmm", format!("points of dimension {} for a {}-dimensional model", pts.ncols(), self.dim())));
        }
        Ok(self.e_step_points(&pts))
    }

    fn e_step_points(&self, pts: &DMatrix<f64>) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut resp = Vec::with_capacity(pts.nrows());
        let mut ll = Vec::with_capacity(pts.nrows());
        for i in 0..pts.nrows() {
            let z = pts.row(i).transpose();
            let joint = self.joint_log(&z);
            let lse = log_sum_exp(&joint);
            resp.push(joint.iter().map(|j| (j - lse).exp()).collect());
            ll.push(lse);
        }
        (resp, ll)
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        let (k, d) = (self.k(), self.dim());
        let f = |v: f64| v as f32;
        ck.push("pi", Tensor::new(vec![k], self.weights.iter().map(|&w| f(w)).collect()).expect("shape"));
        ck.push(
            "mu",
            Tensor::new(vec![k, d], self.means.iter().flat_map(|m| m.iter().map(|&v| f(v))).collect())
                .expect("shape"),
        );
        ck.push(
            "sigma",
            Tensor::new(
                vec![k, d, d],
                self.covs
                    .iter()
                    .flat_map(|c| (0..d).flat_map(move |i| (0..d).map(move |j| f(c[(i, j)]))))
                    .collect(),
            )
            .expect("shape"),
        );
    }

    pub fn manifest(&self) -> Manifest {
        Manifest::new()
            .with("kind", "gmm")
            .with("components", self.k())
            .with("dim", self.dim())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let pi = ck.get("pi")?;
        let mu = ck.get("mu")?;
        let sigma = ck.get("sigma")?;
        let k = pi.len();
        let d = match mu.shape() {
            [kk, d] if *kk == k => *d,
            other => return Err(Error::shape("gmm checkpoint", format!("mu {other:?} for {k} components"))),
        };
        if sigma.shape() != [k, d, d] {
            return Err(Error::shape("gmm checkpoint", format!("sigma {:?}", sigma.shape())));
        }
        let mut weights: Vec<f64> = pi.data().iter().map(|&v| v as f64).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let means = mu.data().chunks(d).map(|r| DVector::from_iterator(d, r.iter().map(|&v| v as f64))).collect();
        let covs = sigma
            .data()
            .chunks(d * d)
            .map(|c| DMatrix::from_row_iterator(d, d, c.iter().map(|&v| v as f64)))
            .collect();
        Self::new(weights, means, covs)
    }
}

fn global_covariance(pts: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = pts.nrows() as f64;
    let mean = pts.row_mean().transpose();
    let mut centred = pts.clone();
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centred.transpose() * &centred / n;
    (mean, cov)
}

fn with_ridge(mut cov: DMatrix<f64>) -> DMatrix<f64> {
    for i in 0..cov.nrows() {
        cov[(i, i)] += RIDGE;
    }
    cov
}

/// Weighted maximum-likelihood update. Components that received no
/// responsibility get their mean moved to a random data point; each such
/// event is described in the returned log lines.
pub fn m_step(z: &Tensor, resp: &[Vec<f64>], rng: &mut impl Rng) -> Result<(GmmModel, Vec<String>)> {
    let pts = points(z)?;
    m_step_points(&pts, resp, rng)
}

fn m_step_points(pts: &DMatrix<f64>, resp: &[Vec<f64>], rng: &mut impl Rng) -> Result<(GmmModel, Vec<String>)> {
    let (n, d) = pts.shape();
    if resp.len() != n || resp.is_empty() {
        return Err(Error::shape("gmm_m_step", format!("{} responsibility rows for {n} points", resp.len())));
    }
    let k = resp[0].len();
    if k == 0 || resp.iter().any(|r| r.len() != k) {
        return Err(Error::shape("gmm_m_step", "ragged responsibilities"));
    }
    let mut events = Vec::new();
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    let mut global: Option<DMatrix<f64>> = None;
    for c in 0..k {
        let nk: f64 = resp.iter().map(|r| r[c]).sum();
        if nk < EMPTY_COMPONENT {
            let i = rng.random_range(0..n);
            events.push(format!(
                "component {c} empty (responsibility {nk:e}); mean reset to point {i}"
            ));
            let cov = global.get_or_insert_with(|| with_ridge(global_covariance(pts).1)).clone();
            weights.push(1.0 / k as f64);
            means.push(pts.row(i).transpose());
            covs.push(cov);
            continue;
        }
        let mut mean = DVector::zeros(d);
        for (i, r) in resp.iter().enumerate() {
            if r[c] != 0.0 {
                mean.axpy(r[c], &pts.row(i).transpose(), 1.0);
            }
        }
        mean /= nk;
        let mut centred = DMatrix::zeros(n, d);
        for i in 0..n {
            let s = resp[i][c].sqrt();
            for j in 0..d {
                centred[(i, j)] = (pts[(i, j)] - mean[j]) * s;
            }
        }
        let cov = with_ridge(centred.transpose() * &centred / nk);
        weights.push(nk / n as f64);
        means.push(mean);
        covs.push(cov);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok((GmmModel::new(weights, means, covs)?, events))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitLog {
    /// Mean per-sample log-likelihood at every E-step.
    pub mean_ll: Vec<f64>,
    /// Number of M-steps performed.
    pub iterations: usize,
    pub converged: bool,
    pub events: Vec<String>,
}

impl FitLog {
    pub fn to_text(&self) -> String {
        let mut s = String::from("iteration,mean_log_likelihood\n");
        for (i, ll) in self.mean_ll.iter().enumerate() {
            s.push_str(&format!("{i},{ll}\n"));
        }
        for e in &self.events {
            s.push_str(&format!("# {e}\n"));
        }
        s.push_str(&format!("# converged={} iterations={}\n", self.converged, self.iterations));
        s
    }
}

/// Initial model: `k` distinct random points as means, the global
/// covariance for every component and uniform weights.
pub fn initial_model(z: &Tensor, k: usize, rng: &mut impl Rng) -> Result<GmmModel> {
    let pts = points(z)?;
    let n = pts.nrows();
    if k == 0 || n < k {
        return Err(Error::invalid(format!("cannot fit {k} components to {n} points")));
    }
    let cov = with_ridge(global_covariance(&pts).1);
    let means = sample(rng, n, k).into_iter().map(|i| pts.row(i).transpose()).collect();
    GmmModel::new(vec![1.0 / k as f64; k], means, vec![cov; k])
}

pub fn fit_em(z: &Tensor, k: usize, rng: &mut impl Rng, tol: f64, max_iter: usize) -> Result<(GmmModel, FitLog)> {
    let init = initial_model(z, k, rng)?;
    fit_em_from(z, init, rng, tol, max_iter)
}

/// EM from a given starting model until the mean log-likelihood changes by
/// less than `tol` or `max_iter` M-steps have run.
pub fn fit_em_from(
    z: &Tensor,
    init: GmmModel,
    rng: &mut impl Rng,
    tol: f64,
    max_iter: usize,
) -> Result<(GmmModel, FitLog)> {
    let pts = points(z)?;
    if pts.ncols() != init.dim() {
        return Err(Error::shape("gmm_fit_em", "initial model dimension differs from the data"));
    }
    if pts.nrows() < init.k() {
        return Err(Error::invalid(format!("cannot fit {} components to {} points", init.k(), pts.nrows())));
    }
    let mut model = init;
    let mut log = FitLog::default();
    loop {
        let (resp, ll) = model.e_step_points(&pts);
        let mean = ll.iter().sum::<f64>() / ll.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite {
                context: format!("GMM log-likelihood at iteration {}", log.iterations),
            });
        }
        if let Some(&prev) = log.mean_ll.last() {
            if (mean - prev).abs() < tol {
                log.mean_ll.push(mean);
                log.converged = true;
                break;
            }
        }
        log.mean_ll.push(mean);
        if log.iterations >= max_iter {
            break;
        }
        let (next, events) = m_step_points(&pts, &resp, rng)?;
        log.events.extend(events.into_iter().map(|e| format!("iteration {}: {e}", log.iterations)));
        model = next;
        log.iterations += 1;
    }
    Ok((model, log))
}
