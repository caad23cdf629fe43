//! Ridge covariance, LCB penalties, Gaussian Q-posteriors, ensembles and OOD
//! sampling.
//!
//! [`Covariance`] stores only the data term `sum phi phi^T`; the ridge `lambda I`
//! is added once whenever the matrix is inverted, so merging covariances never
//! counts the prior twice.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::datasets::SharedDataset;
use crate::error::{Error, Result};
use crate::mdp::Policy;
use crate::seeds;

/// Ridge covariance `Lambda = sum phi phi^T + lambda I`, data term stored.
#[derive(Clone)]
pub struct Covariance {
    dim: usize,
    lambda: f64,
    sum_outer: DMatrix<f64>,
    inverse: OnceLock<Option<DMatrix<f64>>>,
}

impl fmt::Debug for Covariance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Covariance")
            .field("dim", &self.dim)
            .field("lambda", &self.lambda)
            .field("sum_outer", &self.sum_outer)
            .finish()
    }
}

impl PartialEq for Covariance {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.lambda == other.lambda && self.sum_outer == other.sum_outer
    }
}

/// Indices of the nonzero entries of `phi`, or `None` when it is dense.
fn support(phi: &DVector<f64>) -> Option<Vec<usize>> {
    let nz: Vec<usize> = (0..phi.len()).filter(|&i| phi[i] != 0.0).collect();
    (nz.len() * 4 <= phi.len()).then_some(nz)
}

impl Covariance {
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("covariance dimension must be positive"));
        }
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::invalid(format!("ridge lambda {lambda} must be positive")));
        }
        Ok(Covariance {
            dim,
            lambda,
            sum_outer: DMatrix::zeros(dim, dim),
            inverse: OnceLock::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// The data term `sum phi phi^T`.
    pub fn sum_outer(&self) -> &DMatrix<f64> {
        &self.sum_outer
    }

    /// `sum phi phi^T + lambda I`.
    pub fn precision(&self) -> DMatrix<f64> {
        let mut m = self.sum_outer.clone();
        for i in 0..self.dim {
            m[(i, i)] += self.lambda;
        }
        m
    }

    fn check_dim(&self, phi: &DVector<f64>) -> Result<()> {
        if phi.len() != self.dim {
            return Err(Error::invalid(format!(
                "feature has dimension {}, covariance has {}",
                phi.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Adds `phi phi^T` in place.
    pub fn add(&mut self, phi: &DVector<f64>) -> Result<()> {
        self.add_weighted(phi, 1.0)
    }

    /// Adds `weight * phi phi^T` in place; `weight` counts repeated rows.
    pub fn add_weighted(&mut self, phi: &DVector<f64>, weight: f64) -> Result<()> {
        self.check_dim(phi)?;
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::invalid(format!("row weight {weight} must be nonnegative")));
        }
        match support(phi) {
            Some(nz) => {
                for &i in &nz {
                    for &j in &nz {
                        self.sum_outer[(i, j)] += weight * phi[i] * phi[j];
                    }
                }
            }
            None => self.sum_outer.ger(weight, phi, phi, 1.0),
        }
        self.inverse = OnceLock::new();
        Ok(())
    }

    /// Returns a copy with every `phi phi^T` added.
    pub fn accumulate<'a>(&self, phis: impl IntoIterator<Item = &'a DVector<f64>>) -> Result<Self> {
        let mut out = Covariance {
            dim: self.dim,
            lambda: self.lambda,
            sum_outer: self.sum_outer.clone(),
            inverse: OnceLock::new(),
        };
        for phi in phis {
            out.add(phi)?;
        }
        Ok(out)
    }

    /// Sums the data terms; `lambda I` remains counted once.
    pub fn merge(&self, other: &Covariance) -> Result<Self> {
        if self.dim != other.dim || self.lambda != other.lambda {
            return Err(Error::invalid(format!(
                "cannot merge covariances (d={}, lambda={}) and (d={}, lambda={})",
                self.dim, self.lambda, other.dim, other.lambda
            )));
        }
        Ok(Covariance {
            dim: self.dim,
            lambda: self.lambda,
            sum_outer: &self.sum_outer + &other.sum_outer,
            inverse: OnceLock::new(),
        })
    }

    /// `(sum phi phi^T + lambda I)^-1`, cached, via Cholesky.
    pub fn inverse(&self) -> Result<&DMatrix<f64>> {
        self.inverse
            .get_or_init(|| self.precision().cholesky().map(|c| c.inverse()))
            .as_ref()
            .ok_or_else(|| {
                Error::Numerical("covariance is not positive definite (lambda too small?)".into())
            })
    }

    /// Solves `(sum phi phi^T + lambda I) w = b`.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.inverse()? * b)
    }

    /// `phi^T (sum phi phi^T + lambda I)^-1 phi`.
    pub fn quadratic_form(&self, phi: &DVector<f64>) -> Result<f64> {
        self.check_dim(phi)?;
        let inv = self.inverse()?;
        let value = match support(phi) {
            Some(nz) => {
                let mut acc = 0.0;
                for &i in &nz {
                    for &j in &nz {
                        acc += phi[i] * inv[(i, j)] * phi[j];
                    }
                }
                acc
            }
            None => (inv * phi).dot(phi),
        };
        Ok(value.max(0.0))
    }

    /// The LCB penalty `sqrt(phi^T Lambda^-1 phi)`.
    pub fn lcb_penalty(&self, phi: &DVector<f64>) -> Result<f64> {
        Ok(self.quadratic_form(phi)?.sqrt())
    }

    /// Smallest eigenvalue of the data term.
    pub fn min_data_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.sum_outer.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Gaussian posterior over Q-weights under prior `N(0, I / lambda)` and unit
/// observation noise: `N(mu, Lambda^-1)`.
///
/// Built from an eigendecomposition of `Lambda`, independent of the Cholesky
/// route used for penalties.
#[derive(Clone, Debug)]
pub struct PosteriorQ {
    mean: DVector<f64>,
    covariance: Covariance,
    posterior_cov: DMatrix<f64>,
    sqrt_cov: DMatrix<f64>,
}

impl PosteriorQ {
    /// From a covariance and the moment vector `sum phi y`.
    pub fn from_moments(covariance: Covariance, phi_y: &DVector<f64>) -> Result<Self> {
        if phi_y.len() != covariance.dim() {
            return Err(Error::invalid("moment vector has the wrong dimension"));
        }
        let eig = SymmetricEigen::new(covariance.precision());
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min > 0.0) {
            return Err(Error::Numerical(format!(
                "posterior precision has eigenvalue {min}"
            )));
        }
        let v = &eig.eigenvectors;
        let inv = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e));
        let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e.sqrt()));
        let posterior_cov = v * inv * v.transpose();
        let sqrt_cov = v * inv_sqrt * v.transpose();
        let mean = &posterior_cov * phi_y;
        Ok(PosteriorQ {
            mean,
            covariance,
            posterior_cov,
            sqrt_cov,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &Covariance {
        &self.covariance
    }

    /// Posterior covariance of the weights, `Lambda^-1`.
    pub fn weight_covariance(&self) -> &DMatrix<f64> {
        &self.posterior_cov
    }

    pub fn mean_at(&self, phi: &DVector<f64>) -> f64 {
        self.mean.dot(phi)
    }

    /// Symmetric square root of `Lambda^-1`.
    pub fn weight_covariance_sqrt(&self) -> &DMatrix<f64> {
        &self.sqrt_cov
    }

    /// `Var(phi^T w)` under the posterior.
    pub fn variance_at(&self, phi: &DVector<f64>) -> f64 {
        (&self.posterior_cov * phi).dot(phi)
    }
}

/// Exact Bayesian linear regression on `(phi, y)` pairs.
pub fn fit_posterior(dim: usize, lambda: f64, samples: &[(DVector<f64>, f64)]) -> Result<PosteriorQ> {
    let mut cov = Covariance::new(dim, lambda)?;
    let mut phi_y = DVector::zeros(dim);
    for (phi, y) in samples {
        if !y.is_finite() {
            return Err(Error::invalid(format!("non-finite target {y}")));
        }
        cov.add(phi)?;
        phi_y.axpy(*y, phi, 1.0);
    }
    PosteriorQ::from_moments(cov, &phi_y)
}

/// A finite set of Q-weight vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleQ {
    members: Vec<DVector<f64>>,
}

impl EnsembleQ {
    pub fn new(members: Vec<DVector<f64>>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::invalid(format!(
                "an ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        let d = members[0].len();
        if members.iter().any(|m| m.len() != d) {
            return Err(Error::invalid("ensemble members differ in dimension"));
        }
        Ok(EnsembleQ { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[DVector<f64>] {
        &self.members
    }

    pub fn predictions(&self, phi: &DVector<f64>) -> Vec<f64> {
        self.members.iter().map(|w| w.dot(phi)).collect()
    }

    pub fn mean_at(&self, phi: &DVector<f64>) -> f64 {
        let p = self.predictions(phi);
        p.iter().sum::<f64>() / p.len() as f64
    }

    pub fn min_at(&self, phi: &DVector<f64>) -> f64 {
        self.predictions(phi).into_iter().fold(f64::INFINITY, f64::min)
    }
}

/// Standard deviation of member predictions with denominator `N`.
pub fn ensemble_std(ens: &EnsembleQ, phi: &DVector<f64>) -> f64 {
    let p = ens.predictions(phi);
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    (p.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// `N` exact draws `mu + Lambda^-1/2 z` from the posterior.
pub fn sample_ensemble(post: &PosteriorQ, n: usize, seed: u64) -> Result<EnsembleQ> {
    if n < 2 {
        return Err(Error::invalid(format!("ensemble size {n} < 2")));
    }
    let d = post.mean.len();
    let mut rng = seeds::rng(seed);
    let members = (0..n)
        .map(|_| {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            &post.mean + &post.sqrt_cov * z
        })
        .collect();
    EnsembleQ::new(members)
}

/// Randomized-prior ensemble: each member refits with a fresh prior draw and
/// Gaussian-perturbed targets.
pub fn perturbed_ensemble(
    dim: usize,
    lambda: f64,
    samples: &[(DVector<f64>, f64)],
    n: usize,
    seed: u64,
) -> Result<EnsembleQ> {
    if n < 2 {
        return Err(Error::invalid(format!("ensemble size {n} < 2")));
    }
    let mut cov = Covariance::new(dim, lambda)?;
    for (phi, _) in samples {
        cov.add(phi)?;
    }
    let mut rng = seeds::rng(seed);
    let prior_scale = 1.0 / lambda.sqrt();
    let mut members = Vec::with_capacity(n);
    for _ in 0..n {
        let prior = DVector::from_fn(dim, |_, _| prior_scale * rng.sample::<f64, _>(StandardNormal));
        let mut rhs = lambda * prior;
        for (phi, y) in samples {
            let noisy = y + rng.sample::<f64, _>(StandardNormal);
            rhs.axpy(noisy, phi, 1.0);
        }
        members.push(cov.solve(&rhs)?);
    }
    EnsembleQ::new(members)
}

/// Where OOD actions come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OodSource {
    /// The current learned policy's action.
    Policy,
    /// Uniformly random actions.
    Uniform,
    /// One policy action plus uniform actions for the rest.
    Mixed,
}

impl OodSource {
    pub fn name(self) -> &'static str {
        match self {
            OodSource::Policy => "policy",
            OodSource::Uniform => "uniform",
            OodSource::Mixed => "mixed",
        }
    }
}

impl fmt::Display for OodSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OodSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "policy" => Ok(OodSource::Policy),
            "uniform" => Ok(OodSource::Uniform),
            "mixed" => Ok(OodSource::Mixed),
            other => Err(Error::invalid(format!("unknown OOD action source {other:?}"))),
        }
    }
}

/// Penalty scales, the OOD schedule and ridge/ensemble sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct PessimismConfig {
    pub beta1: f64,
    pub beta2_init: f64,
    pub beta2_end: f64,
    pub decay: f64,
    pub lambda: f64,
    pub ensemble_n: usize,
    pub ood_actions_per_state: usize,
    pub ood_source: OodSource,
}

impl Default for PessimismConfig {
    fn default() -> Self {
        PessimismConfig {
            beta1: 0.001,
            beta2_init: 3.0,
            beta2_end: 0.1,
            decay: 0.99995,
            lambda: 1.0,
            ensemble_n: 5,
            ood_actions_per_state: 3,
            ood_source: OodSource::Policy,
        }
    }
}

impl PessimismConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.beta1) || !finite_nonneg(self.beta2_init) || !finite_nonneg(self.beta2_end) {
            return Err(Error::invalid("beta1 and beta2 must be finite and nonnegative"));
        }
        if self.beta2_end > self.beta2_init {
            return Err(Error::invalid(format!(
                "beta2_end {} exceeds beta2_init {}",
                self.beta2_end, self.beta2_init
            )));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::invalid(format!("decay {} outside (0, 1)", self.decay)));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::invalid(format!("lambda {} must be positive", self.lambda)));
        }
        if self.ensemble_n < 2 {
            return Err(Error::invalid("ensemble_n must be at least 2"));
        }
        if self.ood_actions_per_state == 0 {
            return Err(Error::invalid("ood_actions_per_state must be at least 1"));
        }
        Ok(())
    }
}

/// `max(beta2_end, beta2_init * decay^step)`.
pub fn beta2_at(cfg: &PessimismConfig, step: u64) -> f64 {
    cfg.beta2_end.max(cfg.beta2_init * cfg.decay.powf(step as f64))
}

/// An OOD query pair at timestep `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OodSample {
    pub t: usize,
    pub s: usize,
    pub a: usize,
}

/// Draws `ood_actions_per_state` actions at every dataset state.
pub fn sample_ood(
    dataset: &SharedDataset,
    policy: &Policy,
    cfg: &PessimismConfig,
    seed: u64,
) -> Result<Vec<OodSample>> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot sample OOD actions from an empty dataset"));
    }
    if cfg.ood_actions_per_state == 0 {
        return Err(Error::invalid("ood_actions_per_state must be at least 1"));
    }
    let na = policy.n_actions();
    let mut rng = seeds::rng(seed);
    let mut out = Vec::with_capacity(dataset.len() * cfg.ood_actions_per_state);
    for tr in &dataset.transitions {
        if tr.t >= policy.horizon() || tr.s >= policy.n_states() {
            return Err(Error::invalid(format!(
                "transition (t={}, s={}) outside the policy's domain",
                tr.t, tr.s
            )));
        }
        for j in 0..cfg.ood_actions_per_state {
            let a = match cfg.ood_source {
                OodSource::Policy => policy.action(tr.t, tr.s),
                OodSource::Uniform => rng.random_range(0..na),
                OodSource::Mixed if j == 0 => policy.action(tr.t, tr.s),
                OodSource::Mixed => rng.random_range(0..na),
            };
            out.push(OodSample { t: tr.t, s: tr.s, a });
        }
    }
    Ok(out)
}
