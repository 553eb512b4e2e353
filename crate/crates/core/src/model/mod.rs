//! GLM-MM log posteriors.
//!
//! Membership counts follow `y_j ~ Poisson(E_j rho~_j)` or a negative
//! binomial with the same mean and overdispersion `psi`, where
//! `log rho~ = H (gamma + X beta + phi)`. Under the *post* parameterisation the
//! free random effect is the areal `phi` with a CAR/ICAR prior; under the
//! *inverse* parameterisation it is the membership effect `phi~ = H phi`
//! with a dense Gaussian prior of covariance `H Sigma H^T`.
//!
//! The sampler works on an unconstrained vector (logit alpha, log tau,
//! log psi); [`ModelSpec::log_posterior_unconstrained`] includes the
//! Jacobian terms and returns an analytic gradient.

mod params;
pub mod simulate;
mod whiten;

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

pub use params::{logistic, Layout, ParamVector};

use crate::car::{icar_pairwise_sum, CarParams, CarPrior, ICAR_SUM_TOL};
use crate::error::{Error, Result};
use crate::graph::AdjacencyGraph;
use crate::linalg;
use crate::membership::MembershipMatrix;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    Poisson,
    #[serde(alias = "negative_binomial")]
    NegBin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterisation {
    Post,
    Inverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spatial {
    Car,
    Icar,
    None,
}

impl std::fmt::Display for Parameterisation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Parameterisation::Post => "post",
            Parameterisation::Inverse => "inverse",
        })
    }
}

/// Prior hyperparameters. Gamma priors use shape and rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Priors {
    pub coef_sd: f64,
    pub tau_shape: f64,
    pub tau_rate: f64,
    pub psi_shape: f64,
    pub psi_rate: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Priors { coef_sd: 0.7, tau_shape: 2.0, tau_rate: 0.2, psi_shape: 2.0, psi_rate: 0.2 }
    }
}

/// Model choices; serialised as the JSON model config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub likelihood: Likelihood,
    pub parameterisation: Parameterisation,
    pub spatial: Spatial,
    #[serde(default)]
    pub priors: Priors,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            likelihood: Likelihood::Poisson,
            parameterisation: Parameterisation::Post,
            spatial: Spatial::Car,
            priors: Priors::default(),
        }
    }
}

#[derive(Debug, Clone)]
enum SpatialPrior {
    None,
    PostCar(CarPrior),
    PostIcar,
    /// Dense `m x m` prior on `phi~` recomputed for every `(alpha, tau)`.
    InverseCar { w: DMatrix<f64>, d: Vec<f64> },
    /// `phi~ ~ N(0, A / tau)` with `A = H (D - W)^+ H^T` fixed.
    InverseIcar { chol: Cholesky<f64, Dyn>, log_det: f64 },
}

/// A fully specified GLM-MM: graph, membership matrix, covariates, offsets
/// and (optionally) observed counts.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    config: ModelConfig,
    graph: AdjacencyGraph,
    h: MembershipMatrix,
    x: DMatrix<f64>,
    x_tilde: DMatrix<f64>,
    row_sums: Vec<f64>,
    offsets: Vec<f64>,
    counts: Option<Vec<u64>>,
    pinv: DMatrix<f64>,
    spatial_prior: SpatialPrior,
    whitening: Option<whiten::Whitening>,
    layout: Layout,
}

impl ModelSpec {
    pub fn new(
        config: ModelConfig,
        graph: AdjacencyGraph,
        h: MembershipMatrix,
        x: DMatrix<f64>,
        offsets: Vec<f64>,
    ) -> Result<Self> {
        let (m, n) = (h.m(), h.n());
        if graph.n() != n {
            return Err(Error::DimensionMismatch(format!("graph has {} areas, H has {n} columns", graph.n())));
        }
        if x.nrows() != n {
            return Err(Error::DimensionMismatch(format!("covariates have {} rows, expected {n}", x.nrows())));
        }
        if offsets.len() != m {
            return Err(Error::DimensionMismatch(format!("{} offsets for {m} memberships", offsets.len())));
        }
        if let Some(j) = offsets.iter().position(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::InvalidArgument(format!("offset {j} must be positive, got {}", offsets[j])));
        }
        let pr = config.priors;
        if !(pr.coef_sd > 0.0 && pr.tau_shape > 0.0 && pr.tau_rate > 0.0 && pr.psi_shape > 0.0 && pr.psi_rate > 0.0) {
            return Err(Error::Config("prior hyperparameters must be positive".into()));
        }
        let inverse = config.parameterisation == Parameterisation::Inverse;
        if inverse && config.spatial != Spatial::None && m > n {
            return Err(Error::Config(format!(
                "the inverse parameterisation needs m <= n (m = {m}, n = {n})"
            )));
        }
        let spatial_prior = match (config.spatial, config.parameterisation) {
            (Spatial::None, _) => SpatialPrior::None,
            (Spatial::Car, Parameterisation::Post) => SpatialPrior::PostCar(CarPrior::new(graph.clone())),
            (Spatial::Icar, Parameterisation::Post) => SpatialPrior::PostIcar,
            (Spatial::Car, Parameterisation::Inverse) => SpatialPrior::InverseCar {
                w: graph.adjacency_matrix(),
                d: graph.degrees().iter().map(|&d| d as f64).collect(),
            },
            (Spatial::Icar, Parameterisation::Inverse) => {
                let laplacian = DMatrix::from_diagonal(&DVector::from_iterator(n, graph.degrees().iter().map(|&d| d as f64)))
                    - graph.adjacency_matrix();
                let hw = h.weights();
                let mut a = hw * linalg::pseudo_inverse(&laplacian) * hw.transpose();
                linalg::symmetrize(&mut a);
                let chol = linalg::cholesky(&a).map_err(|_| {
                    Error::Config(format!("inverse ICAR needs a positive-definite H (D-W)^+ H^T; m = {m} must be < n = {n}"))
                })?;
                let log_det = linalg::log_det_chol(&chol);
                SpatialPrior::InverseIcar { chol, log_det }
            }
        };
        let layout = Layout {
            p: x.ncols(),
            phi_len: match config.spatial {
                Spatial::None => 0,
                _ if inverse => m,
                _ => n,
            },
            has_alpha: config.spatial == Spatial::Car,
            has_tau: config.spatial != Spatial::None,
            has_psi: config.likelihood == Likelihood::NegBin,
        };
        let x_tilde = h.weights() * &x;
        let row_sums = (0..m).map(|j| h.weights().row(j).sum()).collect();
        let pinv = h.pseudo_inverse();
        let whitening = match config.spatial {
            Spatial::None => None,
            s => Some(whiten::Whitening::new(&graph, s == Spatial::Icar)),
        };
        Ok(ModelSpec { config, graph, h, x, x_tilde, row_sums, offsets, counts: None, pinv, spatial_prior, whitening, layout })
    }

    pub fn with_counts(mut self, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != self.m() {
            return Err(Error::DimensionMismatch(format!("{} counts for {} memberships", counts.len(), self.m())));
        }
        self.counts = Some(counts);
        Ok(self)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &AdjacencyGraph {
        &self.graph
    }

    pub fn membership(&self) -> &MembershipMatrix {
        &self.h
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn counts(&self) -> Option<&[u64]> {
        self.counts.as_deref()
    }

    pub fn m(&self) -> usize {
        self.h.m()
    }

    pub fn n(&self) -> usize {
        self.h.n()
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn param_names(&self) -> Vec<String> {
        let phi = match self.config.parameterisation {
            Parameterisation::Post => "phi",
            Parameterisation::Inverse => "phi_tilde",
        };
        self.layout.names(phi)
    }

    /// Moore–Penrose pseudoinverse of H, used to map membership effects back
    /// to areas.
    pub fn pinv(&self) -> &DMatrix<f64> {
        &self.pinv
    }

    fn is_post_icar(&self) -> bool {
        matches!(self.spatial_prior, SpatialPrior::PostIcar)
    }

    /// Unconstrained -> constrained, centring the ICAR block.
    pub fn constrain(&self, x: &[f64]) -> ParamVector {
        let mut theta = self.layout.constrain(x);
        if self.is_post_icar() {
            center(&mut theta.phi);
        }
        theta
    }

    pub fn unconstrain(&self, theta: &ParamVector) -> Result<Vec<f64>> {
        self.layout.unconstrain(theta)
    }

    /// Projects the ICAR block of an unconstrained state onto the
    /// sum-to-zero subspace.
    pub fn project(&self, x: &mut [f64]) {
        if self.is_post_icar() {
            center(&mut x[self.layout.phi()]);
        }
    }

    /// Areal random effects implied by `theta` (zero without a spatial term).
    pub fn areal_phi(&self, theta: &ParamVector) -> Vec<f64> {
        match (self.config.spatial, self.config.parameterisation) {
            (Spatial::None, _) => vec![0.0; self.n()],
            (_, Parameterisation::Post) => theta.phi.clone(),
            (_, Parameterisation::Inverse) => (&self.pinv * DVector::from_column_slice(&theta.phi)).iter().copied().collect(),
        }
    }

    /// Membership random effects `phi~`.
    pub fn membership_phi(&self, theta: &ParamVector) -> Vec<f64> {
        match (self.config.spatial, self.config.parameterisation) {
            (Spatial::None, _) => vec![0.0; self.m()],
            (_, Parameterisation::Post) => self.h.apply(&theta.phi),
            (_, Parameterisation::Inverse) => theta.phi.clone(),
        }
    }

    /// `log rho = gamma + X beta + phi` over areas.
    pub fn areal_log_risk(&self, theta: &ParamVector) -> Vec<f64> {
        let xb = &self.x * DVector::from_column_slice(&theta.beta);
        let phi = self.areal_phi(theta);
        (0..self.n()).map(|i| theta.gamma + xb[i] + phi[i]).collect()
    }

    /// `log rho~` over memberships.
    pub fn membership_log_risk(&self, theta: &ParamVector) -> Vec<f64> {
        let xb = &self.x_tilde * DVector::from_column_slice(&theta.beta);
        let phi = self.membership_phi(theta);
        (0..self.m()).map(|j| theta.gamma * self.row_sums[j] + xb[j] + phi[j]).collect()
    }

    fn require_counts(&self) -> Result<&[u64]> {
        self.counts.as_deref().ok_or_else(|| Error::InvalidArgument("no observed counts attached to the model".into()))
    }

    /// Per-membership log likelihood under the model's likelihood.
    pub fn pointwise_log_likelihood(&self, theta: &ParamVector) -> Result<Vec<f64>> {
        let y = self.require_counts()?;
        let ell = self.membership_log_risk(theta);
        let mut out = Vec::with_capacity(self.m());
        for j in 0..self.m() {
            let log_mu = self.offsets[j].ln() + ell[j];
            if !log_mu.is_finite() {
                return Err(Error::NumericDomain(format!("non-finite linear predictor at membership {j}")));
            }
            out.push(match self.config.likelihood {
                Likelihood::Poisson => poisson_log_pmf(y[j], log_mu),
                Likelihood::NegBin => {
                    let psi = theta.psi.ok_or_else(|| Error::InvalidArgument("negative binomial needs psi".into()))?;
                    negbin_log_pmf(y[j], log_mu.exp(), psi)?
                }
            });
        }
        Ok(out)
    }

    /// Log posterior and its gradient over the unconstrained coordinates.
    pub fn log_posterior_unconstrained(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!("expected {} coordinates, got {}", self.dim(), x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Rejected("non-finite coordinate".into()));
        }
        let lay = self.layout;
        let theta = self.constrain(x);
        let mut grad = vec![0.0; lay.dim()];
        let lik = self.likelihood_grad(&theta)?;
        let mut value = lik.value + self.fixed_effect_terms(&theta, &lik.d_ell, &mut grad);

        let phi_range = lay.phi();
        match (self.config.spatial, self.config.parameterisation) {
            (Spatial::None, _) => {}
            (_, Parameterisation::Post) => {
                for (i, v) in self.h.apply_transpose(&lik.d_ell).into_iter().enumerate() {
                    grad[phi_range.start + i] = v;
                }
            }
            (_, Parameterisation::Inverse) => {
                for (j, v) in lik.d_ell.iter().enumerate() {
                    grad[phi_range.start + j] = *v;
                }
            }
        }

        let mut d_alpha = 0.0;
        let mut d_tau = 0.0;
        if let Some(tau) = theta.tau {
            let sp = self.spatial_block(&theta.phi, theta.alpha, tau)?;
            value += sp.value;
            for (k, v) in sp.d_phi.iter().enumerate() {
                grad[phi_range.start + k] += v;
            }
            d_alpha = sp.d_alpha;
            d_tau = sp.d_tau;
        }
        value += self.hyper_terms(lay, &theta, [d_alpha, d_tau, lik.d_psi], &mut grad)?;

        if self.is_post_icar() {
            center(&mut grad[phi_range]);
        }
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Rejected("non-finite log posterior".into()));
        }
        Ok((value, grad))
    }

    /// Log likelihood with its derivatives in the membership log risks and
    /// in `psi`.
    fn likelihood_grad(&self, theta: &ParamVector) -> Result<LikelihoodGrad> {
        let y = self.require_counts()?;
        if [theta.tau, theta.psi].into_iter().flatten().any(|v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Rejected("scale parameter underflow or overflow".into()));
        }
        let ell = self.membership_log_risk(theta);
        let mut out = LikelihoodGrad { value: 0.0, d_ell: vec![0.0; self.m()], d_psi: 0.0 };
        for j in 0..self.m() {
            let log_mu = self.offsets[j].ln() + ell[j];
            if !log_mu.is_finite() || log_mu > 700.0 {
                return Err(Error::Rejected(format!("linear predictor overflow at membership {j}")));
            }
            let mu = log_mu.exp();
            let yj = y[j] as f64;
            match (self.config.likelihood, theta.psi) {
                (Likelihood::Poisson, _) => {
                    out.value += poisson_log_pmf(y[j], log_mu);
                    out.d_ell[j] = yj - mu;
                }
                (Likelihood::NegBin, Some(psi)) => {
                    out.value += negbin_log_pmf(y[j], mu, psi).map_err(|e| Error::Rejected(e.to_string()))?;
                    let denom = mu + psi;
                    out.d_ell[j] = yj - (yj + psi) * mu / denom;
                    out.d_psi += digamma(yj + psi) - digamma(psi) + (psi / denom).ln() + 1.0 - (yj + psi) / denom;
                }
                (Likelihood::NegBin, None) => unreachable!("layout always carries psi for negative binomial"),
            }
        }
        Ok(out)
    }

    /// Gradient of the likelihood in `gamma` and `beta` plus their normal
    /// priors; returns the prior log density.
    fn fixed_effect_terms(&self, theta: &ParamVector, d_ell: &[f64], grad: &mut [f64]) -> f64 {
        let lay = self.layout;
        grad[Layout::GAMMA] = d_ell.iter().zip(&self.row_sums).map(|(g, r)| g * r).sum();
        let gb = self.x_tilde.tr_mul(&DVector::from_column_slice(d_ell));
        for (k, idx) in lay.beta().enumerate() {
            grad[idx] = gb[k];
        }
        let sd = self.config.priors.coef_sd;
        let var = sd * sd;
        let norm_const = -0.5 * LN_2PI - sd.ln();
        let mut value = norm_const - 0.5 * theta.gamma * theta.gamma / var;
        grad[Layout::GAMMA] -= theta.gamma / var;
        for (k, idx) in lay.beta().enumerate() {
            value += norm_const - 0.5 * theta.beta[k] * theta.beta[k] / var;
            grad[idx] -= theta.beta[k] / var;
        }
        value
    }

    /// Gamma priors on `tau` and `psi`, the uniform prior on `alpha`, and the
    /// change of variables `alpha = logistic(u)`, `tau = exp(v)`,
    /// `psi = exp(w)`. `d` holds the other terms' derivatives in
    /// `(alpha, tau, psi)`.
    fn hyper_terms(&self, lay: Layout, theta: &ParamVector, d: [f64; 3], grad: &mut [f64]) -> Result<f64> {
        let pr = self.config.priors;
        let [d_alpha, mut d_tau, mut d_psi] = d;
        let mut value = 0.0;
        if let Some(tau) = theta.tau {
            value += gamma_log_pdf(tau, pr.tau_shape, pr.tau_rate);
            d_tau += (pr.tau_shape - 1.0) / tau - pr.tau_rate;
        }
        if let Some(psi) = theta.psi {
            value += gamma_log_pdf(psi, pr.psi_shape, pr.psi_rate);
            d_psi += (pr.psi_shape - 1.0) / psi - pr.psi_rate;
        }
        if let (Some(i), Some(a)) = (lay.alpha(), theta.alpha) {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Rejected(format!("alpha = {a} at the boundary")));
            }
            value += a.ln() + (1.0 - a).ln();
            grad[i] = d_alpha * a * (1.0 - a) + 1.0 - 2.0 * a;
        }
        if let (Some(i), Some(t)) = (lay.tau(), theta.tau) {
            value += t.ln();
            grad[i] = d_tau * t + 1.0;
        }
        if let (Some(i), Some(p)) = (lay.psi(), theta.psi) {
            value += p.ln();
            grad[i] = d_psi * p + 1.0;
        }
        Ok(value)
    }

    fn spatial_block(&self, phi: &[f64], alpha: Option<f64>, tau: f64) -> Result<SpatialGrad> {
        match &self.spatial_prior {
            SpatialPrior::None => Ok(SpatialGrad::default()),
            SpatialPrior::PostCar(prior) => {
                let a = alpha.expect("CAR carries alpha");
                let g = prior
                    .car_log_density_grad(CarParams { alpha: a, tau }, phi)
                    .map_err(|e| Error::Rejected(e.to_string()))?;
                Ok(SpatialGrad { value: g.value, d_phi: g.d_phi, d_alpha: g.d_alpha, d_tau: g.d_tau })
            }
            SpatialPrior::PostIcar => {
                let n = self.n() as f64;
                let pair = icar_pairwise_sum(&self.graph, phi);
                let lap: Vec<f64> = {
                    let w_phi = self.graph.adjacency_mul(phi);
                    (0..self.n()).map(|i| self.graph.degree(i) as f64 * phi[i] - w_phi[i]).collect()
                };
                Ok(SpatialGrad {
                    value: 0.5 * (n - 1.0) * tau.ln() - 0.5 * tau * pair,
                    d_phi: lap.iter().map(|v| -tau * v).collect(),
                    d_alpha: 0.0,
                    d_tau: 0.5 * (n - 1.0) / tau - 0.5 * pair,
                })
            }
            SpatialPrior::InverseCar { w, d } => {
                let a = alpha.expect("CAR carries alpha");
                self.inverse_car_block(w, d, phi, a, tau)
            }
            SpatialPrior::InverseIcar { chol, log_det } => {
                let m = self.m() as f64;
                let v = chol.solve(&DVector::from_column_slice(phi));
                let quad = v.dot(&DVector::from_column_slice(phi));
                Ok(SpatialGrad {
                    value: -0.5 * m * LN_2PI + 0.5 * (m * tau.ln() - log_det) - 0.5 * tau * quad,
                    d_phi: v.iter().map(|x| -tau * x).collect(),
                    d_alpha: 0.0,
                    d_tau: 0.5 * m / tau - 0.5 * quad,
                })
            }
        }
    }

    /// `phi~ ~ N(0, A / tau)` with `A = H (D - alpha W)^{-1} H^T`.
    fn inverse_car_block(&self, w: &DMatrix<f64>, d: &[f64], phi: &[f64], alpha: f64, tau: f64) -> Result<SpatialGrad> {
        let n = self.n();
        let m = self.m() as f64;
        let mut q1 = -alpha * w;
        for i in 0..n {
            q1[(i, i)] = d[i];
        }
        let sigma1 = linalg::cholesky(&q1).map_err(|e| Error::Rejected(e.to_string()))?.inverse();
        let hw = self.h.weights();
        let s = &sigma1 * hw.transpose();
        let mut a = hw * &s;
        linalg::symmetrize(&mut a);
        let chol = linalg::cholesky(&a).map_err(|e| Error::Rejected(e.to_string()))?;
        let log_det_a = linalg::log_det_chol(&chol);
        let phi_v = DVector::from_column_slice(phi);
        let v = chol.solve(&phi_v);
        let quad = v.dot(&phi_v);
        // dA/dalpha = S^T W S
        let a_inv = chol.inverse();
        let k = &s * a_inv * s.transpose();
        let u = &s * &v;
        let mut trace_term = 0.0;
        let mut quad_term = 0.0;
        for &(i, j) in self.graph.edges() {
            trace_term += 2.0 * k[(i, j)];
            quad_term += 2.0 * u[i] * u[j];
        }
        Ok(SpatialGrad {
            value: -0.5 * m * LN_2PI + 0.5 * (m * tau.ln() - log_det_a) - 0.5 * tau * quad,
            d_phi: v.iter().map(|x| -tau * x).collect(),
            d_alpha: -0.5 * trace_term + 0.5 * tau * quad_term,
            d_tau: 0.5 * m / tau - 0.5 * quad,
        })
    }

    /// Membership-level prior covariance `H Sigma H^T` for the given
    /// hyperparameters (inverse parameterisation).
    pub fn membership_covariance(&self, alpha: Option<f64>, tau: f64) -> Result<DMatrix<f64>> {
        match &self.spatial_prior {
            SpatialPrior::InverseCar { w, d } => {
                let a = alpha.ok_or_else(|| Error::InvalidArgument("CAR needs alpha".into()))?;
                let mut q = -a * w;
                for i in 0..self.n() {
                    q[(i, i)] = d[i];
                }
                let sigma = linalg::spd_inverse(&(q * tau))?;
                let hw = self.h.weights();
                let mut out = hw * sigma * hw.transpose();
                linalg::symmetrize(&mut out);
                Ok(out)
            }
            SpatialPrior::InverseIcar { chol, .. } => {
                let l = chol.l();
                Ok(&l * l.transpose() / tau)
            }
            _ => Err(Error::NotApplicable("membership covariance is only used by the inverse parameterisation".into())),
        }
    }
}

struct LikelihoodGrad {
    value: f64,
    d_ell: Vec<f64>,
    d_psi: f64,
}

#[derive(Debug, Clone, Default)]
struct SpatialGrad {
    value: f64,
    d_phi: Vec<f64>,
    d_alpha: f64,
    d_tau: f64,
}

fn center(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= mean;
    }
}

pub fn poisson_log_pmf(y: u64, log_mu: f64) -> f64 {
    let yf = y as f64;
    let lead = if y == 0 { 0.0 } else { yf * log_mu };
    lead - log_mu.exp() - ln_gamma(yf + 1.0)
}

/// Negative-binomial log pmf with mean `mu` and overdispersion `psi`
/// (variance `mu + mu^2 / psi`).
pub fn negbin_log_pmf(y: u64, mu: f64, psi: f64) -> Result<f64> {
    if !(psi > 0.0 && psi.is_finite()) {
        return Err(Error::InvalidArgument(format!("psi must be positive, got {psi}")));
    }
    if !(mu > 0.0) {
        return Err(Error::InvalidArgument(format!("mean must be positive, got {mu}")));
    }
    let yf = y as f64;
    let denom = mu + psi;
    let lead = if y == 0 { 0.0 } else { yf * (mu / denom).ln() };
    Ok(ln_gamma(yf + psi) - ln_gamma(psi) - ln_gamma(yf + 1.0) + psi * (psi / denom).ln() + lead)
}

pub fn gamma_log_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

fn normal_log_pdf(x: f64, sd: f64) -> f64 {
    -0.5 * (2.0 * PI).ln() - sd.ln() - 0.5 * (x / sd).powi(2)
}

/// Poisson log likelihood `sum_j [y_j log mu_j - mu_j - log y_j!]` with
/// `mu = E rho~`.
pub fn poisson_log_likelihood(spec: &ModelSpec, theta: &ParamVector) -> Result<f64> {
    spec.layout.check(theta)?;
    let y = spec.require_counts()?;
    let ell = spec.membership_log_risk(theta);
    let mut acc = 0.0;
    for j in 0..spec.m() {
        let log_mu = spec.offsets[j].ln() + ell[j];
        if !log_mu.is_finite() {
            return Err(Error::NumericDomain(format!("non-finite linear predictor at membership {j}")));
        }
        acc += poisson_log_pmf(y[j], log_mu);
    }
    Ok(acc)
}

pub fn negbin_log_likelihood(spec: &ModelSpec, theta: &ParamVector) -> Result<f64> {
    spec.layout.check(theta)?;
    let psi = theta.psi.ok_or_else(|| Error::InvalidArgument("negative binomial needs psi".into()))?;
    if !(psi > 0.0) {
        return Err(Error::InvalidArgument(format!("psi must be positive, got {psi}")));
    }
    let y = spec.require_counts()?;
    let ell = spec.membership_log_risk(theta);
    let mut acc = 0.0;
    for j in 0..spec.m() {
        let log_mu = spec.offsets[j].ln() + ell[j];
        if !log_mu.is_finite() {
            return Err(Error::NumericDomain(format!("non-finite linear predictor at membership {j}")));
        }
        acc += negbin_log_pmf(y[j], log_mu.exp(), psi)?;
    }
    Ok(acc)
}

pub fn log_likelihood(spec: &ModelSpec, theta: &ParamVector) -> Result<f64> {
    match spec.config.likelihood {
        Likelihood::Poisson => poisson_log_likelihood(spec, theta),
        Likelihood::NegBin => negbin_log_likelihood(spec, theta),
    }
}

/// Log prior density on the constrained scale; `-inf` outside the support.
pub fn log_prior(spec: &ModelSpec, theta: &ParamVector) -> Result<f64> {
    spec.layout.check(theta)?;
    let pr = spec.config.priors;
    let mut acc = normal_log_pdf(theta.gamma, pr.coef_sd);
    acc += theta.beta.iter().map(|&b| normal_log_pdf(b, pr.coef_sd)).sum::<f64>();
    if let Some(a) = theta.alpha {
        if !(a > 0.0 && a < 1.0) {
            return Ok(f64::NEG_INFINITY);
        }
    }
    for v in [theta.tau, theta.psi].into_iter().flatten() {
        if !(v > 0.0) {
            return Ok(f64::NEG_INFINITY);
        }
    }
    if let Some(t) = theta.tau {
        acc += gamma_log_pdf(t, pr.tau_shape, pr.tau_rate);
    }
    if let Some(p) = theta.psi {
        acc += gamma_log_pdf(p, pr.psi_shape, pr.psi_rate);
    }
    if let Some(tau) = theta.tau {
        if spec.is_post_icar() {
            let s: f64 = theta.phi.iter().sum();
            if s.abs() > ICAR_SUM_TOL {
                return Err(Error::ConstraintViolation(s.abs()));
            }
        }
        acc += spec.spatial_block(&theta.phi, theta.alpha, tau)?.value;
    }
    Ok(acc)
}

/// Log posterior (with the Jacobian of the unconstrained transform) and its
/// gradient over unconstrained coordinates, evaluated at a constrained point.
/// Points outside the prior support are rejected without a gradient.
pub fn log_posterior_and_gradient(spec: &ModelSpec, theta: &ParamVector) -> Result<(f64, Vec<f64>)> {
    let lp = log_prior(spec, theta)?;
    if lp == f64::NEG_INFINITY {
        return Err(Error::Rejected("parameter outside the prior support".into()));
    }
    let x = spec.unconstrain(theta)?;
    spec.log_posterior_unconstrained(&x)
}
