//! Prior draws and synthetic counts.
//!
//! Both data-generation parameterisations draw membership effects as
//! `phi~ = H phi` with `phi` from the areal CAR/ICAR prior, which has exactly
//! the covariance `H Sigma H^T` the inverse prior uses. They differ in the
//! areal truth: *post* keeps `phi`, *inverse* maps back with `H^+ phi~`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Likelihood, ModelSpec, ParamVector, Parameterisation, Spatial};
use crate::car::{CarParams, CarPrior};
use crate::error::{Error, Result};
use crate::graph::AdjacencyGraph;
use crate::rng::Rng;

const MAX_MEAN: f64 = 1e9;

/// Generating parameters with both areal and membership random effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub gamma: f64,
    pub beta: Vec<f64>,
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub psi: Option<f64>,
    pub areal_phi: Vec<f64>,
    pub membership_phi: Vec<f64>,
}

impl Truth {
    /// The truth in the coordinates `spec` samples in.
    pub fn param_vector(&self, spec: &ModelSpec) -> ParamVector {
        let phi = match (spec.config().spatial, spec.config().parameterisation) {
            (Spatial::None, _) => Vec::new(),
            (_, Parameterisation::Post) => self.areal_phi.clone(),
            (_, Parameterisation::Inverse) => self.membership_phi.clone(),
        };
        ParamVector { gamma: self.gamma, beta: self.beta.clone(), phi, alpha: self.alpha, tau: self.tau, psi: self.psi }
    }

    pub fn areal_log_risk(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let xb = x * DVector::from_column_slice(&self.beta);
        (0..x.nrows()).map(|i| self.gamma + xb[i] + self.areal_phi[i]).collect()
    }

    pub fn membership_log_risk(&self, spec: &ModelSpec) -> Vec<f64> {
        let fixed: Vec<f64> = {
            let xb = spec.covariates() * DVector::from_column_slice(&self.beta);
            xb.iter().map(|v| self.gamma + v).collect()
        };
        let hf = spec.membership().apply(&fixed);
        hf.iter().zip(&self.membership_phi).map(|(a, b)| a + b).collect()
    }
}

/// Draws every parameter from its prior.
pub fn draw_truth(spec: &ModelSpec, generation: Parameterisation, rng: &mut Rng) -> Result<Truth> {
    let cfg = spec.config();
    let pr = cfg.priors;
    let coef = Normal::new(0.0, pr.coef_sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let gamma = coef.sample(rng);
    let beta: Vec<f64> = (0..spec.covariates().ncols()).map(|_| coef.sample(rng)).collect();
    let gamma_draw = |shape: f64, rate: f64, rng: &mut Rng| -> Result<f64> {
        Ok(Gamma::new(shape, 1.0 / rate).map_err(|e| Error::InvalidArgument(e.to_string()))?.sample(rng))
    };
    let (alpha, tau, phi) = match cfg.spatial {
        Spatial::None => (None, None, vec![0.0; spec.n()]),
        Spatial::Car => {
            let alpha = loop {
                let a: f64 = rng.random();
                if a > 0.0 {
                    break a;
                }
            };
            let tau = gamma_draw(pr.tau_shape, pr.tau_rate, rng)?;
            let prior = CarPrior::new(spec.graph().clone());
            let phi = prior.sample_prior_with(CarParams::new(alpha, tau)?, rng);
            (Some(alpha), Some(tau), phi)
        }
        Spatial::Icar => {
            let tau = gamma_draw(pr.tau_shape, pr.tau_rate, rng)?;
            (None, Some(tau), sample_icar(spec.graph(), tau, rng))
        }
    };
    let psi = match cfg.likelihood {
        Likelihood::Poisson => None,
        Likelihood::NegBin => Some(gamma_draw(pr.psi_shape, pr.psi_rate, rng)?),
    };
    let (areal_phi, membership_phi) = if cfg.spatial == Spatial::None {
        (vec![0.0; spec.n()], vec![0.0; spec.m()])
    } else {
        let tilde = spec.membership().apply(&phi);
        match generation {
            Parameterisation::Post => (phi, tilde),
            Parameterisation::Inverse => {
                let back = spec.pinv() * DVector::from_column_slice(&tilde);
                (back.iter().copied().collect(), tilde)
            }
        }
    };
    Ok(Truth { gamma, beta, alpha, tau, psi, areal_phi, membership_phi })
}

/// Exact draw from the sum-to-zero ICAR prior with precision `tau (D - W)`.
pub fn sample_icar(graph: &AdjacencyGraph, tau: f64, rng: &mut Rng) -> Vec<f64> {
    let n = graph.n();
    let mut lap = -graph.adjacency_matrix();
    for i in 0..n {
        lap[(i, i)] = graph.degree(i) as f64;
    }
    let eig = SymmetricEigen::new(lap);
    let lmax = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    let mut phi = DVector::zeros(n);
    for k in 0..n {
        let lambda = eig.eigenvalues[k];
        if lambda <= 1e-9 * lmax {
            continue;
        }
        let z: f64 = rng.sample(StandardNormal);
        phi += eig.eigenvectors.column(k) * (z / (tau * lambda).sqrt());
    }
    let mean = phi.mean();
    phi.iter().map(|v| v - mean).collect()
}

/// Draws counts given membership log relative risks.
pub fn simulate_counts(
    likelihood: Likelihood,
    offsets: &[f64],
    log_risk: &[f64],
    psi: Option<f64>,
    rng: &mut Rng,
) -> Result<Vec<u64>> {
    if offsets.len() != log_risk.len() {
        return Err(Error::DimensionMismatch(format!("{} offsets for {} risks", offsets.len(), log_risk.len())));
    }
    offsets
        .iter()
        .zip(log_risk)
        .map(|(&e, &l)| {
            let mu = e * l.exp();
            if !(mu.is_finite() && mu < MAX_MEAN) {
                return Err(Error::SimulationFailure(format!("expected count {mu} out of range")));
            }
            let rate = match likelihood {
                Likelihood::Poisson => mu,
                Likelihood::NegBin => {
                    let psi = psi.ok_or_else(|| Error::InvalidArgument("negative binomial needs psi".into()))?;
                    Gamma::new(psi, mu / psi).map_err(|e| Error::InvalidArgument(e.to_string()))?.sample(rng)
                }
            };
            draw_poisson(rate, rng)
        })
        .collect()
}

pub(crate) fn draw_poisson(rate: f64, rng: &mut Rng) -> Result<u64> {
    if rate <= 0.0 {
        return Ok(0);
    }
    if !(rate.is_finite() && rate < MAX_MEAN) {
        return Err(Error::SimulationFailure(format!("Poisson rate {rate} out of range")));
    }
    let d = Poisson::new(rate).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(d.sample(rng) as u64)
}

/// Draws truth and counts in one go.
pub fn simulate_dataset(spec: &ModelSpec, generation: Parameterisation, rng: &mut Rng) -> Result<(Truth, Vec<u64>)> {
    let truth = draw_truth(spec, generation, rng)?;
    let log_risk = truth.membership_log_risk(spec);
    let y = simulate_counts(spec.config().likelihood, spec.offsets(), &log_risk, truth.psi, rng)?;
    Ok((truth, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::make_grid;
    use crate::rng::rng_from_seed;

    #[test]
    fn icar_draws_sum_to_zero() {
        let g = make_grid(3, 4).unwrap();
        let mut rng = rng_from_seed(3);
        for _ in 0..20 {
            let phi = sample_icar(&g, 2.0, &mut rng);
            assert!(phi.iter().sum::<f64>().abs() < 1e-10);
        }
    }

    #[test]
    fn icar_pairwise_variance() {
        // E[sum_edges (phi_i - phi_j)^2] = (n - 1) / tau
        let g = make_grid(3, 3).unwrap();
        let mut rng = rng_from_seed(11);
        let reps = 20_000;
        let mut acc = 0.0;
        for _ in 0..reps {
            let phi = sample_icar(&g, 4.0, &mut rng);
            acc += g.edges().iter().map(|&(i, j)| (phi[i] - phi[j]).powi(2)).sum::<f64>();
        }
        let mean = acc / reps as f64;
        assert!((mean - 2.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn negbin_moments() {
        let mut rng = rng_from_seed(5);
        let y = simulate_counts(Likelihood::NegBin, &vec![5.0; 100_000], &vec![0.0; 100_000], Some(2.0), &mut rng).unwrap();
        let n = y.len() as f64;
        let mean = y.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = y.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 5.0).abs() < 0.1, "{mean}");
        assert!((var - 17.5).abs() / 17.5 < 0.05, "{var}");
    }
}
