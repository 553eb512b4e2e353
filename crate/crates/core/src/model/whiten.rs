//! Non-centred coordinates for the sampler.
//!
//! With `D^{-1/2} W D^{-1/2} = V diag(lambda) V^T`, areal effects are
//! `phi = tau^{-1/2} D^{-1/2} V diag(s) z` where `s_k = (1 - alpha lambda_k)^{-1/2}`
//! and `z ~ N(0, I)`. ICAR drops the constant direction and centres `phi`;
//! inverse-parameterised models report `phi~ = H phi`. The posterior over
//! the reported parameters is unchanged.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{center, Layout, ModelSpec, ParamVector, Parameterisation, Spatial, LN_2PI};
use crate::error::{Error, Result};
use crate::graph::AdjacencyGraph;

const NULL_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub(super) struct Whitening {
    /// `D^{-1/2} V`
    basis: DMatrix<f64>,
    /// `V^T D^{1/2}`
    basis_inv: DMatrix<f64>,
    lambda: Vec<f64>,
    icar: bool,
}

impl Whitening {
    pub(super) fn new(graph: &AdjacencyGraph, icar: bool) -> Self {
        let d: Vec<f64> = graph.degrees().iter().map(|&k| k as f64).collect();
        let n = d.len();
        let w = graph.adjacency_matrix();
        let eig = SymmetricEigen::new(DMatrix::from_fn(n, n, |i, j| w[(i, j)] / (d[i] * d[j]).sqrt()));
        let v = &eig.eigenvectors;
        Whitening {
            basis: DMatrix::from_fn(n, n, |i, k| v[(i, k)] / d[i].sqrt()),
            basis_inv: DMatrix::from_fn(n, n, |k, i| v[(i, k)] * d[i].sqrt()),
            lambda: eig.eigenvalues.iter().copied().collect(),
            icar,
        }
    }

    fn scales(&self, alpha: f64) -> Vec<f64> {
        self.lambda
            .iter()
            .map(|&l| if self.icar && l > 1.0 - NULL_TOL { 0.0 } else { (1.0 - alpha * l).powf(-0.5) })
            .collect()
    }

    fn areal(&self, z: &[f64], alpha: f64, tau: f64) -> Vec<f64> {
        let c = tau.powf(-0.5);
        let v = DVector::from_iterator(z.len(), self.scales(alpha).iter().zip(z).map(|(s, z)| c * s * z));
        let mut phi: Vec<f64> = (&self.basis * v).iter().copied().collect();
        if self.icar {
            center(&mut phi);
        }
        phi
    }

    fn coordinates(&self, phi: &[f64], alpha: f64, tau: f64) -> Vec<f64> {
        let a = &self.basis_inv * DVector::from_column_slice(phi);
        self.scales(alpha)
            .iter()
            .zip(a.iter())
            .map(|(&s, a)| if s == 0.0 { 0.0 } else { tau.sqrt() * a / s })
            .collect()
    }
}

impl ModelSpec {
    /// Layout of the sampler's coordinates: the random-effect block always
    /// has one whitened coordinate per area.
    pub fn sampling_layout(&self) -> Layout {
        let phi_len = if self.config.spatial == Spatial::None { 0 } else { self.n() };
        Layout { phi_len, ..self.layout }
    }

    /// Sampler coordinates -> constrained parameters.
    pub fn from_sampling(&self, x: &[f64]) -> ParamVector {
        let mut theta = self.sampling_layout().constrain(x);
        if let (Some(w), Some(tau)) = (&self.whitening, theta.tau) {
            let areal = w.areal(&theta.phi, theta.alpha.unwrap_or(1.0), tau);
            theta.phi = match self.config.parameterisation {
                Parameterisation::Post => areal,
                Parameterisation::Inverse => self.h.apply(&areal),
            };
        }
        theta
    }

    /// A sampler coordinate vector mapping to `theta`. Inverse models use the
    /// minimum-norm areal preimage of `phi~`, sum-zero under ICAR.
    pub fn to_sampling(&self, theta: &ParamVector) -> Result<Vec<f64>> {
        self.layout.check(theta)?;
        let mut z = theta.clone();
        if let (Some(w), Some(tau)) = (&self.whitening, theta.tau) {
            if !(tau > 0.0) {
                return Err(Error::NumericDomain(format!("tau {tau} must be positive")));
            }
            let areal = match (self.config.parameterisation, w.icar) {
                (Parameterisation::Inverse, true) => {
                    let (m, n) = (self.m(), self.n());
                    let hw = self.h.weights();
                    let stacked = DMatrix::from_fn(m + 1, n, |j, i| if j < m { hw[(j, i)] } else { 1.0 });
                    let rhs = DVector::from_iterator(m + 1, theta.phi.iter().copied().chain([0.0]));
                    (crate::linalg::pseudo_inverse(&stacked) * rhs).iter().copied().collect()
                }
                _ => self.areal_phi(theta),
            };
            z.phi = w.coordinates(&areal, theta.alpha.unwrap_or(1.0), tau);
        }
        self.sampling_layout().unconstrain(&z)
    }

    /// Log posterior and gradient over the sampler coordinates.
    pub fn sampling_log_density_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let lay = self.sampling_layout();
        if x.len() != lay.dim() {
            return Err(Error::DimensionMismatch(format!("expected {} coordinates, got {}", lay.dim(), x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Rejected("non-finite coordinate".into()));
        }
        let theta = self.from_sampling(x);
        let mut grad = vec![0.0; lay.dim()];
        let lik = self.likelihood_grad(&theta)?;
        let mut value = lik.value + self.fixed_effect_terms(&theta, &lik.d_ell, &mut grad);
        let mut d_alpha = 0.0;
        let mut d_tau = 0.0;
        if let (Some(w), Some(tau)) = (&self.whitening, theta.tau) {
            let z = &x[lay.phi()];
            let s = w.scales(theta.alpha.unwrap_or(1.0));
            let c = tau.powf(-0.5);
            let mut g = self.h.apply_transpose(&lik.d_ell);
            if w.icar {
                center(&mut g);
            }
            let r = w.basis.tr_mul(&DVector::from_vec(g));
            let mut g_dot_phi = 0.0;
            for k in 0..z.len() {
                grad[lay.phi().start + k] = c * s[k] * r[k] - z[k];
                g_dot_phi += c * s[k] * r[k] * z[k];
                d_alpha += 0.5 * c * r[k] * z[k] * w.lambda[k] * s[k].powi(3);
            }
            d_tau = -0.5 * g_dot_phi / tau;
            value -= 0.5 * z.iter().map(|v| v * v).sum::<f64>() + 0.5 * z.len() as f64 * LN_2PI;
        }
        value += self.hyper_terms(lay, &theta, [d_alpha, d_tau, lik.d_psi], &mut grad)?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Rejected("non-finite log posterior".into()));
        }
        Ok((value, grad))
    }
}
