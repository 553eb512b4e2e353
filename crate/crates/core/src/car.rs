//! Proper CAR and intrinsic ICAR priors.
//!
//! The proper prior has precision `Q = tau * (D - alpha * W)`. Its
//! log-determinant is `n log tau + sum log d_i + sum log(1 - alpha * lambda_i)`
//! where `lambda_i` are the eigenvalues of `D^{-1/2} W D^{-1/2}`; those are
//! computed once when a [`CarPrior`] is built and reused for every
//! `(alpha, tau)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::AdjacencyGraph;
use crate::linalg;
use crate::rng::{rng_from_seed, Rng};

/// Tolerance for the sum-to-zero constraint of the ICAR prior.
pub const ICAR_SUM_TOL: f64 = 1e-8;
const PAIR_TOL: f64 = 1e-10;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarParams {
    pub alpha: f64,
    pub tau: f64,
}

impl CarParams {
    pub fn new(alpha: f64, tau: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1), got {alpha}")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
        }
        Ok(CarParams { alpha, tau })
    }
}

/// A proper CAR prior over a fixed graph, with the normalised-adjacency
/// spectrum cached.
#[derive(Debug, Clone)]
pub struct CarPrior {
    graph: AdjacencyGraph,
    eigvals: Vec<f64>,
    log_degree_sum: f64,
}

impl CarPrior {
    pub fn new(graph: AdjacencyGraph) -> Self {
        let n = graph.n();
        let inv_sqrt_d: Vec<f64> = graph.degrees().iter().map(|&d| 1.0 / (d as f64).sqrt()).collect();
        let mut a = DMatrix::zeros(n, n);
        for &(i, j) in graph.edges() {
            let v = inv_sqrt_d[i] * inv_sqrt_d[j];
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
        let eigvals = linalg::symmetric_eigenvalues(&a);
        let log_degree_sum = graph.degrees().iter().map(|&d| (d as f64).ln()).sum();
        CarPrior { graph, eigvals, log_degree_sum }
    }

    pub fn graph(&self) -> &AdjacencyGraph {
        &self.graph
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    /// Eigenvalues of `D^{-1/2} W D^{-1/2}`, ascending.
    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    pub fn build_precision(&self, p: CarParams) -> DMatrix<f64> {
        let n = self.n();
        let mut q = DMatrix::zeros(n, n);
        for i in 0..n {
            q[(i, i)] = p.tau * self.graph.degree(i) as f64;
        }
        for &(i, j) in self.graph.edges() {
            q[(i, j)] = -p.tau * p.alpha;
            q[(j, i)] = -p.tau * p.alpha;
        }
        q
    }

    /// `log det Q` from the cached spectrum.
    pub fn log_det_precision(&self, p: CarParams) -> Result<f64> {
        let mut acc = 0.0;
        for &lam in &self.eigvals {
            let v = 1.0 - p.alpha * lam;
            if v <= 0.0 {
                return Err(Error::NumericDomain(format!("1 - alpha*lambda = {v} for alpha = {}", p.alpha)));
            }
            acc += v.ln();
        }
        Ok(self.n() as f64 * p.tau.ln() + self.log_degree_sum + acc)
    }

    /// `phi^T (D - alpha W) phi` assembled from the edge list (no tau).
    fn unit_quadratic(&self, alpha: f64, phi: &[f64]) -> f64 {
        let diag: f64 = phi.iter().enumerate().map(|(i, v)| self.graph.degree(i) as f64 * v * v).sum();
        let cross: f64 = self.graph.edges().iter().map(|&(i, j)| phi[i] * phi[j]).sum();
        diag - 2.0 * alpha * cross
    }

    pub fn car_log_density(&self, p: CarParams, phi: &[f64]) -> Result<f64> {
        self.check_len(phi)?;
        let log_det = self.log_det_precision(p)?;
        let n = self.n() as f64;
        Ok(-n * HALF_LN_2PI + 0.5 * log_det - 0.5 * p.tau * self.unit_quadratic(p.alpha, phi))
    }

    /// Log density with its partial derivatives with respect to `phi`,
    /// `alpha` and `tau`.
    pub fn car_log_density_grad(&self, p: CarParams, phi: &[f64]) -> Result<CarDensityGrad> {
        self.check_len(phi)?;
        let log_det = self.log_det_precision(p)?;
        let n = self.n() as f64;
        let cross: f64 = self.graph.edges().iter().map(|&(i, j)| phi[i] * phi[j]).sum();
        let quad = self.unit_quadratic(p.alpha, phi);
        let w_phi = self.graph.adjacency_mul(phi);
        let d_phi = phi
            .iter()
            .enumerate()
            .map(|(i, v)| -p.tau * (self.graph.degree(i) as f64 * v - p.alpha * w_phi[i]))
            .collect();
        let d_logdet_alpha: f64 = self.eigvals.iter().map(|lam| -lam / (1.0 - p.alpha * lam)).sum();
        Ok(CarDensityGrad {
            value: -n * HALF_LN_2PI + 0.5 * log_det - 0.5 * p.tau * quad,
            d_phi,
            d_alpha: 0.5 * d_logdet_alpha + p.tau * cross,
            d_tau: 0.5 * n / p.tau - 0.5 * quad,
        })
    }

    /// Exact draw from `N(0, Q^{-1})`.
    pub fn sample_prior(&self, p: CarParams, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        self.sample_prior_with(p, &mut rng)
    }

    pub fn sample_prior_with(&self, p: CarParams, rng: &mut Rng) -> Vec<f64> {
        let q = self.build_precision(p);
        let chol = linalg::cholesky(&q).expect("CAR precision is positive definite for alpha < 1");
        let z = DVector::from_iterator(self.n(), (0..self.n()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        // Q = L L^T, so L^{-T} z has covariance Q^{-1}
        let x = chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .expect("cholesky factor has a positive diagonal");
        x.iter().copied().collect()
    }

    fn check_len(&self, phi: &[f64]) -> Result<()> {
        if phi.len() != self.n() {
            return Err(Error::DimensionMismatch(format!("phi has length {}, prior has {} areas", phi.len(), self.n())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CarDensityGrad {
    pub value: f64,
    pub d_phi: Vec<f64>,
    pub d_alpha: f64,
    pub d_tau: f64,
}

/// Intrinsic CAR log density without its normalising constant:
/// `-(tau/2) * sum_{(i,j) in edges} (phi_i - phi_j)^2`.
pub fn icar_log_density_unnormalized(graph: &AdjacencyGraph, tau: f64, phi: &[f64]) -> Result<f64> {
    if phi.len() != graph.n() {
        return Err(Error::DimensionMismatch(format!("phi has length {}, graph has {} areas", phi.len(), graph.n())));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let s: f64 = phi.iter().sum();
    if s.abs() > ICAR_SUM_TOL {
        return Err(Error::ConstraintViolation(s.abs()));
    }
    Ok(-0.5 * tau * icar_pairwise_sum(graph, phi))
}

pub(crate) fn icar_pairwise_sum(graph: &AdjacencyGraph, phi: &[f64]) -> f64 {
    graph.edges().iter().map(|&(i, j)| (phi[i] - phi[j]).powi(2)).sum()
}

/// Mean and variance of `phi_i | phi_{-i}` for precision `tau (D - alpha W)`;
/// `alpha = 1` gives the intrinsic conditional.
pub fn full_conditional(graph: &AdjacencyGraph, alpha: f64, tau: f64, phi: &[f64], i: usize) -> Result<(f64, f64)> {
    if i >= graph.n() {
        return Err(Error::IndexOutOfRange { index: i, len: graph.n() });
    }
    if phi.len() != graph.n() {
        return Err(Error::DimensionMismatch(format!("phi has length {}, graph has {} areas", phi.len(), graph.n())));
    }
    let d = graph.degree(i) as f64;
    let s: f64 = graph.neighbours(i).iter().map(|&j| phi[j]).sum();
    Ok((alpha * s / d, 1.0 / (tau * d)))
}

/// CAR conditions checked by [`validate_car_pair`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CarCondition {
    /// `I - C` has positive eigenvalues.
    C1,
    /// `M` diagonal with positive diagonal.
    C2,
    /// `C` has a zero diagonal.
    C3,
    /// `C_ij / M_ii = C_ji / M_jj`.
    C4,
}

/// The `(C, M)` pair of a CAR covariance `(I - C)^{-1} M`.
#[derive(Debug, Clone, PartialEq)]
pub struct CarPair {
    pub c: DMatrix<f64>,
    pub m: DMatrix<f64>,
}

impl CarPair {
    /// `(I - C)^{-1} M`.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        let n = self.c.nrows();
        let i_minus_c = DMatrix::identity(n, n) - &self.c;
        let lu = i_minus_c.lu();
        lu.solve(&self.m)
            .ok_or_else(|| Error::NumericDomain("I - C is singular".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CarPairCheck {
    pub valid: bool,
    pub violated: Option<CarCondition>,
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= PAIR_TOL * 1f64.max(a.abs()).max(b.abs())
}

/// Checks C1–C4 in order and reports the first violated condition.
pub fn validate_car_pair(pair: &CarPair) -> Result<CarPairCheck> {
    let n = pair.c.nrows();
    if !pair.c.is_square() || pair.m.shape() != pair.c.shape() {
        return Err(Error::DimensionMismatch("C and M must be square and of equal size".into()));
    }
    let fail = |c| Ok(CarPairCheck { valid: false, violated: Some(c) });

    let i_minus_c = DMatrix::identity(n, n) - &pair.c;
    let eig = i_minus_c.complex_eigenvalues();
    let scale = linalg::max_abs(&i_minus_c).max(1.0);
    if eig.iter().any(|z| z.re <= 0.0 || z.im.abs() > PAIR_TOL * scale) {
        return fail(CarCondition::C1);
    }
    for i in 0..n {
        for j in 0..n {
            if i == j {
                if !(pair.m[(i, i)] > 0.0) {
                    return fail(CarCondition::C2);
                }
            } else if pair.m[(i, j)] != 0.0 {
                return fail(CarCondition::C2);
            }
        }
    }
    if (0..n).any(|i| pair.c[(i, i)].abs() > PAIR_TOL) {
        return fail(CarCondition::C3);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if !close(pair.c[(i, j)] / pair.m[(i, i)], pair.c[(j, i)] / pair.m[(j, j)]) {
                return fail(CarCondition::C4);
            }
        }
    }
    Ok(CarPairCheck { valid: true, violated: None })
}

/// Unique `(C, M)` with `(I - C)^{-1} M = Sigma`: with `Q = Sigma^{-1}`,
/// `M_ii = 1 / Q_ii` and `C = I - M Q`.
pub fn extract_car_pair(sigma: &DMatrix<f64>) -> Result<CarPair> {
    if !sigma.is_square() {
        return Err(Error::DimensionMismatch("Sigma must be square".into()));
    }
    let n = sigma.nrows();
    let mut q = linalg::spd_inverse(sigma)?;
    linalg::symmetrize(&mut q);
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = 1.0 / q[(i, i)];
    }
    let mut c = DMatrix::identity(n, n) - &m * &q;
    for i in 0..n {
        c[(i, i)] = 0.0;
    }
    Ok(CarPair { c, m })
}

/// Dense Gaussian log density with precision `q`; test oracle helper.
pub fn dense_gaussian_log_density(q: &DMatrix<f64>, x: &[f64]) -> Result<f64> {
    let n = q.nrows();
    let v = linalg::dvec(x);
    let log_det = linalg::log_det_spd(q)?;
    Ok(-0.5 * n as f64 * (2.0 * PI).ln() + 0.5 * log_det - 0.5 * v.dot(&(q * &v)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::make_grid;
    use proptest::prelude::*;

    fn prior(rows: usize, cols: usize) -> CarPrior {
        CarPrior::new(make_grid(rows, cols).unwrap())
    }

    #[test]
    fn params_validated() {
        assert!(CarParams::new(1.0, 1.0).is_err());
        assert!(CarParams::new(-0.1, 1.0).is_err());
        assert!(CarParams::new(0.5, 0.0).is_err());
        assert!(CarParams::new(0.0, 2.0).is_ok());
    }

    #[test]
    fn spectrum_is_normalised() {
        let p = prior(5, 4);
        let e = p.eigvals();
        assert!(e.windows(2).all(|w| w[0] <= w[1]));
        assert!(e[0] >= -1.0 - 1e-10);
        assert!((e[e.len() - 1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn precision_examples() {
        let p = prior(3, 3);
        let q = p.build_precision(CarParams::new(0.0, 1.0).unwrap());
        let d = p.graph().degrees();
        for i in 0..9 {
            for j in 0..9 {
                let want = if i == j { d[i] as f64 } else { 0.0 };
                assert_eq!(q[(i, j)], want);
            }
        }
        let path = prior(1, 2);
        let q = path.build_precision(CarParams::new(0.5, 2.0).unwrap());
        assert_eq!(q, DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]));
    }

    #[test]
    fn log_det_at_zero_alpha() {
        let p = prior(3, 4);
        let tau = 2.5;
        let got = p.log_det_precision(CarParams::new(0.0, tau).unwrap()).unwrap();
        let want = 12.0 * tau.ln() + p.graph().degrees().iter().map(|&d| (d as f64).ln()).sum::<f64>();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn log_det_matches_dense_on_4x4() {
        let p = prior(4, 4);
        let params = CarParams::new(0.9, 3.0).unwrap();
        let dense = linalg::log_det_spd(&p.build_precision(params)).unwrap();
        assert!((p.log_det_precision(params).unwrap() - dense).abs() < 1e-8);
    }

    #[test]
    fn density_at_zero_and_independent_case() {
        let p = prior(3, 3);
        let params = CarParams::new(0.4, 1.7).unwrap();
        let at_zero = p.car_log_density(params, &[0.0; 9]).unwrap();
        let want = -4.5 * (2.0 * PI).ln() + 0.5 * p.log_det_precision(params).unwrap();
        assert!((at_zero - want).abs() < 1e-12);

        let params = CarParams::new(0.0, 2.0).unwrap();
        let phi: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) * 0.3).collect();
        let indep: f64 = phi
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let var = 1.0 / (2.0 * p.graph().degree(i) as f64);
                -0.5 * (2.0 * PI * var).ln() - 0.5 * x * x / var
            })
            .sum();
        assert!((p.car_log_density(params, &phi).unwrap() - indep).abs() < 1e-12);
        assert!(matches!(p.car_log_density(params, &[0.0; 3]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn icar_examples() {
        let g = make_grid(1, 2).unwrap();
        assert_eq!(icar_log_density_unnormalized(&g, 1.0, &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(icar_log_density_unnormalized(&g, 1.0, &[1.0, -1.0]).unwrap(), -2.0);
        assert!(matches!(
            icar_log_density_unnormalized(&g, 1.0, &[1.5, -0.5]),
            Err(Error::ConstraintViolation(_))
        ));
    }

    #[test]
    fn sampling_is_seeded() {
        let p = prior(3, 3);
        let params = CarParams::new(0.5, 1.0).unwrap();
        assert_eq!(p.sample_prior(params, 11), p.sample_prior(params, 11));
        assert_ne!(p.sample_prior(params, 11), p.sample_prior(params, 12));
    }

    #[test]
    fn conditional_at_zero_alpha() {
        let g = make_grid(3, 3).unwrap();
        let phi = [0.3; 9];
        let (mean, var) = full_conditional(&g, 0.0, 2.0, &phi, 4).unwrap();
        assert_eq!(mean, 0.0);
        assert!((var - 1.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn pair_checks() {
        let n = 3;
        let ok = CarPair { c: DMatrix::zeros(n, n), m: DMatrix::identity(n, n) };
        assert_eq!(validate_car_pair(&ok).unwrap(), CarPairCheck { valid: true, violated: None });
        let mut c = DMatrix::zeros(n, n);
        c[(1, 1)] = 0.2;
        let bad = CarPair { c, m: DMatrix::identity(n, n) };
        assert_eq!(validate_car_pair(&bad).unwrap().violated, Some(CarCondition::C3));
        let mut m = DMatrix::identity(n, n);
        m[(0, 1)] = 0.1;
        let bad = CarPair { c: DMatrix::zeros(n, n), m };
        assert_eq!(validate_car_pair(&bad).unwrap().violated, Some(CarCondition::C2));
        let mut c = DMatrix::zeros(n, n);
        c[(0, 1)] = 0.3;
        c[(1, 0)] = 0.1;
        let bad = CarPair { c, m: DMatrix::identity(n, n) };
        assert_eq!(validate_car_pair(&bad).unwrap().violated, Some(CarCondition::C4));
        let mut c = DMatrix::zeros(2, 2);
        c[(0, 1)] = 2.0;
        c[(1, 0)] = 2.0;
        let bad = CarPair { c, m: DMatrix::identity(2, 2) };
        assert_eq!(validate_car_pair(&bad).unwrap().violated, Some(CarCondition::C1));
    }

    #[test]
    fn diagonal_sigma_gives_zero_c() {
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0, 3.0]));
        let pair = extract_car_pair(&sigma).unwrap();
        assert_eq!(pair.c, DMatrix::zeros(3, 3));
        assert!(linalg::max_abs_diff(&pair.m, &sigma) < 1e-15);
    }

    #[test]
    fn singular_sigma_rejected() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(extract_car_pair(&sigma), Err(Error::NotPositiveDefinite(_))));
    }

    proptest! {
        #[test]
        fn sparse_density_matches_dense(
            alpha in 0.0f64..0.99,
            tau in 0.1f64..10.0,
            phi in proptest::collection::vec(-2.0f64..2.0, 9),
        ) {
            let p = prior(3, 3);
            let params = CarParams::new(alpha, tau).unwrap();
            let q = p.build_precision(params);
            let dense = dense_gaussian_log_density(&q, &phi).unwrap();
            let sparse = p.car_log_density(params, &phi).unwrap();
            prop_assert!((dense - sparse).abs() < 1e-10);
            let v = linalg::dvec(&phi);
            let diff = sparse - p.car_log_density(params, &[0.0; 9]).unwrap();
            prop_assert!((diff + 0.5 * v.dot(&(&q * &v))).abs() < 1e-10);
        }

        #[test]
        fn density_gradient_matches_finite_differences(
            alpha in 0.05f64..0.95,
            tau in 0.2f64..5.0,
            phi in proptest::collection::vec(-1.0f64..1.0, 6),
        ) {
            let p = prior(2, 3);
            let params = CarParams::new(alpha, tau).unwrap();
            let g = p.car_log_density_grad(params, &phi).unwrap();
            let h = 1e-6;
            let f = |a: f64, t: f64| p.car_log_density(CarParams { alpha: a, tau: t }, &phi).unwrap();
            let fd_a = (f(alpha + h, tau) - f(alpha - h, tau)) / (2.0 * h);
            let fd_t = (f(alpha, tau + h) - f(alpha, tau - h)) / (2.0 * h);
            prop_assert!((g.d_alpha - fd_a).abs() < 1e-6 * fd_a.abs().max(1.0));
            prop_assert!((g.d_tau - fd_t).abs() < 1e-6 * fd_t.abs().max(1.0));
            for k in 0..6 {
                let mut up = phi.clone();
                let mut dn = phi.clone();
                up[k] += h;
                dn[k] -= h;
                let fd = (p.car_log_density(params, &up).unwrap() - p.car_log_density(params, &dn).unwrap()) / (2.0 * h);
                prop_assert!((g.d_phi[k] - fd).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }

        #[test]
        fn tau_scaling_of_log_det(alpha in 0.0f64..0.99, tau in 0.1f64..10.0) {
            let p = prior(3, 4);
            let one = p.log_det_precision(CarParams::new(alpha, 1.0).unwrap()).unwrap();
            let scaled = p.log_det_precision(CarParams::new(alpha, tau).unwrap()).unwrap();
            prop_assert!((scaled - one - 12.0 * tau.ln()).abs() < 1e-10);
        }
    }
}
