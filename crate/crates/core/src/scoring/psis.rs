//! Pareto-smoothed importance sampling for leave-one-out cross-validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of the largest ratios smoothed by the generalized Pareto fit.
pub const TAIL_FRACTION: f64 = 0.2;
/// Shape estimates above this flag an unreliable LOO term.
pub const K_WARN: f64 = 0.7;
const MIN_TAIL: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsisLoo {
    pub elpd: f64,
    pub se: f64,
    pub pointwise: Vec<f64>,
    pub pareto_k: Vec<f64>,
    /// Observations whose tail could not be fitted and used raw ratios.
    pub fallback: Vec<bool>,
}

impl PsisLoo {
    /// Indices with `k > 0.7`.
    pub fn high_k(&self) -> Vec<usize> {
        self.pareto_k.iter().enumerate().filter(|(_, &k)| k > K_WARN).map(|(j, _)| j).collect()
    }
}

/// Generalized Pareto fit `(k, sigma)` to positive exceedances sorted
/// ascending, by the profile-likelihood grid of Zhang and Stephens with a
/// weakly informative pull of `k` toward 0.5.
pub fn gpd_fit(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let nf = n as f64;
    let prior = 3.0;
    let grid = 30 + (nf.sqrt() as usize);
    let x_max = x[n - 1];
    let x_quart = x[((nf / 4.0 + 0.5) as usize).max(1) - 1];
    let thetas: Vec<f64> = (1..=grid)
        .map(|j| 1.0 / x_max + (1.0 - (grid as f64 / (j as f64 - 0.5)).sqrt()) / prior / x_quart)
        .collect();
    let profile: Vec<f64> = thetas
        .iter()
        .map(|&t| {
            let k = x.iter().map(|&v| (-t * v).ln_1p()).sum::<f64>() / nf;
            nf * ((-t / k).ln() - k - 1.0)
        })
        .collect();
    let top = profile.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = profile.iter().map(|&l| if l.is_finite() { (l - top).exp() } else { 0.0 }).collect();
    let wsum: f64 = weights.iter().sum();
    let theta = thetas.iter().zip(&weights).map(|(t, w)| t * w).sum::<f64>() / wsum;
    let k = x.iter().map(|&v| (-theta * v).ln_1p()).sum::<f64>() / nf;
    let sigma = -k / theta;
    let k = (nf * k + 10.0 * 0.5) / (nf + 10.0);
    (k, sigma)
}

/// Generalized Pareto quantile function.
pub fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-12 {
        -sigma * (-p).ln_1p()
    } else {
        sigma * (-k * (-p).ln_1p()).exp_m1() / k
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Smooths one column of log importance ratios in place; returns
/// `(k, fallback)`.
pub fn psis_smooth(log_ratios: &mut [f64]) -> (f64, bool) {
    let s = log_ratios.len();
    let tail_len = (TAIL_FRACTION * s as f64).floor() as usize;
    if tail_len < MIN_TAIL || tail_len >= s {
        return (0.0, true);
    }
    let max_lr = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in log_ratios.iter_mut() {
        *v -= max_lr;
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| log_ratios[a].total_cmp(&log_ratios[b]));
    let cutoff = log_ratios[order[s - tail_len - 1]].exp();
    let tail_idx = &order[s - tail_len..];
    let exceed: Vec<f64> = tail_idx.iter().map(|&i| log_ratios[i].exp() - cutoff).collect();
    if exceed[0] <= 0.0 || exceed[tail_len - 1] - exceed[0] <= f64::EPSILON * exceed[tail_len - 1] {
        for v in log_ratios.iter_mut() {
            *v += max_lr;
        }
        return (0.0, true);
    }
    let (k, sigma) = gpd_fit(&exceed);
    if !(k.is_finite() && sigma.is_finite() && sigma > 0.0) {
        for v in log_ratios.iter_mut() {
            *v += max_lr;
        }
        return (0.0, true);
    }
    // largest raw ratio is 1 after the shift
    for (rank, &i) in tail_idx.iter().enumerate() {
        let p = (rank as f64 + 0.5) / tail_len as f64;
        let w = (cutoff + gpd_quantile(p, k, sigma)).min(1.0);
        log_ratios[i] = w.ln();
    }
    for v in log_ratios.iter_mut() {
        *v += max_lr;
    }
    (k, false)
}

/// PSIS-LOO from an `S x m` matrix of pointwise log likelihoods
/// (`loglik[s][j]`).
pub fn psis_loo_elpd(loglik: &[Vec<f64>]) -> Result<PsisLoo> {
    let s = loglik.len();
    let m = loglik.first().map_or(0, |r| r.len());
    if s == 0 || m == 0 {
        return Err(Error::InvalidArgument("empty log-likelihood matrix".into()));
    }
    if loglik.iter().any(|r| r.len() != m) {
        return Err(Error::DimensionMismatch("ragged log-likelihood matrix".into()));
    }
    if loglik.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("non-finite log likelihood".into()));
    }
    let mut pointwise = Vec::with_capacity(m);
    let mut pareto_k = Vec::with_capacity(m);
    let mut fallback = Vec::with_capacity(m);
    for j in 0..m {
        let col: Vec<f64> = loglik.iter().map(|r| r[j]).collect();
        let mut lw: Vec<f64> = col.iter().map(|v| -v).collect();
        let (k, fb) = psis_smooth(&mut lw);
        let num: Vec<f64> = lw.iter().zip(&col).map(|(w, l)| w + l).collect();
        pointwise.push(log_sum_exp(&num) - log_sum_exp(&lw));
        pareto_k.push(k);
        fallback.push(fb);
    }
    let elpd = pointwise.iter().sum();
    let se = paired_se(&pointwise);
    Ok(PsisLoo { elpd, se, pointwise, pareto_k, fallback })
}

/// `sqrt(m * Var(v))` with the sample variance; zero for `m < 2`.
pub(crate) fn paired_se(v: &[f64]) -> f64 {
    let m = v.len();
    if m < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / m as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    (m as f64 * var).sqrt()
}

/// `elpd_A - elpd_B` and its standard error from paired pointwise terms.
pub fn elpd_diff(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} pointwise terms", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Ok((d.iter().sum(), paired_se(&d)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;
    use rand_distr::{Distribution, Exp};

    #[test]
    fn gpd_recovers_exponential_shape() {
        let mut rng = rng_from_seed(1);
        let mut x: Vec<f64> = (0..2000).map(|_| Exp::new(1.0).unwrap().sample(&mut rng)).collect();
        x.sort_by(f64::total_cmp);
        let (k, sigma) = gpd_fit(&x);
        assert!(k.abs() < 0.1, "{k}");
        assert!((sigma - 1.0).abs() < 0.1, "{sigma}");
    }

    #[test]
    fn gpd_recovers_heavy_tail() {
        let mut rng = rng_from_seed(2);
        let (k0, s0) = (0.5, 2.0);
        let mut x: Vec<f64> = (0..4000).map(|_| gpd_quantile(rng.random::<f64>(), k0, s0)).collect();
        x.sort_by(f64::total_cmp);
        let (k, sigma) = gpd_fit(&x);
        assert!((k - k0).abs() < 0.1, "{k}");
        assert!((sigma - s0).abs() / s0 < 0.15, "{sigma}");
    }

    #[test]
    fn equal_weights_give_log_mean_exp() {
        let ll: Vec<Vec<f64>> = vec![vec![-1.5]; 200];
        let r = psis_loo_elpd(&ll).unwrap();
        assert!((r.pointwise[0] + 1.5).abs() < 1e-12);
        assert!(r.fallback[0]);
        let ll: Vec<Vec<f64>> = (0..8).map(|s| vec![-(s as f64) * 0.1]).collect();
        let r = psis_loo_elpd(&ll).unwrap();
        // too few draws to fit a tail: raw ratios, harmonic-mean form
        let want = -(ll.iter().map(|r| (-r[0]).exp()).sum::<f64>() / 8.0).ln();
        assert!((r.pointwise[0] - want).abs() < 1e-12);
    }

    #[test]
    fn diff_examples() {
        let a = [0.3, -1.2, 4.0];
        assert_eq!(elpd_diff(&a, &a).unwrap(), (0.0, 0.0));
        let (d, se) = elpd_diff(&[1.0, -1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(d, 0.0);
        assert!((se - 2.0).abs() < 1e-15);
        let b = [1.0, 0.5, -2.0];
        let (d1, s1) = elpd_diff(&a, &b).unwrap();
        let (d2, s2) = elpd_diff(&b, &a).unwrap();
        assert_eq!(d1, -d2);
        assert_eq!(s1, s2);
        assert!(elpd_diff(&a, &b[..2]).is_err());
    }
}
