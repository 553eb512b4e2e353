//! Posterior predictive checks and model-comparison scores.

mod psis;

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use psis::{elpd_diff, gpd_fit, gpd_quantile, psis_loo_elpd, psis_smooth, PsisLoo, K_WARN, TAIL_FRACTION};

use crate::car::full_conditional;
use crate::error::{Error, Result};
use crate::model::simulate::simulate_counts;
use crate::model::{Layout, ModelSpec, Parameterisation, Spatial};
use crate::rng::{rng_from_seed, Rng};
use crate::sampler::PosteriorSamples;

/// Mid-p posterior predictive p-values, `P(rep < y) + P(rep = y) / 2`, per
/// column of an `S x m` replicate matrix.
pub fn marginal_ppp(y: &[u64], replicates: &[Vec<u64>]) -> Result<Vec<f64>> {
    check_replicates(y, replicates)?;
    let s = replicates.len() as f64;
    Ok((0..y.len())
        .map(|j| {
            let (mut below, mut equal) = (0usize, 0usize);
            for r in replicates {
                match r[j].cmp(&y[j]) {
                    std::cmp::Ordering::Less => below += 1,
                    std::cmp::Ordering::Equal => equal += 1,
                    std::cmp::Ordering::Greater => {}
                }
            }
            (below as f64 + 0.5 * equal as f64) / s
        })
        .collect())
}

fn check_replicates(y: &[u64], replicates: &[Vec<u64>]) -> Result<()> {
    if replicates.is_empty() {
        return Err(Error::InvalidArgument("no replicates".into()));
    }
    if let Some(r) = replicates.iter().find(|r| r.len() != y.len()) {
        return Err(Error::DimensionMismatch(format!("replicate of length {} for {} observations", r.len(), y.len())));
    }
    Ok(())
}

/// Normalisation of the replicate-pairing term of the RPS estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RpsPairing {
    /// `(1/B) sum_{i <= B/2} |rep_i - rep_{i + B/2}|`.
    #[default]
    Literal,
    /// `(2/B) sum_{i <= B/2} |rep_i - rep_{i + B/2}|`, the mean over pairs.
    PairMean,
}

/// Mean ranked probability score over observations.
pub fn rps_mean(y: &[u64], replicates: &[Vec<u64>], pairing: RpsPairing) -> Result<f64> {
    check_replicates(y, replicates)?;
    let b = replicates.len();
    if b % 2 == 1 {
        return Err(Error::InvalidArgument(format!("RPS needs an even number of replicates, got {b}")));
    }
    if y.is_empty() {
        return Err(Error::InvalidArgument("no observations".into()));
    }
    let bf = b as f64;
    let half = b / 2;
    let pair_scale = match pairing {
        RpsPairing::Literal => 1.0 / bf,
        RpsPairing::PairMean => 2.0 / bf,
    };
    let total: f64 = (0..y.len())
        .map(|j| {
            let yj = y[j] as f64;
            let spread: f64 = replicates.iter().map(|r| (r[j] as f64 - yj).abs()).sum::<f64>() / bf;
            let pairs: f64 = (0..half).map(|i| (replicates[i][j] as f64 - replicates[i + half][j] as f64).abs()).sum();
            spread - pair_scale * pairs
        })
        .sum();
    Ok(total / y.len() as f64)
}

/// Mean Dawid–Sebastiani score, `((y - mean)/sd)^2 + 2 log sd`, with the
/// replicate sample standard deviation (`B - 1` denominator).
pub fn dss_mean(y: &[u64], replicates: &[Vec<u64>]) -> Result<f64> {
    check_replicates(y, replicates)?;
    let b = replicates.len();
    if b < 2 {
        return Err(Error::InvalidArgument("DSS needs at least two replicates".into()));
    }
    if y.is_empty() {
        return Err(Error::InvalidArgument("no observations".into()));
    }
    let mut total = 0.0;
    for j in 0..y.len() {
        let vals: Vec<f64> = replicates.iter().map(|r| r[j] as f64).collect();
        let mean = vals.iter().sum::<f64>() / b as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b as f64 - 1.0);
        if var <= 0.0 {
            return Err(Error::DegenerateInput(format!("replicates of observation {j} have zero variance")));
        }
        let sd = var.sqrt();
        total += ((y[j] as f64 - mean) / sd).powi(2) + 2.0 * sd.ln();
    }
    Ok(total / y.len() as f64)
}

/// Per-area fraction of draws with `rho > 1`, from a `B x n` matrix.
pub fn exceedance_prob(rho_samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = rho_samples.first().ok_or_else(|| Error::InvalidArgument("no samples".into()))?.len();
    if rho_samples.iter().any(|r| r.len() != n) {
        return Err(Error::DimensionMismatch("ragged sample matrix".into()));
    }
    let b = rho_samples.len() as f64;
    Ok((0..n).map(|i| rho_samples.iter().filter(|r| r[i] > 1.0).count() as f64 / b).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuintileSummary {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Linear-interpolation sample quantile (type 7).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Splits areas into covariate quintiles (ties broken by area index) and
/// summarises the relative risks in each by their mean and 2.5% / 97.5%
/// quantiles.
pub fn quintile_risk_profile(rho_means: &[f64], covariate: &[f64]) -> Result<Vec<QuintileSummary>> {
    let n = rho_means.len();
    if covariate.len() != n {
        return Err(Error::DimensionMismatch(format!("{} risks vs {} covariate values", n, covariate.len())));
    }
    if n < 5 {
        return Err(Error::InvalidArgument(format!("need at least 5 areas, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| covariate[a].total_cmp(&covariate[b]).then(a.cmp(&b)));
    Ok((0..5)
        .map(|g| {
            let members = &order[g * n / 5..(g + 1) * n / 5];
            let mut vals: Vec<f64> = members.iter().map(|&i| rho_means[i]).collect();
            vals.sort_by(f64::total_cmp);
            QuintileSummary {
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
                lower: quantile(&vals, 0.025),
                upper: quantile(&vals, 0.975),
            }
        })
        .collect())
}

/// `S x m` pointwise log likelihoods of every stored draw.
pub fn pointwise_log_lik_matrix(spec: &ModelSpec, samples: &PosteriorSamples) -> Result<Vec<Vec<f64>>> {
    let layout = spec.layout();
    samples
        .flat_draws()
        .map(|d| spec.pointwise_log_likelihood(&layout.unflatten(d)?))
        .collect()
}

/// One replicated dataset per stored draw.
pub fn posterior_predictive(spec: &ModelSpec, samples: &PosteriorSamples, seed: u64) -> Result<Vec<Vec<u64>>> {
    let layout = spec.layout();
    let mut rng = rng_from_seed(seed);
    samples
        .flat_draws()
        .map(|d| {
            let theta = layout.unflatten(d)?;
            let ell = spec.membership_log_risk(&theta);
            simulate_counts(spec.config().likelihood, spec.offsets(), &ell, theta.psi, &mut rng)
        })
        .collect()
}

/// Redraws the free random-effect block from its single-site full
/// conditionals given the (unchanged) remaining components.
fn redraw_random_effects(spec: &ModelSpec, phi: &[f64], alpha: Option<f64>, tau: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    match spec.config().parameterisation {
        Parameterisation::Post => {
            let a = match spec.config().spatial {
                Spatial::Icar => 1.0,
                _ => alpha.ok_or_else(|| Error::InvalidArgument("CAR draw without alpha".into()))?,
            };
            (0..phi.len())
                .map(|i| {
                    let (mean, var) = full_conditional(spec.graph(), a, tau, phi, i)?;
                    Ok(mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal))
                })
                .collect()
        }
        Parameterisation::Inverse => {
            let q = crate::linalg::spd_inverse(&spec.membership_covariance(alpha, tau)?)?;
            let v = DVector::from_column_slice(phi);
            Ok((0..phi.len())
                .map(|j| {
                    let qjj = q[(j, j)];
                    let off = q.row(j).transpose().dot(&v) - qjj * phi[j];
                    -off / qjj + (1.0 / qjj).sqrt() * rng.sample::<f64, _>(StandardNormal)
                })
                .collect())
        }
    }
}

/// Mixed (cross-validatory) predictive p-values: each draw's random effects
/// are redrawn from their full conditionals, pushed to memberships, and a
/// replicate simulated from them.
pub fn mixed_ppp(spec: &ModelSpec, samples: &PosteriorSamples, seed: u64) -> Result<Vec<f64>> {
    if spec.config().spatial == Spatial::None {
        return Err(Error::NotApplicable("mixed predictive checks need a spatial random effect".into()));
    }
    let y = spec.counts().ok_or_else(|| Error::InvalidArgument("no observed counts attached to the model".into()))?;
    let layout: Layout = spec.layout();
    let mut rng = rng_from_seed(seed);
    let mut reps = Vec::with_capacity(samples.total_draws());
    for d in samples.flat_draws() {
        let mut theta = layout.unflatten(d)?;
        let tau = theta.tau.ok_or_else(|| Error::InvalidArgument("spatial draw without tau".into()))?;
        theta.phi = redraw_random_effects(spec, &theta.phi, theta.alpha, tau, &mut rng)?;
        let ell = spec.membership_log_risk(&theta);
        reps.push(simulate_counts(spec.config().likelihood, spec.offsets(), &ell, theta.psi, &mut rng)?);
    }
    marginal_ppp(y, &reps)
}

/// Everything `score` reports for one fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub elpd_loo: f64,
    pub elpd_se: f64,
    pub pointwise_elpd: Vec<f64>,
    pub pareto_k: Vec<f64>,
    pub high_k: Vec<usize>,
    pub rps_mean: f64,
    pub dss_mean: f64,
    pub ppp: Vec<f64>,
    pub mixed_ppp: Option<Vec<f64>>,
}

pub fn score_model(spec: &ModelSpec, samples: &PosteriorSamples, seed: u64, pairing: RpsPairing) -> Result<ScoreReport> {
    let y = spec.counts().ok_or_else(|| Error::InvalidArgument("no observed counts attached to the model".into()))?;
    let loo = psis_loo_elpd(&pointwise_log_lik_matrix(spec, samples)?)?;
    let mut reps = posterior_predictive(spec, samples, seed)?;
    let ppp = marginal_ppp(y, &reps)?;
    if reps.len() % 2 == 1 {
        reps.pop();
    }
    let rps = rps_mean(y, &reps, pairing)?;
    let dss = dss_mean(y, &reps)?;
    let mixed = match spec.config().spatial {
        Spatial::None => None,
        _ => Some(mixed_ppp(spec, samples, crate::rng::derive_seed(seed, 1))?),
    };
    let high_k = loo.high_k();
    Ok(ScoreReport {
        elpd_loo: loo.elpd,
        elpd_se: loo.se,
        pointwise_elpd: loo.pointwise,
        pareto_k: loo.pareto_k,
        high_k,
        rps_mean: rps,
        dss_mean: dss,
        ppp,
        mixed_ppp: mixed,
    })
}
