//! Multi-chain Hamiltonian Monte Carlo.
//!
//! Each chain runs a fixed number of leapfrog steps per transition with a
//! jittered step size. Warmup tunes the step size by dual averaging and a
//! diagonal inverse metric over doubling windows; both are frozen once
//! sampling starts.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{effective_sample_size, split_rhat};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::rng::{rng_from_seed, Rng};

/// Energy error that marks a trajectory as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// A differentiable log density over an unconstrained space.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    /// Log density and gradient. `Error::Rejected` means zero density.
    fn log_density_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Called on every state the chain moves to.
    fn project(&self, _x: &mut [f64]) {}

    /// Names of the stored (constrained) coordinates.
    fn names(&self) -> Vec<String>;

    /// Maps an unconstrained state to the stored coordinates.
    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
}

/// Samples in the model's non-centred coordinates and stores constrained
/// parameters.
impl Target for ModelSpec {
    fn dim(&self) -> usize {
        self.sampling_layout().dim()
    }

    fn log_density_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.sampling_log_density_grad(x)
    }

    fn names(&self) -> Vec<String> {
        self.param_names()
    }

    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        self.layout().flatten(&self.from_sampling(x))
    }
}

/// Multivariate Gaussian `N(mean, precision^{-1})`, the sampler's reference
/// target.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
}

impl GaussianTarget {
    pub fn new(mean: Vec<f64>, precision: DMatrix<f64>) -> Result<Self> {
        if precision.nrows() != mean.len() || precision.ncols() != mean.len() {
            return Err(Error::DimensionMismatch("precision must be square with the mean's length".into()));
        }
        crate::linalg::cholesky(&precision)?;
        Ok(GaussianTarget { mean: DVector::from_vec(mean), precision })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianTarget { mean: DVector::zeros(dim), precision: DMatrix::identity(dim, dim) }
    }
}

impl Target for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = DVector::from_column_slice(x) - &self.mean;
        let qd = &self.precision * &d;
        Ok((-0.5 * d.dot(&qd), qd.iter().map(|v| -v).collect()))
    }

    fn names(&self) -> Vec<String> {
        (1..=self.dim()).map(|k| format!("x[{k}]")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub chains: usize,
    /// Total transitions per chain, warmup included.
    pub iterations: usize,
    pub warmup_fraction: f64,
    pub thin: usize,
    pub leapfrog_steps: usize,
    pub target_accept: f64,
    pub seed: u64,
    /// Relative step-size jitter, uniform on `[1 - j, 1 + j]`.
    pub step_jitter: f64,
    /// Initial values are uniform on `(-r, r)` in unconstrained space.
    pub init_radius: f64,
    pub max_consecutive_rejections: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 4,
            iterations: 2000,
            warmup_fraction: 0.5,
            thin: 1,
            leapfrog_steps: 16,
            target_accept: 0.8,
            seed: 0,
            step_jitter: 0.1,
            init_radius: 2.0,
            max_consecutive_rejections: 500,
        }
    }
}

impl SamplerConfig {
    pub fn warmup(&self) -> usize {
        (self.iterations as f64 * self.warmup_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Config("chains must be positive".into()));
        }
        if self.thin == 0 {
            return Err(Error::Config("thinning stride must be at least 1".into()));
        }
        if self.leapfrog_steps == 0 {
            return Err(Error::Config("leapfrog steps must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config(format!("target acceptance {} outside (0, 1)", self.target_accept)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) || self.warmup() >= self.iterations {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than the {} iterations",
                self.warmup(),
                self.iterations
            )));
        }
        if !(0.0..1.0).contains(&self.step_jitter) {
            return Err(Error::Config("step jitter must lie in [0, 1)".into()));
        }
        if !(self.init_radius >= 0.0) {
            return Err(Error::Config("init radius must be nonnegative".into()));
        }
        if self.max_consecutive_rejections == 0 {
            return Err(Error::Config("stall window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub seed: u64,
    /// Mean Metropolis acceptance probability after warmup.
    pub acceptance_rate: f64,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub step_size: f64,
    pub inverse_metric: Vec<f64>,
}

/// Post-warmup draws of every chain, with per-parameter diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub names: Vec<String>,
    /// `draws[chain][draw][param]`, thinned.
    pub draws: Vec<Vec<Vec<f64>>>,
    pub stats: Vec<ChainStats>,
    /// Rank-normalised split R-hat over the unthinned draws; NaN where
    /// undefined (constant chains).
    pub rhat: Vec<f64>,
    pub ess: Vec<f64>,
}

impl PosteriorSamples {
    pub fn chains(&self) -> usize {
        self.draws.len()
    }

    pub fn draws_per_chain(&self) -> usize {
        self.draws.first().map_or(0, |c| c.len())
    }

    pub fn total_draws(&self) -> usize {
        self.chains() * self.draws_per_chain()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Draws of one parameter, chains concatenated.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.draws.iter().flatten().map(|d| d[k]).collect()
    }

    /// Draws of one parameter split by chain.
    pub fn chain_columns(&self, k: usize) -> Vec<Vec<f64>> {
        self.draws.iter().map(|c| c.iter().map(|d| d[k]).collect()).collect()
    }

    /// Every draw, chains concatenated.
    pub fn flat_draws(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.draws.iter().flatten()
    }

    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().copied().filter(|v| v.is_finite()).fold(f64::NAN, f64::max)
    }

    pub fn divergences(&self) -> usize {
        self.stats.iter().map(|s| s.divergences).sum()
    }
}

struct ChainOutput {
    stats: ChainStats,
    unthinned: Vec<Vec<f64>>,
}

/// Runs `cfg.chains` chains concurrently; chain `c` is seeded with
/// `cfg.seed + c`.
pub fn run_chains<T: Target>(target: &T, cfg: &SamplerConfig) -> Result<PosteriorSamples> {
    cfg.validate()?;
    let outputs: Vec<Result<ChainOutput>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(target, cfg, cfg.seed.wrapping_add(c as u64)))
        .collect();
    let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    let names = target.names();
    let dim_out = names.len();
    let mut rhat = vec![f64::NAN; dim_out];
    let mut ess = vec![f64::NAN; dim_out];
    if cfg.chains >= 2 {
        for k in 0..dim_out {
            let cols: Vec<Vec<f64>> = outputs.iter().map(|o| o.unthinned.iter().map(|d| d[k]).collect()).collect();
            if let Ok(r) = split_rhat(&cols) {
                rhat[k] = r;
            }
            if let Ok(e) = effective_sample_size(&cols) {
                ess[k] = e;
            }
        }
    }
    let draws = outputs.iter().map(|o| o.unthinned.iter().step_by(cfg.thin).cloned().collect()).collect();
    Ok(PosteriorSamples { names, draws, stats: outputs.into_iter().map(|o| o.stats).collect(), rhat, ess })
}

struct State {
    x: Vec<f64>,
    lp: f64,
    grad: Vec<f64>,
}

fn evaluate<T: Target>(target: &T, x: Vec<f64>) -> Result<Option<State>> {
    match target.log_density_grad(&x) {
        Ok((lp, grad)) if lp.is_finite() => Ok(Some(State { x, lp, grad })),
        Ok(_) | Err(Error::Rejected(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn initial_state<T: Target>(target: &T, cfg: &SamplerConfig, rng: &mut Rng) -> Result<State> {
    for _ in 0..100 {
        let mut x: Vec<f64> = (0..target.dim()).map(|_| cfg.init_radius * (2.0 * rng.random::<f64>() - 1.0)).collect();
        target.project(&mut x);
        if let Some(s) = evaluate(target, x)? {
            return Ok(s);
        }
    }
    Err(Error::Sampler("no finite log density at 100 random initial points".into()))
}

struct Transition {
    state: Option<State>,
    accept_prob: f64,
    divergent: bool,
}

fn kinetic(p: &[f64], inv_metric: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_metric).map(|(pi, m)| pi * pi * m).sum::<f64>()
}

fn leapfrog<T: Target>(
    target: &T,
    start: &State,
    p0: &[f64],
    eps: f64,
    steps: usize,
    inv_metric: &[f64],
) -> Result<Option<(State, Vec<f64>)>> {
    let mut x = start.x.clone();
    let mut p = p0.to_vec();
    let mut grad = start.grad.clone();
    let mut lp = start.lp;
    for _ in 0..steps {
        for (pi, g) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * eps * g;
        }
        for ((xi, pi), m) in x.iter_mut().zip(&p).zip(inv_metric) {
            *xi += eps * m * pi;
        }
        match evaluate(target, x)? {
            Some(s) => {
                x = s.x;
                lp = s.lp;
                grad = s.grad;
            }
            None => return Ok(None),
        }
        for (pi, g) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * eps * g;
        }
    }
    Ok(Some((State { x, lp, grad }, p)))
}

fn hmc_step<T: Target>(
    target: &T,
    current: &State,
    eps: f64,
    steps: usize,
    inv_metric: &[f64],
    rng: &mut Rng,
) -> Result<Transition> {
    let p0: Vec<f64> = inv_metric.iter().map(|m| rng.sample::<f64, _>(StandardNormal) / m.sqrt()).collect();
    let h0 = -current.lp + kinetic(&p0, inv_metric);
    let u: f64 = rng.random();
    let Some((proposal, p1)) = leapfrog(target, current, &p0, eps, steps, inv_metric)? else {
        return Ok(Transition { state: None, accept_prob: 0.0, divergent: true });
    };
    let h1 = -proposal.lp + kinetic(&p1, inv_metric);
    let dh = h1 - h0;
    if !dh.is_finite() || dh.abs() > DIVERGENCE_THRESHOLD {
        return Ok(Transition { state: None, accept_prob: 0.0, divergent: true });
    }
    let accept_prob = (-dh).exp().min(1.0);
    let state = (u < accept_prob).then_some(proposal);
    Ok(Transition { state, accept_prob, divergent: false })
}

/// Stan-style heuristic: halve or double until a single leapfrog step crosses
/// acceptance 0.8.
fn initial_step_size<T: Target>(target: &T, state: &State, inv_metric: &[f64], rng: &mut Rng) -> Result<f64> {
    let mut eps = 1.0;
    let p0: Vec<f64> = inv_metric.iter().map(|m| rng.sample::<f64, _>(StandardNormal) / m.sqrt()).collect();
    let h0 = -state.lp + kinetic(&p0, inv_metric);
    let log_ratio = |eps: f64| -> Result<f64> {
        Ok(match leapfrog(target, state, &p0, eps, 1, inv_metric)? {
            Some((s, p)) => {
                let h = -s.lp + kinetic(&p, inv_metric);
                if h.is_finite() { h0 - h } else { f64::NEG_INFINITY }
            }
            None => f64::NEG_INFINITY,
        })
    };
    let up = log_ratio(eps)? > 0.8_f64.ln();
    for _ in 0..60 {
        let lr = log_ratio(eps)?;
        if up && !(lr > 0.8_f64.ln()) {
            break;
        }
        if !up && lr > 0.8_f64.ln() {
            break;
        }
        eps = if up { eps * 2.0 } else { eps * 0.5 };
    }
    Ok(eps)
}

struct DualAveraging {
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, delta: f64) -> Self {
        DualAveraging { mu: (10.0 * eps).ln(), counter: 0.0, s_bar: 0.0, x_bar: 0.0, delta }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.counter += 1.0;
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let w = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Metric-adaptation windows as half-open iteration ranges.
fn adaptation_windows(warmup: usize) -> Vec<(usize, usize)> {
    if warmup < 20 {
        return Vec::new();
    }
    let (mut init, mut term, mut base) = (75, 50, 25);
    if init + term + base > warmup {
        init = (0.15 * warmup as f64) as usize;
        term = (0.1 * warmup as f64) as usize;
        base = warmup - init - term;
    }
    let last = warmup - term;
    let mut ends = Vec::new();
    let mut start = init;
    let mut size = base;
    while start < last {
        let mut end = start + size;
        if end + 2 * size > last {
            end = last;
        }
        ends.push((start, end));
        start = end;
        size *= 2;
    }
    ends
}

struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(d: usize) -> Self {
        Welford { n: 0.0, mean: vec![0.0; d], m2: vec![0.0; d] }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for k in 0..x.len() {
            let delta = x[k] - self.mean[k];
            self.mean[k] += delta / self.n;
            self.m2[k] += delta * (x[k] - self.mean[k]);
        }
    }

    /// Regularised variance, shrunk toward `1e-3`.
    fn metric(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|m2| {
                let var = m2 / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

fn run_chain<T: Target>(target: &T, cfg: &SamplerConfig, seed: u64) -> Result<ChainOutput> {
    let mut rng = rng_from_seed(seed);
    let d = target.dim();
    let warmup = cfg.warmup();
    let mut inv_metric = vec![1.0; d];
    let mut state = initial_state(target, cfg, &mut rng)?;
    let mut eps = initial_step_size(target, &state, &inv_metric, &mut rng)?;
    let mut da = DualAveraging::new(eps, cfg.target_accept);
    let windows = adaptation_windows(warmup);
    let mut next_window = 0;
    let mut welford = Welford::new(d);

    let mut unthinned = Vec::with_capacity(cfg.iterations - warmup);
    let mut accept_sum = 0.0;
    let mut divergences = 0;
    let mut warmup_divergences = 0;
    let mut rejections = 0;

    for it in 0..cfg.iterations {
        let jitter = 1.0 + cfg.step_jitter * (2.0 * rng.random::<f64>() - 1.0);
        let tr = hmc_step(target, &state, eps * jitter, cfg.leapfrog_steps, &inv_metric, &mut rng)?;
        if tr.divergent {
            if it < warmup {
                warmup_divergences += 1;
            } else {
                divergences += 1;
            }
        }
        match tr.state {
            Some(mut s) => {
                target.project(&mut s.x);
                state = s;
                rejections = 0;
            }
            None => {
                rejections += 1;
                if rejections >= cfg.max_consecutive_rejections {
                    return Err(Error::Sampler(format!(
                        "chain seeded {seed} rejected {rejections} consecutive proposals at iteration {it} \
                         (step size {eps:e}, {} divergences)",
                        warmup_divergences + divergences
                    )));
                }
            }
        }

        if it < warmup {
            eps = da.update(tr.accept_prob);
            if let Some(&(start, end)) = windows.get(next_window) {
                if it >= start {
                    welford.push(&state.x);
                }
                if it + 1 == end {
                    inv_metric = welford.metric();
                    welford = Welford::new(d);
                    next_window += 1;
                    eps = initial_step_size(target, &state, &inv_metric, &mut rng)?;
                    da = DualAveraging::new(eps, cfg.target_accept);
                }
            }
            if it + 1 == warmup {
                eps = da.final_step();
            }
        } else {
            accept_sum += tr.accept_prob;
            unthinned.push(target.constrain(&state.x));
        }
    }
    let kept = (cfg.iterations - warmup) as f64;
    Ok(ChainOutput {
        stats: ChainStats {
            seed,
            acceptance_rate: accept_sum / kept,
            divergences,
            warmup_divergences,
            step_size: eps,
            inverse_metric: inv_metric,
        },
        unthinned,
    })
}
