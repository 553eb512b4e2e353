//! Simulation-based calibration studies.
//!
//! A study fixes one lattice, one membership matrix (simulated at the largest
//! size and truncated for the others), one offset vector and one covariate
//! matrix, then for every scenario and membership size draws `N` datasets
//! from the prior, fits each, and records SBC ranks and bias summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{coverage_interval_check, rank_statistic, rank_uniformity_pvalue, CoverageBand, SbcRank};
use crate::error::{Error, Result};
use crate::graph::{make_grid_with, Adjacency, AdjacencyGraph};
use crate::membership::{simulate_nested, MembershipMatrix};
use crate::model::simulate::{simulate_dataset, Truth};
use crate::model::{Likelihood, ModelConfig, ModelSpec, Parameterisation, Priors, Spatial};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sampler::{run_chains, PosteriorSamples, SamplerConfig};

/// Data-generation and MCMC parameterisations, written `post-inverse` etc.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scenario {
    pub generation: Parameterisation,
    pub mcmc: Parameterisation,
}

impl Scenario {
    pub const POST_POST: Scenario = Scenario { generation: Parameterisation::Post, mcmc: Parameterisation::Post };
    pub const POST_INVERSE: Scenario = Scenario { generation: Parameterisation::Post, mcmc: Parameterisation::Inverse };
    pub const INVERSE_POST: Scenario = Scenario { generation: Parameterisation::Inverse, mcmc: Parameterisation::Post };
    pub const INVERSE_INVERSE: Scenario =
        Scenario { generation: Parameterisation::Inverse, mcmc: Parameterisation::Inverse };

    pub fn involves_inverse(&self) -> bool {
        self.generation == Parameterisation::Inverse || self.mcmc == Parameterisation::Inverse
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.generation, self.mcmc)
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |p: &str| match p {
            "post" => Ok(Parameterisation::Post),
            "inverse" => Ok(Parameterisation::Inverse),
            other => Err(Error::Config(format!("unknown parameterisation {other:?}"))),
        };
        let (g, m) = s.split_once('-').ok_or_else(|| Error::Config(format!("scenario {s:?} is not <data>-<mcmc>")))?;
        Ok(Scenario { generation: parse(g)?, mcmc: parse(m)? })
    }
}

impl Serialize for Scenario {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scenario {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SbcStudyConfig {
    pub rows: usize,
    pub cols: usize,
    pub adjacency: Adjacency,
    pub membership_sizes: Vec<usize>,
    pub scenarios: Vec<Scenario>,
    pub replicates: usize,
    pub likelihood: Likelihood,
    pub spatial: Spatial,
    pub priors: Priors,
    pub covariates: usize,
    /// Offsets are i.i.d. Poisson with this mean, redrawn when zero.
    pub offset_mean: f64,
    pub sampler: SamplerConfig,
    pub rhat_threshold: f64,
    pub coverage_band: CoverageBand,
    pub uniformity_bins: usize,
    /// A cell where more than this fraction of fits fail stops the study.
    pub max_failure_fraction: f64,
    pub seed: u64,
}

impl Default for SbcStudyConfig {
    fn default() -> Self {
        SbcStudyConfig {
            rows: 4,
            cols: 5,
            adjacency: Adjacency::Rook,
            membership_sizes: vec![14, 20, 26],
            scenarios: vec![Scenario::POST_POST, Scenario::POST_INVERSE, Scenario::INVERSE_POST, Scenario::INVERSE_INVERSE],
            replicates: 200,
            likelihood: Likelihood::Poisson,
            spatial: Spatial::Car,
            priors: Priors::default(),
            covariates: 2,
            offset_mean: 20.0,
            sampler: SamplerConfig { chains: 4, iterations: 2000, thin: 20, ..SamplerConfig::default() },
            rhat_threshold: 1.01,
            coverage_band: CoverageBand::OrderStatistic,
            uniformity_bins: 20,
            max_failure_fraction: 0.5,
            seed: 2024,
        }
    }
}

impl SbcStudyConfig {
    pub fn n(&self) -> usize {
        self.rows * self.cols
    }

    /// Cells that will run, in order: scenarios outer, sizes inner.
    pub fn cells(&self) -> Vec<(Scenario, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for &s in &self.scenarios {
            for &m in &self.membership_sizes {
                if !(s.involves_inverse() && m > n) {
                    out.push((s, m));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.membership_sizes.is_empty() || self.membership_sizes.contains(&0) {
            return Err(Error::Config("membership sizes must be positive".into()));
        }
        if self.scenarios.is_empty() {
            return Err(Error::Config("no scenarios".into()));
        }
        if !(self.offset_mean > 0.0) {
            return Err(Error::Config("offset mean must be positive".into()));
        }
        self.sampler.validate()?;
        Ok(())
    }

    /// Rejects explicitly requested inverse cells with `m > n`.
    pub fn validate_strict(&self) -> Result<()> {
        self.validate()?;
        let n = self.n();
        for &s in &self.scenarios {
            if let Some(&m) = self.membership_sizes.iter().find(|&&m| s.involves_inverse() && m > n) {
                return Err(Error::Config(format!(
                    "scenario {s} needs m <= n, but m = {m} with n = {n}"
                )));
            }
        }
        Ok(())
    }
}

/// The design shared by every replicate of a study.
#[derive(Debug, Clone)]
pub struct StudyDesign {
    pub graph: AdjacencyGraph,
    pub x: DMatrix<f64>,
    /// Membership matrix and offsets per size.
    pub memberships: BTreeMap<usize, (MembershipMatrix, Vec<f64>)>,
}

/// Min-max normalised standard-normal columns.
pub fn simulate_covariates(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    let mut x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    for k in 0..p {
        let col = x.column(k);
        let (lo, hi) = (col.min(), col.max());
        let span = if hi > lo { hi - lo } else { 1.0 };
        for i in 0..n {
            x[(i, k)] = (x[(i, k)] - lo) / span;
        }
    }
    x
}

/// Positive Poisson offsets: zero draws are redrawn.
pub fn simulate_offsets(m: usize, mean: f64, seed: u64) -> Result<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    let d = Poisson::new(mean).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((0..m)
        .map(|_| loop {
            let v: f64 = d.sample(&mut rng);
            if v > 0.0 {
                break v;
            }
        })
        .collect())
}

pub fn build_design(cfg: &SbcStudyConfig) -> Result<StudyDesign> {
    let graph = make_grid_with(cfg.rows, cfg.cols, cfg.adjacency)?;
    let x = simulate_covariates(graph.n(), cfg.covariates, derive_seed(cfg.seed, 1));
    let mut sizes = cfg.membership_sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let hs = simulate_nested(&graph, &sizes, derive_seed(cfg.seed, 2))?;
    let m_max = *sizes.last().expect("sizes validated non-empty");
    let offsets = simulate_offsets(m_max, cfg.offset_mean, derive_seed(cfg.seed, 3))?;
    let memberships = sizes.iter().zip(hs).map(|(&m, h)| (m, (h, offsets[..m].to_vec()))).collect();
    Ok(StudyDesign { graph, x, memberships })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasMetrics {
    pub bias: f64,
    pub abs_bias: f64,
    pub rmse: f64,
}

/// Mean error, mean absolute error and root mean squared error of draws
/// around the truth.
pub fn bias_metrics(draws: &[f64], truth: f64) -> Result<BiasMetrics> {
    if draws.is_empty() {
        return Err(Error::InvalidArgument("no draws".into()));
    }
    let b = draws.len() as f64;
    let (mut s, mut a, mut q) = (0.0, 0.0, 0.0);
    for &d in draws {
        let e = d - truth;
        s += e;
        a += e.abs();
        q += e * e;
    }
    Ok(BiasMetrics { bias: s / b, abs_bias: a / b, rmse: (q / b).sqrt() })
}

/// Outcome of one simulate-and-fit cycle.
#[derive(Debug, Clone)]
pub struct ReplicateOutcome {
    pub truth: Truth,
    pub y: Vec<u64>,
    pub samples: PosteriorSamples,
    pub ranks: Vec<SbcRank>,
    /// Per-component bias metrics, keyed by pooled parameter name.
    pub bias: Vec<(String, BiasMetrics)>,
}

impl ReplicateOutcome {
    pub fn max_rhat(&self) -> f64 {
        self.samples.max_rhat()
    }
}

/// Scalar and pooled quantities ranked by SBC, as `(name, truth, draws)`.
fn ranked_quantities(spec: &ModelSpec, truth: &Truth, samples: &PosteriorSamples) -> Result<Vec<(String, f64, Vec<f64>)>> {
    let layout = spec.layout();
    let draws: Vec<_> = samples.flat_draws().map(|d| layout.unflatten(d)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    out.push(("gamma".to_string(), truth.gamma, draws.iter().map(|t| t.gamma).collect()));
    for k in 0..truth.beta.len() {
        out.push((format!("beta[{}]", k + 1), truth.beta[k], draws.iter().map(|t| t.beta[k]).collect()));
    }
    for (name, tv, get) in [
        ("alpha", truth.alpha, (|t: &crate::model::ParamVector| t.alpha) as fn(&_) -> Option<f64>),
        ("tau", truth.tau, |t| t.tau),
        ("psi", truth.psi, |t| t.psi),
    ] {
        if let Some(v) = tv {
            out.push((name.to_string(), v, draws.iter().map(|t| get(t).unwrap_or(f64::NAN)).collect()));
        }
    }
    if spec.config().spatial != Spatial::None {
        let phi: Vec<Vec<f64>> = draws.iter().map(|t| spec.areal_phi(t)).collect();
        for i in 0..spec.n() {
            out.push(("phi".to_string(), truth.areal_phi[i], phi.iter().map(|p| p[i]).collect()));
        }
    }
    let log_rho: Vec<Vec<f64>> = draws.iter().map(|t| spec.areal_log_risk(t)).collect();
    let truth_rho = truth.areal_log_risk(spec.covariates());
    for i in 0..spec.n() {
        out.push(("rho".to_string(), truth_rho[i].exp(), log_rho.iter().map(|p| p[i].exp()).collect()));
    }
    let log_rt: Vec<Vec<f64>> = draws.iter().map(|t| spec.membership_log_risk(t)).collect();
    let truth_rt = truth.membership_log_risk(spec);
    for j in 0..spec.m() {
        out.push(("rho_tilde".to_string(), truth_rt[j].exp(), log_rt.iter().map(|p| p[j].exp()).collect()));
    }
    Ok(out)
}

/// Draws a truth and dataset under `generation`, fits `spec` and ranks every
/// quantity. `spec` carries the MCMC parameterisation and no counts.
pub fn sbc_replicate(
    spec: &ModelSpec,
    generation: Parameterisation,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<ReplicateOutcome> {
    let mut rng = rng_from_seed(seed);
    let (truth, y) = simulate_dataset(spec, generation, &mut rng)?;
    let fitted = spec.clone().with_counts(y.clone())?;
    let cfg = SamplerConfig { seed: derive_seed(seed, 0x5A), ..*sampler };
    let samples = run_chains(&fitted, &cfg)?;
    let b = samples.total_draws();
    let mut ranks = Vec::new();
    let mut bias = Vec::new();
    for (name, tv, draws) in ranked_quantities(&fitted, &truth, &samples)? {
        ranks.push(SbcRank::new(name.clone(), rank_statistic(&draws, tv), b)?);
        bias.push((name, bias_metrics(&draws, tv)?));
    }
    Ok(ReplicateOutcome { truth, y, samples, ranks, bias })
}

/// Why a replicate was left out of the calibration summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason", content = "detail")]
pub enum Exclusion {
    Rhat(f64),
    SamplerFailure(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub replicates: usize,
    pub retained: usize,
    pub excluded_rhat: usize,
    pub failed: usize,
}

/// Keeps replicates whose largest R-hat is at most `threshold` (NaN R-hats,
/// from constant chains, are ignored).
pub fn rhat_filter<T>(results: Vec<(T, f64)>, threshold: f64) -> (Vec<T>, Vec<Exclusion>) {
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for (r, rhat) in results {
        if rhat > threshold {
            excluded.push(Exclusion::Rhat(rhat));
        } else {
            kept.push(r);
        }
    }
    (kept, excluded)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub parameter: String,
    pub coverage: f64,
    pub uniformity_p: f64,
    pub bias: f64,
    pub abs_bias: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub scenario: Scenario,
    pub m: usize,
    pub exclusions: ExclusionReport,
    pub parameters: Vec<ParameterSummary>,
    pub ranks: Vec<SbcRank>,
}

impl CellResult {
    pub fn parameter(&self, name: &str) -> Option<&ParameterSummary> {
        self.parameters.iter().find(|p| p.parameter == name)
    }

    pub fn ranks_for(&self, name: &str) -> Vec<SbcRank> {
        self.ranks.iter().filter(|r| r.parameter == name).cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbcStudyResult {
    pub n: usize,
    pub cells: Vec<CellResult>,
    /// Set when a cell's failure rate stopped the study early.
    pub aborted: Option<String>,
}

impl SbcStudyResult {
    pub fn cell(&self, scenario: Scenario, m: usize) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.scenario == scenario && c.m == m)
    }
}

fn summarise_cell(
    scenario: Scenario,
    m: usize,
    kept: &[ReplicateOutcome],
    exclusions: ExclusionReport,
    cfg: &SbcStudyConfig,
) -> Result<CellResult> {
    let mut order: Vec<String> = Vec::new();
    let mut ranks: BTreeMap<String, Vec<SbcRank>> = BTreeMap::new();
    let mut bias: BTreeMap<String, Vec<BiasMetrics>> = BTreeMap::new();
    for rep in kept {
        for r in &rep.ranks {
            if !ranks.contains_key(&r.parameter) {
                order.push(r.parameter.clone());
            }
            ranks.entry(r.parameter.clone()).or_default().push(r.clone());
        }
        for (name, b) in &rep.bias {
            bias.entry(name.clone()).or_default().push(*b);
        }
    }
    let mut parameters = Vec::new();
    for name in &order {
        let rs = &ranks[name];
        let bs = &bias[name];
        let k = bs.len() as f64;
        parameters.push(ParameterSummary {
            parameter: name.clone(),
            coverage: coverage_interval_check(rs, cfg.coverage_band)?,
            uniformity_p: rank_uniformity_pvalue(rs, cfg.uniformity_bins)?,
            bias: bs.iter().map(|b| b.bias).sum::<f64>() / k,
            abs_bias: bs.iter().map(|b| b.abs_bias).sum::<f64>() / k,
            rmse: bs.iter().map(|b| b.rmse).sum::<f64>() / k,
        });
    }
    let all_ranks = kept.iter().flat_map(|r| r.ranks.iter().cloned()).collect();
    Ok(CellResult { scenario, m, exclusions, parameters, ranks: all_ranks })
}

/// Runs one cell; replicate `r` uses the stream `derive_seed(seed, r)` in
/// every cell, so truths coincide across cells up to truncation.
pub fn run_cell(cfg: &SbcStudyConfig, design: &StudyDesign, scenario: Scenario, m: usize) -> Result<CellResult> {
    let (h, offsets) = design
        .memberships
        .get(&m)
        .ok_or_else(|| Error::Config(format!("membership size {m} not in the design")))?;
    let model = ModelConfig { likelihood: cfg.likelihood, parameterisation: scenario.mcmc, spatial: cfg.spatial, priors: cfg.priors };
    let spec = ModelSpec::new(model, design.graph.clone(), h.clone(), design.x.clone(), offsets.clone())?;
    let outcomes: Vec<Result<ReplicateOutcome>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| sbc_replicate(&spec, scenario.generation, &cfg.sampler, derive_seed(cfg.seed, 1000 + r as u64)))
        .collect();
    let mut report = ExclusionReport { replicates: cfg.replicates, ..ExclusionReport::default() };
    let mut fitted = Vec::new();
    for o in outcomes {
        match o {
            Ok(rep) => {
                let rh = rep.max_rhat();
                fitted.push((rep, rh));
            }
            Err(Error::Sampler(_)) | Err(Error::SimulationFailure(_)) => report.failed += 1,
            Err(e) => return Err(e),
        }
    }
    let (kept, excluded) = rhat_filter(fitted, cfg.rhat_threshold);
    report.excluded_rhat = excluded.len();
    report.retained = kept.len();
    if report.failed as f64 > cfg.max_failure_fraction * cfg.replicates as f64 || kept.is_empty() {
        return Err(Error::Sampler(format!(
            "{scenario} m={m}: {} of {} fits failed and {} were excluded",
            report.failed, cfg.replicates, report.excluded_rhat
        )));
    }
    summarise_cell(scenario, m, &kept, report, cfg)
}

/// Runs every cell. A cell that fails persistently stops the study; the
/// cells finished so far are kept.
pub fn run_study(cfg: &SbcStudyConfig) -> Result<SbcStudyResult> {
    cfg.validate_strict()?;
    let design = build_design(cfg)?;
    let mut cells = Vec::new();
    let mut aborted = None;
    for (scenario, m) in cfg.cells() {
        match run_cell(cfg, &design, scenario, m) {
            Ok(c) => cells.push(c),
            Err(Error::Sampler(msg)) => {
                aborted = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(SbcStudyResult { n: design.graph.n(), cells, aborted })
}

/// Writes `ranks.csv`, `coverage.csv`, `bias.csv`, `exclusions.csv` and
/// `summary.json`.
pub fn write_study_outputs(result: &SbcStudyResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("ranks.csv"))?;
    w.write_record(["scenario", "m", "parameter", "rank", "B"])?;
    for c in &result.cells {
        for r in &c.ranks {
            w.write_record([c.scenario.to_string(), c.m.to_string(), r.parameter.clone(), r.rank.to_string(), r.b.to_string()])?;
        }
    }
    w.flush()?;

    let mut params: Vec<String> = Vec::new();
    for c in &result.cells {
        for p in &c.parameters {
            if !params.contains(&p.parameter) {
                params.push(p.parameter.clone());
            }
        }
    }
    let mut w = csv::Writer::from_path(dir.join("coverage.csv"))?;
    let mut header = vec!["parameter".to_string()];
    header.extend(result.cells.iter().map(|c| format!("{}:{}", c.scenario, c.m)));
    w.write_record(&header)?;
    for name in &params {
        let mut row = vec![name.clone()];
        row.extend(result.cells.iter().map(|c| c.parameter(name).map_or(String::new(), |p| p.coverage.to_string())));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("bias.csv"))?;
    w.write_record(["scenario", "m", "parameter", "bias", "abs_bias", "rmse"])?;
    for c in &result.cells {
        for p in &c.parameters {
            w.write_record([
                c.scenario.to_string(),
                c.m.to_string(),
                p.parameter.clone(),
                p.bias.to_string(),
                p.abs_bias.to_string(),
                p.rmse.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("exclusions.csv"))?;
    w.write_record(["scenario", "m", "replicates", "retained", "excluded_rhat", "failed"])?;
    for c in &result.cells {
        let e = &c.exclusions;
        w.write_record([
            c.scenario.to_string(),
            c.m.to_string(),
            e.replicates.to_string(),
            e.retained.to_string(),
            e.excluded_rhat.to_string(),
            e.failed.to_string(),
        ])?;
    }
    w.flush()?;

    #[derive(Serialize)]
    struct CellSummary<'a> {
        scenario: Scenario,
        m: usize,
        exclusions: &'a ExclusionReport,
        parameters: &'a [ParameterSummary],
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        n: usize,
        aborted: &'a Option<String>,
        cells: Vec<CellSummary<'a>>,
    }
    let summary = Summary {
        n: result.n,
        aborted: &result.aborted,
        cells: result
            .cells
            .iter()
            .map(|c| CellSummary { scenario: c.scenario, m: c.m, exclusions: &c.exclusions, parameters: &c.parameters })
            .collect(),
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}
