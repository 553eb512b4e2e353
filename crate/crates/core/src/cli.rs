//! The `carmm` command line: `simulate`, `fit`, `sbc` and `score`.
//!
//! Every command writes `manifest.json` into its output directory, also when
//! it fails. Inputs are digested before anything runs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{make_grid_with, Adjacency};
use crate::io::{self, Dataset};
use crate::membership::simulate_membership_matrix;
use crate::model::simulate::{simulate_dataset, Truth};
use crate::model::{ModelConfig, ModelSpec, Parameterisation};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sampler::{run_chains, ChainStats, PosteriorSamples, SamplerConfig};
use crate::sbc::{run_study, simulate_covariates, simulate_offsets, write_study_outputs, SbcStudyConfig};
use crate::scoring::{
    exceedance_prob, posterior_predictive, quantile, quintile_risk_profile, score_model, RpsPairing, ScoreReport,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FIT_FILE: &str = "fit.json";

#[derive(Debug, Parser)]
#[command(name = "carmm", version, about = "CAR priors under multiple-membership transforms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset bundle from the prior.
    Simulate(CommonArgs),
    /// Fit a model to a dataset bundle.
    Fit {
        /// Dataset bundle directory.
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run a simulation-based calibration study.
    Sbc(CommonArgs),
    /// Score and compare fitted runs; the first is the reference unless the
    /// config names another.
    Score {
        #[arg(required = true)]
        fits: Vec<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, value_parser = parse_adjacency)]
    pub adjacency: Option<Adjacency>,
}

fn parse_adjacency(s: &str) -> std::result::Result<Adjacency, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub inputs: Vec<InputDigest>,
    pub seed: u64,
    pub output_dir: String,
    pub tool_version: String,
    pub status: String,
    /// Stage reached when the command failed.
    pub stage: Option<String>,
    pub error: Option<String>,
}

/// Settings for `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub rows: usize,
    pub cols: usize,
    pub adjacency: Adjacency,
    pub memberships: usize,
    pub covariates: usize,
    pub offset_mean: f64,
    pub generation: Parameterisation,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            rows: 4,
            cols: 5,
            adjacency: Adjacency::Rook,
            memberships: 20,
            covariates: 2,
            offset_mean: 20.0,
            generation: Parameterisation::Post,
            model: ModelConfig::default(),
            seed: 1,
        }
    }
}

impl SimulateConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.rows * self.cols;
        if n < 2 {
            return Err(Error::Config(format!("a {}x{} grid has fewer than two areas", self.rows, self.cols)));
        }
        if self.memberships == 0 {
            return Err(Error::Config("memberships must be positive".into()));
        }
        if self.generation == Parameterisation::Inverse && self.memberships > n {
            return Err(Error::Config(format!(
                "inverse generation needs m <= n, got m = {} > n = {n}",
                self.memberships
            )));
        }
        if !(self.offset_mean.is_finite() && self.offset_mean > 0.0) {
            return Err(Error::Config(format!("offset_mean must be positive, got {}", self.offset_mean)));
        }
        Ok(())
    }
}

/// Settings for `fit`. Without a `model`, the bundle's `model.json` is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct FitConfig {
    pub model: Option<ModelConfig>,
    pub sampler: SamplerConfig,
}

/// Settings for `score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ScoreConfig {
    pub rps_pairing: RpsPairing,
    /// Label or fit directory of the reference run.
    pub reference: Option<String>,
    /// Covariate column (0-based) defining the quintile profile.
    pub quintile_covariate: usize,
}

/// What `fit` records about itself for `score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub label: String,
    pub data_dir: String,
    pub data_digest: String,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDiagnostics {
    pub parameter: String,
    pub rhat: f64,
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub max_rhat: f64,
    pub divergences: usize,
    pub parameters: Vec<ParameterDiagnostics>,
    pub chains: Vec<ChainStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub label: String,
    pub fit_dir: String,
    pub data_digest: String,
    pub report: ScoreReport,
    /// `(elpd difference, SE)` against the reference; `None` for the
    /// reference itself.
    pub diff: Option<(f64, f64)>,
}

struct Tracker {
    stage: &'static str,
}

fn model_label(m: &ModelConfig) -> String {
    let lik = serde_json::to_value(m.likelihood).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    let sp = serde_json::to_value(m.spatial).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    format!("{lik}-{}-{sp}", m.parameterisation)
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn digest_inputs(paths: &[PathBuf]) -> Result<Vec<InputDigest>> {
    paths.iter().map(|p| Ok(InputDigest { path: path_str(p), sha256: io::file_digest(p)? })).collect()
}

fn load_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), io::read_json)
}

fn apply_sampler_overrides(s: &mut SamplerConfig, common: &CommonArgs, seed: u64) {
    s.seed = seed;
    if let Some(c) = common.chains {
        s.chains = c;
    }
    if let Some(i) = common.iters {
        s.iterations = i;
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(command: &Command) -> Result<()> {
    let (name, common, inputs) = match command {
        Command::Simulate(c) => ("simulate", c, Vec::new()),
        Command::Fit { data, common } => {
            let mut v: Vec<PathBuf> = io::BUNDLE_FILES.iter().map(|f| data.join(f)).collect();
            let model = data.join("model.json");
            if model.exists() {
                v.push(model);
            }
            ("fit", common, v)
        }
        Command::Sbc(c) => ("sbc", c, Vec::new()),
        Command::Score { fits, common } => {
            let mut v = Vec::new();
            for f in fits {
                v.push(f.join(FIT_FILE));
                v.extend(chain_files(f).unwrap_or_default());
            }
            ("score", common, v)
        }
    };
    let mut all_inputs: Vec<PathBuf> = common.config.iter().cloned().collect();
    all_inputs.extend(inputs);
    let mut manifest = RunManifest {
        command: name.to_string(),
        config_path: common.config.as_deref().map(path_str),
        inputs: Vec::new(),
        seed: common.seed.unwrap_or(0),
        output_dir: path_str(&common.out),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        status: "running".into(),
        stage: None,
        error: None,
    };
    let mut tracker = Tracker { stage: "inputs" };
    let result = digest_inputs(&all_inputs).and_then(|d| {
        manifest.inputs = d;
        match command {
            Command::Simulate(c) => cmd_simulate(c, &mut tracker, &mut manifest.seed),
            Command::Fit { data, common } => cmd_fit(data, common, &mut tracker, &mut manifest.seed),
            Command::Sbc(c) => cmd_sbc(c, &mut tracker, &mut manifest.seed),
            Command::Score { fits, common } => cmd_score(fits, common, &mut tracker, &mut manifest.seed),
        }
    });
    match &result {
        Ok(()) => manifest.status = "ok".into(),
        Err(e) => {
            manifest.status = "failed".into();
            manifest.stage = Some(tracker.stage.to_string());
            manifest.error = Some(e.to_string());
        }
    }
    fs::create_dir_all(&common.out)?;
    io::write_json(&common.out.join(MANIFEST_FILE), &manifest)?;
    result
}

fn cmd_simulate(common: &CommonArgs, t: &mut Tracker, seed_out: &mut u64) -> Result<()> {
    t.stage = "config";
    let mut cfg: SimulateConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(a) = common.adjacency {
        cfg.adjacency = a;
    }
    *seed_out = cfg.seed;
    cfg.validate()?;

    t.stage = "design";
    let graph = make_grid_with(cfg.rows, cfg.cols, cfg.adjacency)?;
    let n = graph.n();
    let h = simulate_membership_matrix(&graph, cfg.memberships, derive_seed(cfg.seed, 1))?;
    let x = simulate_covariates(n, cfg.covariates, derive_seed(cfg.seed, 2));
    let offsets = simulate_offsets(cfg.memberships, cfg.offset_mean, derive_seed(cfg.seed, 3))?;
    let model = ModelConfig { parameterisation: cfg.generation, ..cfg.model };
    let spec = ModelSpec::new(model, graph.clone(), h.clone(), x.clone(), offsets.clone())?;

    t.stage = "simulation";
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 4));
    let (truth, y): (Truth, Vec<u64>) = simulate_dataset(&spec, cfg.generation, &mut rng)?;

    t.stage = "output";
    let out = &common.out;
    Dataset { graph, membership: h, covariates: x, offsets, counts: Some(y) }.write(out)?;
    io::write_json(&out.join("truth.json"), &truth)?;
    io::write_json(&out.join("model.json"), &cfg.model)?;
    io::write_json(&out.join("simulate.json"), &cfg)?;
    Dataset::read(out)?;
    Ok(())
}

fn cmd_fit(data: &Path, common: &CommonArgs, t: &mut Tracker, seed_out: &mut u64) -> Result<()> {
    t.stage = "config";
    let cfg: FitConfig = load_config(common.config.as_deref())?;
    let model = match cfg.model {
        Some(m) => m,
        None if data.join("model.json").exists() => io::read_json(&data.join("model.json"))?,
        None => ModelConfig::default(),
    };
    let mut sampler = cfg.sampler;
    apply_sampler_overrides(&mut sampler, common, common.seed.unwrap_or(cfg.sampler.seed));
    *seed_out = sampler.seed;
    sampler.validate()?;

    t.stage = "data";
    let ds = Dataset::read(data)?;
    let digest = io::bundle_digest(data)?;
    let y = ds.counts.clone().ok_or_else(|| Error::Config(format!("{} has no observed counts", data.display())))?;
    let spec = ModelSpec::new(model, ds.graph, ds.membership, ds.covariates, ds.offsets)?.with_counts(y)?;

    t.stage = "sampling";
    let samples = run_chains(&spec, &sampler)?;

    t.stage = "output";
    let out = &common.out;
    fs::create_dir_all(out)?;
    for (k, chain) in samples.draws.iter().enumerate() {
        let mut w = csv::Writer::from_path(out.join(format!("chain_{k}.csv")))?;
        w.write_record(&samples.names)?;
        for d in chain {
            w.write_record(d.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
    }
    let diagnostics = FitDiagnostics {
        max_rhat: samples.max_rhat(),
        divergences: samples.divergences(),
        parameters: samples
            .names
            .iter()
            .enumerate()
            .map(|(k, name)| ParameterDiagnostics { parameter: name.clone(), rhat: samples.rhat[k], ess: samples.ess[k] })
            .collect(),
        chains: samples.stats.clone(),
    };
    io::write_json(&out.join("diagnostics.json"), &diagnostics)?;
    write_posterior_summary(&samples, &out.join("summary.csv"))?;
    let record = FitRecord { label: model_label(&model), data_dir: path_str(data), data_digest: digest, model, sampler };
    io::write_json(&out.join(FIT_FILE), &record)?;
    Ok(())
}

/// Mean, sd, 2.5/50/97.5% quantiles, 95% interval width, R-hat and ESS per
/// parameter.
pub fn write_posterior_summary(samples: &PosteriorSamples, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["parameter", "mean", "sd", "q2.5", "q50", "q97.5", "ci_width", "rhat", "ess"])?;
    for (k, name) in samples.names.iter().enumerate() {
        let mut col = samples.column(k);
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        col.sort_by(f64::total_cmp);
        let (lo, mid, hi) = (quantile(&col, 0.025), quantile(&col, 0.5), quantile(&col, 0.975));
        w.write_record([
            name.clone(),
            mean.to_string(),
            sd.to_string(),
            lo.to_string(),
            mid.to_string(),
            hi.to_string(),
            (hi - lo).to_string(),
            samples.rhat[k].to_string(),
            samples.ess[k].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_sbc(common: &CommonArgs, t: &mut Tracker, seed_out: &mut u64) -> Result<()> {
    t.stage = "config";
    let mut cfg: SbcStudyConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(a) = common.adjacency {
        cfg.adjacency = a;
    }
    let seed = cfg.sampler.seed;
    apply_sampler_overrides(&mut cfg.sampler, common, seed);
    *seed_out = cfg.seed;
    cfg.validate_strict()?;

    t.stage = "study";
    let result = run_study(&cfg)?;

    t.stage = "output";
    write_study_outputs(&result, &common.out)?;
    io::write_json(&common.out.join("study.json"), &cfg)?;
    match &result.aborted {
        Some(msg) => {
            t.stage = "study";
            Err(Error::Sampler(format!("study stopped early: {msg}")))
        }
        None => Ok(()),
    }
}

fn chain_files(fit_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut k = 0;
    let mut out = Vec::new();
    while fit_dir.join(format!("chain_{k}.csv")).exists() {
        out.push(fit_dir.join(format!("chain_{k}.csv")));
        k += 1;
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{} holds no chain CSVs", fit_dir.display())));
    }
    Ok(out)
}

/// Reads a `fit` output directory back into its record and draws.
pub fn load_fit(dir: &Path) -> Result<(FitRecord, PosteriorSamples)> {
    let record: FitRecord = io::read_json(&dir.join(FIT_FILE))?;
    let diag: FitDiagnostics = io::read_json(&dir.join("diagnostics.json"))?;
    let mut names: Option<Vec<String>> = None;
    let mut draws = Vec::new();
    for path in chain_files(dir)? {
        let mut r = csv::Reader::from_path(&path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if names.as_ref().is_some_and(|n| *n != header) {
            return Err(Error::Config(format!("{} has different columns from chain 0", path.display())));
        }
        let mut chain = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("{}: {e}", path.display()))))
                .collect::<Result<Vec<f64>>>()?;
            chain.push(row);
        }
        names = Some(header);
        draws.push(chain);
    }
    let names = names.unwrap_or_default();
    let rhat = diag.parameters.iter().map(|p| p.rhat).collect();
    let ess = diag.parameters.iter().map(|p| p.ess).collect();
    Ok((record, PosteriorSamples { names, draws, stats: diag.chains, rhat, ess }))
}

fn cmd_score(fits: &[PathBuf], common: &CommonArgs, t: &mut Tracker, seed_out: &mut u64) -> Result<()> {
    t.stage = "config";
    let cfg: ScoreConfig = load_config(common.config.as_deref())?;
    let seed = common.seed.unwrap_or(0);
    *seed_out = seed;

    t.stage = "load";
    let mut runs = Vec::new();
    let mut labels = BTreeSet::new();
    for dir in fits {
        let (record, samples) = load_fit(dir)?;
        let data_dir = PathBuf::from(&record.data_dir);
        let digest = io::bundle_digest(&data_dir)?;
        if digest != record.data_digest {
            return Err(Error::DigestMismatch(format!(
                "{} changed since {} was fitted",
                data_dir.display(),
                dir.display()
            )));
        }
        let ds = Dataset::read(&data_dir)?;
        let y = ds.counts.ok_or_else(|| Error::Config(format!("{} has no observed counts", data_dir.display())))?;
        let spec = ModelSpec::new(record.model, ds.graph, ds.membership, ds.covariates, ds.offsets)?.with_counts(y)?;
        let mut label = record.label.clone();
        let mut k = 2;
        while labels.contains(&label) {
            label = format!("{}_{k}", record.label);
            k += 1;
        }
        labels.insert(label.clone());
        runs.push((label, dir.clone(), record, spec, samples));
    }
    let reference = match &cfg.reference {
        None => 0,
        Some(r) => runs
            .iter()
            .position(|(label, dir, ..)| label == r || path_str(dir) == *r)
            .ok_or_else(|| Error::Config(format!("reference {r:?} is not among the scored runs")))?,
    };
    let ref_digest = runs[reference].2.data_digest.clone();
    if let Some((_, dir, ..)) = runs.iter().find(|r| r.2.data_digest != ref_digest) {
        return Err(Error::DigestMismatch(format!(
            "{} was fitted to different data than the reference; pairwise elpd differences need the same observations",
            dir.display()
        )));
    }

    t.stage = "scoring";
    let mut scores = Vec::new();
    for (label, dir, record, spec, samples) in &runs {
        let report = score_model(spec, samples, seed, cfg.rps_pairing)?;
        scores.push(ModelScore {
            label: label.clone(),
            fit_dir: path_str(dir),
            data_digest: record.data_digest.clone(),
            report,
            diff: None,
        });
    }
    let ref_pointwise = scores[reference].report.pointwise_elpd.clone();
    for (i, s) in scores.iter_mut().enumerate() {
        if i != reference {
            s.diff = Some(crate::scoring::elpd_diff(&s.report.pointwise_elpd, &ref_pointwise)?);
        }
    }

    t.stage = "output";
    let out = &common.out;
    fs::create_dir_all(out)?;
    io::write_json(&out.join("scores.json"), &scores)?;
    let table = comparison_table(&scores);
    fs::write(out.join("comparison.csv"), &table)?;
    print!("{table}");

    let mut exceed = Vec::new();
    let mut quintiles = Vec::new();
    for (label, _, _, spec, samples) in &runs {
        let layout = spec.layout();
        let rho: Vec<Vec<f64>> = samples
            .flat_draws()
            .map(|d| layout.unflatten(d).map(|p| spec.areal_log_risk(&p).into_iter().map(f64::exp).collect()))
            .collect::<Result<_>>()?;
        exceed.push((label.clone(), exceedance_prob(&rho)?));
        let n = spec.n();
        let means: Vec<f64> = (0..n).map(|i| rho.iter().map(|r| r[i]).sum::<f64>() / rho.len() as f64).collect();
        let x = spec.covariates();
        if cfg.quintile_covariate >= x.ncols() {
            return Err(Error::Config(format!("quintile covariate {} out of range", cfg.quintile_covariate)));
        }
        let cov: Vec<f64> = x.column(cfg.quintile_covariate).iter().copied().collect();
        quintiles.push((label.clone(), quintile_risk_profile(&means, &cov)?));

        let reps = posterior_predictive(spec, samples, seed)?;
        write_replicates(&reps, &out.join(format!("replicates_{label}.csv")))?;
    }
    let mut w = csv::Writer::from_path(out.join("exceedance.csv"))?;
    let mut header = vec!["area".to_string()];
    header.extend(exceed.iter().map(|e| e.0.clone()));
    w.write_record(&header)?;
    for i in 0..exceed[0].1.len() {
        let mut row = vec![i.to_string()];
        row.extend(exceed.iter().map(|e| e.1[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("quintiles.csv"))?;
    w.write_record(["model", "quintile", "mean", "q2.5", "q97.5"])?;
    for (label, q) in &quintiles {
        for (g, s) in q.iter().enumerate() {
            w.write_record([label.clone(), (g + 1).to_string(), s.mean.to_string(), s.lower.to_string(), s.upper.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_replicates(reps: &[Vec<u64>], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for r in reps {
        w.write_record(r.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// CSV with one row per model: elpd, SE, difference and its SE against the
/// reference, RPS, DSS and the count of high Pareto-k observations.
pub fn comparison_table(scores: &[ModelScore]) -> String {
    let mut s = String::from("model,elpd_loo,se,elpd_diff,diff_se,rps,dss,high_k\n");
    for m in scores {
        let r = &m.report;
        let (d, dse) = m.diff.map_or((String::new(), String::new()), |(d, se)| (format!("{d:.3}"), format!("{se:.3}")));
        s.push_str(&format!(
            "{},{:.3},{:.3},{d},{dse},{:.4},{:.4},{}\n",
            m.label,
            r.elpd_loo,
            r.elpd_se,
            r.rps_mean,
            r.dss_mean,
            r.high_k.len()
        ));
    }
    s
}
