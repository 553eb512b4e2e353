use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use carmm::cli::{load_fit, ModelScore, RunManifest};
use carmm::io::{read_json, Dataset};

fn carmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_carmm")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = carmm(args);
    assert!(out.status.success(), "carmm {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, json: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_string()
}

fn quick_fit(data: &Path, out: &Path, config: Option<&str>) {
    let mut args = vec!["fit", p(data), "--out", p(out), "--seed", "5", "--chains", "2", "--iters", "400"];
    if let Some(c) = config {
        args.extend(["--config", c]);
    }
    ok(&args);
}

#[test]
fn simulate_writes_a_loadable_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["simulate", "--out", p(&data), "--seed", "3"]);
    let ds = Dataset::read(&data).unwrap();
    assert_eq!(ds.graph.n(), 20);
    assert_eq!(ds.membership.m(), 20);
    assert_eq!(ds.covariates.ncols(), 2);
    assert!(ds.counts.is_some());
    for f in ["truth.json", "model.json", "simulate.json", "manifest.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let manifest: RunManifest = read_json(&data.join("manifest.json")).unwrap();
    assert_eq!(manifest.status, "ok");
    assert_eq!(manifest.seed, 3);

    let first = fs::read(data.join("data.csv")).unwrap();
    ok(&["simulate", "--out", p(&data), "--seed", "3"]);
    assert_eq!(fs::read(data.join("data.csv")).unwrap(), first);
    ok(&["simulate", "--out", p(&data), "--seed", "4"]);
    assert_ne!(fs::read(data.join("data.csv")).unwrap(), first);
}

#[test]
fn queen_adjacency_adds_diagonals() {
    let dir = tempfile::tempdir().unwrap();
    let (rook, queen) = (dir.path().join("rook"), dir.path().join("queen"));
    ok(&["simulate", "--out", p(&rook), "--seed", "1"]);
    ok(&["simulate", "--out", p(&queen), "--seed", "1", "--adjacency", "queen"]);
    let edges = |d: &Path| Dataset::read(d).unwrap().graph.edges().len();
    assert_eq!(edges(&rook), 31);
    assert_eq!(edges(&queen), 31 + 24);
    assert!(!carmm(&["simulate", "--out", p(&rook), "--adjacency", "hex"]).status.success());
}

#[test]
fn inverse_generation_with_too_many_memberships_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sim.json", r#"{"generation": "inverse", "memberships": 30}"#);
    let out_dir = dir.path().join("out");
    let out = carmm(&["simulate", "--config", &cfg, "--out", p(&out_dir)]);
    assert!(!out.status.success());
    let manifest: RunManifest = read_json(&out_dir.join("manifest.json")).unwrap();
    assert_eq!(manifest.status, "failed");
    assert_eq!(manifest.stage.as_deref(), Some("config"));
    assert_eq!(manifest.inputs.len(), 1);
    assert!(!out_dir.join("data.csv").exists());
}

#[test]
fn failed_fit_still_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("fit");
    let out = carmm(&["fit", p(&dir.path().join("missing")), "--out", p(&out_dir)]);
    assert!(!out.status.success());
    let manifest: RunManifest = read_json(&out_dir.join("manifest.json")).unwrap();
    assert_eq!(manifest.command, "fit");
    assert_eq!(manifest.status, "failed");
    assert!(manifest.error.is_some());
}

#[test]
fn fit_columns_follow_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["simulate", "--out", p(&data), "--seed", "11"]);

    let glm = write_config(dir.path(), "glm.json", r#"{"model": {"likelihood": "negbin", "parameterisation": "post", "spatial": "none"}}"#);
    quick_fit(&data, &dir.path().join("glm"), Some(&glm));
    let (_, s) = load_fit(&dir.path().join("glm")).unwrap();
    assert_eq!(s.names, vec!["gamma", "beta[1]", "beta[2]", "psi"]);
    let summary = fs::read_to_string(dir.path().join("glm/summary.csv")).unwrap();
    assert!(summary.starts_with("parameter,mean,sd,q2.5,q50,q97.5,ci_width,rhat,ess\n"));
    assert!(!summary.contains("alpha") && !summary.contains("tau"));

    quick_fit(&data, &dir.path().join("car"), None);
    let (record, s) = load_fit(&dir.path().join("car")).unwrap();
    assert_eq!(record.label, "poisson-post-car");
    assert!(s.index_of("alpha").is_some() && s.index_of("tau").is_some());
    assert_eq!(s.draws.len(), 2);
    assert_eq!(s.draws[0].len(), 200);

    let icar = write_config(dir.path(), "icar.json", r#"{"model": {"likelihood": "poisson", "parameterisation": "post", "spatial": "icar"}}"#);
    quick_fit(&data, &dir.path().join("icar"), Some(&icar));
    let (_, s) = load_fit(&dir.path().join("icar")).unwrap();
    assert!(s.index_of("alpha").is_none());
    let phi: Vec<usize> = (0..s.names.len()).filter(|&k| s.names[k].starts_with("phi[")).collect();
    assert_eq!(phi.len(), 20);
    for d in s.flat_draws() {
        let total: f64 = phi.iter().map(|&k| d[k]).sum();
        assert!(total.abs() < 1e-8, "sum(phi) = {total}");
    }
}

#[test]
fn score_compares_against_the_reference() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["simulate", "--out", p(&data), "--seed", "21"]);
    quick_fit(&data, &dir.path().join("car"), None);
    let glm = write_config(dir.path(), "glm.json", r#"{"model": {"likelihood": "poisson", "parameterisation": "post", "spatial": "none"}}"#);
    quick_fit(&data, &dir.path().join("glm"), Some(&glm));
    let icar = write_config(dir.path(), "icar.json", r#"{"model": {"likelihood": "poisson", "parameterisation": "post", "spatial": "icar"}}"#);
    quick_fit(&data, &dir.path().join("icar"), Some(&icar));

    let out = dir.path().join("self");
    ok(&["score", p(&dir.path().join("car")), p(&dir.path().join("car")), "--out", p(&out), "--seed", "1"]);
    let scores: Vec<ModelScore> = read_json(&out.join("scores.json")).unwrap();
    assert_eq!(scores[0].diff, None);
    assert_eq!(scores[1].diff, Some((0.0, 0.0)));

    let out = dir.path().join("three");
    let (car, glm, icar) = (dir.path().join("car"), dir.path().join("glm"), dir.path().join("icar"));
    ok(&["score", p(&car), p(&glm), p(&icar), "--out", p(&out)]);
    let table = fs::read_to_string(out.join("comparison.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "model,elpd_loo,se,elpd_diff,diff_se,rps,dss,high_k");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("poisson-post-car,") && rows[1].contains(",,"));
    assert_eq!(rows[2..].iter().filter(|r| !r.contains(",,")).count(), 2);
    let exceed = fs::read_to_string(out.join("exceedance.csv")).unwrap();
    assert_eq!(exceed.lines().count(), 21);
    let quint = fs::read_to_string(out.join("quintiles.csv")).unwrap();
    assert_eq!(quint.lines().count(), 1 + 3 * 5);

    let other = dir.path().join("other");
    ok(&["simulate", "--out", p(&other), "--seed", "22"]);
    quick_fit(&other, &dir.path().join("other_fit"), None);
    let bad = dir.path().join("bad");
    let res = carmm(&["score", p(&dir.path().join("car")), p(&dir.path().join("other_fit")), "--out", p(&bad)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("digest mismatch"));
    let manifest: RunManifest = read_json(&bad.join("manifest.json")).unwrap();
    assert_eq!(manifest.status, "failed");
}

#[test]
fn sbc_command_writes_study_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "study.json",
        r#"{"rows": 2, "cols": 3, "membership_sizes": [6], "scenarios": ["post-post"], "replicates": 4,
            "sampler": {"chains": 2, "iterations": 400, "thin": 4}, "rhat_threshold": 2.0}"#,
    );
    let out = dir.path().join("sbc");
    ok(&["sbc", "--config", &cfg, "--out", p(&out), "--seed", "9"]);
    for f in ["ranks.csv", "coverage.csv", "bias.csv", "exclusions.csv", "summary.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let ranks = fs::read_to_string(out.join("ranks.csv")).unwrap();
    assert!(ranks.starts_with("scenario,m,parameter,rank,B\n"));
    assert!(ranks.lines().nth(1).unwrap().starts_with("post-post,6,"));
    let exclusions = fs::read_to_string(out.join("exclusions.csv")).unwrap();
    assert_eq!(exclusions.lines().nth(1).unwrap().split(',').nth(2), Some("4"));
}
