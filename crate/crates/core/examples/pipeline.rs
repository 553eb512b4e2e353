//! The `simulate` / `fit` / `score` workflow of the `carmm` binary, driven
//! in-process against a temporary directory.

use carmm::cli::main_with_args;

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let path = |p: &str| dir.path().join(p).to_string_lossy().into_owned();
    let (data, fit, glm, score) = (path("data"), path("fit"), path("glm"), path("score"));
    let glm_cfg = path("glm.json");
    std::fs::write(&glm_cfg, r#"{"model": {"likelihood": "poisson", "parameterisation": "post", "spatial": "none"}}"#).unwrap();

    let steps: Vec<Vec<&str>> = vec![
        vec!["carmm", "simulate", "--out", &data, "--seed", "1"],
        vec!["carmm", "fit", &data, "--out", &fit, "--seed", "2", "--chains", "2", "--iters", "1000"],
        vec!["carmm", "fit", &data, "--out", &glm, "--seed", "3", "--chains", "2", "--iters", "1000", "--config", &glm_cfg],
        vec!["carmm", "score", &fit, &glm, "--out", &score, "--seed", "4"],
    ];
    for args in steps {
        println!("$ {}", args.join(" "));
        let code = main_with_args(&args);
        assert_eq!(code, 0, "step failed");
    }
    println!("{}", std::fs::read_to_string(dir.path().join("fit/summary.csv")).unwrap().lines().take(4).collect::<Vec<_>>().join("\n"));
}
