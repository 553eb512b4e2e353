//! A small simulation-based calibration study. Pass an output directory to
//! keep the rank, coverage, bias and exclusion tables.

use carmm::sampler::SamplerConfig;
use carmm::sbc::{run_study, write_study_outputs, SbcStudyConfig, Scenario};

fn main() -> carmm::Result<()> {
    let cfg = SbcStudyConfig {
        rows: 3,
        cols: 3,
        membership_sizes: vec![6, 9],
        scenarios: vec![Scenario::POST_POST, Scenario::POST_INVERSE],
        replicates: 40,
        sampler: SamplerConfig { chains: 4, iterations: 1000, thin: 10, ..SamplerConfig::default() },
        rhat_threshold: 1.05,
        ..SbcStudyConfig::default()
    };
    let result = run_study(&cfg)?;
    for cell in &result.cells {
        let e = &cell.exclusions;
        println!("{} m={}: {}/{} retained", cell.scenario, cell.m, e.retained, e.replicates);
        for p in &cell.parameters {
            if ["gamma", "tau", "phi", "rho"].contains(&p.parameter.as_str()) {
                println!("  {:<6} coverage {:.2}  uniformity p {:.3}  rmse {:.3}", p.parameter, p.coverage, p.uniformity_p, p.rmse);
            }
        }
    }
    if let Some(dir) = std::env::args().nth(1) {
        write_study_outputs(&result, dir.as_ref())?;
        println!("tables written to {dir}");
    }
    Ok(())
}
