//! Comparing a CAR-MM model with a plain GLM-MM: PSIS-LOO, paired elpd
//! difference, RPS, DSS, predictive p-values and a risk profile.

use carmm::graph::make_grid;
use carmm::membership::simulate_membership_matrix;
use carmm::model::simulate::simulate_dataset;
use carmm::model::{ModelConfig, ModelSpec, Parameterisation, Spatial};
use carmm::rng::rng_from_seed;
use carmm::sampler::{run_chains, SamplerConfig};
use carmm::scoring::{elpd_diff, quintile_risk_profile, score_model, RpsPairing};
use nalgebra::DMatrix;

fn main() -> carmm::Result<()> {
    let g = make_grid(4, 5)?;
    let h = simulate_membership_matrix(&g, 30, 8)?;
    let x = DMatrix::from_fn(20, 2, |i, k| ((i * 5 + 3 * k) % 11) as f64 / 10.0);
    let generator = ModelSpec::new(ModelConfig::default(), g.clone(), h.clone(), x.clone(), vec![30.0; 30])?;
    let (_, y) = simulate_dataset(&generator, Parameterisation::Post, &mut rng_from_seed(9))?;

    let mut reports = Vec::new();
    for spatial in [Spatial::Car, Spatial::None] {
        let cfg = ModelConfig { spatial, ..ModelConfig::default() };
        let spec = ModelSpec::new(cfg, g.clone(), h.clone(), x.clone(), vec![30.0; 30])?.with_counts(y.clone())?;
        let samples = run_chains(&spec, &SamplerConfig { seed: 10, ..SamplerConfig::default() })?;
        let r = score_model(&spec, &samples, 11, RpsPairing::Literal)?;
        println!(
            "{spatial:?}: elpd {:.2} (SE {:.2}), RPS {:.3}, DSS {:.3}, high k {}",
            r.elpd_loo, r.elpd_se, r.rps_mean, r.dss_mean, r.high_k.len()
        );
        if let Some(mixed) = &r.mixed_ppp {
            let extreme = mixed.iter().filter(|&&p| !(0.025..=0.975).contains(&p)).count();
            println!("  mixed predictive p-values outside [0.025, 0.975]: {extreme}");
        }
        if spatial == Spatial::Car {
            let layout = spec.layout();
            let draws: Vec<Vec<f64>> = samples
                .flat_draws()
                .map(|d| layout.unflatten(d).map(|p| spec.areal_log_risk(&p).into_iter().map(f64::exp).collect()))
                .collect::<carmm::Result<_>>()?;
            let means: Vec<f64> = (0..20).map(|i| draws.iter().map(|r: &Vec<f64>| r[i]).sum::<f64>() / draws.len() as f64).collect();
            let cov: Vec<f64> = x.column(0).iter().copied().collect();
            for (q, s) in quintile_risk_profile(&means, &cov)?.iter().enumerate() {
                println!("  x1 quintile {}: mean RR {:.3} [{:.3}, {:.3}]", q + 1, s.mean, s.lower, s.upper);
            }
        }
        reports.push(r);
    }
    let (d, se) = elpd_diff(&reports[1].pointwise_elpd, &reports[0].pointwise_elpd)?;
    println!("GLM minus CAR: {d:.2} (SE {se:.2})");
    Ok(())
}
