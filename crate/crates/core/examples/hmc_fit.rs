//! Fitting a CAR-MM model by multi-chain HMC and reading the diagnostics.

use carmm::graph::make_grid;
use carmm::membership::simulate_membership_matrix;
use carmm::model::simulate::simulate_dataset;
use carmm::model::{ModelConfig, ModelSpec, Parameterisation};
use carmm::rng::rng_from_seed;
use carmm::sampler::{run_chains, SamplerConfig};
use nalgebra::DMatrix;

fn main() -> carmm::Result<()> {
    let g = make_grid(4, 5)?;
    let h = simulate_membership_matrix(&g, 26, 3)?;
    let x = DMatrix::from_fn(20, 2, |i, k| ((i * 3 + k) % 7) as f64 / 6.0);
    let spec = ModelSpec::new(ModelConfig::default(), g, h, x, vec![20.0; 26])?;
    let (truth, y) = simulate_dataset(&spec, Parameterisation::Post, &mut rng_from_seed(4))?;
    let spec = spec.with_counts(y)?;

    let samples = run_chains(&spec, &SamplerConfig { seed: 5, ..SamplerConfig::default() })?;
    println!("{} chains x {} draws, max R-hat {:.3}, divergences {}", samples.chains(), samples.draws_per_chain(), samples.max_rhat(), samples.divergences());
    for s in &samples.stats {
        println!("  chain seed {}: step {:.3}, acceptance {:.2}", s.seed, s.step_size, s.acceptance_rate);
    }
    let truth = truth.param_vector(&spec);
    let flat = spec.layout().flatten(&truth);
    println!("{:>8} {:>8} {:>8} {:>7} {:>7}", "param", "truth", "mean", "rhat", "ess");
    for name in ["gamma", "beta[1]", "beta[2]", "alpha", "tau"] {
        let k = samples.index_of(name).expect("named parameter");
        let col = samples.column(k);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        println!("{name:>8} {:>8.3} {mean:>8.3} {:>7.3} {:>7.0}", flat[k], samples.rhat[k], samples.ess[k]);
    }
    Ok(())
}
