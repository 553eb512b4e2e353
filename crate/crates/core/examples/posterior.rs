//! The GLM-MM log posterior under both parameterisations, with a
//! finite-difference check of its gradient.

use carmm::graph::make_grid;
use carmm::membership::simulate_membership_matrix;
use carmm::model::simulate::simulate_dataset;
use carmm::model::{Likelihood, ModelConfig, ModelSpec, Parameterisation, Spatial};
use carmm::rng::rng_from_seed;
use nalgebra::DMatrix;

fn main() -> carmm::Result<()> {
    let g = make_grid(3, 3)?;
    let x = DMatrix::from_fn(9, 2, |i, k| ((i + 2 * k) % 4) as f64 / 3.0);
    for par in [Parameterisation::Post, Parameterisation::Inverse] {
        let m = if par == Parameterisation::Post { 12 } else { 7 };
        let h = simulate_membership_matrix(&g, m, 1)?;
        let cfg = ModelConfig { likelihood: Likelihood::NegBin, parameterisation: par, spatial: Spatial::Car, ..Default::default() };
        let spec = ModelSpec::new(cfg, g.clone(), h, x.clone(), vec![25.0; m])?;
        let (truth, y) = simulate_dataset(&spec, Parameterisation::Post, &mut rng_from_seed(2))?;
        let spec = spec.with_counts(y)?;

        let point = spec.unconstrain(&truth.param_vector(&spec))?;
        let (lp, grad) = spec.log_posterior_unconstrained(&point)?;
        let mut worst = 0.0_f64;
        for k in 0..point.len() {
            let (mut up, mut down) = (point.clone(), point.clone());
            up[k] += 1e-5;
            down[k] -= 1e-5;
            let fd = (spec.log_posterior_unconstrained(&up)?.0 - spec.log_posterior_unconstrained(&down)?.0) / 2e-5;
            worst = worst.max((grad[k] - fd).abs() / fd.abs().max(1.0));
        }
        println!("{par}: {} parameters {:?}...", spec.dim(), &spec.param_names()[..4]);
        println!("  log posterior at the truth {lp:.3}, worst gradient error {worst:.1e}");
    }
    Ok(())
}
