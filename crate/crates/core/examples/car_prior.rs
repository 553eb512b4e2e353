//! Proper CAR prior: precision, eigenvalue log-determinant, density, draws,
//! and recovering the (C, M) pair from a covariance.

use carmm::car::{extract_car_pair, full_conditional, validate_car_pair};
use carmm::graph::make_grid;
use carmm::{linalg, CarParams, CarPrior};

fn main() -> carmm::Result<()> {
    let prior = CarPrior::new(make_grid(3, 3)?);
    let p = CarParams::new(0.9, 2.0)?;

    let q = prior.build_precision(p);
    println!("log det Q: eigenvalues {:.10}, dense {:.10}", prior.log_det_precision(p)?, linalg::log_abs_det(&q));

    let phi = prior.sample_prior(p, 7);
    println!("draw: {:?}", phi.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>());
    println!("log density of the draw: {:.4}", prior.car_log_density(p, &phi)?);

    let (mean, var) = full_conditional(prior.graph(), 0.9, 2.0, &phi, 4)?;
    println!("phi[4] | rest ~ N({mean:.3}, {var:.3})");

    let sigma = linalg::spd_inverse(&q)?;
    let pair = extract_car_pair(&sigma)?;
    let check = validate_car_pair(&pair)?;
    println!("extracted pair valid: {} (C[0,1] = {:.3})", check.valid, pair.c[(0, 1)]);
    println!("round trip error: {:.2e}", linalg::max_abs_diff(&pair.covariance()?, &sigma));
    Ok(())
}
