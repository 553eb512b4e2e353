//! Split R-hat, effective sample size, SBC ranks and their uniformity tests.

use carmm::diagnostics::{
    coverage_interval_check, effective_sample_size, marginal_band, rank_statistic, rank_uniformity_pvalue, split_rhat,
    CoverageBand, SbcRank,
};
use carmm::rng::rng_from_seed;
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> carmm::Result<()> {
    let mut rng = rng_from_seed(1);
    let ar1 = |rng: &mut carmm::rng::Rng, rho: f64, shift: f64| -> Vec<f64> {
        let mut v = 0.0;
        (0..1000).map(|_| { v = rho * v + rng.sample::<f64, _>(StandardNormal); v + shift }).collect()
    };
    let mixed: Vec<Vec<f64>> = (0..4).map(|_| ar1(&mut rng, 0.5, 0.0)).collect();
    let stuck: Vec<Vec<f64>> = (0..4).map(|c| ar1(&mut rng, 0.5, c as f64)).collect();
    println!("mixed chains: R-hat {:.3}, ESS {:.0}", split_rhat(&mixed)?, effective_sample_size(&mixed)?);
    println!("offset chains: R-hat {:.3}", split_rhat(&stuck)?);

    let b = 200;
    let ranks: Vec<SbcRank> = (0..400)
        .map(|_| {
            let truth: f64 = rng.sample(StandardNormal);
            let draws: Vec<f64> = (0..b).map(|_| rng.sample(StandardNormal)).collect();
            SbcRank::new("theta", rank_statistic(&draws, truth), b)
        })
        .collect::<carmm::Result<_>>()?;
    let (lo, hi) = marginal_band(b);
    println!("calibrated ranks: marginal band [{lo}, {hi}] coverage {:.3}, order-statistic coverage {:.3}, uniformity p {:.3}",
        coverage_interval_check(&ranks, CoverageBand::Marginal)?,
        coverage_interval_check(&ranks, CoverageBand::OrderStatistic)?,
        rank_uniformity_pvalue(&ranks, 20)?);

    let overconfident: Vec<SbcRank> = (0..400)
        .map(|_| {
            let truth: f64 = rng.sample(StandardNormal);
            let draws: Vec<f64> = (0..b).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
            SbcRank::new("theta", rank_statistic(&draws, truth), b)
        })
        .collect::<carmm::Result<_>>()?;
    println!("too-narrow posterior: marginal coverage {:.3}, order-statistic coverage {:.3}, uniformity p {:.2e}",
        coverage_interval_check(&overconfident, CoverageBand::Marginal)?,
        coverage_interval_check(&overconfident, CoverageBand::OrderStatistic)?,
        rank_uniformity_pvalue(&overconfident, 20)?);
    Ok(())
}
