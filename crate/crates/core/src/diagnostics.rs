//! Convergence statistics and SBC rank machinery.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SbcRank {
    pub parameter: String,
    pub rank: usize,
    #[serde(rename = "B")]
    pub b: usize,
}

impl SbcRank {
    pub fn new(parameter: impl Into<String>, rank: usize, b: usize) -> Result<Self> {
        if rank > b {
            return Err(Error::InvalidArgument(format!("rank {rank} exceeds B = {b}")));
        }
        Ok(SbcRank { parameter: parameter.into(), rank, b })
    }

    /// `r / (B + 1)`.
    pub fn normalized(&self) -> f64 {
        self.rank as f64 / (self.b as f64 + 1.0)
    }
}

/// Number of draws strictly below `truth`.
pub fn rank_statistic(draws: &[f64], truth: f64) -> usize {
    draws.iter().filter(|&&d| d < truth).count()
}

fn check_chains(chains: &[Vec<f64>]) -> Result<()> {
    if chains.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 chains, got {}", chains.len())));
    }
    let n = chains[0].len();
    if n < 4 {
        return Err(Error::InvalidArgument(format!("need at least 4 draws per chain, got {n}")));
    }
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::DimensionMismatch("chains have different lengths".into()));
    }
    if chains.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("non-finite draw".into()));
    }
    let first = chains[0][0];
    if chains.iter().flatten().all(|&v| v == first) {
        return Err(Error::DegenerateInput("all draws are identical".into()));
    }
    Ok(())
}

/// Splits every chain into halves, dropping the middle draw of odd chains.
fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = chains[0].len();
    let half = n / 2;
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        out.push(c[..half].to_vec());
        out.push(c[n - half..].to_vec());
    }
    out
}

/// Normal scores of pooled average ranks, `Phi^{-1}((r - 3/8) / (S + 1/4))`.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let s = pooled.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let normal = Normal::standard();
    let z: Vec<f64> = ranks.iter().map(|r| normal.inverse_cdf((r - 0.375) / (s as f64 + 0.25))).collect();
    let n = chains[0].len();
    z.chunks(n).map(|c| c.to_vec()).collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// `|x - median|`. With an even count the two middle draws both fold to
/// exactly half their gap, so rescaling the draws cannot split that tie.
fn fold_about_median(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let s = pooled.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let folded: Vec<f64> = if s % 2 == 1 {
        let med = pooled[order[s / 2]];
        pooled.iter().map(|v| (v - med).abs()).collect()
    } else {
        let (lo, hi) = (order[s / 2 - 1], order[s / 2]);
        let med = 0.5 * (pooled[lo] + pooled[hi]);
        let half_gap = 0.5 * (pooled[hi] - pooled[lo]);
        let mut f: Vec<f64> = pooled.iter().map(|v| (v - med).abs()).collect();
        f[lo] = half_gap;
        f[hi] = half_gap;
        f
    };
    let n = chains[0].len();
    folded.chunks(n).map(|c| c.to_vec()).collect()
}

/// Classic potential scale reduction over already-split chains.
fn basic_rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| sample_var(c)).collect::<Vec<_>>());
    let b_over_n = sample_var(&means);
    if w <= 0.0 {
        return if b_over_n > 0.0 { f64::INFINITY } else { 1.0 };
    }
    let var_plus = (n - 1.0) / n * w + b_over_n;
    (var_plus / w).sqrt()
}

/// Rank-normalised split R-hat: the larger of the bulk and folded-tail
/// statistics.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    check_chains(chains)?;
    let halves = split(chains);
    let bulk = basic_rhat(&rank_normalize(&halves));
    let tail = basic_rhat(&rank_normalize(&fold_about_median(&halves)));
    Ok(bulk.max(tail))
}

/// Multi-chain effective sample size over split chains, with Geyer's
/// initial monotone sequence truncation.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> Result<f64> {
    check_chains(chains)?;
    let halves = split(chains);
    let m = halves.len();
    let n = halves[0].len();
    let nf = n as f64;
    let centred: Vec<Vec<f64>> = halves
        .iter()
        .map(|c| {
            let mu = mean(c);
            c.iter().map(|v| v - mu).collect()
        })
        .collect();
    let means: Vec<f64> = halves.iter().map(|c| mean(c)).collect();
    let w = mean(&halves.iter().map(|c| sample_var(c)).collect::<Vec<_>>());
    let var_plus = (nf - 1.0) / nf * w + sample_var(&means);
    if var_plus <= 0.0 {
        return Err(Error::DegenerateInput("zero pooled variance".into()));
    }
    let mean_acov = |t: usize| -> f64 {
        centred.iter().map(|c| (0..n - t).map(|i| c[i] * c[i + t]).sum::<f64>() / nf).sum::<f64>() / m as f64
    };
    let rho = |t: usize| 1.0 - (w - mean_acov(t) * nf / (nf - 1.0)) / var_plus;

    let mut sum_pairs = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let even = if k == 0 { 1.0 } else { rho(2 * k) };
        let pair = even + rho(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum_pairs += pair;
        prev = pair;
        k += 1;
    }
    let total = (m * n) as f64;
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / total.log10());
    Ok(total / tau)
}

/// How [`coverage_interval_check`] builds its 95% band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageBand {
    /// The k-th smallest normalised rank is checked against the 2.5% and
    /// 97.5% quantiles of the k-th uniform order statistic,
    /// `Beta(k, N + 1 - k)`. Calibrated ranks give coverage near 0.95 on
    /// average, but the indicators are strongly dependent, so a single study
    /// can land far from it.
    #[default]
    OrderStatistic,
    /// Each rank is checked against the central 95% of the discrete uniform
    /// on `{0..B}`; calibrated ranks give binomial coverage around 0.95.
    Marginal,
}

/// Fraction of ranks inside the 95% band for uniform ranks.
pub fn coverage_interval_check(ranks: &[SbcRank], band: CoverageBand) -> Result<f64> {
    let first = ranks.first().ok_or_else(|| Error::InvalidArgument("no ranks".into()))?;
    let b = first.b;
    if ranks.iter().any(|r| r.b != b) {
        return Err(Error::InvalidArgument("ranks do not share the same B".into()));
    }
    let inside = match band {
        CoverageBand::Marginal => {
            let (lo, hi) = marginal_band(b);
            ranks.iter().filter(|r| r.rank >= lo && r.rank <= hi).count()
        }
        CoverageBand::OrderStatistic => {
            let mut u: Vec<f64> = ranks.iter().map(SbcRank::normalized).collect();
            u.sort_by(f64::total_cmp);
            let n = u.len() as f64;
            u.iter()
                .enumerate()
                .filter(|&(k, &v)| {
                    let k = k as f64 + 1.0;
                    let beta = Beta::new(k, n + 1.0 - k).expect("positive shape parameters");
                    v >= beta.inverse_cdf(0.025) && v <= beta.inverse_cdf(0.975)
                })
                .count()
        }
    };
    Ok(inside as f64 / ranks.len() as f64)
}

/// Inclusive rank bounds excluding `round(0.025 (B + 1))` values at each end
/// of `{0..B}`.
pub fn marginal_band(b: usize) -> (usize, usize) {
    let cut = (0.025 * (b as f64 + 1.0)).round() as usize;
    (cut, b - cut.min(b))
}

/// Pearson chi-square test of ranks against the discrete uniform on
/// `{0..B}`, with `bins` contiguous groups. Returns the p-value.
pub fn rank_uniformity_pvalue(ranks: &[SbcRank], bins: usize) -> Result<f64> {
    let first = ranks.first().ok_or_else(|| Error::InvalidArgument("no ranks".into()))?;
    let b = first.b;
    if ranks.iter().any(|r| r.b != b) {
        return Err(Error::InvalidArgument("ranks do not share the same B".into()));
    }
    let values = b + 1;
    let bins = bins.clamp(2, values);
    let mut observed = vec![0.0; bins];
    for r in ranks {
        observed[r.rank * bins / values] += 1.0;
    }
    let mut width = vec![0.0; bins];
    for v in 0..values {
        width[v * bins / values] += 1.0;
    }
    let total = ranks.len() as f64;
    let stat: f64 = observed
        .iter()
        .zip(&width)
        .map(|(o, w)| {
            let e = total * w / values as f64;
            (o - e).powi(2) / e
        })
        .sum();
    let chi = ChiSquared::new((bins - 1) as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(1.0 - chi.cdf(stat))
}

/// Writes `parameter,rank,B` rows.
pub fn write_ranks_csv<W: Write>(ranks: &[SbcRank], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in ranks {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn iid(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_statistic(&[3.0, 4.0], 1.0), 0);
        assert_eq!(rank_statistic(&[1.0, 2.0, 3.0, 4.0], 2.5), 2);
        let d = [0.3, -1.0, 2.0, 0.9];
        let scaled: Vec<f64> = d.iter().map(|v| 3.0 * v + 1.0).collect();
        assert_eq!(rank_statistic(&d, 0.5), rank_statistic(&scaled, 2.5));
    }

    #[test]
    fn rhat_iid_and_shifted() {
        let x = iid(1, 4000);
        let chains: Vec<Vec<f64>> = (0..4).map(|c| x.iter().skip(c).step_by(4).copied().collect()).collect();
        assert!(split_rhat(&chains).unwrap() < 1.01);
        let mut two = vec![iid(2, 500), iid(3, 500)];
        for v in two[1].iter_mut() {
            *v += 10.0;
        }
        assert!(split_rhat(&two).unwrap() > 1.5);
        assert!(matches!(split_rhat(&[vec![1.0; 10], vec![1.0; 10]]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn ess_iid_and_ar1() {
        let x = iid(4, 8000);
        let chains: Vec<Vec<f64>> = x.chunks(2000).map(|c| c.to_vec()).collect();
        let ess = effective_sample_size(&chains).unwrap();
        assert!((ess - 8000.0).abs() / 8000.0 < 0.2, "{ess}");

        let mut rng = rng_from_seed(5);
        let phi: f64 = 0.9;
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut v = Vec::with_capacity(5000);
                let mut s: f64 = rng.sample::<f64, _>(StandardNormal) / (1.0 - phi * phi).sqrt();
                for _ in 0..5000 {
                    s = phi * s + rng.sample::<f64, _>(StandardNormal);
                    v.push(s);
                }
                v
            })
            .collect();
        let ess = effective_sample_size(&chains).unwrap();
        let want = 20000.0 * (1.0 - phi) / (1.0 + phi);
        assert!((ess - want).abs() / want < 0.3, "{ess} vs {want}");
    }

    #[test]
    fn coverage_examples() {
        let zeros: Vec<SbcRank> = (0..10).map(|_| SbcRank::new("g", 0, 200).unwrap()).collect();
        assert_eq!(coverage_interval_check(&zeros, CoverageBand::Marginal).unwrap(), 0.0);
        assert_eq!(coverage_interval_check(&zeros, CoverageBand::OrderStatistic).unwrap(), 0.0);
        let one = [SbcRank::new("g", 100, 200).unwrap()];
        assert_eq!(coverage_interval_check(&one, CoverageBand::Marginal).unwrap(), 1.0);
        assert_eq!(coverage_interval_check(&one, CoverageBand::OrderStatistic).unwrap(), 1.0);
        assert!(coverage_interval_check(&[], CoverageBand::Marginal).is_err());
        assert_eq!(marginal_band(200), (5, 195));
    }

    #[test]
    fn uniform_ranks_cover_095() {
        let mut rng = rng_from_seed(8);
        let ranks: Vec<SbcRank> = (0..20_000).map(|_| SbcRank::new("x", rng.random_range(0..=200), 200).unwrap()).collect();
        let c = coverage_interval_check(&ranks, CoverageBand::Marginal).unwrap();
        assert!((c - 0.95).abs() < 3.0 * (0.95f64 * 0.05 / 20_000.0).sqrt() + 1e-3, "{c}");
        assert!(rank_uniformity_pvalue(&ranks, 20).unwrap() > 0.001);
    }

    #[test]
    fn order_statistic_coverage_averages_095() {
        let mut rng = rng_from_seed(9);
        let reps = 300;
        let mean = (0..reps)
            .map(|_| {
                let ranks: Vec<SbcRank> = (0..400).map(|_| SbcRank::new("x", rng.random_range(0..=200), 200).unwrap()).collect();
                coverage_interval_check(&ranks, CoverageBand::OrderStatistic).unwrap()
            })
            .sum::<f64>()
            / reps as f64;
        assert!((mean - 0.95).abs() < 0.03, "{mean}");
    }

    #[test]
    fn ranks_csv_header() {
        let mut buf = Vec::new();
        write_ranks_csv(&[SbcRank::new("gamma", 3, 10).unwrap()], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "parameter,rank,B\ngamma,3,10\n");
    }
}
