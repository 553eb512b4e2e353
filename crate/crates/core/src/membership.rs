//! Multiple-membership matrices.
//!
//! A membership matrix `H` is `m x n`: row `j` spreads membership `j` over
//! the `n` areas. Valid matrices are row-stochastic, have full rank
//! `min(m, n)` and leave no area without weight.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::AdjacencyGraph;
use crate::linalg;
use crate::rng::rng_from_seed;

pub const ROW_SUM_TOL: f64 = 1e-12;
/// Weight of a membership on its anchor area.
pub const ANCHOR_WEIGHT: f64 = 0.5;
pub const FIRST_ORDER_WEIGHT: f64 = 0.35;
pub const SECOND_ORDER_WEIGHT: f64 = 0.15;
const MAX_RESHUFFLES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct MembershipMatrix {
    h: DMatrix<f64>,
}

impl MembershipMatrix {
    /// Validates row-stochasticity, entry bounds, full rank and column
    /// coverage.
    pub fn new(h: DMatrix<f64>) -> Result<Self> {
        let (m, n) = h.shape();
        if m == 0 || n == 0 {
            return Err(Error::InvalidMembership("empty matrix".into()));
        }
        for j in 0..m {
            for i in 0..n {
                let v = h[(j, i)];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidMembership(format!("row {j}, column {i}: weight {v} outside [0, 1]")));
                }
            }
            let s = h.row(j).sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidMembership(format!("row {j} sums to {s}, expected 1")));
            }
        }
        if let Some(i) = (0..n).find(|&i| h.column(i).iter().all(|&v| v == 0.0)) {
            return Err(Error::InvalidMembership(format!("column {i} is all zero (area {i} has no membership)")));
        }
        let rank = linalg::numerical_rank(&h);
        if rank != m.min(n) {
            return Err(Error::InvalidMembership(format!("rank {rank}, expected full rank {}", m.min(n))));
        }
        Ok(MembershipMatrix { h })
    }

    pub fn identity(n: usize) -> Self {
        MembershipMatrix { h: DMatrix::identity(n, n) }
    }

    pub fn m(&self) -> usize {
        self.h.nrows()
    }

    pub fn n(&self) -> usize {
        self.h.ncols()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// First `m` rows, re-validated.
    pub fn truncate(&self, m: usize) -> Result<Self> {
        if m == 0 || m > self.m() {
            return Err(Error::InvalidArgument(format!("cannot truncate {} rows to {m}", self.m())));
        }
        Self::new(self.h.rows(0, m).into_owned())
    }

    /// Drops row `j`; used for leave-one-out refits.
    pub fn without_row(&self, j: usize) -> Result<Self> {
        if j >= self.m() {
            return Err(Error::IndexOutOfRange { index: j, len: self.m() });
        }
        Self::new(self.h.clone().remove_row(j))
    }

    /// `H v` for an areal vector.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let out = &self.h * DVector::from_column_slice(v);
        out.iter().copied().collect()
    }

    /// `H^T v` for a membership vector.
    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        let out = self.h.tr_mul(&DVector::from_column_slice(v));
        out.iter().copied().collect()
    }

    /// Moore–Penrose pseudoinverse (n x m).
    pub fn pseudo_inverse(&self) -> DMatrix<f64> {
        linalg::pseudo_inverse(&self.h)
    }

    /// Reads a headerless CSV of `m` rows and `n` columns.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (j, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidMembership(format!("row {j}, column {i}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(Error::InvalidMembership(format!("row {j} has {} columns, expected {}", row.len(), first.len())));
                }
            }
            rows.push(row);
        }
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        Self::new(DMatrix::from_row_iterator(m, n, rows.into_iter().flatten()))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        for j in 0..self.m() {
            wtr.write_record(self.h.row(j).iter().map(|v| v.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn simulate_row(g: &AdjacencyGraph, anchor: usize, rng: &mut crate::rng::Rng) -> Vec<f64> {
    let n = g.n();
    let mut row = vec![0.0; n];
    row[anchor] = ANCHOR_WEIGHT;
    let first = g.neighbours(anchor);
    let second = g.second_order_neighbours(anchor).expect("anchor is a valid area");
    let first_share = if second.is_empty() { FIRST_ORDER_WEIGHT + SECOND_ORDER_WEIGHT } else { FIRST_ORDER_WEIGHT };
    let mut spread = |group: &[usize], share: f64| {
        let draws: Vec<f64> = group.iter().map(|_| rng.random::<f64>()).collect();
        let total: f64 = draws.iter().sum();
        for (&i, u) in group.iter().zip(draws) {
            row[i] = u / total * share;
        }
    };
    spread(first, first_share);
    if !second.is_empty() {
        spread(&second, SECOND_ORDER_WEIGHT);
    }
    row
}

/// Simulates an `m x n` membership matrix anchored on the areas of `g`.
pub fn simulate_membership_matrix(g: &AdjacencyGraph, m: usize, seed: u64) -> Result<MembershipMatrix> {
    let mut out = simulate_nested(g, &[m], seed)?;
    Ok(out.remove(0))
}

/// Simulates the largest requested size once and truncates it to every size
/// in `sizes`, reshuffling rows until every truncation is a valid membership
/// matrix. Results follow the order of `sizes`.
pub fn simulate_nested(g: &AdjacencyGraph, sizes: &[usize], seed: u64) -> Result<Vec<MembershipMatrix>> {
    let n = g.n();
    let m_max = *sizes.iter().max().ok_or_else(|| Error::InvalidArgument("no membership sizes given".into()))?;
    if sizes.contains(&0) {
        return Err(Error::InvalidArgument("membership count must be positive".into()));
    }
    let mut rng = rng_from_seed(seed);
    let rounds = m_max.div_ceil(n);
    let rows: Vec<Vec<f64>> = (0..rounds)
        .flat_map(|_| (0..n).collect::<Vec<_>>())
        .map(|anchor| simulate_row(g, anchor, &mut rng))
        .collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for _ in 0..MAX_RESHUFFLES {
        order.shuffle(&mut rng);
        let full = DMatrix::from_row_iterator(m_max, n, order[..m_max].iter().flat_map(|&r| rows[r].iter().copied()));
        let built: Result<Vec<MembershipMatrix>> = sizes
            .iter()
            .map(|&m| MembershipMatrix::new(full.rows(0, m).into_owned()))
            .collect();
        if let Ok(mats) = built {
            return Ok(mats);
        }
    }
    Err(Error::SimulationFailure(format!(
        "no valid row order for sizes {sizes:?} on {n} areas after {MAX_RESHUFFLES} reshuffles"
    )))
}

/// Moore–Penrose left inverse `(H^T H)^{-1} H^T`.
pub fn left_inverse(h: &MembershipMatrix) -> Result<DMatrix<f64>> {
    if h.m() < h.n() {
        return Err(Error::NoLeftInverse { m: h.m(), n: h.n() });
    }
    Ok(h.pseudo_inverse())
}

/// `G* = L + Z - L H Z H L`: another left inverse for every `Z` when `m > n`.
pub fn generalized_inverse_family(h: &MembershipMatrix, l: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, n) = (h.m(), h.n());
    if m <= n {
        return Err(Error::NotApplicable(format!("left inverses are unique unless m > n (m = {m}, n = {n})")));
    }
    if l.shape() != (n, m) || z.shape() != (n, m) {
        return Err(Error::DimensionMismatch(format!("L and Z must be {n}x{m}")));
    }
    let hw = h.weights();
    Ok(l + z - l * hw * z * hw * l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankReport {
    pub rank: usize,
    pub dim: usize,
    pub positive_definite: bool,
}

/// `H Sigma H^T` with its numerical rank.
pub fn pushforward_covariance(h: &MembershipMatrix, sigma: &DMatrix<f64>) -> Result<(DMatrix<f64>, RankReport)> {
    if sigma.shape() != (h.n(), h.n()) {
        return Err(Error::DimensionMismatch(format!(
            "Sigma is {}x{}, H has {} columns",
            sigma.nrows(),
            sigma.ncols(),
            h.n()
        )));
    }
    let hw = h.weights();
    let mut out = hw * sigma * hw.transpose();
    linalg::symmetrize(&mut out);
    let eig = linalg::symmetric_eigenvalues(&out);
    let top = eig.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let rank = eig.iter().filter(|&&v| v > linalg::RANK_RTOL * top).count();
    let report = RankReport { rank, dim: h.m(), positive_definite: rank == h.m() };
    Ok((out, report))
}

/// Recovers `Sigma` from `H Sigma H^T` with the Moore–Penrose left inverse.
pub fn recover_areal_covariance(h: &MembershipMatrix, sigma_tilde: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if h.m() < h.n() {
        return Err(Error::NonIdentifiable { m: h.m(), n: h.n() });
    }
    if sigma_tilde.shape() != (h.m(), h.m()) {
        return Err(Error::DimensionMismatch(format!("Sigma~ must be {}x{}", h.m(), h.m())));
    }
    let l = left_inverse(h)?;
    Ok(&l * sigma_tilde * l.transpose())
}

/// Membership log relative risks `H (gamma 1 + X beta + phi)`.
pub fn mm_log_relative_risk(
    h: &MembershipMatrix,
    gamma: f64,
    beta: &[f64],
    x: &DMatrix<f64>,
    phi: &[f64],
) -> Result<Vec<f64>> {
    let n = h.n();
    if x.nrows() != n || x.ncols() != beta.len() || phi.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "X is {}x{}, beta has {}, phi has {}, H has {n} columns",
            x.nrows(),
            x.ncols(),
            beta.len(),
            phi.len()
        )));
    }
    let eta = areal_log_relative_risk(gamma, beta, x, phi);
    Ok(h.apply(&eta))
}

/// Areal log relative risks `gamma + X beta + phi`.
pub fn areal_log_relative_risk(gamma: f64, beta: &[f64], x: &DMatrix<f64>, phi: &[f64]) -> Vec<f64> {
    let xb = x * DVector::from_column_slice(beta);
    (0..x.nrows()).map(|i| gamma + xb[i] + phi[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::make_grid;

    #[test]
    fn validation_messages_name_the_offender() {
        let h = DMatrix::from_row_slice(2, 2, &[0.6, 0.6, 0.0, 1.0]);
        let err = MembershipMatrix::new(h).unwrap_err().to_string();
        assert!(err.contains("row 0"), "{err}");
        let h = DMatrix::from_row_slice(2, 3, &[0.5, 0.5, 0.0, 0.5, 0.5, 0.0]);
        let err = MembershipMatrix::new(h).unwrap_err().to_string();
        assert!(err.contains("column 2"), "{err}");
        let h = DMatrix::from_row_slice(3, 2, &[0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
        let err = MembershipMatrix::new(h).unwrap_err().to_string();
        assert!(err.contains("rank"), "{err}");
        let h = DMatrix::from_row_slice(1, 2, &[1.5, -0.5]);
        assert!(MembershipMatrix::new(h).is_err());
    }

    #[test]
    fn simulated_rows_have_group_masses() {
        let g = make_grid(5, 5).unwrap();
        let h = simulate_membership_matrix(&g, 25, 3).unwrap();
        for j in 0..h.m() {
            let row = h.weights().row(j);
            assert!((row.sum() - 1.0).abs() < 1e-12);
            let anchor = (0..25).find(|&i| row[i] == ANCHOR_WEIGHT).expect("anchor weight 0.5");
            let first: f64 = g.neighbours(anchor).iter().map(|&i| row[i]).sum();
            let second: f64 = g.second_order_neighbours(anchor).unwrap().iter().map(|&i| row[i]).sum();
            assert!((first - 0.35).abs() < 1e-12);
            assert!((second - 0.15).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_second_order_merges_into_first() {
        // both rows of a 1x2 lattice are (0.5, 0.5), so only single rows are checked
        let g = make_grid(1, 2).unwrap();
        let mut rng = rng_from_seed(1);
        for anchor in 0..2 {
            let row = simulate_row(&g, anchor, &mut rng);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        }
        assert!(matches!(simulate_membership_matrix(&g, 2, 1), Err(Error::SimulationFailure(_))));
    }

    #[test]
    fn nested_truncation_shares_rows() {
        let g = make_grid(4, 5).unwrap();
        let mats = simulate_nested(&g, &[14, 20, 26], 9).unwrap();
        assert_eq!(mats[0].m(), 14);
        assert_eq!(mats[2].m(), 26);
        assert_eq!(mats[2].weights().rows(0, 14), mats[0].weights().rows(0, 14));
        assert_eq!(mats[2].weights().rows(0, 20), mats[1].weights().rows(0, 20));
    }

    #[test]
    fn left_inverse_examples() {
        let id = MembershipMatrix::identity(4);
        assert!(linalg::max_abs_diff(&left_inverse(&id).unwrap(), &DMatrix::identity(4, 4)) < 1e-15);
        let g = make_grid(2, 2).unwrap();
        let h = simulate_membership_matrix(&g, 8, 5).unwrap();
        let l = left_inverse(&h).unwrap();
        assert!(linalg::max_abs_diff(&(&l * h.weights()), &DMatrix::identity(4, 4)) < 1e-10);
        let g = make_grid(1, 5).unwrap();
        let h = simulate_membership_matrix(&g, 3, 5).unwrap();
        assert!(matches!(left_inverse(&h), Err(Error::NoLeftInverse { m: 3, n: 5 })));
    }

    #[test]
    fn generalized_inverse_zero_z_is_l() {
        let g = make_grid(2, 2).unwrap();
        let h = simulate_membership_matrix(&g, 8, 2).unwrap();
        let l = left_inverse(&h).unwrap();
        let gstar = generalized_inverse_family(&h, &l, &DMatrix::zeros(4, 8)).unwrap();
        assert!(linalg::max_abs_diff(&gstar, &l) < 1e-15);
        let sq = MembershipMatrix::identity(4);
        assert!(matches!(
            generalized_inverse_family(&sq, &DMatrix::identity(4, 4), &DMatrix::zeros(4, 4)),
            Err(Error::NotApplicable(_))
        ));
    }

    #[test]
    fn pushforward_of_two_by_three() {
        let h = MembershipMatrix::new(DMatrix::from_row_slice(2, 3, &[0.5, 0.0, 0.5, 0.0, 1.0, 0.0])).unwrap();
        let (st, rep) = pushforward_covariance(&h, &DMatrix::identity(3, 3)).unwrap();
        assert!(linalg::max_abs_diff(&st, &DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 1.0])) < 1e-15);
        assert_eq!(rep, RankReport { rank: 2, dim: 2, positive_definite: true });
        assert!(matches!(recover_areal_covariance(&h, &st), Err(Error::NonIdentifiable { m: 2, n: 3 })));
    }

    #[test]
    fn intercept_passes_through() {
        let g = make_grid(3, 3).unwrap();
        let h = simulate_membership_matrix(&g, 12, 4).unwrap();
        let x = DMatrix::from_fn(9, 2, |i, k| (i * 3 + k) as f64 * 0.1);
        let r = mm_log_relative_risk(&h, 0.7, &[0.0, 0.0], &x, &[0.0; 9]).unwrap();
        assert!(r.iter().all(|v| (v - 0.7).abs() < 1e-12));
        assert!(mm_log_relative_risk(&h, 0.7, &[0.0], &x, &[0.0; 9]).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let g = make_grid(3, 3).unwrap();
        let h = simulate_membership_matrix(&g, 10, 8).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(MembershipMatrix::read_csv(buf.as_slice()).unwrap(), h);
        let bad = b"0.5,0.5\n0.2,0.7\n";
        let err = MembershipMatrix::read_csv(&bad[..]).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
    }
}
