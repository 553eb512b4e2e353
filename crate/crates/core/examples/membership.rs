//! Multiple-membership matrices: simulation, left inverses, and what a
//! covariance pushed through H does and does not keep.

use carmm::graph::make_grid;
use carmm::linalg;
use carmm::membership::{
    generalized_inverse_family, left_inverse, pushforward_covariance, recover_areal_covariance,
    simulate_membership_matrix,
};
use carmm::{CarParams, CarPrior};
use nalgebra::DMatrix;

fn main() -> carmm::Result<()> {
    let g = make_grid(3, 3)?;
    let n = g.n();
    let sigma = linalg::spd_inverse(&CarPrior::new(g.clone()).build_precision(CarParams::new(0.8, 1.0)?))?;

    for m in [6, 9, 14] {
        let h = simulate_membership_matrix(&g, m, 42)?;
        let (st, report) = pushforward_covariance(&h, &sigma)?;
        print!("m = {m:2}: rank {}/{}, PD {}", report.rank, report.dim, report.positive_definite);
        match recover_areal_covariance(&h, &st) {
            Ok(back) => println!(", recovery error {:.1e}", linalg::max_abs_diff(&back, &sigma)),
            Err(e) => println!(", {e}"),
        }
    }

    let h = simulate_membership_matrix(&g, 14, 42)?;
    let l = left_inverse(&h)?;
    println!("row sums of L: {:?}", (0..n).map(|i| format!("{:.6}", l.row(i).sum())).collect::<Vec<_>>());
    let z = DMatrix::from_fn(n, 14, |i, j| ((i * 7 + j) % 5) as f64 - 2.0);
    let other = generalized_inverse_family(&h, &l, &z)?;
    println!(
        "another left inverse: |G*H - I| = {:.1e}, |G* - L| = {:.2}",
        linalg::max_abs_diff(&(&other * h.weights()), &DMatrix::identity(n, n)),
        linalg::max_abs_diff(&other, &l)
    );
    Ok(())
}
