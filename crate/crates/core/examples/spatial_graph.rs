//! Lattice graphs, neighbourhood orders and Moran's I.

use carmm::graph::{make_grid, make_grid_with, morans_i, Adjacency};

fn main() -> carmm::Result<()> {
    let rook = make_grid(4, 5)?;
    let queen = make_grid_with(4, 5, Adjacency::Queen)?;
    println!("4x5 rook: {} areas, {} edges", rook.n(), rook.edges().len());
    println!("4x5 queen: {} edges", queen.edges().len());

    let centre = 6;
    println!("area {centre}: neighbours {:?}", rook.neighbours(centre));
    println!("area {centre}: second order {:?}", rook.second_order_neighbours(centre)?);

    let gradient: Vec<f64> = (0..rook.n()).map(|i| (i % 5) as f64).collect();
    let checker: Vec<f64> = (0..rook.n()).map(|i| ((i / 5 + i % 5) % 2) as f64).collect();
    println!("Moran's I, smooth gradient: {:.3}", morans_i(&rook, &gradient)?);
    println!("Moran's I, checkerboard:    {:.3}", morans_i(&rook, &checker)?);

    let mut buf = Vec::new();
    rook.write_csv(&mut buf)?;
    println!("adjacency.csv starts:\n{}", String::from_utf8_lossy(&buf[..24]));
    Ok(())
}
