//! Areal adjacency graphs.
//!
//! An [`AdjacencyGraph`] stores each undirected edge once as `(i, j)` with
//! `i < j`, plus per-area neighbour lists. Construction validates symmetry,
//! the absence of isolated areas and connectivity, so every graph that exists
//! can back a CAR prior.

use std::collections::{BTreeSet, VecDeque};
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lattice neighbourhood used by [`make_grid_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adjacency {
    /// Horizontal and vertical neighbours.
    #[default]
    Rook,
    /// Rook neighbours plus diagonals.
    Queen,
}

impl FromStr for Adjacency {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rook" => Ok(Adjacency::Rook),
            "queen" => Ok(Adjacency::Queen),
            other => Err(Error::InvalidArgument(format!("unknown adjacency '{other}' (expected rook|queen)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbours: Vec<Vec<usize>>,
}

impl AdjacencyGraph {
    /// Builds a graph from undirected edges. Each pair may appear once in
    /// either orientation.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!("graph needs at least 2 areas, got {n}")));
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::IndexOutOfRange { index: a.max(b), len: n });
            }
            if a == b {
                return Err(Error::InvalidArgument(format!("self-loop at area {a}")));
            }
            let e = (a.min(b), a.max(b));
            if !set.insert(e) {
                return Err(Error::InvalidArgument(format!("duplicate edge ({}, {})", e.0, e.1)));
            }
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let mut neighbours = vec![Vec::new(); n];
        for &(a, b) in &edges {
            neighbours[a].push(b);
            neighbours[b].push(a);
        }
        for (i, nb) in neighbours.iter_mut().enumerate() {
            nb.sort_unstable();
            if nb.is_empty() {
                return Err(Error::InvalidArgument(format!("area {i} has no neighbours")));
            }
        }
        let g = AdjacencyGraph { n, edges, neighbours };
        if !g.is_connected() {
            return Err(Error::InvalidArgument("graph is not connected".into()));
        }
        Ok(g)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Undirected edges with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbours(&self, i: usize) -> &[usize] {
        &self.neighbours[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbours[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbours.iter().map(Vec::len).collect()
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &w in &self.neighbours[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    queue.push_back(w);
                }
            }
        }
        count == self.n
    }

    /// Dense binary adjacency matrix W.
    pub fn adjacency_matrix(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.n, self.n);
        for &(a, b) in &self.edges {
            w[(a, b)] = 1.0;
            w[(b, a)] = 1.0;
        }
        w
    }

    /// `W x` using the edge list.
    pub fn adjacency_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for &(a, b) in &self.edges {
            out[a] += x[b];
            out[b] += x[a];
        }
        out
    }

    /// Areas at graph distance exactly two from `i`.
    pub fn second_order_neighbours(&self, i: usize) -> Result<Vec<usize>> {
        if i >= self.n {
            return Err(Error::IndexOutOfRange { index: i, len: self.n });
        }
        let first: BTreeSet<usize> = self.neighbours[i].iter().copied().collect();
        let mut second = BTreeSet::new();
        for &j in &first {
            for &k in &self.neighbours[j] {
                if k != i && !first.contains(&k) {
                    second.insert(k);
                }
            }
        }
        Ok(second.into_iter().collect())
    }

    /// Reads the `i,j` edge-list CSV. The area count is taken from `n` when
    /// given, otherwise from the largest index.
    pub fn read_csv<R: Read>(reader: R, n: Option<usize>) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "i" || &headers[1] != "j" {
            return Err(Error::InvalidArgument(format!("adjacency CSV header must be 'i,j', got '{}'", headers.iter().collect::<Vec<_>>().join(","))));
        }
        let mut edges = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |k: usize| -> Result<usize> {
                rec[k].trim().parse::<usize>().map_err(|e| Error::InvalidArgument(format!("adjacency row {}: {e}", row + 1)))
            };
            edges.push((parse(0)?, parse(1)?));
        }
        let n = n.unwrap_or_else(|| edges.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(0));
        Self::from_edges(n, &edges)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["i", "j"])?;
        for &(a, b) in &self.edges {
            wtr.write_record([a.to_string(), b.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Rook-adjacency lattice with `rows * cols` areas, row-major indexing.
pub fn make_grid(rows: usize, cols: usize) -> Result<AdjacencyGraph> {
    make_grid_with(rows, cols, Adjacency::Rook)
}

pub fn make_grid_with(rows: usize, cols: usize, adjacency: Adjacency) -> Result<AdjacencyGraph> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!("grid dimensions must be positive, got {rows}x{cols}")));
    }
    if rows * cols < 2 {
        return Err(Error::InvalidArgument("grid must contain at least 2 areas".into()));
    }
    let idx = |r: usize, c: usize| r * cols + c;
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                edges.push((idx(r, c), idx(r, c + 1)));
            }
            if r + 1 < rows {
                edges.push((idx(r, c), idx(r + 1, c)));
            }
            if adjacency == Adjacency::Queen && r + 1 < rows {
                if c + 1 < cols {
                    edges.push((idx(r, c), idx(r + 1, c + 1)));
                }
                if c > 0 {
                    edges.push((idx(r, c), idx(r + 1, c - 1)));
                }
            }
        }
    }
    AdjacencyGraph::from_edges(rows * cols, &edges)
}

/// Moran's I with binary weights.
pub fn morans_i(g: &AdjacencyGraph, x: &[f64]) -> Result<f64> {
    let n = g.n();
    if x.len() != n {
        return Err(Error::DimensionMismatch(format!("x has length {}, graph has {n} areas", x.len())));
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let denom: f64 = dev.iter().map(|d| d * d).sum();
    let scale = x.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    if denom <= (1e-14 * scale).powi(2) * n as f64 {
        return Err(Error::DegenerateInput("Moran's I of a constant vector".into()));
    }
    // each undirected edge contributes w_ij and w_ji
    let cross: f64 = g.edges().iter().map(|&(a, b)| 2.0 * dev[a] * dev[b]).sum();
    let w_sum = 2.0 * g.edges().len() as f64;
    Ok(n as f64 / w_sum * cross / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smallest_grid_is_a_path() {
        let g = make_grid(1, 2).unwrap();
        assert_eq!(g.degrees(), vec![1, 1]);
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn ten_by_ten_degrees() {
        let g = make_grid(10, 10).unwrap();
        assert_eq!(g.n(), 100);
        let d = g.degrees();
        for corner in [0, 9, 90, 99] {
            assert_eq!(d[corner], 2);
        }
        assert_eq!(d[5], 3);
        assert_eq!(d[55], 4);
        assert_eq!(d.iter().filter(|&&v| v == 4).count(), 64);
    }

    #[test]
    fn three_by_three_edge_count() {
        assert_eq!(make_grid(3, 3).unwrap().edges().len(), 12);
        // queen adds 2 diagonals per 2x2 block
        assert_eq!(make_grid_with(3, 3, Adjacency::Queen).unwrap().edges().len(), 20);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(make_grid(0, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(make_grid(1, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn invalid_graphs_rejected() {
        assert!(AdjacencyGraph::from_edges(3, &[(0, 0), (1, 2)]).is_err());
        assert!(AdjacencyGraph::from_edges(3, &[(0, 1)]).is_err());
        assert!(AdjacencyGraph::from_edges(4, &[(0, 1), (2, 3)]).is_err());
        assert!(AdjacencyGraph::from_edges(2, &[(0, 1), (1, 0)]).is_err());
    }

    #[test]
    fn second_order_examples() {
        let path = AdjacencyGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(path.second_order_neighbours(0).unwrap(), vec![2]);
        let g = make_grid(3, 3).unwrap();
        assert_eq!(g.second_order_neighbours(4).unwrap(), vec![0, 2, 6, 8]);
        let g = make_grid(1, 2).unwrap();
        assert!(g.second_order_neighbours(0).unwrap().is_empty());
        assert!(matches!(g.second_order_neighbours(2), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn morans_checkerboard() {
        let g = make_grid(2, 2).unwrap();
        let i = morans_i(&g, &[1.0, -1.0, -1.0, 1.0]).unwrap();
        assert!((i + 1.0).abs() < 1e-14);
        assert!(matches!(morans_i(&g, &[2.0; 4]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn csv_round_trip() {
        let g = make_grid(3, 4).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("i,j\n0,1\n"));
        let back = AdjacencyGraph::read_csv(buf.as_slice(), None).unwrap();
        assert_eq!(back, g);
    }

    fn bfs_distances(g: &AdjacencyGraph, src: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; g.n()];
        dist[src] = 0;
        let mut q = VecDeque::from([src]);
        while let Some(v) = q.pop_front() {
            for &w in g.neighbours(v) {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    q.push_back(w);
                }
            }
        }
        dist
    }

    proptest! {
        #[test]
        fn grid_invariants(rows in 1usize..7, cols in 2usize..7, queen in any::<bool>()) {
            let adj = if queen { Adjacency::Queen } else { Adjacency::Rook };
            let g = make_grid_with(rows, cols, adj).unwrap();
            let w = g.adjacency_matrix();
            prop_assert_eq!(&w, &w.transpose());
            for i in 0..g.n() {
                prop_assert_eq!(w[(i, i)], 0.0);
                prop_assert_eq!(w.row(i).sum() as usize, g.degree(i));
                prop_assert!(g.degree(i) >= 1);
            }
        }

        #[test]
        fn second_order_matches_bfs(rows in 1usize..6, cols in 2usize..6, seed in 0usize..100) {
            let g = make_grid(rows, cols).unwrap();
            let i = seed % g.n();
            let dist = bfs_distances(&g, i);
            let expected: Vec<usize> = (0..g.n()).filter(|&k| dist[k] == 2).collect();
            let got = g.second_order_neighbours(i).unwrap();
            prop_assert_eq!(&got, &expected);
            prop_assert!(!got.contains(&i));
            for k in &got {
                prop_assert!(!g.neighbours(i).contains(k));
            }
        }

        #[test]
        fn morans_affine_invariant(xs in proptest::collection::vec(-5.0f64..5.0, 12), a in 0.1f64..4.0, neg in any::<bool>(), b in -10.0f64..10.0) {
            let g = make_grid(3, 4).unwrap();
            let spread = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let a = if neg { -a } else { a };
            let y: Vec<f64> = xs.iter().map(|v| a * v + b).collect();
            let i1 = morans_i(&g, &xs).unwrap();
            let i2 = morans_i(&g, &y).unwrap();
            prop_assert!((i1 - i2).abs() < 1e-9);
        }
    }
}
