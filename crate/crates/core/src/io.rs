//! Dataset bundles on disk and content digests.
//!
//! A bundle directory holds `adjacency.csv` (`i,j` edge list), `H.csv`
//! (headerless `m x n` weights), `covariates.csv` (`x1..xp`, one row per area)
//! and `data.csv` (`y,E`, one row per membership).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::AdjacencyGraph;
use crate::membership::MembershipMatrix;

pub const ADJACENCY_FILE: &str = "adjacency.csv";
pub const MEMBERSHIP_FILE: &str = "H.csv";
pub const COVARIATES_FILE: &str = "covariates.csv";
pub const DATA_FILE: &str = "data.csv";

/// The files whose contents define a dataset, in digest order.
pub const BUNDLE_FILES: [&str; 4] = [ADJACENCY_FILE, MEMBERSHIP_FILE, COVARIATES_FILE, DATA_FILE];

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// One digest over the bundle files of `dir`.
pub fn bundle_digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in BUNDLE_FILES {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(file_digest(&dir.join(name))?.as_bytes());
        h.update([0]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn write_covariates_csv<W: std::io::Write>(x: &DMatrix<f64>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record((1..=x.ncols()).map(|k| format!("x{k}")))?;
    for i in 0..x.nrows() {
        w.write_record(x.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_covariates_csv<R: std::io::Read>(reader: R) -> Result<DMatrix<f64>> {
    let mut r = csv::Reader::from_reader(reader);
    let p = r.headers()?.len();
    let mut vals = Vec::new();
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != p {
            return Err(Error::DimensionMismatch(format!("covariates row {i} has {} columns, expected {p}", rec.len())));
        }
        for s in rec.iter() {
            let v: f64 = s.trim().parse().map_err(|e| Error::InvalidArgument(format!("covariates row {i}: {e}")))?;
            if !v.is_finite() {
                return Err(Error::NumericDomain(format!("covariates row {i} is not finite")));
            }
            vals.push(v);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, p, &vals))
}

/// Writes `y,E`; when `y` is `None` only the offsets are written.
pub fn write_data_csv<W: std::io::Write>(y: Option<&[u64]>, offsets: &[f64], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    match y {
        Some(y) => {
            w.write_record(["y", "E"])?;
            for (c, e) in y.iter().zip(offsets) {
                w.write_record([c.to_string(), e.to_string()])?;
            }
        }
        None => {
            w.write_record(["E"])?;
            for e in offsets {
                w.write_record([e.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_data_csv<R: std::io::Read>(reader: R) -> Result<(Option<Vec<u64>>, Vec<f64>)> {
    let mut r = csv::Reader::from_reader(reader);
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let has_y = match headers.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["y", "E"] => true,
        ["E"] => false,
        other => return Err(Error::InvalidArgument(format!("data CSV header must be 'y,E', got '{}'", other.join(",")))),
    };
    let mut y = Vec::new();
    let mut e = Vec::new();
    for (j, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |msg: String| Error::InvalidArgument(format!("data row {j}: {msg}"));
        if has_y {
            y.push(rec[0].trim().parse::<u64>().map_err(|err| bad(err.to_string()))?);
        }
        let off: f64 = rec[usize::from(has_y)].trim().parse().map_err(|err: std::num::ParseFloatError| bad(err.to_string()))?;
        if !(off.is_finite() && off > 0.0) {
            return Err(bad(format!("offset {off} must be positive")));
        }
        e.push(off);
    }
    Ok((has_y.then_some(y), e))
}

/// Areal graph, membership matrix, covariates, offsets and counts.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: AdjacencyGraph,
    pub membership: MembershipMatrix,
    pub covariates: DMatrix<f64>,
    pub offsets: Vec<f64>,
    pub counts: Option<Vec<u64>>,
}

impl Dataset {
    /// Checks every cross-file dimension.
    pub fn validate(&self) -> Result<()> {
        let n = self.graph.n();
        let m = self.membership.m();
        if self.membership.n() != n {
            return Err(Error::DimensionMismatch(format!("H has {} columns but the graph has {n} areas", self.membership.n())));
        }
        if self.covariates.nrows() != n {
            return Err(Error::DimensionMismatch(format!("{} covariate rows for {n} areas", self.covariates.nrows())));
        }
        if self.offsets.len() != m {
            return Err(Error::DimensionMismatch(format!("{} offsets for {m} memberships", self.offsets.len())));
        }
        if let Some(y) = &self.counts {
            if y.len() != m {
                return Err(Error::DimensionMismatch(format!("{} counts for {m} memberships", y.len())));
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        self.graph.write_csv(fs::File::create(dir.join(ADJACENCY_FILE))?)?;
        self.membership.write_csv(fs::File::create(dir.join(MEMBERSHIP_FILE))?)?;
        write_covariates_csv(&self.covariates, fs::File::create(dir.join(COVARIATES_FILE))?)?;
        let mut f = fs::File::create(dir.join(DATA_FILE))?;
        write_data_csv(self.counts.as_deref(), &self.offsets, &mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let open = |name: &str| {
            fs::File::open(dir.join(name)).map_err(|e| Error::Config(format!("{}: {e}", dir.join(name).display())))
        };
        let covariates = read_covariates_csv(open(COVARIATES_FILE)?)?;
        let graph = AdjacencyGraph::read_csv(open(ADJACENCY_FILE)?, Some(covariates.nrows()))?;
        let membership = MembershipMatrix::read_csv(open(MEMBERSHIP_FILE)?)?;
        let (counts, offsets) = read_data_csv(open(DATA_FILE)?)?;
        let ds = Dataset { graph, membership, covariates, offsets, counts };
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::make_grid;
    use crate::membership::simulate_membership_matrix;

    fn dataset() -> Dataset {
        let graph = make_grid(2, 3).unwrap();
        let membership = simulate_membership_matrix(&graph, 8, 4).unwrap();
        let covariates = DMatrix::from_fn(6, 2, |i, k| i as f64 * 0.25 - k as f64);
        Dataset { graph, membership, covariates, offsets: vec![12.5; 8], counts: Some((0..8).collect()) }
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset();
        ds.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back.graph, ds.graph);
        assert_eq!(back.membership.weights(), ds.membership.weights());
        assert_eq!(back.covariates, ds.covariates);
        assert_eq!(back.offsets, ds.offsets);
        assert_eq!(back.counts, ds.counts);
        let d1 = bundle_digest(dir.path()).unwrap();
        ds.write(dir.path()).unwrap();
        assert_eq!(bundle_digest(dir.path()).unwrap(), d1);
    }

    #[test]
    fn digest_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = dataset();
        ds.write(dir.path()).unwrap();
        let d1 = bundle_digest(dir.path()).unwrap();
        ds.counts.as_mut().unwrap()[0] += 1;
        ds.write(dir.path()).unwrap();
        assert_ne!(bundle_digest(dir.path()).unwrap(), d1);
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn rejects_bad_files() {
        assert!(read_data_csv("y,E\n3,0\n".as_bytes()).is_err());
        assert!(read_data_csv("count,E\n3,1\n".as_bytes()).is_err());
        assert!(read_data_csv("y,E\n-1,2\n".as_bytes()).is_err());
        assert_eq!(read_data_csv("E\n2\n".as_bytes()).unwrap(), (None, vec![2.0]));
        assert!(read_covariates_csv("x1,x2\n1,2\n3\n".as_bytes()).is_err());
        let mut ds = dataset();
        ds.offsets.pop();
        assert!(ds.validate().is_err());
    }
}
