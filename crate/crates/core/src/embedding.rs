//! The final vertex representation table `R_v`, with one extra EOS row.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::graph::DynamicGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    rows: Mat,
}

impl EmbeddingTable {
    /// Normal entries with mean 0 and std `1/√k`.
    pub fn random(num_vertices: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (k as f64).sqrt()).expect("valid std");
        Self {
            rows: Array2::from_shape_fn((num_vertices + 1, k), |_| normal.sample(&mut rng)),
        }
    }

    pub fn from_mat(rows: Mat) -> Result<Self> {
        if rows.nrows() == 0 || rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Embedding("table must have an EOS row and finite entries".into()));
        }
        Ok(Self { rows })
    }

    pub fn num_vertices(&self) -> usize {
        self.rows.nrows() - 1
    }

    pub fn k(&self) -> usize {
        self.rows.ncols()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.rows
    }

    pub fn row(&self, v: usize) -> ArrayView1<'_, f64> {
        self.rows.row(v)
    }

    pub fn set_row(&mut self, v: usize, values: ArrayView1<f64>) {
        self.rows.row_mut(v).assign(&values);
    }

    /// Loads vectors keyed by vertex label, one `label x1 .. xk` line each.
    /// A leading `count k` header line is accepted. The EOS row is zero.
    pub fn load_text(path: &Path, graph: &DynamicGraph, k: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Mat::zeros((graph.num_vertices() + 1, k));
        let mut seen = vec![false; graph.num_vertices()];
        let mut bad_dims = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() || line.starts_with('#') {
                continue;
            }
            if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
                continue;
            }
            let Some(v) = graph.vertex(fields[0]) else { continue };
            if fields.len() - 1 != k {
                bad_dims.push(format!("{} ({} values)", fields[0], fields.len() - 1));
                continue;
            }
            for (j, f) in fields[1..].iter().enumerate() {
                rows[[v.index(), j]] = f.parse().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    row: i + 1,
                    message: format!("bad number {f:?}"),
                })?;
            }
            seen[v.index()] = true;
        }
        if !bad_dims.is_empty() {
            return Err(Error::Embedding(format!(
                "dimension mismatch (expected {k}) for: {}",
                bad_dims.join(", ")
            )));
        }
        let missing: Vec<&str> = seen
            .iter()
            .enumerate()
            .filter(|(_, s)| !**s)
            .map(|(v, _)| graph.labels()[v].as_str())
            .collect();
        if !missing.is_empty() {
            let shown = missing.iter().take(20).copied().collect::<Vec<_>>().join(", ");
            return Err(Error::Embedding(format!(
                "{} vertices missing from {}: {shown}",
                missing.len(),
                path.display()
            )));
        }
        Self::from_mat(rows)
    }

    /// Text export keyed by label; EOS is not written.
    pub fn to_text(&self, graph: &DynamicGraph) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.num_vertices(), self.k());
        for (v, label) in graph.labels().iter().enumerate() {
            out.push_str(label);
            for x in self.rows.row(v) {
                let _ = write!(out, " {x:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save_text(&self, path: &Path, graph: &DynamicGraph) -> Result<()> {
        std::fs::write(path, self.to_text(graph)).map_err(|e| Error::io(path, e))
    }
}
