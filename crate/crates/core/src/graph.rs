//! Fixed spatial graph: loading, correlation-based construction and the
//! symmetric degree normalization used by the GCN.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use crate::data::DemandTensor;
use crate::error::{Error, Result};

/// Binary, symmetric adjacency with an empty diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    entries: Array2<f64>,
}

impl AdjacencyMatrix {
    pub fn empty(n: usize) -> Self {
        Self {
            entries: Array2::zeros((n, n)),
        }
    }

    /// Symmetrizes (logical OR with the transpose) and clears the diagonal.
    pub fn from_dense(dense: Array2<f64>) -> Result<Self> {
        let (r, c) = dense.dim();
        if r != c {
            return Err(Error::Adjacency(format!("matrix is {r}x{c}, not square")));
        }
        if let Some(v) = dense.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Adjacency(format!("non-binary entry {v}")));
        }
        let mut entries = Array2::zeros((r, r));
        for i in 0..r {
            for j in 0..r {
                if i != j && (dense[[i, j]] == 1.0 || dense[[j, i]] == 1.0) {
                    entries[[i, j]] = 1.0;
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut a = Self::empty(n);
        for &(i, j) in edges {
            a.add_edge(i, j)?;
        }
        Ok(a)
    }

    fn add_edge(&mut self, i: usize, j: usize) -> Result<()> {
        let n = self.node_count();
        if i >= n || j >= n {
            return Err(Error::Adjacency(format!("edge ({i},{j}) out of range for {n} nodes")));
        }
        if i != j {
            self.entries[[i, j]] = 1.0;
            self.entries[[j, i]] = 1.0;
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.node_count();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if self.entries[[i, j]] != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Parses an adjacency file. A first data line with a comma is read as an
    /// `i,j` edge list; otherwise the file is a whitespace-separated dense matrix.
    pub fn parse(text: &str, n: usize) -> Result<Self> {
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        let Some(first) = lines.first() else {
            return Ok(Self::empty(n));
        };
        if first.contains(',') {
            let mut a = Self::empty(n);
            for (k, line) in lines.iter().enumerate() {
                let mut parts = line.split(',').map(str::trim);
                let (Some(i), Some(j)) = (parts.next(), parts.next()) else {
                    return Err(Error::Adjacency(format!("bad edge line {}: '{line}'", k + 1)));
                };
                match (i.parse::<usize>(), j.parse::<usize>()) {
                    (Ok(i), Ok(j)) => a.add_edge(i, j)?,
                    // header row
                    _ if k == 0 => continue,
                    _ => return Err(Error::Adjacency(format!("bad edge line {}: '{line}'", k + 1))),
                }
            }
            Ok(a)
        } else {
            if lines.len() != n {
                return Err(Error::Adjacency(format!(
                    "dense matrix has {} rows, expected {n}",
                    lines.len()
                )));
            }
            let mut dense = Array2::zeros((n, n));
            for (i, line) in lines.iter().enumerate() {
                let row: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| Error::Adjacency(format!("bad entry '{t}' on row {i}")))
                    })
                    .collect::<Result<_>>()?;
                if row.len() != n {
                    return Err(Error::Adjacency(format!(
                        "row {i} has {} entries, expected {n}",
                        row.len()
                    )));
                }
                for (j, v) in row.into_iter().enumerate() {
                    dense[[i, j]] = v;
                }
            }
            Self::from_dense(dense)
        }
    }

    /// Writes the upper-triangle edge list as `i,j` lines.
    pub fn to_edge_list(&self) -> String {
        let mut s = String::from("i,j\n");
        for (i, j) in self.edges() {
            s.push_str(&format!("{i},{j}\n"));
        }
        s
    }
}

pub fn load_adjacency(path: impl AsRef<Path>, n: usize) -> Result<AdjacencyMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AdjacencyMatrix::parse(&text, n)
}

/// Connects each node to its `k` most Pearson-correlated peers.
///
/// Correlations are taken over the summed pick-up + drop-off series. Nodes with a
/// constant series neither pick nor get picked. Ties break toward the lower index.
pub fn build_correlation_adjacency(train: &DemandTensor, k: usize) -> Result<AdjacencyMatrix> {
    let n = train.node_count();
    let t = train.time_steps();
    if k >= n {
        return Err(Error::Config(vec![format!("k = {k} must be below node count {n}")]));
    }
    if t < 2 {
        return Err(Error::InsufficientData {
            required: 2,
            available: t,
        });
    }
    let series: Array2<f64> = train.values.sum_axis(Axis(2)); // (T, N)
    let mean = series.mean_axis(Axis(0)).expect("t >= 2");
    let centered = &series - &mean.view().insert_axis(Axis(0));
    let norms: Array1<f64> = centered.map_axis(Axis(0), |c| c.dot(&c).sqrt());
    let live = |i: usize| norms[i] > 1e-12;

    let mut a = AdjacencyMatrix::empty(n);
    for i in (0..n).filter(|&i| live(i)) {
        let ci = centered.column(i);
        let mut peers: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i && live(j))
            .map(|j| (j, ci.dot(&centered.column(j)) / (norms[i] * norms[j])))
            .collect();
        peers.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        for &(j, _) in peers.iter().take(k) {
            a.add_edge(i, j)?;
        }
    }
    Ok(a)
}

/// `D^-1/2 (A + I) D^-1/2`, stored dense.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    entries: Array2<f64>,
}

impl NormalizedAdjacency {
    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn node_count(&self) -> usize {
        self.entries.nrows()
    }

    pub fn identity(n: usize) -> Self {
        Self {
            entries: Array2::eye(n),
        }
    }
}

pub fn normalize_adjacency(a: &AdjacencyMatrix) -> NormalizedAdjacency {
    let n = a.node_count();
    let tilde = a.entries() + &Array2::<f64>::eye(n);
    // every degree is at least 1 thanks to the self-loop
    let inv_sqrt: Array1<f64> = tilde.sum_axis(Axis(1)).mapv(|d| 1.0 / d.sqrt());
    let mut entries = tilde;
    for ((i, j), v) in entries.indexed_iter_mut() {
        *v *= inv_sqrt[i] * inv_sqrt[j];
    }
    NormalizedAdjacency { entries }
}
