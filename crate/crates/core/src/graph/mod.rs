//! Graph and dataset representations plus file ingestion.
//!
//! Adjacency is CSR with symmetric nonnegative weights and a zero diagonal.
//! Node features live in a dense row-major `f64` matrix; the tensor engine
//! converts to the configured precision at model entry.

mod jsonl;
mod tu;

pub use jsonl::{load_jsonl, write_jsonl};
pub use tu::load_tu_dataset;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing required file {0}")]
    MissingFile(String),
    #[error("{file}:{line}: {message}")]
    Malformed { file: String, line: usize, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Symmetric sparse adjacency in compressed row form.
///
/// Column indices are strictly increasing within each row and the diagonal
/// is zero (no stored self-loop entries).
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Csr {
    /// Builds from undirected edges. Parallel and reverse duplicates collapse
    /// into one symmetric entry whose weight is the *last* weight given for
    /// that pair; self-loops are dropped.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Csr {
        let mut pairs: Vec<(usize, usize, f64)> = Vec::with_capacity(edges.len() * 2);
        for &(u, v, w) in edges {
            if u == v {
                continue;
            }
            pairs.push((u, v, w));
            pairs.push((v, u, w));
        }
        pairs.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        pairs.dedup_by(|later, kept| {
            if later.0 == kept.0 && later.1 == kept.1 {
                kept.2 = later.2;
                true
            } else {
                false
            }
        });

        let mut row_ptr = vec![0usize; n + 1];
        for &(u, _, _) in &pairs {
            row_ptr[u + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = pairs.iter().map(|p| p.1).collect();
        let weights = pairs.iter().map(|p| p.2).collect();
        Csr { n, row_ptr, col_idx, weights }
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.weights[range].iter().copied())
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn weighted_degree(&self, i: usize) -> f64 {
        self.neighbors(i).map(|(_, w)| w).sum()
    }

    pub fn num_entries(&self) -> usize {
        self.col_idx.len()
    }

    /// Undirected edge list (u < v) with weights.
    pub fn undirected_edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.num_entries() / 2);
        for u in 0..self.n {
            for (v, w) in self.neighbors(u) {
                if u < v {
                    out.push((u, v, w));
                }
            }
        }
        out
    }

    /// Dense row-major copy, used by the model for message passing.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        for u in 0..self.n {
            for (v, w) in self.neighbors(u) {
                out[u * self.n + v] = w;
            }
        }
        out
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.neighbors(i).find(|&(v, _)| v == j).map_or(0.0, |(_, w)| w)
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| self.neighbors(i).all(|(j, w)| self.weight(j, i) == w))
    }
}

/// One undirected graph with dense node features.
#[derive(Debug, Clone)]
pub struct Graph {
    pub adjacency: Csr,
    /// Row-major `n × d0` feature matrix.
    pub features: Vec<f64>,
    pub d0: usize,
    pub graph_label: Option<i64>,
    pub node_labels: Option<Vec<i64>>,
}

impl Graph {
    pub fn n(&self) -> usize {
        self.adjacency.n
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d0..(i + 1) * self.d0]
    }
}

/// Where a dataset came from; carried for logging and dumps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceFormat {
    Tu,
    Jsonl,
    Synthetic,
}

#[derive(Debug, Clone)]
pub struct GraphDataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub d0: usize,
    pub num_classes: Option<usize>,
    pub source_path: String,
    pub format: SourceFormat,
}

impl GraphDataset {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Graph labels for all graphs; `None` if any graph lacks one.
    pub fn labels(&self) -> Option<Vec<i64>> {
        self.graphs.iter().map(|g| g.graph_label).collect()
    }

    /// Remaps raw labels to contiguous class indices in sorted label order
    /// and returns them; also sets `num_classes`.
    pub fn class_indices(&mut self) -> Option<Vec<usize>> {
        let raw = self.labels()?;
        let mut distinct: Vec<i64> = raw.clone();
        distinct.sort_unstable();
        distinct.dedup();
        self.num_classes = Some(distinct.len());
        Some(
            raw.iter()
                .map(|l| distinct.binary_search(l).unwrap())
                .collect(),
        )
    }
}

/// Replaces (or sets) features with a one-hot encoding of each node's
/// clamped degree: `X[i] = one_hot(min(degree(i), max_degree))`.
pub fn degree_features(g: &mut Graph, max_degree: usize) {
    let d0 = max_degree + 1;
    let n = g.n();
    let mut x = vec![0.0; n * d0];
    for i in 0..n {
        let deg = g.adjacency.degree(i).min(max_degree);
        x[i * d0 + deg] = 1.0;
    }
    g.features = x;
    g.d0 = d0;
}

/// Applies [`degree_features`] to every graph in the dataset.
pub fn degree_features_dataset(ds: &mut GraphDataset, max_degree: usize) {
    for g in &mut ds.graphs {
        degree_features(g, max_degree);
    }
    ds.d0 = max_degree + 1;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csr_symmetrizes_and_dedups() {
        // One direction given twice plus a self-loop.
        let csr = Csr::from_edges(3, &[(0, 1, 1.0), (1, 0, 1.0), (2, 2, 5.0)]);
        assert_eq!(csr.weight(0, 1), 1.0);
        assert_eq!(csr.weight(1, 0), 1.0);
        assert_eq!(csr.weight(2, 2), 0.0);
        assert_eq!(csr.num_entries(), 2);
        assert!(csr.is_symmetric());
    }

    #[test]
    fn csr_columns_strictly_increase() {
        let csr = Csr::from_edges(4, &[(2, 0, 1.0), (2, 3, 1.0), (2, 1, 1.0)]);
        let row: Vec<usize> = csr.neighbors(2).map(|(v, _)| v).collect();
        assert_eq!(row, vec![0, 1, 3]);
    }

    #[test]
    fn degree_features_isolated_and_clamped() {
        let mut iso = Graph {
            adjacency: Csr::from_edges(1, &[]),
            features: vec![],
            d0: 0,
            graph_label: None,
            node_labels: None,
        };
        degree_features(&mut iso, 3);
        assert_eq!(iso.features, vec![1.0, 0.0, 0.0, 0.0]);

        // Degree-5 hub clamped to max_degree 3.
        let edges: Vec<_> = (1..=5).map(|v| (0usize, v as usize, 1.0)).collect();
        let mut hub = Graph {
            adjacency: Csr::from_edges(6, &edges),
            features: vec![],
            d0: 0,
            graph_label: None,
            node_labels: None,
        };
        degree_features(&mut hub, 3);
        assert_eq!(&hub.features[0..4], &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn degree_features_star_center() {
        let edges: Vec<_> = (1..=4).map(|v| (0usize, v as usize, 1.0)).collect();
        let mut star = Graph {
            adjacency: Csr::from_edges(5, &edges),
            features: vec![],
            d0: 0,
            graph_label: None,
            node_labels: None,
        };
        degree_features(&mut star, 4);
        assert_eq!(&star.features[0..5], &[0.0, 0.0, 0.0, 0.0, 1.0]);
        // Leaves have degree 1.
        assert_eq!(&star.features[5..10], &[0.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
