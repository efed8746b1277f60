//! Multilevel coarsening: cluster assignments, coarse adjacencies, and the
//! pool/unpool linear maps between scales.

mod partition;

pub use partition::{HeavyEdgeMatching, Partitioner};

use crate::graph::{Csr, Graph};
use crate::derive_seed;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("{op}: row count {rows} does not match assignment over {expected} entries")]
    RowMismatch { op: &'static str, rows: usize, expected: usize },
}

/// Maps each node to exactly one of `n_clusters` nonempty clusters; the
/// binary matrix view has one 1 per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    cluster_of: Vec<usize>,
    n_clusters: usize,
}

impl Assignment {
    pub fn new(cluster_of: Vec<usize>, n_clusters: usize) -> Self {
        debug_assert!(n_clusters >= 1);
        debug_assert!(cluster_of.iter().all(|&c| c < n_clusters));
        debug_assert!(
            (0..n_clusters).all(|c| cluster_of.contains(&c)),
            "empty cluster in assignment"
        );
        Assignment { cluster_of, n_clusters }
    }

    pub fn identity(n: usize) -> Self {
        Assignment::new((0..n).collect(), n)
    }

    pub fn n(&self) -> usize {
        self.cluster_of.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn cluster_of(&self) -> &[usize] {
        &self.cluster_of
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_clusters];
        for &c in &self.cluster_of {
            sizes[c] += 1;
        }
        sizes
    }

    /// Number of edges (by weight) crossing cluster boundaries, each
    /// undirected edge counted once.
    pub fn cut_size(&self, adj: &Csr) -> f64 {
        adj.undirected_edges()
            .iter()
            .filter(|&&(u, v, _)| self.cluster_of[u] != self.cluster_of[v])
            .map(|&(_, _, w)| w)
            .sum()
    }
}

/// One scale of the hierarchy: its adjacency and, unless it is the top
/// scale, the assignment onto the next coarser scale.
#[derive(Debug, Clone)]
pub struct CoarseLevel {
    /// 1-based scale index; scale 1 is the original graph.
    pub scale: usize,
    pub adj: Csr,
    pub assignment: Option<Assignment>,
}

impl CoarseLevel {
    pub fn n(&self) -> usize {
        self.adj.n
    }
}

/// Ordered scales from the original graph to the coarsest. Node counts
/// strictly decrease; the chain stops early when a level reaches one node
/// or the pooling ratio cannot shrink it further.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub levels: Vec<CoarseLevel>,
}

impl Hierarchy {
    /// Number of scales actually built.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn n_at(&self, level: usize) -> usize {
        self.levels[level].n()
    }

    pub fn top(&self) -> &CoarseLevel {
        self.levels.last().unwrap()
    }
}

/// Target cluster count for one pooling step: `max(1, ceil(r_p * n))`, with
/// near-integer products snapped before the ceiling so float dust cannot
/// bump the count.
pub fn target_clusters(n: usize, r_p: f64) -> usize {
    let raw = r_p * n as f64;
    let nearest = raw.round();
    let up = if (raw - nearest).abs() < 1e-9 { nearest } else { raw.ceil() };
    (up as usize).max(1)
}

/// Partitions `adj` into `max(1, ceil(r_p * n))` clusters.
pub fn partition_graph(adj: &Csr, r_p: f64, seed: u64) -> Assignment {
    assert!(r_p > 0.0 && r_p <= 1.0, "pooling ratio must be in (0, 1]");
    HeavyEdgeMatching.partition(adj, target_clusters(adj.n, r_p), seed)
}

/// Coarse adjacency: cross-cluster weights summed, diagonal zeroed,
/// symmetric by construction.
pub fn coarsen_adjacency(adj: &Csr, assignment: &Assignment) -> Csr {
    assert_eq!(adj.n, assignment.n(), "assignment does not cover the graph");
    let np = assignment.n_clusters();
    let mut dense = vec![0.0f64; np * np];
    for u in 0..adj.n {
        let cu = assignment.cluster_of[u];
        for (v, w) in adj.neighbors(u) {
            let cv = assignment.cluster_of[v];
            if cu != cv {
                dense[cu * np + cv] += w;
            }
        }
    }
    let mut edges = Vec::new();
    for c in 0..np {
        for cp in (c + 1)..np {
            let w = dense[c * np + cp];
            if w > 0.0 {
                edges.push((c, cp, w));
            }
        }
    }
    Csr::from_edges(np, &edges)
}

/// Sums member rows per cluster: the `Pᵀ·H` map.
pub fn pool(assignment: &Assignment, h: &[f64], d: usize) -> Result<Vec<f64>, HierarchyError> {
    let n = assignment.n();
    if h.len() != n * d {
        return Err(HierarchyError::RowMismatch { op: "pool", rows: h.len() / d.max(1), expected: n });
    }
    let mut out = vec![0.0; assignment.n_clusters() * d];
    for i in 0..n {
        let c = assignment.cluster_of[i];
        for j in 0..d {
            out[c * d + j] += h[i * d + j];
        }
    }
    Ok(out)
}

/// Copies each cluster row to all members: the `P·H'` map.
pub fn unpool(assignment: &Assignment, h: &[f64], d: usize) -> Result<Vec<f64>, HierarchyError> {
    let np = assignment.n_clusters();
    if h.len() != np * d {
        return Err(HierarchyError::RowMismatch {
            op: "unpool",
            rows: h.len() / d.max(1),
            expected: np,
        });
    }
    let mut out = vec![0.0; assignment.n() * d];
    for (i, &c) in assignment.cluster_of.iter().enumerate() {
        out[i * d..(i + 1) * d].copy_from_slice(&h[c * d..(c + 1) * d]);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct HierarchyOptions {
    pub scales: usize,
    pub r_p: f64,
    pub seed: u64,
    /// Restore {0,1} weights on coarse adjacencies instead of cross-edge counts.
    pub binarize_coarse: bool,
}

/// Builds up to `scales` levels by repeated partition + coarsen. Runs once
/// per graph at preprocessing time.
pub fn build_hierarchy(g: &Graph, scales: usize, r_p: f64, seed: u64) -> Hierarchy {
    build_hierarchy_with(
        &HeavyEdgeMatching,
        &g.adjacency,
        HierarchyOptions { scales, r_p, seed, binarize_coarse: false },
    )
}

pub fn build_hierarchy_with(
    partitioner: &dyn Partitioner,
    adj: &Csr,
    opts: HierarchyOptions,
) -> Hierarchy {
    assert!(opts.scales >= 1, "hierarchy needs at least one scale");
    assert!(opts.r_p > 0.0 && opts.r_p <= 1.0, "pooling ratio must be in (0, 1]");
    let mut levels = vec![CoarseLevel { scale: 1, adj: adj.clone(), assignment: None }];
    while levels.len() < opts.scales {
        let cur = levels.last().unwrap();
        let n = cur.n();
        if n <= 1 {
            break;
        }
        let np = target_clusters(n, opts.r_p);
        if np >= n {
            // Ratio does not shrink this level; a longer chain would repeat it.
            break;
        }
        let level_seed = derive_seed(opts.seed, &[levels.len() as u64]);
        let assignment = partitioner.partition(&cur.adj, np, level_seed);
        let mut coarse = coarsen_adjacency(&cur.adj, &assignment);
        if opts.binarize_coarse {
            for w in &mut coarse.weights {
                *w = 1.0;
            }
        }
        let scale = levels.len() + 1;
        levels.last_mut().unwrap().assignment = Some(assignment);
        levels.push(CoarseLevel { scale, adj: coarse, assignment: None });
    }
    Hierarchy { levels }
}
