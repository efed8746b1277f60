//! Graph partitioning into a fixed number of clusters.
//!
//! The in-repo partitioner contracts the graph with heavy-edge matching
//! passes until at most the target number of super-nodes remain, then
//! repairs the count exactly: oversized results merge the smallest adjacent
//! clusters, overshoot splits the largest clusters along BFS order. It sits
//! behind [`Partitioner`] so an external binding can replace it.

use super::Assignment;
use crate::graph::Csr;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub trait Partitioner {
    /// Splits `adj` into exactly `n_clusters` nonempty clusters,
    /// deterministically for a fixed seed.
    fn partition(&self, adj: &Csr, n_clusters: usize, seed: u64) -> Assignment;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HeavyEdgeMatching;

impl Partitioner for HeavyEdgeMatching {
    fn partition(&self, adj: &Csr, n_clusters: usize, seed: u64) -> Assignment {
        let n = adj.n;
        assert!(n >= 1, "partition of an empty graph");
        assert!(
            (1..=n).contains(&n_clusters),
            "cluster count {n_clusters} out of range for {n} nodes"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = Clustering::singletons(n);

        // Phase 1: heavy-edge matching passes.
        while state.count > n_clusters {
            let merged = state.matching_pass(adj, &mut rng);
            if merged == 0 {
                break;
            }
        }

        // Phase 2: repair to the exact count.
        while state.count > n_clusters {
            state.merge_step(adj);
        }
        while state.count < n_clusters {
            state.split_step(adj);
        }

        state.into_assignment(n_clusters)
    }
}

/// Working clustering over the original node set.
struct Clustering {
    /// Members per cluster slot; `None` marks a retired slot.
    members: Vec<Option<Vec<usize>>>,
    cluster_of: Vec<usize>,
    count: usize,
}

impl Clustering {
    fn singletons(n: usize) -> Self {
        Clustering {
            members: (0..n).map(|i| Some(vec![i])).collect(),
            cluster_of: (0..n).collect(),
            count: n,
        }
    }

    fn alive(&self) -> Vec<usize> {
        (0..self.members.len())
            .filter(|&c| self.members[c].is_some())
            .collect()
    }

    /// Total cross-cluster weight between every pair of alive clusters.
    fn cluster_adjacency(&self, adj: &Csr) -> BTreeMap<usize, BTreeMap<usize, f64>> {
        let mut out: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
        for c in self.alive() {
            out.insert(c, BTreeMap::new());
        }
        for u in 0..adj.n {
            let cu = self.cluster_of[u];
            for (v, w) in adj.neighbors(u) {
                let cv = self.cluster_of[v];
                if cu != cv {
                    *out.get_mut(&cu).unwrap().entry(cv).or_insert(0.0) += w;
                }
            }
        }
        out
    }

    fn merge(&mut self, keep: usize, drop: usize) {
        let moved = self.members[drop].take().expect("merge of dead cluster");
        for &node in &moved {
            self.cluster_of[node] = keep;
        }
        self.members[keep].as_mut().unwrap().extend(moved);
        self.count -= 1;
    }

    /// One pass of heavy-edge matching, visiting low-degree clusters first
    /// (seeded shuffle breaks equal-degree ties) so leaves pair up before
    /// interior edges strand them. Edge ties prefer the heavier edge, then
    /// the lower cluster id. Returns merges applied.
    fn matching_pass(&mut self, adj: &Csr, rng: &mut ChaCha8Rng) -> usize {
        let cadj = self.cluster_adjacency(adj);
        let mut order = self.alive();
        order.shuffle(rng);
        order.sort_by_key(|c| cadj[c].len());
        let mut matched = vec![false; self.members.len()];
        let mut pairs = Vec::new();
        for &c in &order {
            if matched[c] {
                continue;
            }
            let mut best: Option<(f64, usize)> = None;
            for (&nb, &w) in &cadj[&c] {
                if matched[nb] {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bw, bid)) => w > bw || (w == bw && nb < bid),
                };
                if better {
                    best = Some((w, nb));
                }
            }
            if let Some((_, partner)) = best {
                matched[c] = true;
                matched[partner] = true;
                pairs.push((c.min(partner), c.max(partner)));
            }
        }
        for &(keep, drop) in &pairs {
            self.merge(keep, drop);
        }
        pairs.len()
    }

    /// Merges the adjacent pair with the smallest combined size (ties by
    /// lower ids). With no adjacent pair left, every cluster is a union of
    /// whole components; the smallest cluster then joins the smallest other
    /// cluster, ties resolved toward the nearest id.
    fn merge_step(&mut self, adj: &Csr) {
        let cadj = self.cluster_adjacency(adj);
        let size = |c: usize| self.members[c].as_ref().unwrap().len();
        let mut best: Option<(usize, usize, usize)> = None; // (combined, a, b)
        for (&a, nbs) in &cadj {
            for &b in nbs.keys() {
                if b <= a {
                    continue;
                }
                let combined = size(a) + size(b);
                let better = match best {
                    None => true,
                    Some((bc, ba, bb)) => (combined, a, b) < (bc, ba, bb),
                };
                if better {
                    best = Some((combined, a, b));
                }
            }
        }
        if let Some((_, a, b)) = best {
            self.merge(a, b);
            return;
        }
        let alive = self.alive();
        let &smallest = alive
            .iter()
            .min_by_key(|&&c| (size(c), c))
            .expect("merge_step on empty clustering");
        let &partner = alive
            .iter()
            .filter(|&&c| c != smallest)
            .min_by_key(|&&c| (size(c), smallest.abs_diff(c), c))
            .expect("merge_step with a single cluster");
        self.merge(smallest.min(partner), smallest.max(partner));
    }

    /// Splits the largest cluster: a BFS from its lowest-id member collects
    /// floor(size/2) nodes into a new cluster, restarting from the next
    /// unvisited member if the cluster is internally disconnected.
    fn split_step(&mut self, adj: &Csr) {
        let alive = self.alive();
        let size = |c: usize| self.members[c].as_ref().unwrap().len();
        let &target = alive
            .iter()
            .max_by(|&&a, &&b| (size(a), std::cmp::Reverse(a)).cmp(&(size(b), std::cmp::Reverse(b))))
            .expect("split_step on empty clustering");
        let mut members = self.members[target].clone().unwrap();
        members.sort_unstable();
        let take = members.len() / 2;
        assert!(take >= 1, "split of a singleton cluster");

        let in_cluster: std::collections::BTreeSet<usize> = members.iter().copied().collect();
        let mut visited = std::collections::BTreeSet::new();
        let mut bfs_order = Vec::with_capacity(members.len());
        let mut queue = std::collections::VecDeque::new();
        let mut seed_iter = members.iter();
        while bfs_order.len() < take {
            if queue.is_empty() {
                let next_seed = seed_iter
                    .by_ref()
                    .find(|&&m| !visited.contains(&m))
                    .copied()
                    .expect("ran out of BFS seeds");
                visited.insert(next_seed);
                queue.push_back(next_seed);
            }
            let u = queue.pop_front().unwrap();
            bfs_order.push(u);
            for (v, _) in adj.neighbors(u) {
                if in_cluster.contains(&v) && visited.insert(v) {
                    queue.push_back(v);
                }
            }
        }

        let new_id = self.members.len();
        let moving: std::collections::BTreeSet<usize> = bfs_order.into_iter().collect();
        for &node in &moving {
            self.cluster_of[node] = new_id;
        }
        self.members[target]
            .as_mut()
            .unwrap()
            .retain(|m| !moving.contains(m));
        self.members.push(Some(moving.into_iter().collect()));
        self.count += 1;
    }

    /// Relabels clusters by their smallest member id.
    fn into_assignment(self, n_clusters: usize) -> Assignment {
        let mut alive: Vec<(usize, usize)> = self
            .members
            .iter()
            .enumerate()
            .filter_map(|(c, m)| m.as_ref().map(|mem| (*mem.iter().min().unwrap(), c)))
            .collect();
        alive.sort_unstable();
        assert_eq!(alive.len(), n_clusters);
        let mut relabel = vec![usize::MAX; self.members.len()];
        for (new_id, &(_, old)) in alive.iter().enumerate() {
            relabel[old] = new_id;
        }
        Assignment::new(
            self.cluster_of.iter().map(|&c| relabel[c]).collect(),
            n_clusters,
        )
    }
}
