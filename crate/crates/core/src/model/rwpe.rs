//! Random-walk positional encoding: diagonals of powers of the
//! degree-normalized adjacency.

use crate::graph::Csr;

/// `PE[i][k-1] = [(D^-1 A)^k]_{ii}` for `k = 1..=K`, computed on the
/// weighted adjacency. Zero-degree nodes get all-zero transition rows and
/// therefore all-zero encoding rows.
pub fn rwpe(adj: &Csr, k: usize) -> Vec<f64> {
    assert!(k >= 1, "rwpe needs at least one power");
    let n = adj.n;
    let mut transition = vec![0.0f64; n * n];
    for i in 0..n {
        let deg = adj.weighted_degree(i);
        if deg > 0.0 {
            for (j, w) in adj.neighbors(i) {
                transition[i * n + j] = w / deg;
            }
        }
    }

    let mut pe = vec![0.0f64; n * k];
    let mut power = transition.clone();
    for step in 0..k {
        if step > 0 {
            power = mat_mul(&power, &transition, n);
        }
        for i in 0..n {
            pe[i * k + step] = power[i * n + i];
        }
    }
    pe
}

fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n * n];
    for i in 0..n {
        for p in 0..n {
            let av = a[i * n + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}
