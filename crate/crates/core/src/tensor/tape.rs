//! The computation tape: recorded operations and their backward rules.

use super::{Result, TensorError};
use crate::scalar::Scalar;

/// Handle to a tensor recorded on a [`Tape`]. Only valid for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// A recorded tensor: row-major values plus a lazily allocated gradient slot.
#[derive(Debug)]
pub struct Tensor<F: Scalar> {
    pub shape: Vec<usize>,
    pub values: Vec<F>,
    pub grad: Option<Vec<F>>,
    pub requires_grad: bool,
    op: Op<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::NotAMatrix {
                op,
                shape: self.shape.clone(),
            }),
        }
    }
}

/// One recorded operation: input node ids plus whatever the backward rule
/// needs beyond the stored input/output values.
#[derive(Debug)]
enum Op<F> {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: F },
    AddBias { x: usize, bias: usize },
    PRelu { x: usize, alpha: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: F },
    GatherRows { x: usize, idx: Vec<usize> },
    ScatterAddRows { x: usize, idx: Vec<usize> },
    SumAll { x: usize },
    MeanRows { x: usize },
    ConcatCols { xs: Vec<usize> },
    SoftmaxRows { x: usize },
    CosineRows { a: usize, b: usize },
    SceLoss { x_hat: usize, x: usize, gamma: F },
}

/// Ordered list of recorded operations; every operation's inputs were
/// recorded before it, so node order is a topological order.
pub struct Tape<F: Scalar> {
    nodes: Vec<Tensor<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[F] {
        &self.nodes[v.0].values
    }

    /// Gradient of the last `backward` call, if `v` requires grad.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Value of a scalar (single-element) tensor.
    pub fn scalar_value(&self, v: Var) -> F {
        debug_assert_eq!(self.nodes[v.0].numel(), 1);
        self.nodes[v.0].values[0]
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<F>, requires_grad: bool, op: Op<F>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Tensor {
            shape,
            values,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── Creation ────────────────────────────────────────────────────

    /// Records an input tensor. Gradients flow into it iff `requires_grad`.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<F>, requires_grad: bool) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "leaf: shape {:?} does not match value count {}",
            shape,
            values.len()
        );
        self.push(shape.to_vec(), values, requires_grad, Op::Leaf)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, shape: &[usize], values: Vec<F>) -> Var {
        self.leaf(shape, values, false)
    }

    pub fn scalar(&mut self, value: F) -> Var {
        self.leaf(&[], vec![value], false)
    }

    // ── Operations ──────────────────────────────────────────────────

    /// `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.nodes[a.0].rows_cols("matmul")?;
        let (kb, n) = self.nodes[b.0].rows_cols("matmul")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let out = matmul_raw(&self.nodes[a.0].values, &self.nodes[b.0].values, m, ka, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.nodes[x.0].rows_cols("transpose")?;
        let out = transpose_raw(&self.nodes[x.0].values, r, c);
        let rg = self.requires(x);
        Ok(self.push(vec![c, r], out, rg, Op::Transpose { x: x.0 }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<F> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(shape, out, rg, Op::Add { a: a.0, b: b.0 }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<F> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(shape, out, rg, Op::Mul { a: a.0, b: b.0 }))
    }

    /// Multiplies by a compile-time constant scalar.
    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out: Vec<F> = self.nodes[x.0].values.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.requires(x);
        self.push(shape, out, rg, Op::Scale { x: x.0, c })
    }

    /// Adds a length-`d` bias vector to every row of an `[n×d]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.nodes[x.0].rows_cols("add_bias")?;
        if self.nodes[bias.0].numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                out.push(self.nodes[x.0].values[i * d + j] + self.nodes[bias.0].values[j]);
            }
        }
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.push(vec![n, d], out, rg, Op::AddBias { x: x.0, bias: bias.0 }))
    }

    /// PReLU with a single learnable slope: `x if x > 0 else alpha * x`.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        if self.nodes[alpha.0].numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "prelu",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[alpha.0].shape.clone(),
            });
        }
        let a = self.nodes[alpha.0].values[0];
        let out: Vec<F> = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| if v > F::zero() { v } else { a * v })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.requires(x) || self.requires(alpha);
        Ok(self.push(shape, out, rg, Op::PRelu { x: x.0, alpha: alpha.0 }))
    }

    /// Row-wise layer normalization with learnable gain/bias vectors.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (n, d) = self.nodes[x.0].rows_cols("layer_norm")?;
        if self.nodes[gain.0].numel() != d || self.nodes[bias.0].numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gain.0].shape.clone(),
            });
        }
        let mut out = vec![F::zero(); n * d];
        let dd = F::from_usize(d);
        for i in 0..n {
            let row = &self.nodes[x.0].values[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dd;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dd;
            let istd = F::one() / (var + eps).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mean) * istd;
                out[i * d + j] = self.nodes[gain.0].values[j] * xhat + self.nodes[bias.0].values[j];
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(
            vec![n, d],
            out,
            rg,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, eps },
        ))
    }

    /// Selects rows `idx` of an `[n×d]` matrix, in order (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.nodes[x.0].rows_cols("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::IndexOutOfBounds { op: "gather_rows", index: bad, rows: n });
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&self.nodes[x.0].values[i * d..(i + 1) * d]);
        }
        let rg = self.requires(x);
        Ok(self.push(
            vec![idx.len(), d],
            out,
            rg,
            Op::GatherRows { x: x.0, idx: idx.to_vec() },
        ))
    }

    /// Adds row `i` of a `[k×d]` input into row `idx[i]` of a fresh
    /// zero-initialized `[out_rows×d]` matrix.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        let (k, d) = self.nodes[x.0].rows_cols("scatter_add_rows")?;
        if idx.len() != k {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add_rows",
                lhs: vec![k, d],
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
            return Err(TensorError::IndexOutOfBounds {
                op: "scatter_add_rows",
                index: bad,
                rows: out_rows,
            });
        }
        let mut out = vec![F::zero(); out_rows * d];
        for (i, &target) in idx.iter().enumerate() {
            for j in 0..d {
                out[target * d + j] = out[target * d + j] + self.nodes[x.0].values[i * d + j];
            }
        }
        let rg = self.requires(x);
        Ok(self.push(
            vec![out_rows, d],
            out,
            rg,
            Op::ScatterAddRows { x: x.0, idx: idx.to_vec() },
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].values.iter().copied().sum::<F>();
        let rg = self.requires(x);
        self.push(vec![], vec![s], rg, Op::SumAll { x: x.0 })
    }

    /// Column means of an `[n×d]` matrix, as `[1×d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.nodes[x.0].rows_cols("mean_rows")?;
        if n == 0 {
            return Err(TensorError::EmptyInput { op: "mean_rows" });
        }
        let nn = F::from_usize(n);
        let mut out = vec![F::zero(); d];
        for i in 0..n {
            for j in 0..d {
                out[j] = out[j] + self.nodes[x.0].values[i * d + j];
            }
        }
        for v in &mut out {
            *v = *v / nn;
        }
        let rg = self.requires(x);
        Ok(self.push(vec![1, d], out, rg, Op::MeanRows { x: x.0 }))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_cols" });
        }
        let (n, _) = self.nodes[xs[0].0].rows_cols("concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.nodes[x.0].rows_cols("concat_cols")?;
            if r != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[xs[0].0].shape.clone(),
                    rhs: self.nodes[x.0].shape.clone(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[x.0].values[i * w..(i + 1) * w]);
            }
        }
        let rg = xs.iter().any(|&x| self.requires(x));
        Ok(self.push(
            vec![n, total],
            out,
            rg,
            Op::ConcatCols { xs: xs.iter().map(|v| v.0).collect() },
        ))
    }

    /// Row-wise softmax, stabilized by subtracting each row's max.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.nodes[x.0].rows_cols("softmax_rows")?;
        if self.nodes[x.0].values.iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut out = vec![F::zero(); n * d];
        for i in 0..n {
            let row = &self.nodes[x.0].values[i * d..(i + 1) * d];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for j in 0..d {
                let e = (row[j] - max).exp();
                out[i * d + j] = e;
                sum = sum + e;
            }
            for j in 0..d {
                out[i * d + j] = out[i * d + j] / sum;
            }
        }
        let rg = self.requires(x);
        Ok(self.push(vec![n, d], out, rg, Op::SoftmaxRows { x: x.0 }))
    }

    /// Row-wise cosine similarity between two `[n×d]` matrices, as `[n]`.
    /// Norms are floored at 1e-8 so all-zero rows yield similarity 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let (n, d) = self.nodes[a.0].rows_cols("cosine_rows")?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let ra = &self.nodes[a.0].values[i * d..(i + 1) * d];
            let rb = &self.nodes[b.0].values[i * d..(i + 1) * d];
            out.push(cosine_raw(ra, rb).0);
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![n], out, rg, Op::CosineRows { a: a.0, b: b.0 }))
    }

    /// Scaled cosine error: mean over rows of `(1 - cos(x_hat_i, x_i))^gamma`.
    ///
    /// All-zero target rows are handled with the norm floor and logged.
    pub fn sce_loss(&mut self, x_hat: Var, x: Var, gamma: F) -> Result<Var> {
        self.same_shape("sce_loss", x_hat, x)?;
        let (k, d) = self.nodes[x_hat.0].rows_cols("sce_loss")?;
        if k == 0 {
            return Err(TensorError::EmptyInput { op: "sce_loss" });
        }
        let mut total = F::zero();
        for i in 0..k {
            let ra = &self.nodes[x_hat.0].values[i * d..(i + 1) * d];
            let rb = &self.nodes[x.0].values[i * d..(i + 1) * d];
            let (cos, _, nb_floored) = cosine_raw(ra, rb);
            if nb_floored {
                log::warn!("sce_loss: all-zero target row {i}, cosine denominator floored");
            }
            let base = (F::one() - cos).max(F::zero());
            total = total + base.powf(gamma);
        }
        let loss = total / F::from_usize(k);
        let rg = self.requires(x_hat) || self.requires(x);
        Ok(self.push(vec![], vec![loss], rg, Op::SceLoss { x_hat: x_hat.0, x: x.0, gamma }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Populates `grad` for every grad-requiring tensor reachable from
    /// `loss`, accumulating additively across fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(TensorError::NotScalar { shape: self.nodes[loss.0].shape.clone() });
        }
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(vec![F::zero(); node.values.len()]);
            } else {
                node.grad = None;
            }
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] = F::one();
        } else {
            // Loss does not depend on any grad-requiring input; nothing to do.
            return Ok(());
        }

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            // A node past the loss cannot contribute; nodes after `loss.0`
            // are excluded by the loop bound already.
            let grad = self.nodes[id].grad.as_ref().unwrap().clone();
            self.apply_backward(id, &grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: usize, contribution: impl Iterator<Item = F>) {
        if let Some(g) = self.nodes[target].grad.as_mut() {
            for (slot, c) in g.iter_mut().zip(contribution) {
                *slot = *slot + c;
            }
        }
    }

    fn apply_backward(&mut self, id: usize, dy: &[F]) {
        // Borrow dance: clone out the small op descriptor, then read values.
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if self.nodes[a].requires_grad {
                    // dA = dC · Bᵀ
                    let bt = transpose_raw(&self.nodes[b].values, k, n);
                    let da = matmul_raw(dy, &bt, m, n, k);
                    self.accumulate(a, da.into_iter());
                }
                if self.nodes[b].requires_grad {
                    // dB = Aᵀ · dC
                    let at = transpose_raw(&self.nodes[a].values, m, k);
                    let db = matmul_raw(&at, dy, k, m, n);
                    self.accumulate(b, db.into_iter());
                }
            }
            &Op::Transpose { x } => {
                let (r, c) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                let dx = transpose_raw(dy, c, r);
                self.accumulate(x, dx.into_iter());
            }
            &Op::Add { a, b } => {
                self.accumulate(a, dy.iter().copied());
                self.accumulate(b, dy.iter().copied());
            }
            &Op::Mul { a, b } => {
                if self.nodes[a].requires_grad {
                    let da: Vec<F> =
                        dy.iter().zip(&self.nodes[b].values).map(|(&g, &v)| g * v).collect();
                    self.accumulate(a, da.into_iter());
                }
                if self.nodes[b].requires_grad {
                    let db: Vec<F> =
                        dy.iter().zip(&self.nodes[a].values).map(|(&g, &v)| g * v).collect();
                    self.accumulate(b, db.into_iter());
                }
            }
            &Op::Scale { x, c } => {
                self.accumulate(x, dy.iter().map(|&g| g * c));
            }
            &Op::AddBias { x, bias } => {
                let d = self.nodes[bias].numel();
                let n = dy.len() / d;
                self.accumulate(x, dy.iter().copied());
                if self.nodes[bias].requires_grad {
                    let mut db = vec![F::zero(); d];
                    for i in 0..n {
                        for j in 0..d {
                            db[j] = db[j] + dy[i * d + j];
                        }
                    }
                    self.accumulate(bias, db.into_iter());
                }
            }
            &Op::PRelu { x, alpha } => {
                let a = self.nodes[alpha].values[0];
                if self.nodes[x].requires_grad {
                    let dx: Vec<F> = self.nodes[x]
                        .values
                        .iter()
                        .zip(dy)
                        .map(|(&v, &g)| if v > F::zero() { g } else { g * a })
                        .collect();
                    self.accumulate(x, dx.into_iter());
                }
                if self.nodes[alpha].requires_grad {
                    let da = self.nodes[x]
                        .values
                        .iter()
                        .zip(dy)
                        .filter(|(&v, _)| v <= F::zero())
                        .map(|(&v, &g)| g * v)
                        .sum::<F>();
                    self.accumulate(alpha, std::iter::once(da));
                }
            }
            &Op::LayerNorm { x, gain, bias, eps } => {
                let (n, d) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                let dd = F::from_usize(d);
                let mut dx = vec![F::zero(); n * d];
                let mut dgain = vec![F::zero(); d];
                let mut dbias = vec![F::zero(); d];
                for i in 0..n {
                    let row = &self.nodes[x].values[i * d..(i + 1) * d];
                    let gy = &dy[i * d..(i + 1) * d];
                    let mean = row.iter().copied().sum::<F>() / dd;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dd;
                    let istd = F::one() / (var + eps).sqrt();
                    let mut mean_dxhat = F::zero();
                    let mut mean_dxhat_xhat = F::zero();
                    for j in 0..d {
                        let xhat = (row[j] - mean) * istd;
                        let dxhat = gy[j] * self.nodes[gain].values[j];
                        dgain[j] = dgain[j] + gy[j] * xhat;
                        dbias[j] = dbias[j] + gy[j];
                        mean_dxhat = mean_dxhat + dxhat;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxhat * xhat;
                    }
                    mean_dxhat = mean_dxhat / dd;
                    mean_dxhat_xhat = mean_dxhat_xhat / dd;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * istd;
                        let dxhat = gy[j] * self.nodes[gain].values[j];
                        dx[i * d + j] = istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                self.accumulate(x, dx.into_iter());
                self.accumulate(gain, dgain.into_iter());
                self.accumulate(bias, dbias.into_iter());
            }
            Op::GatherRows { x, idx } => {
                let (x, idx) = (*x, idx.clone());
                let d = self.nodes[x].shape[1];
                let mut dx = vec![F::zero(); self.nodes[x].values.len()];
                for (i, &src) in idx.iter().enumerate() {
                    for j in 0..d {
                        dx[src * d + j] = dx[src * d + j] + dy[i * d + j];
                    }
                }
                self.accumulate(x, dx.into_iter());
            }
            Op::ScatterAddRows { x, idx } => {
                let (x, idx) = (*x, idx.clone());
                let d = self.nodes[x].shape[1];
                let mut dx = vec![F::zero(); self.nodes[x].values.len()];
                for (i, &target) in idx.iter().enumerate() {
                    for j in 0..d {
                        dx[i * d + j] = dy[target * d + j];
                    }
                }
                self.accumulate(x, dx.into_iter());
            }
            &Op::SumAll { x } => {
                let g = dy[0];
                self.accumulate(x, std::iter::repeat(g).take(self.nodes[x].values.len()));
            }
            &Op::MeanRows { x } => {
                let (n, d) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                let nn = F::from_usize(n);
                let mut dx = vec![F::zero(); n * d];
                for i in 0..n {
                    for j in 0..d {
                        dx[i * d + j] = dy[j] / nn;
                    }
                }
                self.accumulate(x, dx.into_iter());
            }
            Op::ConcatCols { xs } => {
                let xs = xs.clone();
                let n = self.nodes[xs[0]].shape[0];
                let total: usize = xs.iter().map(|&x| self.nodes[x].shape[1]).sum();
                let mut offset = 0;
                for &x in &xs {
                    let w = self.nodes[x].shape[1];
                    if self.nodes[x].requires_grad {
                        let mut dx = Vec::with_capacity(n * w);
                        for i in 0..n {
                            dx.extend_from_slice(&dy[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(x, dx.into_iter());
                    }
                    offset += w;
                }
            }
            &Op::SoftmaxRows { x } => {
                let (n, d) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                let y = &self.nodes[id].values;
                let mut dx = vec![F::zero(); n * d];
                for i in 0..n {
                    let mut dot = F::zero();
                    for j in 0..d {
                        dot = dot + dy[i * d + j] * y[i * d + j];
                    }
                    for j in 0..d {
                        dx[i * d + j] = y[i * d + j] * (dy[i * d + j] - dot);
                    }
                }
                self.accumulate(x, dx.into_iter());
            }
            &Op::CosineRows { a, b } => {
                let (n, d) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let mut da = vec![F::zero(); n * d];
                let mut db = vec![F::zero(); n * d];
                for i in 0..n {
                    let ra = &self.nodes[a].values[i * d..(i + 1) * d];
                    let rb = &self.nodes[b].values[i * d..(i + 1) * d];
                    let (cos, na, _) = cosine_raw(ra, rb);
                    let nb = norm_floored(rb);
                    let g = dy[i];
                    for j in 0..d {
                        da[i * d + j] = g * (rb[j] / (na * nb) - cos * ra[j] / (na * na));
                        db[i * d + j] = g * (ra[j] / (na * nb) - cos * rb[j] / (nb * nb));
                    }
                }
                if self.nodes[a].requires_grad {
                    self.accumulate(a, da.into_iter());
                }
                if self.nodes[b].requires_grad {
                    self.accumulate(b, db.into_iter());
                }
            }
            &Op::SceLoss { x_hat, x, gamma } => {
                let (k, d) = (self.nodes[x_hat].shape[0], self.nodes[x_hat].shape[1]);
                let kk = F::from_usize(k);
                let g = dy[0];
                let mut dxh = vec![F::zero(); k * d];
                let mut dx = vec![F::zero(); k * d];
                for i in 0..k {
                    let ra = &self.nodes[x_hat].values[i * d..(i + 1) * d];
                    let rb = &self.nodes[x].values[i * d..(i + 1) * d];
                    let (cos, na, _) = cosine_raw(ra, rb);
                    let nb = norm_floored(rb);
                    let base = (F::one() - cos).max(F::zero());
                    let mut factor = gamma * base.powf(gamma - F::one());
                    if !factor.is_finite() {
                        factor = F::zero();
                    }
                    // d/dx̂ of (1-cos)^γ = -γ(1-cos)^(γ-1) · dcos/dx̂
                    let coeff = g * factor / kk;
                    for j in 0..d {
                        let dcos_da = rb[j] / (na * nb) - cos * ra[j] / (na * na);
                        let dcos_db = ra[j] / (na * nb) - cos * rb[j] / (nb * nb);
                        dxh[i * d + j] = -coeff * dcos_da;
                        dx[i * d + j] = -coeff * dcos_db;
                    }
                }
                if self.nodes[x_hat].requires_grad {
                    self.accumulate(x_hat, dxh.into_iter());
                }
                if self.nodes[x].requires_grad {
                    self.accumulate(x, dx.into_iter());
                }
            }
        }
    }
}

fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw<F: Scalar>(x: &[F], r: usize, c: usize) -> Vec<F> {
    let mut out = vec![F::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn norm_floored<F: Scalar>(row: &[F]) -> F {
    let floor = F::from_f64(1e-8);
    row.iter().map(|&v| v * v).sum::<F>().sqrt().max(floor)
}

/// Returns (cosine, floored ‖a‖, whether ‖b‖ hit the floor).
fn cosine_raw<F: Scalar>(a: &[F], b: &[F]) -> (F, F, bool) {
    let floor = F::from_f64(1e-8);
    let na = norm_floored(a);
    let nb_real = b.iter().map(|&v| v * v).sum::<F>().sqrt();
    let nb = nb_real.max(floor);
    let dot = a.iter().zip(b).map(|(&x, &y)| x * y).sum::<F>();
    (dot / (na * nb), na, nb_real < floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn matmul_identity() {
        let mut t = tape();
        let i2 = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let c = t.matmul(i2, a).unwrap();
        assert_eq!(t.values(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector() {
        let mut t = tape();
        let p = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        let v = t.constant(&[2, 1], vec![5.0, 7.0]);
        let c = t.matmul(p, v).unwrap();
        assert_eq!(t.values(c), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_grad_matches_closed_form() {
        // d sum(A·B) / dA at A=[[1,2]], B=[[3],[4]] is [[3,4]].
        let mut t = tape();
        let a = t.leaf(&[1, 2], vec![1.0, 2.0], true);
        let b = t.constant(&[2, 1], vec![3.0, 4.0]);
        let c = t.matmul(a, b).unwrap();
        let loss = t.sum_all(c);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = tape();
        let a = t.constant(&[2, 3], vec![0.0; 6]);
        let b = t.constant(&[2, 2], vec![0.0; 4]);
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let mut t = tape();
        let a = t.constant(&[1, 2], vec![0.0, 0.0]);
        let s = t.softmax_rows(a).unwrap();
        assert_eq!(t.values(s), &[0.5, 0.5]);

        let b = t.constant(&[1, 2], vec![1000.0, 1000.0]);
        let s = t.softmax_rows(b).unwrap();
        assert_eq!(t.values(s), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_hand_value() {
        let mut t = tape();
        let a = t.constant(&[1, 2], vec![0.0, 3.0f64.ln()]);
        let s = t.softmax_rows(a).unwrap();
        let v = t.values(s);
        assert!((v[0] - 0.25).abs() < 1e-12);
        assert!((v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut t = tape();
        let a = t.constant(&[1, 2], vec![f64::NAN, 0.0]);
        assert!(matches!(t.softmax_rows(a), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn sce_identical_antipodal_orthogonal() {
        let mut t = tape();
        let x = t.constant(&[2, 2], vec![1.0, 2.0, -3.0, 0.5]);
        let same = t.sce_loss(x, x, 2.0).unwrap();
        assert!(t.scalar_value(same).abs() < 1e-12);

        let neg = t.scale(x, -1.0);
        let anti = t.sce_loss(neg, x, 1.0).unwrap();
        assert!((t.scalar_value(anti) - 2.0).abs() < 1e-12);

        let a = t.constant(&[1, 2], vec![1.0, 0.0]);
        let b = t.constant(&[1, 2], vec![0.0, 1.0]);
        let orth = t.sce_loss(a, b, 2.0).unwrap();
        assert!((t.scalar_value(orth) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sce_zero_target_row_is_floored() {
        let mut t = tape();
        let a = t.constant(&[1, 2], vec![1.0, 0.0]);
        let z = t.constant(&[1, 2], vec![0.0, 0.0]);
        let loss = t.sce_loss(a, z, 2.0).unwrap();
        // cos floored to ~0 → (1-0)^2 = 1
        assert!((t.scalar_value(loss) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = tape();
        let x = t.leaf(&[3], vec![1.0, 2.0, 3.0], true);
        let loss = t.sum_all(x);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_gives_two_x() {
        let mut t = tape();
        let x = t.leaf(&[1], vec![2.0], true);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_all(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn backward_accumulates_across_fanout() {
        let mut t = tape();
        let x = t.leaf(&[1], vec![3.0], true);
        let a = t.add(x, x).unwrap(); // 2x
        let b = t.add(a, x).unwrap(); // 3x
        let loss = t.sum_all(b);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = tape();
        let x = t.leaf(&[2], vec![1.0, 2.0], true);
        assert!(matches!(t.backward(x), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn gather_scatter_roundtrip_semantics() {
        let mut t = tape();
        let x = t.constant(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = t.gather_rows(x, &[2, 0]).unwrap();
        assert_eq!(t.values(g), &[5.0, 6.0, 1.0, 2.0]);
        let s = t.scatter_add_rows(g, &[0, 0], 2).unwrap();
        assert_eq!(t.values(s), &[6.0, 8.0, 0.0, 0.0]);
    }

    #[test]
    fn replay_is_bit_deterministic() {
        let run = || {
            let mut t = tape();
            let x = t.leaf(&[2, 2], vec![0.3, -1.7, 2.2, 0.9], true);
            let w = t.leaf(&[2, 2], vec![0.5, 0.25, -0.125, 1.5], true);
            let y = t.matmul(x, w).unwrap();
            let s = t.softmax_rows(y).unwrap();
            let loss = t.sce_loss(s, x, 2.0).unwrap();
            t.backward(loss).unwrap();
            (t.scalar_value(loss).to_bits(), t.grad(w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}
