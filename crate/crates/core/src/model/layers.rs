//! Layer building blocks: message-passing convolution, single-head graph
//! transformer, and the positional-encoding projection.

use super::{ForwardCtx, ModelError};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Var};
use rand_chacha::ChaCha8Rng;

const LN_EPS: f64 = 1e-5;
const PRELU_INIT: f64 = 0.25;

/// Isomorphism-network style convolution:
/// `h_i <- MLP((1+eps) h_i + sum_j w_ij h_j)`, then PReLU and layer norm.
/// The MLP is linear-PReLU-linear.
#[derive(Debug, Clone)]
pub struct GinLayer {
    pub epsilon: f64,
    w1: ParamId,
    b1: ParamId,
    p_mlp: ParamId,
    w2: ParamId,
    b2: ParamId,
    p_out: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

impl GinLayer {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Self {
        GinLayer {
            epsilon: 0.0,
            w1: store.register_uniform(format!("{prefix}.mlp.w1"), &[d_in, d_hidden], d_in, rng),
            b1: store.register_uniform(format!("{prefix}.mlp.b1"), &[d_hidden], d_in, rng),
            p_mlp: store.register_const(format!("{prefix}.mlp.prelu"), &[1], F::from_f64(PRELU_INIT)),
            w2: store.register_uniform(format!("{prefix}.mlp.w2"), &[d_hidden, d_out], d_hidden, rng),
            b2: store.register_uniform(format!("{prefix}.mlp.b2"), &[d_out], d_hidden, rng),
            p_out: store.register_const(format!("{prefix}.prelu"), &[1], F::from_f64(PRELU_INIT)),
            ln_gain: store.register_const(format!("{prefix}.ln.gain"), &[d_out], F::one()),
            ln_bias: store.register_zeros(format!("{prefix}.ln.bias"), &[d_out]),
        }
    }

    /// Weighted neighbor aggregation `(1+eps)·h + A·h`. Masked nodes enter
    /// with zero rows and still relay messages.
    pub fn aggregate<F: Scalar>(
        &self,
        ctx: &mut ForwardCtx<'_, F>,
        adj_dense: Var,
        h: Var,
    ) -> Result<Var, ModelError> {
        let neighbor_sum = ctx.tape.matmul(adj_dense, h)?;
        let own = if self.epsilon == 0.0 {
            h
        } else {
            ctx.tape.scale(h, F::from_f64(1.0 + self.epsilon))
        };
        Ok(ctx.tape.add(own, neighbor_sum)?)
    }

    pub fn forward<F: Scalar>(
        &self,
        ctx: &mut ForwardCtx<'_, F>,
        adj_dense: Var,
        h: Var,
    ) -> Result<Var, ModelError> {
        let agg = self.aggregate(ctx, adj_dense, h)?;
        let (w1, b1, p_mlp) = (ctx.bind(self.w1), ctx.bind(self.b1), ctx.bind(self.p_mlp));
        let (w2, b2, p_out) = (ctx.bind(self.w2), ctx.bind(self.b2), ctx.bind(self.p_out));
        let (gain, bias) = (ctx.bind(self.ln_gain), ctx.bind(self.ln_bias));
        let t = ctx.tape.matmul(agg, w1)?;
        let t = ctx.tape.add_bias(t, b1)?;
        let t = ctx.tape.prelu(t, p_mlp)?;
        let t = ctx.tape.matmul(t, w2)?;
        let t = ctx.tape.add_bias(t, b2)?;
        let t = ctx.tape.prelu(t, p_out)?;
        Ok(ctx.tape.layer_norm(t, gain, bias, F::from_f64(LN_EPS))?)
    }
}

/// Single-head scaled dot-product attention over the visible tokens,
/// followed by residual + layer norm and a two-layer feed-forward with its
/// own residual.
#[derive(Debug, Clone)]
pub struct GtLayer {
    d: usize,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_p: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

impl GtLayer {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
    ) -> Self {
        GtLayer {
            d,
            w_q: store.register_uniform(format!("{prefix}.w_q"), &[d, d], d, rng),
            w_k: store.register_uniform(format!("{prefix}.w_k"), &[d, d], d, rng),
            w_v: store.register_uniform(format!("{prefix}.w_v"), &[d, d], d, rng),
            w_o: store.register_uniform(format!("{prefix}.w_o"), &[d, d], d, rng),
            ln_gain: store.register_const(format!("{prefix}.ln.gain"), &[d], F::one()),
            ln_bias: store.register_zeros(format!("{prefix}.ln.bias"), &[d]),
            ffn_w1: store.register_uniform(format!("{prefix}.ffn.w1"), &[d, d], d, rng),
            ffn_b1: store.register_uniform(format!("{prefix}.ffn.b1"), &[d], d, rng),
            ffn_p: store.register_const(format!("{prefix}.ffn.prelu"), &[1], F::from_f64(PRELU_INIT)),
            ffn_w2: store.register_uniform(format!("{prefix}.ffn.w2"), &[d, d], d, rng),
            ffn_b2: store.register_uniform(format!("{prefix}.ffn.b2"), &[d], d, rng),
        }
    }

    /// The row-stochastic attention matrix `softmax(Q Kᵀ / sqrt(d))`.
    pub fn attention<F: Scalar>(
        &self,
        ctx: &mut ForwardCtx<'_, F>,
        h: Var,
    ) -> Result<Var, ModelError> {
        let (w_q, w_k) = (ctx.bind(self.w_q), ctx.bind(self.w_k));
        let q = ctx.tape.matmul(h, w_q)?;
        let k = ctx.tape.matmul(h, w_k)?;
        let kt = ctx.tape.transpose(k)?;
        let logits = ctx.tape.matmul(q, kt)?;
        let scaled = ctx.tape.scale(logits, F::from_f64(1.0 / (self.d as f64).sqrt()));
        Ok(ctx.tape.softmax_rows(scaled)?)
    }

    pub fn forward<F: Scalar>(
        &self,
        ctx: &mut ForwardCtx<'_, F>,
        h: Var,
    ) -> Result<Var, ModelError> {
        let n_visible = ctx.tape.shape(h)[0];
        if n_visible == 0 {
            return Err(ModelError::NoVisibleNodes);
        }
        let weights = self.attention(ctx, h)?;
        let w_v = ctx.bind(self.w_v);
        let v = ctx.tape.matmul(h, w_v)?;
        let mixed = ctx.tape.matmul(weights, v)?;
        let w_o = ctx.bind(self.w_o);
        let projected = ctx.tape.matmul(mixed, w_o)?;
        let residual = ctx.tape.add(h, projected)?;
        let (gain, bias) = (ctx.bind(self.ln_gain), ctx.bind(self.ln_bias));
        let z = ctx.tape.layer_norm(residual, gain, bias, F::from_f64(LN_EPS))?;

        let (w1, b1, p) = (ctx.bind(self.ffn_w1), ctx.bind(self.ffn_b1), ctx.bind(self.ffn_p));
        let (w2, b2) = (ctx.bind(self.ffn_w2), ctx.bind(self.ffn_b2));
        let f = ctx.tape.matmul(z, w1)?;
        let f = ctx.tape.add_bias(f, b1)?;
        let f = ctx.tape.prelu(f, p)?;
        let f = ctx.tape.matmul(f, w2)?;
        let f = ctx.tape.add_bias(f, b2)?;
        Ok(ctx.tape.add(z, f)?)
    }
}

/// Linear projection of the K random-walk diagonals into model width.
#[derive(Debug, Clone)]
pub struct RwpeEncoder {
    pub k: usize,
    w: ParamId,
    b: ParamId,
}

impl RwpeEncoder {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        k: usize,
        d: usize,
    ) -> Self {
        RwpeEncoder {
            k,
            w: store.register_uniform(format!("{prefix}.w"), &[k, d], k, rng),
            b: store.register_uniform(format!("{prefix}.b"), &[d], k, rng),
        }
    }

    pub fn project<F: Scalar>(
        &self,
        ctx: &mut ForwardCtx<'_, F>,
        pe: Var,
    ) -> Result<Var, ModelError> {
        let (w, b) = (ctx.bind(self.w), ctx.bind(self.b));
        let p = ctx.tape.matmul(pe, w)?;
        Ok(ctx.tape.add_bias(p, b)?)
    }
}
