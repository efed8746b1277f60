//! The fine/coarse encoder-decoder.
//!
//! Encoding runs convolution over all nodes at the fine scales (masked rows
//! zeroed at entry), pools embeddings with the precomputed assignments, and
//! attends over only the visible super-nodes at coarse scales. Decoding
//! starts from the coarsest scale with a shared learnable token in the
//! masked slots, then alternates unpooling, additive fusion of that scale's
//! visible encoder embeddings, and a light convolution, ending in a linear
//! reconstruction head back to feature width.

mod layers;
mod rwpe;

pub use layers::{GinLayer, GtLayer, RwpeEncoder};
pub use rwpe::rwpe;

use crate::graph::Graph;
use crate::hierarchy::Hierarchy;
use crate::masking::MaskPlan;
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tape, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("attention input has no visible nodes")]
    NoVisibleNodes,
    #[error("mask plan depth {plan} does not match hierarchy depth {hierarchy}")]
    PlanMismatch { plan: usize, hierarchy: usize },
    #[error("feature width {features} does not match configured d0 {expected}")]
    FeatureWidth { features: usize, expected: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Input feature width.
    pub d0: usize,
    /// Hidden width shared by every scale.
    pub d: usize,
    /// Maximum number of scales the model is built for.
    pub scales: usize,
    /// First scale processed by attention; finer scales use convolution.
    pub l_gt: usize,
    /// Convolution layers per fine scale.
    pub gin_layers: usize,
    /// Attention layers per coarse scale.
    pub gt_layers: usize,
    /// Random-walk powers for the positional encoding.
    pub rwpe_k: usize,
    /// Exponent of the scaled cosine error.
    pub gamma_sce: f64,
    /// Re-fill masked rows with the token when fusing at finer scales.
    pub remask_decoder: bool,
    /// Use an attention layer instead of convolution at the top decoder scale.
    pub gt_decoder_at_top: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d0: 1,
            d: 32,
            scales: 2,
            l_gt: 2,
            gin_layers: 2,
            gt_layers: 1,
            rwpe_k: 8,
            gamma_sce: 2.0,
            remask_decoder: false,
            gt_decoder_at_top: false,
        }
    }
}

/// Encoder stack for one scale.
enum EncoderStack {
    Gin(Vec<GinLayer>),
    Gt { pe: RwpeEncoder, layers: Vec<GtLayer> },
}

enum DecoderStack {
    Gin(GinLayer),
    Gt(GtLayer),
}

/// All learnable state: per-scale encoder stacks, the shared mask token,
/// per-scale decoders, the input embedding, and the reconstruction head.
pub struct FiCoModel<F: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    embed_w: ParamId,
    embed_b: ParamId,
    encoder: Vec<EncoderStack>,
    mask_token: ParamId,
    decoder: Vec<DecoderStack>,
    head_w: ParamId,
    head_b: ParamId,
}

impl<F: Scalar> FiCoModel<F> {
    /// Builds all parameters deterministically from the seed: weights from a
    /// fan-in-scaled uniform, the mask token from zeros.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        assert!(config.scales >= 1 && config.d >= 1 && config.d0 >= 1);
        assert!(config.l_gt >= 2, "scale 1 always uses convolution");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d;

        let embed_w = store.register_uniform("embed.w", &[config.d0, d], config.d0, &mut rng);
        let embed_b = store.register_uniform("embed.b", &[d], config.d0, &mut rng);

        let mut encoder = Vec::with_capacity(config.scales);
        for scale in 1..=config.scales {
            if scale < config.l_gt {
                let layers = (0..config.gin_layers)
                    .map(|i| {
                        GinLayer::init(&mut store, &mut rng, &format!("enc.s{scale}.gin{i}"), d, d, d)
                    })
                    .collect();
                encoder.push(EncoderStack::Gin(layers));
            } else {
                let pe = RwpeEncoder::init(
                    &mut store,
                    &mut rng,
                    &format!("enc.s{scale}.pe"),
                    config.rwpe_k,
                    d,
                );
                let layers = (0..config.gt_layers)
                    .map(|i| GtLayer::init(&mut store, &mut rng, &format!("enc.s{scale}.gt{i}"), d))
                    .collect();
                encoder.push(EncoderStack::Gt { pe, layers });
            }
        }

        let mask_token = store.register_zeros("mask_token", &[1, d]);

        let mut decoder = Vec::with_capacity(config.scales);
        for scale in 1..=config.scales {
            if scale == config.scales && config.gt_decoder_at_top {
                decoder.push(DecoderStack::Gt(GtLayer::init(
                    &mut store,
                    &mut rng,
                    &format!("dec.s{scale}.gt"),
                    d,
                )));
            } else {
                decoder.push(DecoderStack::Gin(GinLayer::init(
                    &mut store,
                    &mut rng,
                    &format!("dec.s{scale}.gin"),
                    d,
                    d,
                    d,
                )));
            }
        }

        let head_w = store.register_uniform("head.w", &[d, config.d0], d, &mut rng);
        let head_b = store.register_uniform("head.b", &[config.d0], d, &mut rng);

        FiCoModel {
            config,
            store,
            embed_w,
            embed_b,
            encoder,
            mask_token,
            decoder,
            head_w,
            head_b,
        }
    }

    pub fn ctx(&self) -> ForwardCtx<'_, F> {
        ForwardCtx {
            tape: Tape::new(),
            store: &self.store,
            bound: HashMap::new(),
        }
    }

    fn gt_layer_at(&self, level: usize) -> Option<&GtLayer> {
        match &self.encoder[level] {
            EncoderStack::Gt { layers, .. } => layers.first(),
            _ => None,
        }
    }

    /// First attention layer of the first coarse scale, if any (test hook).
    pub fn first_gt_layer(&self) -> Option<&GtLayer> {
        (0..self.encoder.len()).find_map(|l| self.gt_layer_at(l))
    }

    pub fn gin_layer(&self, level: usize, index: usize) -> Option<&GinLayer> {
        match &self.encoder[level] {
            EncoderStack::Gin(layers) => layers.get(index),
            _ => None,
        }
    }
}

/// Binds parameters into a tape, once each, so gradients accumulate across
/// every use site.
pub struct ForwardCtx<'a, F: Scalar> {
    pub tape: Tape<F>,
    store: &'a ParamStore<F>,
    bound: HashMap<ParamId, Var>,
}

impl<'a, F: Scalar> ForwardCtx<'a, F> {
    pub fn new(store: &'a ParamStore<F>) -> Self {
        ForwardCtx { tape: Tape::new(), store, bound: HashMap::new() }
    }

    pub fn bind(&mut self, id: ParamId) -> Var {
        if let Some(&var) = self.bound.get(&id) {
            return var;
        }
        let entry = self.store.get(id);
        let var = self.tape.leaf(&entry.shape, entry.values.clone(), true);
        self.bound.insert(id, var);
        var
    }

    /// Adds this tape's parameter gradients into `grads` (indexed like the
    /// store). Parameters never bound contribute nothing.
    pub fn accumulate_param_grads(&self, grads: &mut [Vec<F>]) {
        for (&id, &var) in &self.bound {
            if let Some(g) = self.tape.grad(var) {
                let slot = &mut grads[id.0];
                for (dst, &src) in slot.iter_mut().zip(g) {
                    *dst = *dst + src;
                }
            }
        }
    }
}

/// Per-graph preprocessing shared by every epoch: the hierarchy, dense
/// adjacency per level, and positional encodings for attention scales.
#[derive(Debug, Clone)]
pub struct PreppedGraph {
    pub hierarchy: Hierarchy,
    pub dense_adj: Vec<Vec<f64>>,
    pub pe: Vec<Option<Vec<f64>>>,
}

impl PreppedGraph {
    pub fn new(hierarchy: Hierarchy, config: &ModelConfig) -> Self {
        let dense_adj = hierarchy.levels.iter().map(|l| l.adj.to_dense()).collect();
        let pe = hierarchy
            .levels
            .iter()
            .map(|l| {
                if l.scale >= config.l_gt {
                    Some(rwpe(&l.adj, config.rwpe_k))
                } else {
                    None
                }
            })
            .collect();
        PreppedGraph { hierarchy, dense_adj, pe }
    }

    pub fn depth(&self) -> usize {
        self.hierarchy.depth()
    }
}

/// Encoder outputs kept for the decoder and the readout.
pub struct EncodeOutput {
    /// Per scale: embeddings of the visible nodes, rows in ascending node
    /// order. At attention scales these are the attention outputs; at
    /// convolution scales, the visible rows of the full output.
    pub visible: Vec<Var>,
    /// Full-row output of the scale-1 encoder.
    pub full_scale1: Var,
    /// Token count fed to each scale's stack (equals nodes minus masked).
    pub visible_counts: Vec<usize>,
}

fn to_scalar_vec<F: Scalar>(values: &[f64]) -> Vec<F> {
    values.iter().map(|&v| F::from_f64(v)).collect()
}

/// Re-emits `h` with masked rows zeroed, composed from gather + scatter.
fn zero_masked_rows<F: Scalar>(
    ctx: &mut ForwardCtx<'_, F>,
    h: Var,
    visible_idx: &[usize],
    rows: usize,
) -> Result<Var, ModelError> {
    let kept = ctx.tape.gather_rows(h, visible_idx)?;
    Ok(ctx.tape.scatter_add_rows(kept, visible_idx, rows)?)
}

/// Broadcasts the mask token into the masked rows of an otherwise-zero
/// `[n×d]` buffer via an outer product with the mask indicator column.
fn token_fill<F: Scalar>(
    ctx: &mut ForwardCtx<'_, F>,
    model: &FiCoModel<F>,
    mask: &[bool],
) -> Result<Var, ModelError> {
    let col: Vec<F> = mask
        .iter()
        .map(|&m| if m { F::one() } else { F::zero() })
        .collect();
    let indicator = ctx.tape.constant(&[mask.len(), 1], col);
    let token = ctx.bind(model.mask_token);
    Ok(ctx.tape.matmul(indicator, token)?)
}

/// Runs the staged encoder over a masked hierarchy.
///
/// Masked scale-1 features are zeroed before entering the tape, so masked
/// inputs cannot influence any output. Pooling acts on full-row buffers in
/// which masked rows hold zeros at attention scales; consistency of the
/// plan guarantees those rows only ever pool into masked super-nodes.
pub fn encode<F: Scalar>(
    model: &FiCoModel<F>,
    ctx: &mut ForwardCtx<'_, F>,
    prepped: &PreppedGraph,
    plan: &MaskPlan,
    features: &[f64],
) -> Result<EncodeOutput, ModelError> {
    let depth = prepped.depth();
    if plan.levels.len() != depth {
        return Err(ModelError::PlanMismatch { plan: plan.levels.len(), hierarchy: depth });
    }
    let n1 = prepped.hierarchy.n_at(0);
    let d0 = model.config.d0;
    if features.len() != n1 * d0 {
        return Err(ModelError::FeatureWidth { features: features.len() / n1.max(1), expected: d0 });
    }

    // Scale 1: zero masked features, embed, convolve over all nodes.
    let mut masked_features = features.to_vec();
    for (i, &masked) in plan.levels[0].iter().enumerate() {
        if masked {
            masked_features[i * d0..(i + 1) * d0].fill(0.0);
        }
    }
    let x = ctx.tape.constant(&[n1, d0], to_scalar_vec::<F>(&masked_features));
    let (embed_w, embed_b) = (ctx.bind(model.embed_w), ctx.bind(model.embed_b));
    let embedded = ctx.tape.matmul(x, embed_w)?;
    let mut h = ctx.tape.add_bias(embedded, embed_b)?;

    let adj1 = ctx.tape.constant(&[n1, n1], to_scalar_vec::<F>(&prepped.dense_adj[0]));
    match &model.encoder[0] {
        EncoderStack::Gin(layers) => {
            for layer in layers {
                h = layer.forward(ctx, adj1, h)?;
            }
        }
        EncoderStack::Gt { .. } => unreachable!("scale 1 always uses convolution"),
    }
    let full_scale1 = h;

    let mut visible = Vec::with_capacity(depth);
    let mut visible_counts = Vec::with_capacity(depth);
    let idx_u0 = plan.unmasked_indices(0);
    visible_counts.push(n1);
    visible.push(ctx.tape.gather_rows(h, &idx_u0)?);

    // `carry` holds full-row embeddings at the current scale for pooling.
    let mut carry = full_scale1;
    for level in 1..depth {
        let n = prepped.hierarchy.n_at(level);
        let assignment = prepped.hierarchy.levels[level - 1]
            .assignment
            .as_ref()
            .expect("assignment below top");
        let pooled = ctx.tape.scatter_add_rows(carry, assignment.cluster_of(), n)?;

        let idx_u = plan.unmasked_indices(level);
        if idx_u.is_empty() {
            return Err(ModelError::NoVisibleNodes);
        }
        match &model.encoder[level] {
            EncoderStack::Gt { pe, layers } => {
                let mut tokens = ctx.tape.gather_rows(pooled, &idx_u)?;
                let pe_values = prepped.pe[level].as_ref().expect("pe at attention scale");
                let pe_full = ctx
                    .tape
                    .constant(&[n, model.config.rwpe_k], to_scalar_vec::<F>(pe_values));
                let pe_visible = ctx.tape.gather_rows(pe_full, &idx_u)?;
                let pe_proj = pe.project(ctx, pe_visible)?;
                tokens = ctx.tape.add(tokens, pe_proj)?;
                for layer in layers {
                    tokens = layer.forward(ctx, tokens)?;
                }
                visible_counts.push(idx_u.len());
                visible.push(tokens);
                carry = ctx.tape.scatter_add_rows(tokens, &idx_u, n)?;
            }
            EncoderStack::Gin(layers) => {
                let adj = ctx
                    .tape
                    .constant(&[n, n], to_scalar_vec::<F>(&prepped.dense_adj[level]));
                let mut hl = zero_masked_rows(ctx, pooled, &idx_u, n)?;
                for layer in layers {
                    hl = layer.forward(ctx, adj, hl)?;
                }
                visible_counts.push(n);
                visible.push(ctx.tape.gather_rows(hl, &idx_u)?);
                carry = hl;
            }
        }
    }

    Ok(EncodeOutput { visible, full_scale1, visible_counts })
}

/// Decodes back to scale 1 and projects to feature width. Output is always
/// `[n1 × d0]`.
pub fn decode<F: Scalar>(
    model: &FiCoModel<F>,
    ctx: &mut ForwardCtx<'_, F>,
    prepped: &PreppedGraph,
    plan: &MaskPlan,
    enc: &EncodeOutput,
) -> Result<Var, ModelError> {
    let depth = prepped.depth();
    let top = depth - 1;
    let n_top = prepped.hierarchy.n_at(top);
    let idx_u_top = plan.unmasked_indices(top);

    let scattered = ctx.tape.scatter_add_rows(enc.visible[top], &idx_u_top, n_top)?;
    let fill = token_fill(ctx, model, &plan.levels[top])?;
    let mut h = ctx.tape.add(scattered, fill)?;
    h = run_decoder_stack(model, ctx, prepped, top, h)?;

    for level in (0..top).rev() {
        let n = prepped.hierarchy.n_at(level);
        let assignment = prepped.hierarchy.levels[level]
            .assignment
            .as_ref()
            .expect("assignment below top");
        let unpooled = ctx.tape.gather_rows(h, assignment.cluster_of())?;

        let idx_u = plan.unmasked_indices(level);
        let skip = ctx.tape.scatter_add_rows(enc.visible[level], &idx_u, n)?;
        let fused = if model.config.remask_decoder {
            let kept = zero_masked_rows(ctx, unpooled, &idx_u, n)?;
            let fill = token_fill(ctx, model, &plan.levels[level])?;
            let refilled = ctx.tape.add(kept, fill)?;
            ctx.tape.add(refilled, skip)?
        } else {
            ctx.tape.add(unpooled, skip)?
        };
        h = run_decoder_stack(model, ctx, prepped, level, fused)?;
    }

    let (head_w, head_b) = (ctx.bind(model.head_w), ctx.bind(model.head_b));
    let out = ctx.tape.matmul(h, head_w)?;
    Ok(ctx.tape.add_bias(out, head_b)?)
}

fn run_decoder_stack<F: Scalar>(
    model: &FiCoModel<F>,
    ctx: &mut ForwardCtx<'_, F>,
    prepped: &PreppedGraph,
    level: usize,
    h: Var,
) -> Result<Var, ModelError> {
    match &model.decoder[level] {
        DecoderStack::Gin(layer) => {
            let n = prepped.hierarchy.n_at(level);
            let adj = ctx
                .tape
                .constant(&[n, n], to_scalar_vec::<F>(&prepped.dense_adj[level]));
            layer.forward(ctx, adj, h)
        }
        DecoderStack::Gt(layer) => layer.forward(ctx, h),
    }
}

/// Reconstruction loss restricted to masked scale-1 rows; zero when the
/// plan masks nothing.
pub fn loss<F: Scalar>(
    model: &FiCoModel<F>,
    ctx: &mut ForwardCtx<'_, F>,
    x_hat: Var,
    features: &[f64],
    plan: &MaskPlan,
) -> Result<Var, ModelError> {
    let masked = plan.masked_indices(0);
    if masked.is_empty() {
        return Ok(ctx.tape.scalar(F::zero()));
    }
    let d0 = model.config.d0;
    let mut target = Vec::with_capacity(masked.len() * d0);
    for &i in &masked {
        target.extend_from_slice(&features[i * d0..(i + 1) * d0]);
    }
    let x_m = ctx.tape.constant(&[masked.len(), d0], to_scalar_vec::<F>(&target));
    let x_hat_m = ctx.tape.gather_rows(x_hat, &masked)?;
    Ok(ctx.tape.sce_loss(x_hat_m, x_m, F::from_f64(model.config.gamma_sce))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReadoutMode {
    /// Concatenate mean-pooled embeddings from every scale (width `S·d`).
    #[default]
    Aggregate,
    /// Mean-pooled scale-1 embeddings only (width `d`).
    FirstScale,
}

/// Graph-level embedding from a no-mask encoder pass. Aggregate mode always
/// yields width `scales·d`; hierarchies that truncated early repeat their
/// deepest scale to keep the width fixed across graphs.
pub fn readout<F: Scalar>(
    model: &FiCoModel<F>,
    ctx: &mut ForwardCtx<'_, F>,
    enc: &EncodeOutput,
    mode: ReadoutMode,
) -> Result<Var, ModelError> {
    let mut means = Vec::with_capacity(enc.visible.len());
    for &v in &enc.visible {
        means.push(ctx.tape.mean_rows(v)?);
    }
    match mode {
        ReadoutMode::FirstScale => Ok(means[0]),
        ReadoutMode::Aggregate => {
            while means.len() < model.config.scales {
                means.push(*means.last().unwrap());
            }
            Ok(ctx.tape.concat_cols(&means)?)
        }
    }
}

/// Full masked forward pass: encode, decode, loss. Returns the context so
/// the caller can run backward and read gradients.
pub fn forward_loss<'a, F: Scalar>(
    model: &'a FiCoModel<F>,
    prepped: &PreppedGraph,
    plan: &MaskPlan,
    features: &[f64],
) -> Result<(ForwardCtx<'a, F>, Var), ModelError> {
    let mut ctx = model.ctx();
    let enc = encode(model, &mut ctx, prepped, plan, features)?;
    let x_hat = decode(model, &mut ctx, prepped, plan, &enc)?;
    let l = loss(model, &mut ctx, x_hat, features, plan)?;
    Ok((ctx, l))
}

/// No-mask inference pass producing the graph embedding as plain floats.
pub fn graph_embedding<F: Scalar>(
    model: &FiCoModel<F>,
    prepped: &PreppedGraph,
    features: &[f64],
    mode: ReadoutMode,
) -> Result<Vec<f64>, ModelError> {
    let mut ctx = model.ctx();
    let plan = MaskPlan::all_visible(&prepped.hierarchy);
    let enc = encode(model, &mut ctx, prepped, &plan, features)?;
    let out = readout(model, &mut ctx, &enc, mode)?;
    Ok(ctx.tape.values(out).iter().map(|&v| Scalar::to_f64(v)).collect())
}

/// Convenience wrapper: hierarchy construction plus preprocessing.
pub fn prepare_graph(g: &Graph, config: &ModelConfig, r_p: f64, seed: u64) -> PreppedGraph {
    let h = crate::hierarchy::build_hierarchy(g, config.scales, r_p, seed);
    PreppedGraph::new(h, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Csr, Graph};
    use crate::hierarchy::{build_hierarchy, Assignment, CoarseLevel};
    use crate::masking::{build_mask_plan, RecoverySchedule};

    fn graph(n: usize, edges: &[(usize, usize)], d0: usize, features: Vec<f64>) -> Graph {
        let weighted: Vec<_> = edges.iter().map(|&(u, v)| (u, v, 1.0)).collect();
        Graph {
            adjacency: Csr::from_edges(n, &weighted),
            features,
            d0,
            graph_label: None,
            node_labels: None,
        }
    }

    fn cycle6() -> Graph {
        let edges: Vec<_> = (0..6).map(|i| (i, (i + 1) % 6)).collect();
        let mut feats = vec![0.0; 6 * 3];
        for i in 0..6 {
            feats[i * 3 + i % 3] = 1.0;
        }
        graph(6, &edges, 3, feats)
    }

    fn small_config(scales: usize, d0: usize) -> ModelConfig {
        ModelConfig { d0, d: 8, scales, gin_layers: 1, ..Default::default() }
    }

    fn plan_for(h: &crate::hierarchy::Hierarchy, r_m: f64, seed: u64) -> crate::masking::MaskPlan {
        build_mask_plan(h, r_m, &RecoverySchedule::disabled(), 0, seed)
    }

    #[test]
    fn single_scale_is_plain_masked_autoencoder() {
        let g = cycle6();
        let cfg = small_config(1, 3);
        let model: FiCoModel<f64> = FiCoModel::new(cfg.clone(), 0);
        let prepped = prepare_graph(&g, &cfg, 0.5, 0);
        assert_eq!(prepped.depth(), 1);
        let plan = plan_for(&prepped.hierarchy, 0.5, 1);
        let (ctx, loss_var) = forward_loss(&model, &prepped, &plan, &g.features).unwrap();
        assert!(ctx.tape.scalar_value(loss_var).is_finite());
    }

    #[test]
    fn xhat_shape_is_always_n_by_d0() {
        let g = cycle6();
        let cfg = small_config(2, 3);
        let model: FiCoModel<f64> = FiCoModel::new(cfg.clone(), 1);
        let prepped = prepare_graph(&g, &cfg, 0.5, 0);
        let plan = plan_for(&prepped.hierarchy, 0.5, 2);
        let mut ctx = model.ctx();
        let enc = encode(&model, &mut ctx, &prepped, &plan, &g.features).unwrap();
        let x_hat = decode(&model, &mut ctx, &prepped, &plan, &enc).unwrap();
        assert_eq!(ctx.tape.shape(x_hat), &[6, 3]);
    }

    #[test]
    fn no_mask_pass_sees_every_node_and_skips_the_token() {
        let g = cycle6();
        let cfg = small_config(2, 3);
        let model: FiCoModel<f64> = FiCoModel::new(cfg.clone(), 2);
        let prepped = prepare_graph(&g, &cfg, 0.5, 0);
        let plan = MaskPlan::all_visible(&prepped.hierarchy);
        let mut ctx = model.ctx();
        let enc = encode(&model, &mut ctx, &prepped, &plan, &g.features).unwrap();
        for (level, &count) in enc.visible_counts.iter().enumerate() {
            assert_eq!(count, prepped.hierarchy.n_at(level));
        }
        let x_hat = decode(&model, &mut ctx, &prepped, &plan, &enc).unwrap();
        // With nothing masked the token multiplies a zero indicator; its
        // gradient through any loss stays zero.
        let probe = ctx.tape.sum_all(x_hat);
        ctx.tape.backward(probe).unwrap();
        let token = model.store.by_name("mask_token").unwrap();
        let bound = ctx.bind(token);
        if let Some(grad) = ctx.tape.grad(bound) {
            assert!(grad.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn attention_row_count_matches_plan() {
        let g = cycle6();
        let cfg = small_config(2, 3);
        let model: FiCoModel<f64> = FiCoModel::new(cfg.clone(), 3);
        let prepped = prepare_graph(&g, &cfg, 0.5, 0);
        let plan = plan_for(&prepped.hierarchy, 0.5, 3);
        let mut ctx = model.ctx();
        let enc = encode(&model, &mut ctx, &prepped, &plan, &g.features).unwrap();
        for level in 1..prepped.depth() {
            let expected = prepped.hierarchy.n_at(level) - plan.masked_count(level);
            assert_eq!(enc.visible_counts[level], expected);
            assert_eq!(ctx.tape.shape(enc.visible[level])[0], expected);
        }
    }

    #[test]
    fn gin_aggregation_weighs_neighbors() {
        // P3 with equal features: the center receives two neighbor messages,
        // the ends one each.
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let layer = GinLayer::init(&mut store, &mut rng, "t", 1, 1, 1);
        let mut ctx = ForwardCtx::new(&store);
        let adj = ctx.tape.constant(
            &[3, 3],
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        );
        let h = ctx.tape.constant(&[3, 1], vec![2.0, 2.0, 2.0]);
        let agg = layer.aggregate(&mut ctx, adj, h).unwrap();
        assert_eq!(ctx.tape.values(agg), &[4.0, 6.0, 4.0]);
    }

    #[test]
    fn gin_isolated_node_is_mlp_only() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let layer = GinLayer::init(&mut store, &mut rng, "t", 2, 2, 2);
        let mut ctx = ForwardCtx::new(&store);
        let adj = ctx.tape.constant(&[1, 1], vec![0.0]);
        let h = ctx.tape.constant(&[1, 2], vec![0.7, -0.2]);
        let out = layer.forward(&mut ctx, adj, h).unwrap();

        // Same layer applied to the same row via aggregate = identity path.
        let mut ctx2 = ForwardCtx::new(&store);
        let adjz = ctx2.tape.constant(&[1, 1], vec![0.0]);
        let h2 = ctx2.tape.constant(&[1, 2], vec![0.7, -0.2]);
        let agg = layer.aggregate(&mut ctx2, adjz, h2).unwrap();
        assert_eq!(ctx2.tape.values(agg), vec![0.7, -0.2]);
        assert_eq!(ctx.tape.values(out).len(), 2);
    }

    #[test]
    fn gt_single_token_matches_hand_computation() {
        let d = 4;
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let layer = GtLayer::init(&mut store, &mut rng, "t", d);
        let h_row = vec![0.3, -0.8, 1.1, 0.25];

        let mut ctx = ForwardCtx::new(&store);
        let h = ctx.tape.constant(&[1, d], h_row.clone());
        let a = layer.attention(&mut ctx, h).unwrap();
        assert_eq!(ctx.tape.values(a), &[1.0]); // softmax of one logit

        let out = layer.forward(&mut ctx, h).unwrap();

        // Hand path: z = LN(h + h Wv Wo); out = z + FFN(z).
        let get = |name: &str| store.get(store.by_name(&format!("t.{name}")).unwrap()).values.clone();
        let matvec = |m: &[f64], v: &[f64]| -> Vec<f64> {
            (0..d).map(|j| (0..d).map(|i| v[i] * m[i * d + j]).sum()).collect()
        };
        let hv = matvec(&get("w_v"), &h_row);
        let ho = matvec(&get("w_o"), &hv);
        let resid: Vec<f64> = h_row.iter().zip(&ho).map(|(a, b)| a + b).collect();
        let mean = resid.iter().sum::<f64>() / d as f64;
        let var = resid.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let z: Vec<f64> = resid.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
        // gain 1, bias 0 at init
        let w1 = get("ffn.w1");
        let b1 = get("ffn.b1");
        let prelu_a = get("ffn.prelu")[0];
        let f1: Vec<f64> = (0..d)
            .map(|j| {
                let v: f64 = (0..d).map(|i| z[i] * w1[i * d + j]).sum::<f64>() + b1[j];
                if v > 0.0 { v } else { prelu_a * v }
            })
            .collect();
        let w2 = get("ffn.w2");
        let b2 = get("ffn.b2");
        let f2: Vec<f64> = (0..d)
            .map(|j| (0..d).map(|i| f1[i] * w2[i * d + j]).sum::<f64>() + b2[j])
            .collect();
        let expected: Vec<f64> = z.iter().zip(&f2).map(|(a, b)| a + b).collect();
        for (got, want) in ctx.tape.values(out).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn gt_identical_tokens_get_identical_rows() {
        let d = 6;
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let layer = GtLayer::init(&mut store, &mut rng, "t", d);
        let mut ctx = ForwardCtx::new(&store);
        let row: Vec<f64> = (0..d).map(|i| (i as f64) * 0.3 - 0.5).collect();
        let two = ctx.tape.constant(&[2, d], [row.clone(), row].concat());
        let out = layer.forward(&mut ctx, two).unwrap();
        let v = ctx.tape.values(out);
        assert_eq!(&v[0..d], &v[d..2 * d]);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let d = 8;
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let layer = GtLayer::init(&mut store, &mut rng, "t", d);
        let mut ctx = ForwardCtx::new(&store);
        use rand::Rng;
        let vals: Vec<f64> = (0..5 * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let h = ctx.tape.constant(&[5, d], vals);
        let a = layer.attention(&mut ctx, h).unwrap();
        for row in ctx.tape.values(a).chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_ignores_unmasked_rows_and_scores_masked_ones() {
        let g = cycle6();
        let cfg = small_config(1, 3);
        let model: FiCoModel<f64> = FiCoModel::new(cfg.clone(), 8);
        let prepped = prepare_graph(&g, &cfg, 0.5, 0);
        let plan = plan_for(&prepped.hierarchy, 0.5, 4);
        let masked = plan.masked_indices(0);
        assert!(!masked.is_empty());

        // x_hat equal to features on masked rows: loss 0 even with garbage
        // elsewhere.
        let mut ctx = model.ctx();
        let mut values = vec![9.0; 6 * 3];
        for &i in &masked {
            values[i * 3..(i + 1) * 3].copy_from_slice(&g.features[i * 3..(i + 1) * 3]);
        }
        let x_hat = ctx.tape.leaf(&[6, 3], values, false);
        let l = loss(&model, &mut ctx, x_hat, &g.features, &plan).unwrap();
        assert!(ctx.tape.scalar_value(l).abs() < 1e-12);

        // Zero-mask plan: loss 0 by convention.
        let empty = MaskPlan::all_visible(&prepped.hierarchy);
        let mut ctx = model.ctx();
        let x_hat = ctx.tape.leaf(&[6, 3], vec![1.0; 18], false);
        let l = loss(&model, &mut ctx, x_hat, &g.features, &empty).unwrap();
        assert_eq!(ctx.tape.scalar_value(l), 0.0);
    }

    #[test]
    fn readout_widths() {
        let g = cycle6();
        let cfg = small_config(2, 3);
        let model: FiCoModel<f64> = FiCoModel::new(cfg.clone(), 9);
        let prepped = prepare_graph(&g, &cfg, 0.5, 0);
        let plan = MaskPlan::all_visible(&prepped.hierarchy);
        let mut ctx = model.ctx();
        let enc = encode(&model, &mut ctx, &prepped, &plan, &g.features).unwrap();
        let agg = readout(&model, &mut ctx, &enc, ReadoutMode::Aggregate).unwrap();
        assert_eq!(ctx.tape.shape(agg), &[1, 16]); // scales * d
        let first = readout(&model, &mut ctx, &enc, ReadoutMode::FirstScale).unwrap();
        assert_eq!(ctx.tape.shape(first), &[1, 8]);
    }

    #[test]
    fn readout_modes_coincide_at_single_scale() {
        let g = cycle6();
        let cfg = small_config(1, 3);
        let model: FiCoModel<f64> = FiCoModel::new(cfg.clone(), 10);
        let prepped = prepare_graph(&g, &cfg, 0.5, 0);
        let a = graph_embedding(&model, &prepped, &g.features, ReadoutMode::Aggregate).unwrap();
        let b = graph_embedding(&model, &prepped, &g.features, ReadoutMode::FirstScale).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masked_feature_perturbation_changes_nothing() {
        let g = cycle6();
        let cfg = small_config(2, 3);
        let model: FiCoModel<f64> = FiCoModel::new(cfg.clone(), 11);
        let prepped = prepare_graph(&g, &cfg, 0.5, 0);
        let plan = plan_for(&prepped.hierarchy, 0.5, 5);
        let masked = plan.masked_indices(0);
        assert!(!masked.is_empty());

        let run = |features: &[f64]| {
            let mut ctx = model.ctx();
            let enc = encode(&model, &mut ctx, &prepped, &plan, features).unwrap();
            let coarse: Vec<Vec<u64>> = enc.visible[1..]
                .iter()
                .map(|&v| ctx.tape.values(v).iter().map(|x| x.to_bits()).collect())
                .collect();
            let x_hat = decode(&model, &mut ctx, &prepped, &plan, &enc).unwrap();
            let l = loss(&model, &mut ctx, x_hat, features, &plan).unwrap();
            (coarse, ctx.tape.scalar_value(l).to_bits())
        };
        let (coarse_a, loss_a) = run(&g.features);
        let mut perturbed = g.features.clone();
        for &i in &masked {
            for j in 0..3 {
                perturbed[i * 3 + j] += 17.5;
            }
        }
        // The loss targets still use the original features, so compare the
        // loss under perturbed inputs against original targets: masked rows
        // are zeroed before use, so encoder outputs match bitwise; the loss
        // target change is the only effect, which we exclude by comparing
        // encoder outputs and recomputing the loss with original targets.
        let mut ctx = model.ctx();
        let enc = encode(&model, &mut ctx, &prepped, &plan, &perturbed).unwrap();
        let coarse_b: Vec<Vec<u64>> = enc.visible[1..]
            .iter()
            .map(|&v| ctx.tape.values(v).iter().map(|x| x.to_bits()).collect())
            .collect();
        let x_hat = decode(&model, &mut ctx, &prepped, &plan, &enc).unwrap();
        let l = loss(&model, &mut ctx, x_hat, &g.features, &plan).unwrap();
        assert_eq!(coarse_a, coarse_b);
        assert_eq!(loss_a, ctx.tape.scalar_value(l).to_bits());
    }

    #[test]
    fn permutation_equivariance() {
        let g = cycle6();
        let cfg = small_config(2, 3);
        let model: FiCoModel<f64> = FiCoModel::new(cfg.clone(), 12);
        let prepped = prepare_graph(&g, &cfg, 0.5, 0);
        let plan = plan_for(&prepped.hierarchy, 0.5, 6);

        // Permute nodes of scale 1; coarse levels and cluster ids unchanged.
        let perm: Vec<usize> = vec![3, 5, 0, 1, 4, 2]; // new_id = perm[old_id]
        let n = 6;
        let mut edges = Vec::new();
        for (u, v, w) in g.adjacency.undirected_edges() {
            edges.push((perm[u], perm[v], w));
        }
        let adj_p = Csr::from_edges(n, &edges);
        let asg = prepped.hierarchy.levels[0].assignment.as_ref().unwrap();
        let mut cluster_p = vec![0usize; n];
        for old in 0..n {
            cluster_p[perm[old]] = asg.cluster_of()[old];
        }
        let h_p = crate::hierarchy::Hierarchy {
            levels: vec![
                CoarseLevel {
                    scale: 1,
                    adj: adj_p,
                    assignment: Some(Assignment::new(cluster_p, asg.n_clusters())),
                },
                prepped.hierarchy.levels[1].clone(),
            ],
        };
        let prepped_p = PreppedGraph::new(h_p, &cfg);
        let mut feats_p = vec![0.0; n * 3];
        let mut mask1_p = vec![false; n];
        for old in 0..n {
            feats_p[perm[old] * 3..(perm[old] + 1) * 3]
                .copy_from_slice(&g.features[old * 3..(old + 1) * 3]);
            mask1_p[perm[old]] = plan.levels[0][old];
        }
        let plan_p = MaskPlan { levels: vec![mask1_p, plan.levels[1].clone()], epoch: 0, seed: 0 };

        let xhat = |prepped: &PreppedGraph, plan: &MaskPlan, feats: &[f64]| {
            let mut ctx = model.ctx();
            let enc = encode(&model, &mut ctx, prepped, plan, feats).unwrap();
            let x_hat = decode(&model, &mut ctx, prepped, plan, &enc).unwrap();
            let l = loss(&model, &mut ctx, x_hat, feats, plan).unwrap();
            (
                ctx.tape.values(x_hat).to_vec(),
                ctx.tape.scalar_value(l),
            )
        };
        let (x_a, loss_a) = xhat(&prepped, &plan, &g.features);
        let (x_b, loss_b) = xhat(&prepped_p, &plan_p, &feats_p);
        for old in 0..n {
            for j in 0..3 {
                let a = x_a[old * 3 + j];
                let b = x_b[perm[old] * 3 + j];
                assert!((a - b).abs() < 1e-5, "row {old} col {j}: {a} vs {b}");
            }
        }
        assert!((loss_a - loss_b).abs() < 1e-5);

        // Readout is invariant under the relabeling.
        let e_a = graph_embedding(&model, &prepped, &g.features, ReadoutMode::Aggregate).unwrap();
        let e_b = graph_embedding(&model, &prepped_p, &feats_p, ReadoutMode::Aggregate).unwrap();
        for (a, b) in e_a.iter().zip(&e_b) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn pooling_embeddings_is_linear() {
        // Pooling on the tape is scatter-add by cluster: check additivity
        // and homogeneity through the tape op itself.
        let asg = Assignment::new(vec![0, 0, 1], 2);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = tape.constant(&[3, 2], vec![0.5, -1.0, 2.0, 0.25, -3.0, 1.0]);
        let x_pooled = tape.scatter_add_rows(x, asg.cluster_of(), 2).unwrap();
        let y_pooled = tape.scatter_add_rows(y, asg.cluster_of(), 2).unwrap();
        let sum = tape.add(x, y).unwrap();
        let sum_pooled = tape.scatter_add_rows(sum, asg.cluster_of(), 2).unwrap();
        let both = tape.add(x_pooled, y_pooled).unwrap();
        assert_eq!(tape.values(sum_pooled), tape.values(both));

        let sx = tape.scale(x, 2.5);
        let sx_pooled = tape.scatter_add_rows(sx, asg.cluster_of(), 2).unwrap();
        let pooled_sx = tape.scale(x_pooled, 2.5);
        assert_eq!(tape.values(sx_pooled), tape.values(pooled_sx));
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let g = cycle6();
        let cfg = small_config(2, 3);
        let mut model: FiCoModel<f64> = FiCoModel::new(cfg.clone(), 13);
        let prepped = prepare_graph(&g, &cfg, 0.5, 0);
        let plan = plan_for(&prepped.hierarchy, 0.5, 7);
        assert!(plan.masked_count(0) > 0);

        let (mut ctx, loss_var) = forward_loss(&model, &prepped, &plan, &g.features).unwrap();
        ctx.tape.backward(loss_var).unwrap();
        let mut grads = model.store.zero_grads();
        ctx.accumulate_param_grads(&mut grads);
        drop(ctx);

        // Spot-check a handful of parameters at every depth of the stack.
        let names = ["embed.w", "enc.s1.gin0.mlp.w1", "enc.s2.gt0.w_q", "mask_token", "head.b"];
        let h = 1e-6;
        for name in names {
            let id = model.store.by_name(name).unwrap();
            let len = model.store.get(id).values.len();
            for j in [0, len / 2, len - 1] {
                let orig = model.store.get(id).values[j];
                model.store.values_mut(id)[j] = orig + h;
                let (ctx_p, lp) = forward_loss(&model, &prepped, &plan, &g.features).unwrap();
                let up = ctx_p.tape.scalar_value(lp);
                model.store.values_mut(id)[j] = orig - h;
                let (ctx_m, lm) = forward_loss(&model, &prepped, &plan, &g.features).unwrap();
                let down = ctx_m.tape.scalar_value(lm);
                model.store.values_mut(id)[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let ad = grads[id.0][j];
                let denom = fd.abs().max(ad.abs()).max(1e-8);
                assert!(
                    ((fd - ad) / denom).abs() < 1e-5,
                    "{name}[{j}]: fd {fd} vs ad {ad}"
                );
            }
        }
    }
}
