//! Pretraining loop, embedding extraction, and evaluation plumbing.

mod checkpoint;
mod probe;

pub use checkpoint::{peek_precision, Checkpoint, CheckpointMeta};
pub use probe::{probe, stratified_folds, ProbeReport};

use crate::derive_seed;
use crate::graph::GraphDataset;
use crate::masking::{build_mask_plan, random_per_level_mask, recovery_count, RecoverySchedule};
use crate::masking::masked_node_budget;
use crate::model::{
    forward_loss, graph_embedding, FiCoModel, ModelError, PreppedGraph, ReadoutMode,
};
use crate::scalar::{Precision, Scalar};
use crate::tensor::{AdamConfig, AdamState};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const SALT_MODEL: u64 = 0x01;
const SALT_MASK: u64 = 0x02;
const SALT_SHUFFLE: u64 = 0x03;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    #[default]
    Cofi,
    PerLevelRandom,
}

/// Recovery settings as configured; `t_e` defaults to a quarter of the run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RecoveryConfig {
    pub enabled: bool,
    pub r_re: f64,
    pub t_e: Option<usize>,
    pub gamma: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig { enabled: true, r_re: 0.5, t_e: None, gamma: 1.0 }
    }
}

impl RecoveryConfig {
    pub fn resolve(&self, total_epochs: usize) -> RecoverySchedule {
        RecoverySchedule {
            enabled: self.enabled,
            r_re: self.r_re,
            t_e: self.t_e.unwrap_or_else(|| total_epochs.div_ceil(4).max(1)),
            gamma: self.gamma,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub r_m: f64,
    pub r_p: f64,
    pub scales: usize,
    pub recovery: RecoveryConfig,
    pub d: usize,
    pub l_gt: usize,
    pub gin_layers: usize,
    pub gt_layers: usize,
    pub rwpe_k: usize,
    pub gamma_sce: f64,
    pub remask_decoder: bool,
    pub gt_decoder_at_top: bool,
    pub binarize_coarse: bool,
    pub seed: u64,
    pub hierarchy_seed: u64,
    pub mask_mode: MaskMode,
    pub readout_mode: ReadoutMode,
    pub precision: Precision,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            r_m: 0.5,
            r_p: 0.2,
            scales: 2,
            recovery: RecoveryConfig::default(),
            d: 32,
            l_gt: 2,
            gin_layers: 2,
            gt_layers: 1,
            rwpe_k: 8,
            gamma_sce: 2.0,
            remask_decoder: false,
            gt_decoder_at_top: false,
            binarize_coarse: false,
            seed: 0,
            hierarchy_seed: 0,
            mask_mode: MaskMode::Cofi,
            readout_mode: ReadoutMode::Aggregate,
            precision: Precision::F32,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ratio = |name: &str, v: f64| -> Result<(), TrainError> {
            if !(0.0..=1.0).contains(&v) {
                return Err(TrainError::Config(format!("{name}={v} must be in [0, 1]")));
            }
            Ok(())
        };
        ratio("mask.r_m", self.r_m)?;
        if !(self.r_p > 0.0 && self.r_p <= 1.0) {
            return Err(TrainError::Config(format!(
                "hierarchy.r_p={} must be in (0, 1]",
                self.r_p
            )));
        }
        ratio("mask.recovery.r_re", self.recovery.r_re)?;
        if self.recovery.gamma < 0.0 {
            return Err(TrainError::Config(format!(
                "mask.recovery.gamma={} must be >= 0",
                self.recovery.gamma
            )));
        }
        if self.recovery.t_e == Some(0) {
            return Err(TrainError::Config("mask.recovery.t_e must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(TrainError::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("train.batch_size must be >= 1".into()));
        }
        if self.scales < 1 {
            return Err(TrainError::Config("hierarchy.S must be >= 1".into()));
        }
        if self.l_gt < 2 {
            return Err(TrainError::Config("model.l_gt must be >= 2".into()));
        }
        if self.d < 1 || self.gin_layers < 1 || self.gt_layers < 1 || self.rwpe_k < 1 {
            return Err(TrainError::Config(
                "model widths and layer counts must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, &[SALT_MODEL])
    }

    pub fn hierarchy_seed_for(&self, graph_index: usize) -> u64 {
        derive_seed(self.hierarchy_seed, &[graph_index as u64])
    }

    pub fn mask_seed_for(&self, graph_index: usize, epoch: usize) -> u64 {
        derive_seed(self.seed, &[SALT_MASK, graph_index as u64, epoch as u64])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Sum over graphs of the recovery count at the coarsest scale.
    pub recovered_top: usize,
}

/// Training log as CSV with header `epoch,loss,recovered_S`.
pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,recovered_S\n");
    for row in log {
        out.push_str(&format!("{},{},{}\n", row.epoch, row.loss, row.recovered_top));
    }
    out
}

pub struct PretrainOutput<F: Scalar> {
    pub model: FiCoModel<F>,
    pub log: Vec<EpochLog>,
}

impl<F: Scalar> PretrainOutput<F> {
    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint<F> {
        let meta = CheckpointMeta {
            config: config.clone(),
            d0: self.model.config.d0,
            final_epoch: self.log.last().map_or(0, |l| l.epoch),
            final_loss: self.log.last().map_or(f64::NAN, |l| l.loss),
        };
        Checkpoint::from_model(&self.model, meta)
    }
}

/// Hierarchies and per-level caches for every graph, built once up front.
pub fn prepare_dataset<F: Scalar>(
    dataset: &GraphDataset,
    cfg: &TrainConfig,
) -> Vec<PreppedGraph> {
    let model_cfg = cfg.model_config(dataset.d0);
    dataset
        .graphs
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let h = crate::hierarchy::build_hierarchy_with(
                &crate::hierarchy::HeavyEdgeMatching,
                &g.adjacency,
                crate::hierarchy::HierarchyOptions {
                    scales: cfg.scales,
                    r_p: cfg.r_p,
                    seed: cfg.hierarchy_seed_for(i),
                    binarize_coarse: cfg.binarize_coarse,
                },
            );
            PreppedGraph::new(h, &model_cfg)
        })
        .collect()
}

/// Full pretraining run. Deterministic for a fixed config and seed within
/// one precision mode.
pub fn pretrain<F: Scalar>(
    dataset: &GraphDataset,
    cfg: &TrainConfig,
) -> Result<PretrainOutput<F>, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Config("dataset is empty".into()));
    }
    let prepped = prepare_dataset::<F>(dataset, cfg);
    let mut model: FiCoModel<F> = FiCoModel::new(cfg.model_config(dataset.d0), cfg.model_seed());
    let sched = cfg.recovery.resolve(cfg.epochs);
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut adam = AdamState::for_store(adam_cfg, &model.store);

    let n_graphs = dataset.len();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_graphs).collect();
        deterministic_shuffle(&mut order, derive_seed(cfg.seed, &[SALT_SHUFFLE, epoch as u64]));

        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let per_graph = |&gi: &usize| -> Result<(f64, Vec<Vec<F>>), TrainError> {
                let plan = match cfg.mask_mode {
                    MaskMode::Cofi => build_mask_plan(
                        &prepped[gi].hierarchy,
                        cfg.r_m,
                        &sched,
                        epoch,
                        cfg.mask_seed_for(gi, epoch),
                    ),
                    MaskMode::PerLevelRandom => random_per_level_mask(
                        &prepped[gi].hierarchy,
                        cfg.r_m,
                        cfg.mask_seed_for(gi, epoch),
                    ),
                };
                let (mut ctx, loss_var) =
                    forward_loss(&model, &prepped[gi], &plan, &dataset.graphs[gi].features)?;
                let loss_value = ctx.tape.scalar_value(loss_var).to_f64();
                ctx.tape.backward(loss_var).map_err(ModelError::from)?;
                let mut grads = model.store.zero_grads();
                ctx.accumulate_param_grads(&mut grads);
                Ok((loss_value, grads))
            };
            let results: Vec<(f64, Vec<Vec<F>>)> = if cfg.parallel {
                batch.par_iter().map(per_graph).collect::<Result<_, _>>()?
            } else {
                batch.iter().map(per_graph).collect::<Result<_, _>>()?
            };

            let mut grads = model.store.zero_grads();
            for (loss_value, g) in &results {
                epoch_loss += loss_value;
                for (acc, src) in grads.iter_mut().zip(g) {
                    for (a, &s) in acc.iter_mut().zip(src) {
                        *a = *a + s;
                    }
                }
            }
            let inv = F::from_f64(1.0 / batch.len() as f64);
            for g in &mut grads {
                for v in g.iter_mut() {
                    *v = *v * inv;
                }
            }
            adam.step(&mut model.store, &grads);
        }

        let recovered_top = if cfg.mask_mode == MaskMode::Cofi {
            prepped
                .iter()
                .map(|p| {
                    let budget = masked_node_budget(p.hierarchy.top().n(), cfg.r_m);
                    recovery_count(budget, &sched, epoch)
                })
                .sum()
        } else {
            0
        };
        log.push(EpochLog {
            epoch,
            loss: epoch_loss / n_graphs as f64,
            recovered_top,
        });
        log::info!(
            "epoch {epoch}: loss {:.6}, recovered {} top-scale nodes",
            log.last().unwrap().loss,
            recovered_top
        );
    }

    Ok(PretrainOutput { model, log })
}

fn deterministic_shuffle(order: &mut [usize], seed: u64) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
}

/// No-mask embeddings for every graph, rows in dataset order.
pub fn embed<F: Scalar>(
    dataset: &GraphDataset,
    model: &FiCoModel<F>,
    cfg: &TrainConfig,
) -> Result<Vec<Vec<f64>>, TrainError> {
    if dataset.d0 != model.config.d0 {
        return Err(TrainError::Config(format!(
            "dataset feature width {} does not match checkpoint d0 {}",
            dataset.d0, model.config.d0
        )));
    }
    let prepped = prepare_dataset::<F>(dataset, cfg);
    embed_prepped(dataset, model, &prepped, cfg.readout_mode)
}

/// Embedding over caller-supplied hierarchies (exposed so tests can pin the
/// partition structure).
pub fn embed_prepped<F: Scalar>(
    dataset: &GraphDataset,
    model: &FiCoModel<F>,
    prepped: &[PreppedGraph],
    mode: ReadoutMode,
) -> Result<Vec<Vec<f64>>, TrainError> {
    prepped
        .par_iter()
        .zip(dataset.graphs.par_iter())
        .map(|(p, g)| Ok(graph_embedding(model, p, &g.features, mode)?))
        .collect()
}
