//! Self-supervised pretraining for graph-level representations with a
//! multi-scale masked autoencoder.
//!
//! The pipeline: coarsen each graph into a small hierarchy of super-node
//! graphs, sample a mask on the coarsest scale and back-project it to the
//! finer scales, encode with message passing at the fine scales and
//! self-attention over the visible coarse nodes, then decode back down the
//! hierarchy to reconstruct the masked node features. Trained checkpoints are
//! evaluated by embedding whole graphs and fitting a linear probe under
//! k-fold cross-validation.
//!
//! Modules mirror the pipeline stages:
//!
//! - [`tensor`]: dense tensors, a reverse-mode autodiff tape, and Adam
//! - [`graph`]: graph/dataset types and ingestion (TU layout, JSON lines)
//! - [`hierarchy`]: multilevel partitioning, coarse adjacencies, pool/unpool
//! - [`masking`]: coarse-to-fine mask plans and the gradual recovery schedule
//! - [`model`]: the fine/coarse encoder-decoder and multi-scale readout
//! - [`training`]: pretraining loop, checkpoints, embedding, linear probe

pub mod graph;
pub mod hierarchy;
pub mod masking;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use graph::{Csr, Graph, GraphDataset};
pub use hierarchy::{Assignment, CoarseLevel, Hierarchy};
pub use masking::{MaskPlan, RecoverySchedule};
pub use model::{FiCoModel, ModelConfig};
pub use scalar::{Precision, Scalar};
pub use tensor::{Tape, Var};
pub use training::{Checkpoint, ProbeReport, TrainConfig};

/// Mixes a base seed with context words into a new stream seed.
///
/// Per-graph and per-epoch RNG streams are derived from the run seed so that
/// results do not depend on iteration or batching order.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut state = base ^ 0x9e37_79b9_7f4a_7c15;
    for &part in parts {
        state = splitmix64(state.wrapping_add(part));
    }
    splitmix64(state)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
