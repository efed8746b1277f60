//! Coarse-to-fine mask generation and the gradual node-recovery schedule.
//!
//! A mask is sampled on the coarsest scale, a decaying number of masked
//! super-nodes is flipped back visible early in training, and the result is
//! back-projected down every scale. Plans produced this way are consistent
//! across scales by construction: a node is masked exactly when its cluster
//! is.

use crate::hierarchy::{Assignment, Hierarchy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-scale binary masks (`true` = masked), regenerated each epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// `levels[l][i]` masks node `i` at scale `l + 1`.
    pub levels: Vec<Vec<bool>>,
    pub epoch: usize,
    pub seed: u64,
}

impl MaskPlan {
    pub fn masked_count(&self, level: usize) -> usize {
        self.levels[level].iter().filter(|&&m| m).count()
    }

    pub fn masked_indices(&self, level: usize) -> Vec<usize> {
        (0..self.levels[level].len())
            .filter(|&i| self.levels[level][i])
            .collect()
    }

    pub fn unmasked_indices(&self, level: usize) -> Vec<usize> {
        (0..self.levels[level].len())
            .filter(|&i| !self.levels[level][i])
            .collect()
    }

    /// Cross-scale consistency: every mask equals the unpooling of the mask
    /// one scale up.
    pub fn is_consistent(&self, h: &Hierarchy) -> bool {
        for l in 0..self.levels.len().saturating_sub(1) {
            let assignment = h.levels[l].assignment.as_ref().expect("assignment below top");
            if self.levels[l] != backproject_mask(assignment, &self.levels[l + 1]) {
                return false;
            }
        }
        true
    }

    /// All-visible plan matching a hierarchy (used for inference passes).
    pub fn all_visible(h: &Hierarchy) -> MaskPlan {
        MaskPlan {
            levels: h.levels.iter().map(|l| vec![false; l.n()]).collect(),
            epoch: 0,
            seed: 0,
        }
    }
}

/// Epoch-decaying count of masked coarse nodes temporarily made visible.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RecoverySchedule {
    pub enabled: bool,
    /// Initial recovery ratio.
    pub r_re: f64,
    /// Epoch at which recovery reaches zero.
    pub t_e: usize,
    /// Decay exponent; 1 is linear decay.
    pub gamma: f64,
}

impl RecoverySchedule {
    /// Defaults with `t_e` set to a quarter of the run length.
    pub fn for_epochs(total_epochs: usize) -> Self {
        RecoverySchedule {
            enabled: true,
            r_re: 0.5,
            t_e: total_epochs.div_ceil(4).max(1),
            gamma: 1.0,
        }
    }

    pub fn disabled() -> Self {
        RecoverySchedule { enabled: false, r_re: 0.5, t_e: 1, gamma: 1.0 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.r_re) {
            return Err(format!("recovery ratio r_re={} must be in [0, 1]", self.r_re));
        }
        if self.gamma < 0.0 {
            return Err(format!("recovery decay gamma={} must be >= 0", self.gamma));
        }
        if self.t_e < 1 {
            return Err("recovery end epoch t_e must be >= 1".to_string());
        }
        Ok(())
    }
}

/// How many masked nodes to flip visible at epoch `t`:
/// `floor(n_m * r_re * max((1 - t/t_e)^gamma, 0))`, hitting exactly 0 for
/// all `t >= t_e`.
pub fn recovery_count(n_m: usize, sched: &RecoverySchedule, t: usize) -> usize {
    if !sched.enabled || t >= sched.t_e {
        return 0;
    }
    let factor = (1.0 - t as f64 / sched.t_e as f64).powf(sched.gamma);
    (n_m as f64 * sched.r_re * factor).floor() as usize
}

/// Masked-node budget at a scale: round-half-up of `r_m * n`, clamped so at
/// least one node stays visible (a single-node scale is never masked).
pub fn masked_node_budget(n: usize, r_m: f64) -> usize {
    let raw = r_m * n as f64;
    let nearest = raw.round();
    let snapped = if (raw - nearest).abs() < 1e-9 { nearest } else { raw };
    let count = (snapped + 0.5).floor() as usize;
    count.min(n.saturating_sub(1))
}

/// Uniformly samples the coarsest-scale mask with exactly
/// [`masked_node_budget`] nodes set.
pub fn sample_coarse_mask(n_top: usize, r_m: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    assert!((0.0..=1.0).contains(&r_m), "mask ratio must be in [0, 1]");
    let count = masked_node_budget(n_top, r_m);
    let mut mask = vec![false; n_top];
    for i in rand::seq::index::sample(rng, n_top, count) {
        mask[i] = true;
    }
    mask
}

/// Projects a coarse mask one scale down: node `i` is masked iff its
/// cluster is. Values stay exactly binary.
pub fn backproject_mask(assignment: &Assignment, coarse: &[bool]) -> Vec<bool> {
    assert_eq!(
        coarse.len(),
        assignment.n_clusters(),
        "mask length {} does not match cluster count {}",
        coarse.len(),
        assignment.n_clusters()
    );
    assignment.cluster_of().iter().map(|&c| coarse[c]).collect()
}

/// Samples the coarsest mask, applies the epoch-`t` recovery, and
/// back-projects down every scale. Deterministic for fixed
/// `(seed, t, hierarchy)`.
pub fn build_mask_plan(
    h: &Hierarchy,
    r_m: f64,
    sched: &RecoverySchedule,
    t: usize,
    seed: u64,
) -> MaskPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = h.depth();
    let mut top = sample_coarse_mask(h.top().n(), r_m, &mut rng);
    let masked: Vec<usize> = (0..top.len()).filter(|&i| top[i]).collect();
    let recover = recovery_count(masked.len(), sched, t);
    if recover > 0 {
        for pos in rand::seq::index::sample(&mut rng, masked.len(), recover) {
            top[masked[pos]] = false;
        }
    }

    let mut levels = vec![Vec::new(); depth];
    levels[depth - 1] = top;
    for l in (0..depth.saturating_sub(1)).rev() {
        let assignment = h.levels[l].assignment.as_ref().expect("assignment below top");
        levels[l] = backproject_mask(assignment, &levels[l + 1]);
    }
    MaskPlan { levels, epoch: t, seed }
}

/// Ablation baseline: independent uniform masks per scale at the same
/// ratio, with no cross-scale consistency.
pub fn random_per_level_mask(h: &Hierarchy, r_m: f64, seed: u64) -> MaskPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = h
        .levels
        .iter()
        .map(|l| sample_coarse_mask(l.n(), r_m, &mut rng))
        .collect();
    MaskPlan { levels, epoch: 0, seed }
}

/// The recovery table `R(t)` for `t = 0..=total_epochs`, as printed by the
/// `schedule` subcommand.
pub fn schedule_table(n_m: usize, sched: &RecoverySchedule, total_epochs: usize) -> Vec<(usize, usize)> {
    (0..=total_epochs)
        .map(|t| (t, recovery_count(n_m, sched, t)))
        .collect()
}
