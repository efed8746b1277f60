//! Adam with bias correction, over a [`ParamStore`] or raw slices.

use super::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
#[derive(Debug)]
pub struct AdamState<F: Scalar> {
    cfg: AdamConfig,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    step: u64,
}

impl<F: Scalar> AdamState<F> {
    /// `lengths[i]` is the flat element count of parameter group `i`.
    pub fn new(cfg: AdamConfig, lengths: &[usize]) -> Self {
        AdamState {
            cfg,
            m: lengths.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: lengths.iter().map(|&n| vec![F::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn for_store(cfg: AdamConfig, store: &ParamStore<F>) -> Self {
        let lengths: Vec<usize> = store.iter().map(|(_, e)| e.values.len()).collect();
        Self::new(cfg, &lengths)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every group. `grads` must be congruent with the store.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Vec<F>]) {
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step;
        for (i, (_, entry)) in store.iter_mut().enumerate() {
            Self::update_group(
                &self.cfg,
                t,
                &mut entry.values,
                &grads[i],
                &mut self.m[i],
                &mut self.v[i],
            );
        }
    }

    /// Update a single raw group (used by callers that keep parameters
    /// outside a store, such as the linear probe).
    pub fn step_group(&mut self, group: usize, params: &mut [F], grads: &[F], advance: bool) {
        if advance {
            self.step += 1;
        }
        let t = self.step;
        Self::update_group(&self.cfg, t, params, grads, &mut self.m[group], &mut self.v[group]);
    }

    fn update_group(cfg: &AdamConfig, t: u64, params: &mut [F], grads: &[F], m: &mut [F], v: &mut [F]) {
        assert_eq!(params.len(), grads.len());
        let lr = F::from_f64(cfg.learning_rate);
        let b1 = F::from_f64(cfg.beta1);
        let b2 = F::from_f64(cfg.beta2);
        let eps = F::from_f64(cfg.epsilon);
        let wd = F::from_f64(cfg.weight_decay);
        let one = F::one();
        let bc1 = one - F::from_f64(cfg.beta1.powi(t as i32));
        let bc2 = one - F::from_f64(cfg.beta2.powi(t as i32));
        for j in 0..params.len() {
            let mut g = grads[j];
            if cfg.weight_decay != 0.0 {
                g = g + wd * params[j];
            }
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            params[j] = params[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }

    pub fn moments(&self, group: usize) -> (&[F], &[F]) {
        (&self.m[group], &self.v[group])
    }
}
