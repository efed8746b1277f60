//! Named parameter storage shared by the model, the optimizer, and
//! checkpoint serialization.

use crate::scalar::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<F: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<F>,
}

/// All learnable parameters of a model, in registration order.
///
/// Registration order is the serialization order and the optimizer's
/// iteration order, so construction must be deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Scalar> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<F>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), values.len());
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, shape: shape.to_vec(), values });
        ParamId(self.entries.len() - 1)
    }

    /// Fan-in scaled uniform init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn register_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| F::from_f64(rng.random_range(-bound..bound)))
            .collect();
        self.register(name, shape, values)
    }

    pub fn register_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let n: usize = shape.iter().product();
        self.register(name, shape, vec![F::zero(); n])
    }

    pub fn register_const(&mut self, name: impl Into<String>, shape: &[usize], value: F) -> ParamId {
        let n: usize = shape.iter().product();
        self.register(name, shape, vec![value; n])
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.entries[id.0].values
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamEntry<F>)> {
        self.entries.iter_mut().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Zero-filled gradient buffers congruent with every parameter.
    pub fn zero_grads(&self) -> Vec<Vec<F>> {
        self.entries.iter().map(|e| vec![F::zero(); e.values.len()]).collect()
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }
}
