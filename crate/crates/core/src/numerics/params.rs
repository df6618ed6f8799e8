//! Named parameter storage and the Adam optimizer.

use rand::Rng;

use super::tape::{Gradients, Tape};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Shared,
    SourceBranch,
    TargetBranch,
    Classifier,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    pub frozen: bool,
}

/// Flat, ordered collection of every learnable tensor in a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.params.push(Param { name: name.into(), value, group, frozen: false });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_frozen_group(&mut self, group: ParamGroup, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.frozen = frozen;
        }
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.numel()).sum()
    }

    /// Order-sensitive FNV-1a hash over every parameter's bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.value.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Gradients for every parameter recorded on `tape`, indexed by
    /// parameter id. Frozen or unused parameters get `None`.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if p.frozen {
                    return None;
                }
                tape.param_var(ParamId(i))
                    .and_then(|v| grads.get(v))
                    .map(<[f64]>::to_vec)
            })
            .collect()
    }
}

/// Glorot/Xavier uniform initialisation.
pub fn glorot_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_raw(shape.to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are allocated lazily per
/// parameter on the first update that touches it.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Frozen parameters and parameters without a gradient are
    /// left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) {
        self.step += 1;
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let param = store.get_mut(ParamId(i));
            if param.frozen {
                continue;
            }
            let m = self.first[i].get_or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.second[i].get_or_insert_with(|| vec![0.0; grad.len()]);
            for (((w, g), m), v) in param.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_store(x0: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("x", ParamGroup::Classifier, Tensor::scalar(x0));
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_params_and_advances_step() {
        let (mut store, id) = quadratic_store(1.5);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &[Some(vec![0.0])]);
        assert_eq!(store.get(id).value.data(), &[1.5]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Classifier, Tensor::new(vec![3], vec![0.0, 1.0, -2.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &[Some(vec![0.3, -7.0, 1e-3])]);
        let after = store.get(id).value.data();
        let expected = [-1e-4, 1.0 + 1e-4, -2.0 - 1e-4];
        for (a, e) in after.iter().zip(expected) {
            // |g| / (|g| + eps) differs from 1 by at most eps / |g|.
            assert!((a - e).abs() < 1e-4 * 2e-5, "{a} vs {e}");
        }
    }

    #[test]
    fn minimises_shifted_quadratic() {
        let (mut store, id) = quadratic_store(0.0);
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() });
        for _ in 0..100 {
            let x = store.get(id).value.data()[0];
            adam.step(&mut store, &[Some(vec![2.0 * (x - 3.0)])]);
        }
        let x = store.get(id).value.data()[0];
        assert!((x - 3.0).abs() < 3.0, "x = {x}");
        assert!((x - 3.0).abs() < 0.5, "x = {x}");
    }

    #[test]
    fn frozen_params_are_not_updated() {
        let (mut store, id) = quadratic_store(2.0);
        store.get_mut(id).frozen = true;
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &[Some(vec![5.0])]);
        assert_eq!(store.get(id).value.data(), &[2.0]);
        assert_eq!(store.trainable_count(), 0);
    }
}
