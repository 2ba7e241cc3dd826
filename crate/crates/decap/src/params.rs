//! Persistent named parameters.
//!
//! Model weights live outside any tape so they survive across training
//! steps. Each forward pass leafs the needed parameters onto a fresh tape;
//! after backward, [`ParamStore::absorb_grads`] pulls the tape gradients
//! back into the persistent buffers where the optimizer reads them.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone)]
pub struct Param {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Weight initialization for a newly registered parameter.
#[derive(Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Glorot uniform over (fan_in, fan_out).
    Xavier,
    /// Uniform in [-scale, scale]; used for embedding and position tables.
    Uniform(f64),
}

#[derive(Default, Clone)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        assert!(
            !self.params.contains_key(name),
            "parameter registered twice: {name}"
        );
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Xavier => {
                let (fan_in, fan_out) = match shape.len() {
                    2 => (shape[0], shape[1]),
                    _ => (n, n),
                };
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
            Init::Uniform(s) => (0..n).map(|_| rng.random_range(-s..s)).collect(),
        };
        let id = self.params.len();
        self.params.insert(
            name.to_string(),
            Param {
                data,
                shape: shape.to_vec(),
                grad: vec![0.0; n],
            },
        );
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).unwrap().0
    }

    pub fn get(&self, id: ParamId) -> &Param {
        self.params.get_index(id.0).unwrap().1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        self.params.get_index_mut(id.0).unwrap().1
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    /// Put a parameter on a tape. `trainable: false` detaches it: backward
    /// will not flow into it, realizing the frozen-module contracts.
    pub fn leaf(&self, tape: &Tape, id: ParamId, trainable: bool) -> Tensor {
        let p = self.get(id);
        tape.leaf_for_param(p.data.clone(), &p.shape, trainable, id.0)
    }

    /// Pull gradients accumulated on `tape` back into the store (adds on
    /// top of whatever is already in the grad buffers).
    pub fn absorb_grads(&mut self, tape: &Tape) {
        for (pid, g) in tape.param_grads() {
            let p = self.params.get_index_mut(pid).unwrap().1;
            debug_assert_eq!(p.grad.len(), g.len());
            for (dst, src) in p.grad.iter_mut().zip(&g) {
                *dst += src;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Snapshot of all gradients in registration order.
    pub fn grad_snapshot(&self) -> Vec<Vec<f64>> {
        self.params.values().map(|p| p.grad.clone()).collect()
    }

    /// Snapshot of all values in registration order.
    pub fn value_snapshot(&self) -> Vec<Vec<f64>> {
        self.params.values().map(|p| p.data.clone()).collect()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn frozen_leaf_blocks_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.add("w", &[2], Init::Xavier, &mut rng);
        let tape = Tape::new();
        let t = store.leaf(&tape, w, false);
        let loss = t.mul(&t).sum();
        tape.backward(&loss);
        store.absorb_grads(&tape);
        assert_eq!(store.get(w).grad, vec![0.0, 0.0]);
    }

    #[test]
    fn absorb_sums_over_multiple_leaves_of_same_param() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.add("w", &[1], Init::Ones, &mut rng);
        let tape = Tape::new();
        let a = store.leaf(&tape, w, true);
        let b = store.leaf(&tape, w, true);
        let loss = a.add(&b).sum();
        tape.backward(&loss);
        store.absorb_grads(&tape);
        assert_eq!(store.get(w).grad, vec![2.0]);
    }

    #[test]
    fn xavier_bounds_follow_fan_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let w = store.add("w", &[30, 20], Init::Xavier, &mut rng);
        let a = (6.0f64 / 50.0).sqrt();
        assert!(store.get(w).data.iter().all(|v| v.abs() <= a));
    }

    #[test]
    #[should_panic(expected = "parameter registered twice: dup")]
    fn duplicate_name_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add("dup", &[1], Init::Zeros, &mut rng);
        store.add("dup", &[1], Init::Zeros, &mut rng);
    }
}
