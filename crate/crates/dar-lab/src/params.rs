//! Named parameter store and staging onto a graph.
//!
//! Parameters are registered once at model build time in a fixed order; that
//! order is the checkpoint schema and the optimizer-state layout, so it must
//! never depend on anything but the config.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tensor_core::{Graph, Real, Tensor, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamStore<F: Real> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<F>) -> ParamId {
        assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), Tensor::param(shape, values)));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].1
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Put every parameter on the graph. `trainable` leaves track gradients;
    /// evaluation passes stage constants, which skips grad allocation and
    /// keeps backward sweeps off the weights.
    pub fn stage(&self, g: &mut Graph<F>, trainable: bool) -> Staged {
        let ids = self
            .entries
            .iter()
            .map(|(_, t)| {
                let (r, c) = t.dims2();
                g.leaf_values(r, c, t.values.clone(), trainable && t.requires_grad)
            })
            .collect();
        Staged { ids }
    }

    /// Pull accumulated gradients off a staged graph back into the tensors.
    pub fn harvest_grads(&mut self, g: &Graph<F>, staged: &Staged) {
        for (idx, (_, t)) in self.entries.iter_mut().enumerate() {
            let node = staged.ids[idx];
            if g.requires_grad(node) {
                t.accumulate_grad(g.grad(node));
            }
        }
    }

    /// Overwrite values wholesale; used by the checkpoint loader. Order and
    /// shapes must match registration exactly.
    pub fn load_values(&mut self, name: &str, values: Vec<F>) -> Result<(), String> {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some((_, t)) if t.numel() == values.len() => {
                t.values = values;
                Ok(())
            }
            Some((_, t)) => Err(format!(
                "parameter {name}: expected {} values, checkpoint has {}",
                t.numel(),
                values.len()
            )),
            None => Err(format!("unknown parameter {name} in checkpoint")),
        }
    }
}

/// Graph handles for one staging of the store, indexable by `ParamId`.
#[derive(Debug, Clone)]
pub struct Staged {
    ids: Vec<TensorId>,
}

impl Staged {
    pub fn get(&self, id: ParamId) -> TensorId {
        self.ids[id.0]
    }

    /// Adopt externally built nodes (one per parameter, registration order).
    pub fn from_nodes(ids: Vec<TensorId>) -> Self {
        Staged { ids }
    }
}

// ---- initializers --------------------------------------------------------

/// All randomness flows through f64 so f32 and f64 models see the same draws.
pub fn normal_init<F: Real>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<F> {
    let dist = Normal::new(0.0, std).expect("std must be finite");
    (0..n).map(|_| F::from_f64(dist.sample(rng))).collect()
}

pub fn xavier_uniform<F: Real>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<F> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| F::from_f64(rng.random_range(-a..a)))
        .collect()
}

pub fn zeros<F: Real>(n: usize) -> Vec<F> {
    vec![F::zero(); n]
}

pub fn ones<F: Real>(n: usize) -> Vec<F> {
    vec![F::one(); n]
}

/// Row-major identity stacked above zeros: the fusion init that makes
/// concat([h, shallow]) @ w return h unchanged.
pub fn identity_over_zeros<F: Real>(d: usize) -> Vec<F> {
    let mut w = vec![F::zero(); 2 * d * d];
    for i in 0..d {
        w[i * d + i] = F::one();
    }
    w
}
