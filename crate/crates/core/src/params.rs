//! Named parameter storage shared by the model, optimizer, and checkpoints.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, TensorId};

/// Index of a parameter inside a [`ParamStore`]. Stable for the lifetime
/// of the store.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub usize);

pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered table of named parameters. Order is creation order and fixes
/// the serialization layout and the optimizer state layout.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>) -> ParamId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "param {name}: data does not match shape"
        );
        self.params.push(Param { name, shape, data });
        ParamId(self.params.len() - 1)
    }

    /// Fan-in-scaled uniform init (He-style): U(-b, b) with
    /// b = gain * sqrt(6/fan_in). A gain below 1 compensates for blocks
    /// that sum several branches, which would otherwise grow activation
    /// variance at every stage.
    pub fn add_he_uniform(
        &mut self,
        name: String,
        shape: Vec<usize>,
        fan_in: usize,
        gain: f32,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = gain * libm::sqrtf(6.0 / fan_in as f32);
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, shape, data)
    }

    pub fn add_zeros(&mut self, name: String, shape: Vec<usize>) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}

/// Per-forward-pass mapping from parameters to graph leaves, so grads can
/// be read back after `backward`.
pub struct ForwardCtx {
    bindings: Vec<Option<TensorId>>,
}

impl ForwardCtx {
    pub fn new(store: &ParamStore) -> Self {
        ForwardCtx { bindings: vec![None; store.len()] }
    }

    /// Insert (or reuse) the graph leaf carrying this parameter's value.
    pub fn bind(&mut self, g: &mut Graph, store: &ParamStore, id: ParamId) -> TensorId {
        if let Some(t) = self.bindings[id.0] {
            return t;
        }
        let p = store.get(id);
        let t = g.leaf(&p.shape, p.data.clone(), true);
        self.bindings[id.0] = Some(t);
        t
    }

    pub fn bound(&self, id: ParamId) -> Option<TensorId> {
        self.bindings[id.0]
    }

    /// Gradient of a parameter after `backward`, zeros if the parameter
    /// never entered the graph.
    pub fn grad<'g>(&self, g: &'g Graph, store: &ParamStore, id: ParamId) -> Vec<f32> {
        match self.bindings[id.0].and_then(|t| g.grad(t).map(|s| s.to_vec())) {
            Some(v) => v,
            None => vec![0.0; store.get(id).data.len()],
        }
    }
}
