//! Named parameter storage and binding onto a [`Tape`].

use rand::Rng;
use sha2::{Digest, Sha256};

use super::tape::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named weight tensors belonging to one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    /// Uniform init in `±1/sqrt(fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut DetRng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::from_vec(shape, data).expect("init shape"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Overwrite weights from `(name, tensor)` pairs. Every parameter must be
    /// present with a matching shape.
    pub fn load_named<'a>(&mut self, named: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &Tensor> = named.into_iter().collect();
        for (name, value) in &mut self.entries {
            let src = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing weight `{name}`")))?;
            if src.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "weight `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    value.shape()
                )));
            }
            *value = (*src).clone();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian weight bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Place every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(_, t)| tape.leaf(t.clone(), trainable))
                .collect(),
        }
    }
}

/// Tape handles for one [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Extract per-parameter gradients; parameters that did not influence
    /// the output get zeros.
    pub fn grads(&self, grads: &mut Grads, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.ids())
            .map(|(v, id)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
            .collect()
    }
}
