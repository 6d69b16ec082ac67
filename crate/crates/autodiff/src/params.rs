//! Named parameter storage and per-graph parameter binding.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Gradients, Graph, Var};
use crate::spectral;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Power-iteration vectors of a spectrally normalized weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    spectral: Option<SpectralState>,
}

/// Owns the trainable tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

const SPECTRAL_WARMUP: usize = 50;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            value,
            spectral: None,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Registers a weight whose first axis indexes output rows; the forward
    /// pass divides it by its spectral-norm estimate.
    pub fn add_spectral<R: Rng + ?Sized>(&mut self, name: impl Into<String>, value: Tensor, rng: &mut R) -> ParamId {
        let rows = value.shape()[0];
        let cols = value.len() / rows;
        let mut u: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        let mut v = vec![0.0; cols];
        spectral::power_iterate(value.data(), rows, cols, &mut u, &mut v, SPECTRAL_WARMUP);
        self.entries.push(Entry {
            name: name.into(),
            value,
            spectral: Some(SpectralState { u, v }),
        });
        ParamId(self.entries.len() - 1)
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn spectral(&self, id: ParamId) -> Option<&SpectralState> {
        self.entries[id.0].spectral.as_ref()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Advances every spectral estimate by `iters` power-iteration rounds.
    pub fn refresh_spectral(&mut self, iters: usize) {
        for e in &mut self.entries {
            if let Some(s) = &mut e.spectral {
                let rows = e.value.shape()[0];
                let cols = e.value.len() / rows;
                spectral::power_iterate(e.value.data(), rows, cols, &mut s.u, &mut s.v, iters);
            }
        }
    }

    /// The effective (normalized) weight as seen by the forward pass.
    pub fn effective(&self, id: ParamId) -> Tensor {
        let e = &self.entries[id.0];
        match &e.spectral {
            None => e.value.clone(),
            Some(s) => {
                let rows = e.value.shape()[0];
                let cols = e.value.len() / rows;
                let sigma = spectral::bilinear(e.value.data(), rows, cols, &s.u, &s.v);
                e.value.map(|x| x / sigma)
            }
        }
    }

    /// Flat list of named tensors, including power-iteration state.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.push((e.name.clone(), e.value.clone()));
            if let Some(s) = &e.spectral {
                out.push((format!("{}#sn_u", e.name), Tensor::from_vec(&[s.u.len()], s.u.clone()).expect("len")));
                out.push((format!("{}#sn_v", e.name), Tensor::from_vec(&[s.v.len()], s.v.clone()).expect("len")));
            }
        }
        out
    }

    /// Overwrites values from `named_tensors` output; every entry must be present.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let lookup = |name: &str| -> Result<&Tensor> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))
        };
        for e in &mut self.entries {
            let t = lookup(&e.name)?;
            t.check_same(&e.value, &e.name)?;
            e.value = t.clone();
            if let Some(s) = &mut e.spectral {
                s.u = lookup(&format!("{}#sn_u", e.name))?.data().to_vec();
                s.v = lookup(&format!("{}#sn_v", e.name))?.data().to_vec();
            }
        }
        Ok(())
    }
}

/// Lazily places a store's parameters onto one [`Graph`].
///
/// A frozen binder inserts constants, so no weight gradients are computed
/// for that network while gradients still flow through it.
pub struct Binder<'s> {
    store: &'s ParamStore,
    trainable: bool,
    raw: Vec<Option<Var>>,
    effective: Vec<Option<Var>>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            store,
            trainable,
            raw: vec![None; store.len()],
            effective: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn get(&mut self, g: &mut Graph, id: ParamId) -> Result<Var> {
        if let Some(v) = self.effective[id.0] {
            return Ok(v);
        }
        let e = &self.store.entries[id.0];
        let raw = g.leaf(e.value.clone(), self.trainable);
        let eff = match &e.spectral {
            None => raw,
            Some(s) => g.spectral_norm(raw, &s.u, &s.v)?,
        };
        self.raw[id.0] = Some(raw);
        self.effective[id.0] = Some(eff);
        Ok(eff)
    }

    /// One gradient tensor per store entry; unused parameters get zeros.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.store
            .entries
            .iter()
            .zip(&self.raw)
            .map(|(e, v)| {
                v.and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(e.value.shape()))
            })
            .collect()
    }

    /// Whether the parameter took part in the recorded forward pass.
    pub fn is_bound(&self, id: ParamId) -> bool {
        self.raw[id.0].is_some()
    }
}
