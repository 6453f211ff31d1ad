use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::{Real, Tensor, Var};
use crate::error::{Error, Result};

static NEXT_STORE_KEY: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named trainable arrays owned by one model.
///
/// Every store carries a process-unique key so a [`super::Graph`] can tell
/// which stores are being trained and which are frozen.
#[derive(Debug)]
pub struct ParamStore<F> {
    key: u64,
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    index: BTreeMap<String, usize>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Clone for ParamStore<F> {
    fn clone(&self) -> Self {
        Self {
            key: NEXT_STORE_KEY.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            index: self.index.clone(),
        }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            key: NEXT_STORE_KEY.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub(crate) fn key(&self) -> u64 {
        self.key
    }

    /// Registers a new array. Names must be unique within the store.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrites the value of `name`, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::Format(format!(
                "parameter {name}: shape {:?} does not match stored {:?}",
                value.shape(),
                self.values[id.0].shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Same names and values in another precision.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for (name, v) in self.iter() {
            out.add(name, v.cast());
        }
        out
    }

    /// Hex SHA-256 over names, shapes and the raw bits of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Gradients produced by [`super::Graph::backward`].
#[derive(Debug)]
pub struct Grads<F> {
    pub(crate) params: BTreeMap<(u64, usize), Tensor<F>>,
    pub(crate) vars: BTreeMap<usize, Tensor<F>>,
}

impl<F: Real> Grads<F> {
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(&(store.key(), id.0))
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<F>> {
        self.vars.get(&v.0)
    }

    /// Global L2 norm over every gradient belonging to `store`.
    pub fn norm(&self, store: &ParamStore<F>) -> F {
        self.params
            .iter()
            .filter(|((k, _), _)| *k == store.key())
            .map(|(_, g)| g.data().iter().map(|&v| v * v).sum::<F>())
            .sum::<F>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// First/second-moment adaptive optimizer over one [`ParamStore`].
#[derive(Debug)]
pub struct Adam<F> {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(store: &ParamStore<F>, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: store.values.iter().map(|t| vec![F::zero(); t.len()]).collect(),
            v: store.values.iter().map(|t| vec![F::zero(); t.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Grads<F>, lr: f64) -> f64 {
        self.t += 1;
        let norm = grads.norm(store).as_f64();
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c && norm > 0.0 => c / norm,
            _ => 1.0,
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step = F::lit(lr * bc2.sqrt() / bc1);
        let (b1f, b2f) = (F::lit(b1), F::lit(b2));
        let eps = F::lit(self.cfg.eps * bc2.sqrt());
        let clip = F::lit(clip);
        let key = store.key();
        for (i, value) in store.values.iter_mut().enumerate() {
            let Some(g) = grads.params.get(&(key, i)) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &gr), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gr = gr * clip;
                *mi = b1f * *mi + (F::one() - b1f) * gr;
                *vi = b2f * *vi + (F::one() - b2f) * gr * gr;
                *p = *p - step * *mi / (vi.sqrt() + eps);
            }
        }
        norm
    }
}
