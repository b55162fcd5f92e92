//! Named parameter storage shared by all learnable components.
//!
//! Every trainable array lives in a [`ParamStore`] under a unique path such
//! as `dynamic_volume/gabor1/freq`. The tape references parameters by
//! [`ParamId`]; the trainer owns updates and groups them by learning rate.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

/// Dense 2-D value; every tape node and parameter is one of these.
pub type Value = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Canonical volume networks (color/density/confidence/feature heads).
    Volumes,
    /// Transform stacks: affine net and coupling layers.
    Transforms,
    /// Per-frame latent code network.
    TimeEmbed,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Value,
    pub grad: Value,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, group: ParamGroup, value: Value) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        let grad = Value::zeros(value.raw_dim());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group,
            value,
            grad,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
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

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Value {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Add per-parameter gradients produced by a backward pass.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (idx, g) in grads.by_param.iter().enumerate() {
            if let Some(g) = g {
                self.entries[idx].grad += g;
            }
        }
    }

    /// True when every gradient entry is finite.
    pub fn grads_finite(&self) -> std::result::Result<(), String> {
        for e in &self.entries {
            if !e.grad.iter().all(|v| v.is_finite()) {
                return Err(e.name.clone());
            }
        }
        Ok(())
    }

    pub fn ids_in_group(&self, group: ParamGroup) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.group == group)
            .map(|(i, _)| ParamId(i))
            .collect()
    }
}

/// Per-parameter gradients from one backward pass, indexed by `ParamId`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub by_param: Vec<Option<Value>>,
}

impl Gradients {
    pub fn new(n: usize) -> Self {
        Self {
            by_param: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Value> {
        self.by_param[id.0].as_ref()
    }

    pub fn add(&mut self, id: ParamId, g: &Value) {
        match &mut self.by_param[id.0] {
            Some(acc) => *acc += g,
            slot => *slot = Some(g.clone()),
        }
    }
}

/// Uniform Glorot-style init for a `[rows, cols]` weight matrix.
pub fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Value {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Value::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Normal init with the given standard deviation.
pub fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Value {
    // Box-Muller keeps us off rand_distr for a single use.
    Value::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
    })
}

pub fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, lo: f64, hi: f64) -> Value {
    Value::from_shape_fn((rows, cols), |_| rng.gen_range(lo..hi))
}

pub fn zeros(rows: usize, cols: usize) -> Value {
    Value::zeros((rows, cols))
}
