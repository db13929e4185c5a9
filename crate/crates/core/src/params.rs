//! Named parameters, gradient accumulation, SGD and checkpoints.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Error, Result};
use crate::reader::ByteReader;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{axpy, dot, Tensor};

/// Trainable tensors and their accumulated gradients, keyed by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.grads.remove(&name);
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Records parameter `name` on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        match self.params.get(name) {
            Some(t) => Ok(tape.param(name, t.clone())),
            None => Err(Error::Config(format!("missing parameter {name}"))),
        }
    }

    /// Adds the gradients of every parameter bound on `tape`.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        for (var, name) in tape.params() {
            let Some(g) = grads.get(*var) else { continue };
            let shape = self
                .params
                .get(name)
                .map(|p| p.shape().to_vec())
                .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
            if g.shape() != shape.as_slice() {
                return dim_err(format!("gradient of {name} has shape {:?}", g.shape()));
            }
            match self.grads.get_mut(name) {
                Some(acc) => acc.add_assign(g)?,
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    /// Adds `decay · p` to the gradient of every parameter that has one.
    pub fn add_weight_decay(&mut self, decay: f64) {
        for (name, g) in self.grads.iter_mut() {
            if let Some(p) = self.params.get(name) {
                axpy(decay, p.data(), g.data_mut());
            }
        }
    }

    /// Euclidean norm of all accumulated gradients taken together.
    pub fn grad_norm(&self) -> f64 {
        self.grads.values().map(|g| dot(g.data(), g.data())).sum::<f64>().sqrt()
    }

    /// Rescales the gradients so their joint norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let c = max_norm / norm;
            for g in self.grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= c);
            }
        }
        norm
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn check_grads(&self) -> Result<()> {
        if let Some(name) = self.params.keys().find(|n| !self.grads.contains_key(*n)) {
            return contract_err(format!("no gradient for parameter {name}"));
        }
        Ok(())
    }

    /// Plain SGD: `p ← p − lr·∇p` for every parameter, then zero gradients.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        self.check_grads()?;
        for (name, p) in self.params.iter_mut() {
            let g = &self.grads[name];
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
        }
        self.zero_grad();
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::read_checkpoint(&bytes)
    }

    /// Checkpoint layout: `MNCK`, u32 version, then per parameter
    /// u32 name length, name bytes, u32 rank, u64 per dimension and
    /// little-endian f64 data. All integers little-endian.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for (name, t) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.error("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(format!("unsupported checkpoint version {version}")));
        }
        let mut store = Self::new();
        while r.pos < bytes.len() {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| r.error("parameter name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            store.insert(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MNCK";
const CHECKPOINT_VERSION: u32 = 1;

/// One constant-learning-rate phase of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPhase {
    pub lr: f64,
    pub iters: usize,
}

/// Piecewise-constant learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub phases: Vec<LrPhase>,
}

impl Default for LrSchedule {
    /// 0.001 for 32k iterations, then 0.0001 for 8k.
    fn default() -> Self {
        Self {
            phases: vec![
                LrPhase {
                    lr: 0.001,
                    iters: 32_000,
                },
                LrPhase {
                    lr: 0.0001,
                    iters: 8_000,
                },
            ],
        }
    }
}

impl LrSchedule {
    pub fn total_iters(&self) -> usize {
        self.phases.iter().map(|p| p.iters).sum()
    }

    /// Learning rate at zero-based iteration `iter`; the last phase extends
    /// past the end of the schedule.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let mut end = 0;
        for p in &self.phases {
            end += p.iters;
            if iter < end {
                return p.lr;
            }
        }
        self.phases.last().map_or(0.0, |p| p.lr)
    }

    /// Rescales every phase so the schedule spans `total` iterations.
    pub fn scaled_to(&self, total: usize) -> Self {
        let old = self.total_iters().max(1);
        let mut phases: Vec<LrPhase> = self
            .phases
            .iter()
            .map(|p| LrPhase {
                lr: p.lr,
                iters: p.iters * total / old,
            })
            .collect();
        let assigned: usize = phases.iter().map(|p| p.iters).sum();
        if let Some(last) = phases.last_mut() {
            last.iters += total - assigned;
        }
        Self { phases }
    }
}

/// SGD with optional momentum, velocity `v ← μ·v + lr·∇p`, `p ← p − v`.
///
/// With zero momentum a step is exactly [`ParameterStore::sgd_step`].
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParameterStore, lr: f64) -> Result<()> {
        if self.momentum == 0.0 {
            return store.sgd_step(lr);
        }
        store.check_grads()?;
        for (name, p) in store.params.iter_mut() {
            let g = &store.grads[name];
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + lr * gv;
                *pv -= *vv;
            }
        }
        store.zero_grad();
        Ok(())
    }
}
