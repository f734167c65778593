//! Named parameter storage and the small layer helpers shared by the
//! backbone, sampler, and grouper.

use fewshape_numerics::io::Checkpoint;
use fewshape_numerics::rng::{self, Rng};
use fewshape_numerics::{Graph, Tensor, Var};

use crate::error::{Error, Result};

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, name-addressable parameter registry. Order is creation order and
/// stays stable, so optimizer moments and checkpoints line up by index.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor) {
        debug_assert_eq!(self.tensors[id.0].shape(), t.shape());
        self.tensors[id.0] = t;
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    /// Creates graph leaves for every parameter.
    pub fn bind(&self, g: &Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.leaf(t.clone())).collect(),
        }
    }

    /// Gradients of every parameter after a backward pass, in store order.
    pub fn grads(&self, g: &Graph, bound: &Bound) -> Result<Vec<Tensor>> {
        bound
            .vars
            .iter()
            .map(|&v| g.grad_of(v).map_err(Error::from))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            ck.insert(name.clone(), t.clone());
        }
        ck
    }

    /// Replaces every parameter from a checkpoint; missing entries or shape
    /// differences are reported with the exact mismatch.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let mut diffs = Vec::new();
        let mut incoming = Vec::with_capacity(self.tensors.len());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            match ck.get(name) {
                None => diffs.push(format!("missing '{name}'")),
                Some(loaded) if loaded.shape() != t.shape() => diffs.push(format!(
                    "'{name}' has shape {:?}, model expects {:?}",
                    loaded.shape(),
                    t.shape()
                )),
                Some(loaded) => incoming.push(loaded.clone()),
            }
        }
        if ck.len() != self.names.len() && diffs.is_empty() {
            diffs.push(format!(
                "checkpoint has {} entries, model has {}",
                ck.len(),
                self.names.len()
            ));
        }
        if !diffs.is_empty() {
            return Err(Error::CheckpointMismatch(diffs.join("; ")));
        }
        self.tensors = incoming;
        Ok(())
    }
}

/// Parameter leaves bound to one graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Convolution layer (kernel + bias) with fixed stride and padding.
#[derive(Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}/w"),
            rng::fan_in_uniform(rng, kh * kw * cin, &[kh, kw, cin, cout]),
        );
        let b = store.add(format!("{name}/b"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    pub fn apply(&self, g: &Graph, bp: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, bp.var(self.w), self.stride, self.pad)?;
        Ok(g.add_vec_last(y, bp.var(self.b))?)
    }
}

/// Fully-connected layer rows-in, rows-out.
#[derive(Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, cin: usize, cout: usize) -> Self {
        let w = store.add(
            format!("{name}/w"),
            rng::fan_in_uniform(rng, cin, &[cin, cout]),
        );
        let b = store.add(format!("{name}/b"), Tensor::zeros(&[cout]));
        Self { w, b }
    }

    pub fn apply(&self, g: &Graph, bp: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, bp.var(self.w))?;
        Ok(g.add_vec_last(y, bp.var(self.b))?)
    }
}

/// Layer norm over the last axis with learned scale and shift.
#[derive(Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}/gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.add(format!("{name}/beta"), Tensor::zeros(&[dim]));
        Self {
            gamma,
            beta,
            eps: Self::EPS,
        }
    }

    pub fn apply(&self, g: &Graph, bp: &Bound, x: Var) -> Result<Var> {
        let n = g.layer_norm_last(x, self.eps)?;
        let scaled = g.mul_vec_last(n, bp.var(self.gamma))?;
        Ok(g.add_vec_last(scaled, bp.var(self.beta))?)
    }
}
