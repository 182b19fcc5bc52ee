//! Parameterized layers: linear, 1-D convolution, layer norm, multi-head
//! self-attention, embedding table and dropout.
//!
//! Layers only hold [`ParamId`]s. Values live in a [`ParamStore`] and are
//! bound onto a tape once per forward pass through a [`Graph`].

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamId, Tape, Tensor, Var};

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, mut value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("parameter {name} registered twice")));
        }
        value.set_requires_grad(true);
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the parameter gradients of one backward pass into the grad slots.
    pub fn accumulate_grads(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        for (id, g) in tape.param_grads(grads) {
            self.tensors[id.0].accumulate_grad(g)?;
        }
        Ok(())
    }
}

/// One forward pass: the tape plus parameter bindings and the dropout stream.
/// Passing an RNG puts the pass in training mode.
pub struct Graph<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
    dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            dropout_rng: None,
        }
    }

    /// Continues recording on an existing tape.
    pub fn wrap(params: &'a ParamStore, tape: Tape) -> Self {
        Graph {
            tape,
            ..Self::new(params)
        }
    }

    pub fn training(params: &'a ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Graph {
            dropout_rng: Some(rng),
            ..Self::new(params)
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Tape variable for a parameter, bound on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(id, self.params.get(id));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn check_last(tape: &Tape, x: Var, want: usize, what: &str) -> Result<()> {
    let shape = tape.shape(x);
    match shape.last() {
        Some(&d) if d == want => Ok(()),
        _ => Err(Error::dim(format!(
            "{what} expects last extent {want}, got shape {shape:?}"
        ))),
    }
}

/// `y = x·W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.register(
            format!("{name}.weight"),
            uniform(&[in_dim, out_dim], bound, rng),
        )?;
        let bias = store.register(format!("{name}.bias"), uniform(&[out_dim], bound, rng))?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        check_last(&g.tape, x, self.in_dim, "linear")?;
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let y = g.tape.matmul(x, w)?;
        g.tape.add(y, b)
    }
}

/// 1-D convolution over time with "same" zero padding (cross-correlation).
#[derive(Clone, Debug)]
pub struct Conv1dLayer {
    /// `[out_ch, in_ch, kernel]`
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv1dLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "{name}: kernel {kernel} must be odd for same padding"
            )));
        }
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        let weight = store.register(
            format!("{name}.weight"),
            uniform(&[out_ch, in_ch, kernel], bound, rng),
        )?;
        let bias = store.register(format!("{name}.bias"), uniform(&[out_ch], bound, rng))?;
        Ok(Conv1dLayer {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
        })
    }

    /// `[batch, time, in_ch]` → `[batch, time, out_ch]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.tape.shape(x).len() != 3 {
            return Err(Error::dim(format!(
                "conv1d expects [batch, time, channels], got {:?}",
                g.tape.shape(x)
            )));
        }
        check_last(&g.tape, x, self.in_ch, "conv1d")?;
        let cols = g.tape.unfold_same(x, self.kernel)?;
        let w = g.param(self.weight);
        // [out, in, k] -> [in, k, out] -> [in·k, out], matching the unfold layout
        let w = g.tape.permute(w, &[1, 2, 0])?;
        let w = g.tape.reshape(w, [self.in_ch * self.kernel, self.out_ch])?;
        let y = g.tape.matmul(cols, w)?;
        let b = g.param(self.bias);
        g.tape.add(y, b)
    }
}

/// Normalization over the last axis with biased variance.
#[derive(Clone, Debug)]
pub struct LayerNormLayer {
    pub gain: ParamId,
    pub shift: ParamId,
    pub dim: usize,
    pub epsilon: f64,
}

impl LayerNormLayer {
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.register(format!("{name}.gain"), Tensor::ones([dim]))?;
        let shift = store.register(format!("{name}.shift"), Tensor::zeros([dim]))?;
        Ok(LayerNormLayer {
            gain,
            shift,
            dim,
            epsilon: Self::DEFAULT_EPSILON,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        check_last(&g.tape, x, self.dim, "layernorm")?;
        if self.epsilon <= 0.0 {
            return Err(Error::config("layernorm epsilon must be positive"));
        }
        let normed = self.normalize(&mut g.tape, x)?;
        let (gain, shift) = (g.param(self.gain), g.param(self.shift));
        let y = g.tape.mul(normed, gain)?;
        g.tape.add(y, shift)
    }

    /// The pre-affine part: `(x − mean) / sqrt(var + ε)`.
    pub fn normalize(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let last = tape.shape(x).len() - 1;
        let mean = tape.mean(x, &[last], true)?;
        let centered = tape.sub(x, mean)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.mean(sq, &[last], true)?;
        let var = tape.add_scalar(var, self.epsilon);
        let denom = tape.sqrt(var);
        tape.div(centered, denom)
    }
}

/// Full (unmasked) scaled dot-product self-attention with `n_heads` heads.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        n_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_heads == 0 || !dim.is_multiple_of(n_heads) {
            return Err(Error::config(format!(
                "{name}: dim {dim} not divisible by {n_heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng)?,
            n_heads,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward_with_weights(g, x).map(|(y, _)| y)
    }

    /// Output `[batch, time, dim]` and attention weights `[batch, heads, time, time]`.
    pub fn forward_with_weights(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let shape = g.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::dim(format!(
                "attention expects [batch, time, {}], got {shape:?}",
                self.dim
            )));
        }
        let (b, t, h) = (shape[0], shape[1], self.n_heads);
        let dh = self.dim / h;
        let heads = |lin: &Linear, g: &mut Graph| -> Result<Var> {
            let p = lin.forward(g, x)?;
            let p = g.tape.reshape(p, [b, t, h, dh])?;
            g.tape.permute(p, &[0, 2, 1, 3])
        };
        let q = heads(&self.query, g)?;
        let k = heads(&self.key, g)?;
        let v = heads(&self.value, g)?;
        let kt = g.tape.transpose(k)?;
        let scores = g.tape.matmul(q, kt)?;
        let scores = g.tape.scalar_mul(scores, 1.0 / (dh as f64).sqrt());
        let weights = g.tape.softmax(scores, 3)?;
        let ctx = g.tape.matmul(weights, v)?;
        let ctx = g.tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.tape.reshape(ctx, [b, t, self.dim])?;
        let y = self.output.forward(g, ctx)?;
        Ok((y, weights))
    }
}

/// Learned per-subject vectors.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub n_subjects: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub const INIT_STD: f64 = 0.02;

    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_subjects: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_subjects == 0 {
            return Err(Error::config(format!("{name}: needs at least one subject")));
        }
        let normal = Normal::new(0.0, Self::INIT_STD).expect("valid std");
        let data = (0..n_subjects * dim).map(|_| normal.sample(rng)).collect();
        let table = store.register(
            format!("{name}.table"),
            Tensor::new([n_subjects, dim], data)?,
        )?;
        Ok(EmbeddingTable {
            table,
            n_subjects,
            dim,
        })
    }

    /// Rows for `ids`, shaped `[ids.len(), dim]`.
    pub fn lookup(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if let Some(&id) = ids.iter().find(|&&i| i >= self.n_subjects) {
            return Err(Error::SubjectUnknown {
                id,
                n_subjects: self.n_subjects,
            });
        }
        let table = g.param(self.table);
        g.tape.index_select(table, ids)
    }
}

/// Inverted dropout; identity outside training or at rate 0.
pub fn dropout(g: &mut Graph, x: Var, rate: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    let Some(rng) = g.dropout_rng.as_deref_mut() else {
        return Ok(x);
    };
    if rate == 0.0 {
        return Ok(x);
    }
    let scale = 1.0 / (1.0 - rate);
    let shape = g.tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
        .collect();
    let mask = g.tape.constant(Tensor::new(shape, mask)?);
    g.tape.mul(x, mask)
}
