//! The envelope decoder: pre-conv, optional subject conditioner, a stack of
//! feed-forward transformer blocks, and a linear head.
//!
//! ```text
//! eeg [B,T,C] ─ pre_conv ─(+ subject embedding)─(+ positions)─ block × N ─ norm ─ head ─ [B,T]
//! ```

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    dropout, Conv1dLayer, EmbeddingTable, Graph, LayerNormLayer, Linear, MultiHeadAttention,
    ParamStore,
};
use crate::rng::{stream, Stream};
use crate::tensor::{Tape, Tensor, Var};

/// Architecture and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub conv_kernel_pre: usize,
    pub ffn_kernel: usize,
    pub ffn_expansion: usize,
    pub dropout_rate: f64,
    pub n_subjects: usize,
    pub use_conditioner: bool,
    /// `false` selects the post-LN ablation.
    pub use_pre_ln: bool,
    pub positional_encoding: bool,
    pub sample_rate_hz: u32,
    pub segment_seconds: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 64,
            hidden_dim: 128,
            n_blocks: 8,
            n_heads: 2,
            conv_kernel_pre: 3,
            ffn_kernel: 3,
            ffn_expansion: 4,
            dropout_rate: 0.1,
            n_subjects: 0,
            use_conditioner: false,
            use_pre_ln: true,
            positional_encoding: true,
            sample_rate_hz: 64,
            segment_seconds: 5.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("hidden_dim", self.hidden_dim),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("ffn_expansion", self.ffn_expansion),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        for (name, k) in [
            ("conv_kernel_pre", self.conv_kernel_pre),
            ("ffn_kernel", self.ffn_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::config(format!("{name} {k} must be odd")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.use_conditioner && self.n_subjects == 0 {
            return Err(Error::config("use_conditioner requires n_subjects >= 1"));
        }
        self.segment_samples().map(|_| ())
    }

    /// `sample_rate_hz · segment_seconds`, required to be a positive integer.
    pub fn segment_samples(&self) -> Result<usize> {
        let n = self.sample_rate_hz as f64 * self.segment_seconds;
        if !(n >= 1.0) || (n - n.round()).abs() > 1e-9 {
            return Err(Error::config(format!(
                "{} Hz x {} s is not a positive whole number of samples",
                self.sample_rate_hz, self.segment_seconds
            )));
        }
        Ok(n.round() as usize)
    }
}

/// Self-attention and convolutional feed-forward sub-layers, each residual.
#[derive(Clone, Debug)]
pub struct PreLnFftBlock {
    pub ln1: LayerNormLayer,
    pub ln2: LayerNormLayer,
    pub attn: MultiHeadAttention,
    pub conv_a: Conv1dLayer,
    pub conv_b: Conv1dLayer,
    pub dim: usize,
}

impl PreLnFftBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = cfg.hidden_dim;
        let wide = d * cfg.ffn_expansion;
        Ok(PreLnFftBlock {
            ln1: LayerNormLayer::new(store, &format!("{name}.ln1"), d)?,
            ln2: LayerNormLayer::new(store, &format!("{name}.ln2"), d)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.n_heads, rng)?,
            conv_a: Conv1dLayer::new(store, &format!("{name}.conv_a"), d, wide, cfg.ffn_kernel, rng)?,
            conv_b: Conv1dLayer::new(store, &format!("{name}.conv_b"), wide, d, cfg.ffn_kernel, rng)?,
            dim: d,
        })
    }

    fn ffn(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let a = self.conv_a.forward(g, x)?;
        let a = g.tape.relu(a);
        self.conv_b.forward(g, a)
    }

    /// Pre-LN: `h + drop(attn(ln1 h))`, then `h + drop(ffn(ln2 h))`.
    /// Post-LN: `ln1(h + drop(attn h))`, then `ln2(h + drop(ffn h))`.
    pub fn forward(&self, g: &mut Graph, h: Var, use_pre_ln: bool, dropout_rate: f64) -> Result<Var> {
        let shape = g.tape.shape(h);
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::dim(format!(
                "block expects [batch, time, {}], got {shape:?}",
                self.dim
            )));
        }
        if use_pre_ln {
            let x = self.ln1.forward(g, h)?;
            let a = self.attn.forward(g, x)?;
            let a = dropout(g, a, dropout_rate)?;
            let h = g.tape.add(h, a)?;
            let x = self.ln2.forward(g, h)?;
            let f = self.ffn(g, x)?;
            let f = dropout(g, f, dropout_rate)?;
            g.tape.add(h, f)
        } else {
            let a = self.attn.forward(g, h)?;
            let a = dropout(g, a, dropout_rate)?;
            let s = g.tape.add(h, a)?;
            let h = self.ln1.forward(g, s)?;
            let f = self.ffn(g, h)?;
            let f = dropout(g, f, dropout_rate)?;
            let s = g.tape.add(h, f)?;
            self.ln2.forward(g, s)
        }
    }
}

/// Fixed sinusoidal table `[time, dim]`: even channels `sin(p / 10000^(2i/dim))`,
/// odd channels the matching cosine.
pub fn sinusoidal_encoding(time: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; time * dim];
    for p in 0..time {
        for c in 0..dim {
            let i = c / 2;
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[p * dim + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new([time, dim], data).expect("shape matches data")
}

/// Adds the sinusoidal table to `h: [batch, time, dim]`.
pub fn add_positional_encoding(tape: &mut Tape, h: Var) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(format!(
            "positional encoding expects [batch, time, dim], got {shape:?}"
        )));
    }
    let pe = tape.constant(sinusoidal_encoding(shape[1], shape[2]));
    tape.add(h, pe)
}

/// The full decoder with its parameters.
#[derive(Clone, Debug)]
pub struct DecoderModel {
    config: ModelConfig,
    params: ParamStore,
    pub pre_conv: Conv1dLayer,
    pub conditioner: Option<EmbeddingTable>,
    pub blocks: Vec<PreLnFftBlock>,
    /// Applied before the head in pre-LN mode only; allocated in both modes
    /// so the parameter count does not depend on the normalization placement.
    pub final_norm: LayerNormLayer,
    pub head: Linear,
}

impl DecoderModel {
    /// Initializes from the `init` sub-stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_rng(config, &mut stream(seed, Stream::Init))
    }

    pub fn with_rng(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let p = &mut params;
        let pre_conv = Conv1dLayer::new(
            p,
            "pre_conv",
            config.in_channels,
            config.hidden_dim,
            config.conv_kernel_pre,
            rng,
        )?;
        let conditioner = if config.use_conditioner {
            Some(EmbeddingTable::new(
                p,
                "conditioner",
                config.n_subjects,
                config.hidden_dim,
                rng,
            )?)
        } else {
            None
        };
        let blocks = (0..config.n_blocks)
            .map(|i| PreLnFftBlock::new(p, &format!("blocks.{i}"), &config, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNormLayer::new(p, "final_norm", config.hidden_dim)?;
        let head = Linear::new(p, "head", config.hidden_dim, 1, rng)?;
        Ok(DecoderModel {
            config,
            params,
            pre_conv,
            conditioner,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn count_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// `eeg: [batch, time, in_channels]` → envelope `[batch, time]`.
    ///
    /// `subject_ids` is required when the conditioner is enabled and ignored
    /// otherwise.
    pub fn forward(&self, g: &mut Graph, eeg: Var, subject_ids: Option<&[usize]>) -> Result<Var> {
        let shape = g.tape.shape(eeg).to_vec();
        if shape.len() != 3 || shape[2] != self.config.in_channels {
            return Err(Error::dim(format!(
                "model expects [batch, time, {}], got {shape:?}",
                self.config.in_channels
            )));
        }
        let (b, t) = (shape[0], shape[1]);
        let mut h = self.pre_conv.forward(g, eeg)?;
        if let Some(cond) = &self.conditioner {
            let ids = subject_ids.ok_or_else(|| Error::contract("conditioned model needs subject ids"))?;
            if ids.len() != b {
                return Err(Error::dim(format!(
                    "{} subject ids for a batch of {b}",
                    ids.len()
                )));
            }
            let e = cond.lookup(g, ids)?;
            let e = g.tape.reshape(e, [b, 1, self.config.hidden_dim])?;
            h = g.tape.add(h, e)?;
        }
        if self.config.positional_encoding {
            h = add_positional_encoding(&mut g.tape, h)?;
        }
        for block in &self.blocks {
            h = block.forward(g, h, self.config.use_pre_ln, self.config.dropout_rate)?;
        }
        if self.config.use_pre_ln {
            h = self.final_norm.forward(g, h)?;
        }
        let y = self.head.forward(g, h)?;
        g.tape.reshape(y, [b, t])
    }

    /// Inference-mode forward on a plain tensor.
    pub fn predict(&self, eeg: &Tensor, subject_ids: Option<&[usize]>) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let x = g.tape.constant(eeg.clone());
        let y = self.forward(&mut g, x, subject_ids)?;
        Ok(g.tape.value(y).clone())
    }

    /// Replaces parameter values by name; every parameter must be supplied
    /// with a matching shape.
    pub fn load_params<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, value) in entries {
            let id = self
                .params
                .id_of(name)
                .ok_or_else(|| Error::config(format!("unexpected parameter {name}")))?;
            let slot = self.params.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::dim(format!(
                    "parameter {name}: stored shape {:?}, model expects {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(value.data());
            seen[id.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::config(format!(
                "missing parameter {}",
                self.params.iter().nth(i).map(|(n, _)| n).unwrap_or("?")
            )));
        }
        Ok(())
    }
}

/// Closed-form parameter count for a configuration.
pub fn expected_parameter_count(cfg: &ModelConfig) -> usize {
    let (c, d, e) = (cfg.in_channels, cfg.hidden_dim, cfg.hidden_dim * cfg.ffn_expansion);
    let pre = d * c * cfg.conv_kernel_pre + d;
    let cond = if cfg.use_conditioner { cfg.n_subjects * d } else { 0 };
    let block = 2 * (2 * d) + 4 * (d * d + d) + (e * d * cfg.ffn_kernel + e) + (d * e * cfg.ffn_kernel + d);
    pre + cond + cfg.n_blocks * block + 2 * d + (d + 1)
}
