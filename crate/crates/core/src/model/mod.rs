//! The encoder-decoder network: a graph convolution over the interaction
//! graph, a transformer encoder producing the context, and a causal
//! transformer decoder emitting per-site occupation conditionals.

mod inference;
pub(crate) mod network;

pub use inference::{Context, Model, ModelProvider};
pub use network::{attention_score_count, decode_logits, encode, encode_graph, Bound, ForwardMode};

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BOS_TOKEN: usize = 2;
pub const VOCAB_SIZE: usize = 3;
pub const NODE_FEATURES: usize = 4;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub d_graph: usize,
    pub num_heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub graph_layers: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            d_ff: 128,
            d_graph: 64,
            num_heads: 8,
            encoder_blocks: 1,
            decoder_blocks: 3,
            graph_layers: 2,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.d_graph == 0 || self.num_heads == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn push_linear(out: &mut Vec<Slot>, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
    out.push(Slot {
        name: format!("{prefix}.weight"),
        shape: vec![fan_in, fan_out],
        init: Init::Glorot,
    });
    if bias {
        out.push(Slot {
            name: format!("{prefix}.bias"),
            shape: vec![fan_out],
            init: Init::Zeros,
        });
    }
}

fn push_norm(out: &mut Vec<Slot>, prefix: &str, d: usize) {
    out.push(Slot {
        name: format!("{prefix}.gain"),
        shape: vec![d],
        init: Init::Ones,
    });
    out.push(Slot {
        name: format!("{prefix}.bias"),
        shape: vec![d],
        init: Init::Zeros,
    });
}

fn push_attention(out: &mut Vec<Slot>, prefix: &str, d: usize) {
    for p in ["wq", "wk", "wv", "wo"] {
        push_linear(out, &format!("{prefix}.{p}"), d, d, true);
    }
}

fn push_ff(out: &mut Vec<Slot>, prefix: &str, d: usize, d_ff: usize) {
    push_linear(out, &format!("{prefix}.w1"), d, d_ff, true);
    push_linear(out, &format!("{prefix}.w2"), d_ff, d, true);
}

/// Every parameter of the architecture, in checkpoint order.
pub fn layout(config: &ModelConfig) -> Vec<Slot> {
    let (d, dg, dff) = (config.d_model, config.d_graph, config.d_ff);
    let mut out = Vec::new();
    push_linear(&mut out, "gnn.input", NODE_FEATURES, dg, true);
    for l in 0..config.graph_layers {
        push_linear(&mut out, &format!("gnn.layer{l}"), dg, dg, false);
    }
    push_linear(&mut out, "enc.input", dg, d, true);
    for b in 0..config.encoder_blocks {
        let p = format!("enc.block{b}");
        push_norm(&mut out, &format!("{p}.ln1"), d);
        push_attention(&mut out, &format!("{p}.attn"), d);
        push_norm(&mut out, &format!("{p}.ln2"), d);
        push_ff(&mut out, &format!("{p}.ff"), d, dff);
    }
    push_norm(&mut out, "enc.ln_final", d);
    out.push(Slot {
        name: "dec.embedding".into(),
        shape: vec![VOCAB_SIZE, d],
        init: Init::Glorot,
    });
    for b in 0..config.decoder_blocks {
        let p = format!("dec.block{b}");
        push_norm(&mut out, &format!("{p}.ln1"), d);
        push_attention(&mut out, &format!("{p}.self_attn"), d);
        push_norm(&mut out, &format!("{p}.ln2"), d);
        push_attention(&mut out, &format!("{p}.cross_attn"), d);
        push_norm(&mut out, &format!("{p}.ln3"), d);
        push_ff(&mut out, &format!("{p}.ff"), d, dff);
    }
    push_norm(&mut out, "dec.ln_final", d);
    push_linear(&mut out, "head", d, 2, true);
    out
}

/// Glorot bound for a `[fan_in, fan_out]` weight.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Named parameter tensors in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        let (names, tensors): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Params { names, tensors, index }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
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

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.position(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::ArtifactMismatch(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self
            .position(name)
            .ok_or_else(|| Error::ArtifactMismatch(format!("missing parameter {name}")))?;
        Ok(&mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
    pub dataset_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: Params,
    pub meta: TrainingMeta,
}

impl ModelCheckpoint {
    /// Checks that every slot of the architecture has exactly one tensor of
    /// the declared shape; lists every offending name otherwise.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let slots = layout(&self.config);
        let mut problems = Vec::new();
        for s in &slots {
            match self.params.position(&s.name) {
                None => problems.push(format!("{} (missing)", s.name)),
                Some(i) if self.params.tensors[i].shape() != s.shape.as_slice() => problems.push(format!(
                    "{} (shape {:?}, expected {:?})",
                    s.name,
                    self.params.tensors[i].shape(),
                    s.shape
                )),
                _ => {}
            }
        }
        for name in self.params.names() {
            if !slots.iter().any(|s| &s.name == name) {
                problems.push(format!("{name} (unexpected)"));
            }
        }
        if self.params.names().len() != self.params.index.len() {
            problems.push("duplicate parameter names".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ArtifactMismatch(format!(
                "checkpoint does not match architecture: {}",
                problems.join(", ")
            )))
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }
}

/// Glorot-uniform weights, zero biases, unit layer-norm gains.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelCheckpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = layout(config)
        .into_iter()
        .map(|slot| {
            let n: usize = slot.shape.iter().product();
            let values = match slot.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Glorot => {
                    let bound = glorot_bound(slot.shape[0], slot.shape[1]);
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                }
            };
            let t = Tensor::new(&slot.shape, values).expect("layout shapes are consistent");
            (slot.name, t)
        })
        .collect();
    Ok(ModelCheckpoint {
        config: *config,
        params: Params::from_entries(entries),
        meta: TrainingMeta {
            seed,
            ..TrainingMeta::default()
        },
    })
}

/// Sinusoidal encoding `PE[t, 2i] = sin(t / 10000^{2i/d})`, `PE[t, 2i+1] = cos(...)`.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d {
            let k = (i / 2 * 2) as f64;
            let angle = t as f64 / 10000f64.powf(k / d as f64);
            pe[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Gradient check of the whole network on a 2×2 instance with dropout off.
///
/// The scalar is the per-token NLL of a fixed batch of four configurations at
/// δ/Ω = 1.1, R_b/a = 1.15. `max_per_block` limits the coordinates visited in
/// each parameter tensor.
pub fn full_gradcheck(
    ck: &ModelCheckpoint,
    h: f64,
    tol: f64,
    max_per_block: Option<usize>,
) -> Result<crate::tensor::GradcheckReport> {
    ck.validate()?;
    let settings = crate::lattice::ExperimentalSettings::new(1.1, 1.15, 16.0)?;
    let graph = crate::lattice::square_graph(2, &settings)?;
    let rows: [&[u8]; 4] = [&[1, 0, 0, 1], &[0, 1, 1, 0], &[0, 0, 0, 1], &[1, 1, 0, 0]];
    let blocks: Vec<(String, Tensor)> = ck.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let f = |tape: &mut crate::tensor::Tape, vars: &[crate::tensor::Var]| {
        let b = Bound::from_vars(&ck.config, &ck.params, vars);
        let ctx = encode(tape, &b, &graph, ForwardMode::EVAL)?;
        let lp = network::token_log_probs(tape, &b, ctx, &rows, 4, ForwardMode::EVAL)?;
        let s = tape.sum(lp);
        Ok(tape.scale(s, -1.0 / 16.0))
    };
    crate::tensor::gradcheck(f, &blocks, h, tol, max_per_block)
}

/// splitmix64 finalizer; derives independent seeds from structured keys.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
