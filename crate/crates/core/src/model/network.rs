use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use super::{mix_seed, positional_encoding, ModelConfig, Params, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::lattice::InteractionGraph;
use crate::tensor::{Tape, Var};

thread_local! {
    static ATTENTION_SCORES: Cell<u64> = const { Cell::new(0) };
}

/// Number of query-key scores evaluated on this thread so far.
pub fn attention_score_count() -> u64 {
    ATTENTION_SCORES.with(Cell::get)
}

pub(crate) fn count_attention_scores(n: u64) {
    ATTENTION_SCORES.with(|c| c.set(c.get() + n));
}

/// Parameters recorded on a tape, addressable by name.
pub struct Bound {
    config: ModelConfig,
    order: Vec<Var>,
    by_name: HashMap<String, Var>,
}

impl Bound {
    /// Records every parameter as a leaf. With `track` the leaves collect gradients.
    pub fn bind(tape: &mut Tape, config: &ModelConfig, params: &Params, track: bool) -> Self {
        let mut order = Vec::with_capacity(params.len());
        let mut by_name = HashMap::with_capacity(params.len());
        for (name, t) in params.iter() {
            let mut t = t.clone();
            t.set_requires_grad(track);
            let v = tape.leaf(&t);
            order.push(v);
            by_name.insert(name.to_string(), v);
        }
        Bound {
            config: *config,
            order,
            by_name,
        }
    }

    /// Wraps vars already on a tape, in parameter order.
    pub fn from_vars(config: &ModelConfig, params: &Params, vars: &[Var]) -> Self {
        let by_name = params.names().iter().cloned().zip(vars.iter().copied()).collect();
        Bound {
            config: *config,
            order: vars.to_vec(),
            by_name,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Vars in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.order
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::ArtifactMismatch(format!("missing parameter {name}")))
    }

    fn has(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }
}

/// Dropout behaviour of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardMode {
    pub train: bool,
    pub seed: u64,
}

impl ForwardMode {
    pub const EVAL: ForwardMode = ForwardMode { train: false, seed: 0 };

    pub fn train(seed: u64) -> Self {
        ForwardMode { train: true, seed }
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rate: f64, site: u64) -> Result<Var> {
        tape.dropout(x, rate, self.train, mix_seed(&[self.seed, site]))
    }
}

fn linear(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{prefix}.weight"))?;
    let y = tape.matmul(x, w)?;
    let bias = format!("{prefix}.bias");
    if b.has(&bias) {
        tape.add_bias(y, b.var(&bias)?)
    } else {
        Ok(y)
    }
}

fn norm(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let g = b.var(&format!("{prefix}.gain"))?;
    let bias = b.var(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, bias, LAYER_NORM_EPS)
}

fn feed_forward(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, b, &format!("{prefix}.w1"), x)?;
    let h = tape.relu(h);
    linear(tape, b, &format!("{prefix}.w2"), h)
}

/// Upper-triangular mask of a `t × t` score block.
pub(crate) fn causal_mask(t: usize) -> Rc<Vec<bool>> {
    Rc::new((0..t * t).map(|idx| idx % t > idx / t).collect())
}

/// Multi-head attention. Queries are `[groups*tq, d]`, keys and values
/// `[groups*tk, d]`; each group attends only within itself.
#[allow(clippy::too_many_arguments)]
fn attention(
    tape: &mut Tape,
    b: &Bound,
    prefix: &str,
    xq: Var,
    xkv: Var,
    groups: usize,
    tq: usize,
    tk: usize,
    mask: Option<Rc<Vec<bool>>>,
) -> Result<Var> {
    let heads = b.config.num_heads;
    let scale = 1.0 / (b.config.head_dim() as f64).sqrt();
    let q = linear(tape, b, &format!("{prefix}.wq"), xq)?;
    let k = linear(tape, b, &format!("{prefix}.wk"), xkv)?;
    let v = linear(tape, b, &format!("{prefix}.wv"), xkv)?;
    let q = tape.split_heads(q, groups, tq, heads)?;
    let k = tape.split_heads(k, groups, tk, heads)?;
    let v = tape.split_heads(v, groups, tk, heads)?;
    let s = tape.bmm(q, k, true)?;
    count_attention_scores(tape.value(s).len() as u64);
    let mut s = tape.scale(s, scale);
    if let Some(m) = mask {
        s = tape.mask_fill(s, m, f64::NEG_INFINITY)?;
    }
    let w = tape.softmax(s)?;
    let o = tape.bmm(w, v, false)?;
    let o = tape.merge_heads(o, groups, tq, heads)?;
    linear(tape, b, &format!("{prefix}.wo"), o)
}

/// Graph convolution: `H⁰ = X W_in + b`, `Hˡ⁺¹ = relu(Â Hˡ Wˡ)`. Output `[N, d_graph]`.
pub fn encode_graph(tape: &mut Tape, b: &Bound, graph: &InteractionGraph) -> Result<Var> {
    let n = graph.num_nodes();
    if n == 0 {
        return Err(Error::invalid("graph has no nodes"));
    }
    let feats: Vec<f64> = graph.node_features().iter().flatten().copied().collect();
    let x = tape.constant(&[n, super::NODE_FEATURES], feats)?;
    let adj = tape.constant(&[n, n], graph.normalized_adjacency())?;
    let mut h = linear(tape, b, "gnn.input", x)?;
    for l in 0..b.config.graph_layers {
        let agg = tape.matmul(adj, h)?;
        let w = b.var(&format!("gnn.layer{l}.weight"))?;
        let z = tape.matmul(agg, w)?;
        h = tape.relu(z);
    }
    Ok(h)
}

/// Encoder context `[N, d_model]`.
pub fn encode(tape: &mut Tape, b: &Bound, graph: &InteractionGraph, mode: ForwardMode) -> Result<Var> {
    let n = graph.num_nodes();
    let rate = b.config.dropout;
    let h = encode_graph(tape, b, graph)?;
    let mut x = linear(tape, b, "enc.input", h)?;
    for blk in 0..b.config.encoder_blocks {
        let p = format!("enc.block{blk}");
        let y = norm(tape, b, &format!("{p}.ln1"), x)?;
        let a = attention(tape, b, &format!("{p}.attn"), y, y, 1, n, n, None)?;
        let a = mode.dropout(tape, a, rate, 2 * blk as u64)?;
        x = tape.add(x, a)?;
        let y = norm(tape, b, &format!("{p}.ln2"), x)?;
        let f = feed_forward(tape, b, &format!("{p}.ff"), y)?;
        let f = mode.dropout(tape, f, rate, 2 * blk as u64 + 1)?;
        x = tape.add(x, f)?;
    }
    norm(tape, b, "enc.ln_final", x)
}

/// Decoder logits `[batch*seq, 2]` for token rows `tokens` (row-major
/// `[batch, seq]`), attending causally to earlier tokens and fully to `context`.
pub fn decode_logits(
    tape: &mut Tape,
    b: &Bound,
    context: Var,
    tokens: &[usize],
    batch: usize,
    seq: usize,
    mode: ForwardMode,
) -> Result<Var> {
    let d = b.config.d_model;
    let rate = b.config.dropout;
    if tokens.len() != batch * seq || seq == 0 {
        return Err(Error::invalid(format!(
            "decoder input: {} tokens for batch {batch} × seq {seq}",
            tokens.len()
        )));
    }
    let cshape = tape.shape(context).to_vec();
    if cshape.len() != 2 || cshape[1] != d {
        return Err(Error::invalid(format!("context shape {cshape:?} must be [N, {d}]")));
    }
    let n_ctx = cshape[0];
    let table = b.var("dec.embedding")?;
    let emb = tape.embedding(table, tokens)?;
    let pe = positional_encoding(seq, d);
    let tiled: Vec<f64> = (0..batch).flat_map(|_| pe.iter().copied()).collect();
    let pe = tape.constant(&[batch * seq, d], tiled)?;
    let mut x = tape.add(emb, pe)?;
    let mask = causal_mask(seq);
    let site0 = 1000;
    for blk in 0..b.config.decoder_blocks {
        let p = format!("dec.block{blk}");
        let site = site0 + 3 * blk as u64;
        let y = norm(tape, b, &format!("{p}.ln1"), x)?;
        let a = attention(
            tape,
            b,
            &format!("{p}.self_attn"),
            y,
            y,
            batch,
            seq,
            seq,
            Some(mask.clone()),
        )?;
        let a = mode.dropout(tape, a, rate, site)?;
        x = tape.add(x, a)?;
        let y = norm(tape, b, &format!("{p}.ln2"), x)?;
        let c = attention(
            tape,
            b,
            &format!("{p}.cross_attn"),
            y,
            context,
            1,
            batch * seq,
            n_ctx,
            None,
        )?;
        let c = mode.dropout(tape, c, rate, site + 1)?;
        x = tape.add(x, c)?;
        let y = norm(tape, b, &format!("{p}.ln3"), x)?;
        let f = feed_forward(tape, b, &format!("{p}.ff"), y)?;
        let f = mode.dropout(tape, f, rate, site + 2)?;
        x = tape.add(x, f)?;
    }
    let y = norm(tape, b, "dec.ln_final", x)?;
    linear(tape, b, "head", y)
}

/// Teacher-forced input rows: `[BOS, σ₀, …, σ_{N−2}]` per configuration.
pub(crate) fn shifted_tokens(configs: &[&[u8]], n: usize) -> Vec<usize> {
    let mut tokens = Vec::with_capacity(configs.len() * n);
    for c in configs {
        tokens.push(super::BOS_TOKEN);
        tokens.extend(c[..n - 1].iter().map(|&b| b as usize));
    }
    tokens
}

/// Per-token `log p(σ_t | σ_<t)` as a `[batch*n]` var, row-major by configuration.
pub(crate) fn token_log_probs(
    tape: &mut Tape,
    b: &Bound,
    context: Var,
    configs: &[&[u8]],
    n: usize,
    mode: ForwardMode,
) -> Result<Var> {
    let batch = configs.len();
    if configs.iter().any(|c| c.len() != n) {
        return Err(Error::invalid(format!("every configuration must have {n} sites")));
    }
    let tokens = shifted_tokens(configs, n);
    let logits = decode_logits(tape, b, context, &tokens, batch, n, mode)?;
    let lp = tape.log_softmax(logits)?;
    let targets: Vec<usize> = configs.iter().flat_map(|c| c.iter().map(|&x| x as usize)).collect();
    tape.select(lp, &targets)
}
