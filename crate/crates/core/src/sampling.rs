//! Autoregressive sampling from a model, site by site in snake order.
//!
//! Every sample owns a ChaCha8 stream selected by its index, and site `k`
//! consumes the `k`-th uniform `u` of that stream: the bit is 1 when
//! `u < p(σ_k = 1 | σ_<k)`. The cached sampler evaluates the same arithmetic
//! in the same order as the full decoder pass, so both produce identical bits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lattice::InteractionGraph;
use crate::model::{attention_score_count, positional_encoding, Context, Model, BOS_TOKEN, LAYER_NORM_EPS};
use crate::spin::SpinConfiguration;
use crate::tensor::kernels;

const UNCACHED_CHUNK: usize = 128;
const CACHED_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SamplingStats {
    /// Query-key scores evaluated while decoding (encoder excluded).
    pub attention_scores: u64,
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn check_count(count: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    Ok(())
}

/// Full decoder pass over the whole prefix at every site: O(N³) attention work per sample.
pub fn sample(model: &Model, graph: &InteractionGraph, count: usize, seed: u64) -> Result<Vec<SpinConfiguration>> {
    sample_with_stats(model, graph, count, seed).map(|(s, _)| s)
}

pub fn sample_with_stats(
    model: &Model,
    graph: &InteractionGraph,
    count: usize,
    seed: u64,
) -> Result<(Vec<SpinConfiguration>, SamplingStats)> {
    check_count(count)?;
    let ctx = model.context(graph)?;
    let n = ctx.num_sites();
    let start = attention_score_count();
    let mut out = Vec::with_capacity(count);
    for first in (0..count).step_by(UNCACHED_CHUNK) {
        let size = UNCACHED_CHUNK.min(count - first);
        let mut rngs: Vec<ChaCha8Rng> = (0..size).map(|i| stream(seed, (first + i) as u64)).collect();
        let mut bits = vec![vec![0u8; n]; size];
        for k in 0..n {
            let prefixes: Vec<&[u8]> = bits.iter().map(|b| &b[..k]).collect();
            let p1 = model.conditionals(&ctx, &prefixes)?;
            for ((b, rng), p) in bits.iter_mut().zip(&mut rngs).zip(p1) {
                b[k] = draw(rng, p)?;
            }
        }
        out.extend(
            bits.into_iter()
                .map(SpinConfiguration::new)
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let stats = SamplingStats {
        attention_scores: attention_score_count() - start,
    };
    Ok((out, stats))
}

fn draw(rng: &mut ChaCha8Rng, p1: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&p1) {
        return Err(Error::numerical(format!("conditional probability {p1} outside [0, 1]")));
    }
    let u: f64 = rng.gen();
    Ok(u8::from(u < p1))
}

/// Incremental decoding with cached keys and values: O(N²) attention work per sample.
pub fn sample_cached(
    model: &Model,
    graph: &InteractionGraph,
    count: usize,
    seed: u64,
) -> Result<Vec<SpinConfiguration>> {
    sample_cached_with_stats(model, graph, count, seed).map(|(s, _)| s)
}

pub fn sample_cached_with_stats(
    model: &Model,
    graph: &InteractionGraph,
    count: usize,
    seed: u64,
) -> Result<(Vec<SpinConfiguration>, SamplingStats)> {
    check_count(count)?;
    let ctx = model.context(graph)?;
    let weights = Weights::gather(model, &ctx)?;
    let mut scores = 0u64;
    let mut out = Vec::with_capacity(count);
    for first in (0..count).step_by(CACHED_CHUNK) {
        let size = CACHED_CHUNK.min(count - first);
        let mut rngs: Vec<ChaCha8Rng> = (0..size).map(|i| stream(seed, (first + i) as u64)).collect();
        let bits = weights.decode_chunk(&mut rngs, &mut scores)?;
        out.extend(
            bits.into_iter()
                .map(SpinConfiguration::new)
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok((
        out,
        SamplingStats {
            attention_scores: scores,
        },
    ))
}

struct Linear<'a> {
    w: &'a [f64],
    b: Option<&'a [f64]>,
    fan_in: usize,
    fan_out: usize,
}

impl Linear<'_> {
    fn apply(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.fan_out];
        kernels::matmul(x, self.w, rows, self.fan_in, self.fan_out, &mut y);
        if let Some(b) = self.b {
            kernels::add_bias(&mut y, b);
        }
        y
    }
}

struct Norm<'a> {
    gain: &'a [f64],
    bias: &'a [f64],
}

impl Norm<'_> {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.gain.len();
        let rows = x.len() / cols;
        let mut out = vec![0.0; x.len()];
        let (mut mean, mut rstd) = (vec![0.0; rows], vec![0.0; rows]);
        kernels::layer_norm_rows(
            x,
            self.gain,
            self.bias,
            LAYER_NORM_EPS,
            cols,
            &mut out,
            &mut mean,
            &mut rstd,
        );
        out
    }
}

struct Attention<'a> {
    q: Linear<'a>,
    k: Linear<'a>,
    v: Linear<'a>,
    o: Linear<'a>,
}

struct Block<'a> {
    ln1: Norm<'a>,
    self_attn: Attention<'a>,
    ln2: Norm<'a>,
    cross_attn: Attention<'a>,
    /// Cross-attention keys and values of the context, `[H, N, dk]`.
    cross_k: Vec<f64>,
    cross_v: Vec<f64>,
    ln3: Norm<'a>,
    w1: Linear<'a>,
    w2: Linear<'a>,
}

struct Weights<'a> {
    n: usize,
    d: usize,
    heads: usize,
    dk: usize,
    embedding: &'a [f64],
    pe: Vec<f64>,
    blocks: Vec<Block<'a>>,
    ln_final: Norm<'a>,
    head: Linear<'a>,
}

/// `[rows, H·dk]` → `[H, rows, dk]`
fn split_heads(x: &[f64], rows: usize, heads: usize, dk: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for h in 0..heads {
            let dst = (h * rows + r) * dk;
            out[dst..dst + dk].copy_from_slice(&x[r * heads * dk + h * dk..r * heads * dk + (h + 1) * dk]);
        }
    }
    out
}

/// Ascending-order dot product; matches one output element of `kernels::matmul`.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Softmax-weighted sum of value rows for one query:
/// `out = softmax(scale · q·Kᵀ) · V` over the `len` rows of `keys`/`values`.
fn attend(q: &[f64], keys: &[f64], values: &[f64], len: usize, scale: f64, out: &mut [f64]) {
    let dk = q.len();
    let mut s: Vec<f64> = (0..len).map(|j| dot(q, &keys[j * dk..(j + 1) * dk]) * scale).collect();
    let raw = s.clone();
    kernels::softmax_rows(&raw, len, &mut s);
    kernels::matmul(&s, &values[..len * dk], 1, len, dk, out);
}

impl<'a> Weights<'a> {
    fn gather(model: &'a Model, ctx: &Context) -> Result<Self> {
        let cfg = model.config();
        let p = model.params();
        let get = |name: &str| -> Result<&'a [f64]> { Ok(p.get(name)?.values()) };
        let lin = |prefix: &str, fan_in: usize, fan_out: usize| -> Result<Linear<'a>> {
            Ok(Linear {
                w: get(&format!("{prefix}.weight"))?,
                b: Some(get(&format!("{prefix}.bias"))?),
                fan_in,
                fan_out,
            })
        };
        let norm = |prefix: &str| -> Result<Norm<'a>> {
            Ok(Norm {
                gain: get(&format!("{prefix}.gain"))?,
                bias: get(&format!("{prefix}.bias"))?,
            })
        };
        let (d, dff, heads) = (cfg.d_model, cfg.d_ff, cfg.num_heads);
        let dk = cfg.head_dim();
        let n = ctx.num_sites();
        let attn = |prefix: &str| -> Result<Attention<'a>> {
            Ok(Attention {
                q: lin(&format!("{prefix}.wq"), d, d)?,
                k: lin(&format!("{prefix}.wk"), d, d)?,
                v: lin(&format!("{prefix}.wv"), d, d)?,
                o: lin(&format!("{prefix}.wo"), d, d)?,
            })
        };
        let mut blocks = Vec::with_capacity(cfg.decoder_blocks);
        for blk in 0..cfg.decoder_blocks {
            let pre = format!("dec.block{blk}");
            let cross_attn = attn(&format!("{pre}.cross_attn"))?;
            let cross_k = split_heads(&cross_attn.k.apply(ctx.values(), n), n, heads, dk);
            let cross_v = split_heads(&cross_attn.v.apply(ctx.values(), n), n, heads, dk);
            blocks.push(Block {
                ln1: norm(&format!("{pre}.ln1"))?,
                self_attn: attn(&format!("{pre}.self_attn"))?,
                ln2: norm(&format!("{pre}.ln2"))?,
                cross_attn,
                cross_k,
                cross_v,
                ln3: norm(&format!("{pre}.ln3"))?,
                w1: lin(&format!("{pre}.ff.w1"), d, dff)?,
                w2: lin(&format!("{pre}.ff.w2"), dff, d)?,
            });
        }
        Ok(Weights {
            n,
            d,
            heads,
            dk,
            embedding: get("dec.embedding")?,
            pe: positional_encoding(n, d),
            blocks,
            ln_final: norm("dec.ln_final")?,
            head: lin("head", d, 2)?,
        })
    }

    fn decode_chunk(&self, rngs: &mut [ChaCha8Rng], scores: &mut u64) -> Result<Vec<Vec<u8>>> {
        let (n, d, heads, dk) = (self.n, self.d, self.heads, self.dk);
        let s_count = rngs.len();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut bits = vec![vec![0u8; n]; s_count];
        // Self-attention caches per block, `[S, H, N, dk]`.
        let cache_len = s_count * heads * n * dk;
        let mut k_cache = vec![vec![0.0; cache_len]; self.blocks.len()];
        let mut v_cache = vec![vec![0.0; cache_len]; self.blocks.len()];
        let mut merged = vec![0.0; s_count * d];
        for t in 0..n {
            let mut x = vec![0.0; s_count * d];
            for (s, row) in x.chunks_exact_mut(d).enumerate() {
                let tok = if t == 0 { BOS_TOKEN } else { bits[s][t - 1] as usize };
                let emb = &self.embedding[tok * d..(tok + 1) * d];
                for ((o, &e), &p) in row.iter_mut().zip(emb).zip(&self.pe[t * d..(t + 1) * d]) {
                    *o = e + p;
                }
            }
            for (bi, blk) in self.blocks.iter().enumerate() {
                let y = blk.ln1.apply(&x);
                let q = blk.self_attn.q.apply(&y, s_count);
                let k = blk.self_attn.k.apply(&y, s_count);
                let v = blk.self_attn.v.apply(&y, s_count);
                for s in 0..s_count {
                    for h in 0..heads {
                        let base = (s * heads + h) * n * dk;
                        let dst = base + t * dk;
                        let src = s * d + h * dk;
                        k_cache[bi][dst..dst + dk].copy_from_slice(&k[src..src + dk]);
                        v_cache[bi][dst..dst + dk].copy_from_slice(&v[src..src + dk]);
                        attend(
                            &q[src..src + dk],
                            &k_cache[bi][base..base + (t + 1) * dk],
                            &v_cache[bi][base..base + (t + 1) * dk],
                            t + 1,
                            scale,
                            &mut merged[src..src + dk],
                        );
                    }
                }
                *scores += (s_count * heads * (t + 1)) as u64;
                let a = blk.self_attn.o.apply(&merged, s_count);
                add_in_place(&mut x, &a);

                let y = blk.ln2.apply(&x);
                let q = blk.cross_attn.q.apply(&y, s_count);
                for s in 0..s_count {
                    for h in 0..heads {
                        let src = s * d + h * dk;
                        let kv = h * n * dk..(h + 1) * n * dk;
                        attend(
                            &q[src..src + dk],
                            &blk.cross_k[kv.clone()],
                            &blk.cross_v[kv],
                            n,
                            scale,
                            &mut merged[src..src + dk],
                        );
                    }
                }
                *scores += (s_count * heads * n) as u64;
                let c = blk.cross_attn.o.apply(&merged, s_count);
                add_in_place(&mut x, &c);

                let y = blk.ln3.apply(&x);
                let mut hdn = blk.w1.apply(&y, s_count);
                kernels::relu_inplace(&mut hdn);
                let f = blk.w2.apply(&hdn, s_count);
                add_in_place(&mut x, &f);
            }
            let y = self.ln_final.apply(&x);
            let logits = self.head.apply(&y, s_count);
            let mut probs = vec![0.0; logits.len()];
            kernels::softmax_rows(&logits, 2, &mut probs);
            for (s, rng) in rngs.iter_mut().enumerate() {
                bits[s][t] = draw(rng, probs[2 * s + 1])?;
            }
        }
        Ok(bits)
    }
}

/// `x ← x + y`, the tape's residual addition.
fn add_in_place(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += *b;
    }
}
