use std::cell::RefCell;
use std::collections::HashMap;

use super::network::{encode, token_log_probs, Bound, ForwardMode};
use super::{decode_logits, ModelCheckpoint, ModelConfig, Params, BOS_TOKEN};
use crate::error::{Error, Result};
use crate::lattice::InteractionGraph;
use crate::observables::AmplitudeProvider;
use crate::spin::SpinConfiguration;
use crate::tensor::{kernels, Tape};

/// Configurations per decoder pass during inference.
const CHUNK: usize = 128;

/// Encoder output for one interaction graph, `[N, d_model]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    n: usize,
    values: Vec<f64>,
}

impl Context {
    pub fn num_sites(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// A validated checkpoint used for evaluation (dropout off).
#[derive(Debug, Clone)]
pub struct Model {
    checkpoint: ModelCheckpoint,
}

impl Model {
    pub fn new(checkpoint: ModelCheckpoint) -> Result<Self> {
        checkpoint.validate()?;
        Ok(Model { checkpoint })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.checkpoint.config
    }

    pub fn params(&self) -> &Params {
        &self.checkpoint.params
    }

    pub fn checkpoint(&self) -> &ModelCheckpoint {
        &self.checkpoint
    }

    pub fn into_checkpoint(self) -> ModelCheckpoint {
        self.checkpoint
    }

    fn bind(&self, tape: &mut Tape) -> Bound {
        Bound::bind(tape, self.config(), self.params(), false)
    }

    pub fn context(&self, graph: &InteractionGraph) -> Result<Context> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let c = encode(&mut tape, &b, graph, ForwardMode::EVAL)?;
        Ok(Context {
            n: graph.num_nodes(),
            values: tape.value(c).to_vec(),
        })
    }

    /// `log p(σ)` for each configuration, by teacher forcing.
    pub fn log_probs(&self, ctx: &Context, configs: &[SpinConfiguration]) -> Result<Vec<f64>> {
        let n = ctx.n;
        for c in configs {
            if c.len() != n {
                return Err(Error::invalid(format!(
                    "configuration has {} sites, model context has {n}",
                    c.len()
                )));
            }
        }
        let mut out = Vec::with_capacity(configs.len());
        for chunk in configs.chunks(CHUNK) {
            let mut tape = Tape::new();
            let b = self.bind(&mut tape);
            let cv = tape.constant(&[n, self.config().d_model], ctx.values.clone())?;
            let rows: Vec<&[u8]> = chunk.iter().map(|c| c.bits()).collect();
            let lp = token_log_probs(&mut tape, &b, cv, &rows, n, ForwardMode::EVAL)?;
            let v = tape.value(lp);
            out.extend((0..chunk.len()).map(|r| v[r * n..(r + 1) * n].iter().sum::<f64>()));
        }
        if out.iter().any(|v| v.is_nan()) {
            return Err(Error::numerical("model produced NaN log-probabilities"));
        }
        Ok(out)
    }

    /// `p(σ_k = 1 | prefix)` for equal-length prefixes `σ_0 … σ_{k−1}`, from a
    /// full decoder pass over `[BOS, prefix]`.
    pub fn conditionals(&self, ctx: &Context, prefixes: &[&[u8]]) -> Result<Vec<f64>> {
        let Some(first) = prefixes.first() else {
            return Ok(Vec::new());
        };
        let k = first.len();
        if k >= ctx.n || prefixes.iter().any(|p| p.len() != k) {
            return Err(Error::invalid(format!(
                "prefixes must share one length below {}",
                ctx.n
            )));
        }
        let seq = k + 1;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let cv = tape.constant(&[ctx.n, self.config().d_model], ctx.values.clone())?;
        let mut tokens = Vec::with_capacity(prefixes.len() * seq);
        for p in prefixes {
            tokens.push(BOS_TOKEN);
            tokens.extend(p.iter().map(|&x| x as usize));
        }
        let logits = decode_logits(&mut tape, &b, cv, &tokens, prefixes.len(), seq, ForwardMode::EVAL)?;
        let lv = tape.value(logits);
        let mut probs = [0.0; 2];
        Ok((0..prefixes.len())
            .map(|r| {
                let row = (r * seq + k) * 2;
                kernels::softmax_rows(&lv[row..row + 2], 2, &mut probs);
                probs[1]
            })
            .collect())
    }

    /// Raw per-site logits `[logit(0), logit(1)]` of one configuration under
    /// teacher forcing; row `i` conditions on sites `0..i`.
    pub fn site_logits(&self, ctx: &Context, config: &SpinConfiguration) -> Result<Vec<[f64; 2]>> {
        let n = ctx.n;
        if config.len() != n {
            return Err(Error::invalid(format!(
                "configuration has {} sites, model context has {n}",
                config.len()
            )));
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let cv = tape.constant(&[n, self.config().d_model], ctx.values.clone())?;
        let mut tokens = Vec::with_capacity(n);
        tokens.push(BOS_TOKEN);
        tokens.extend(config.bits()[..n - 1].iter().map(|&x| x as usize));
        let logits = decode_logits(&mut tape, &b, cv, &tokens, 1, n, ForwardMode::EVAL)?;
        Ok(tape.value(logits).chunks(2).map(|r| [r[0], r[1]]).collect())
    }

    pub fn provider<'a>(&'a self, graph: &InteractionGraph) -> Result<ModelProvider<'a>> {
        Ok(ModelProvider {
            model: self,
            context: self.context(graph)?,
            memo: RefCell::new(HashMap::new()),
        })
    }
}

/// Model wavefunction `Ψ(σ) = √p(σ)` for one graph, memoizing evaluations.
pub struct ModelProvider<'a> {
    model: &'a Model,
    context: Context,
    memo: RefCell<HashMap<Vec<u8>, f64>>,
}

impl ModelProvider<'_> {
    pub fn context(&self) -> &Context {
        &self.context
    }
}

impl AmplitudeProvider for ModelProvider<'_> {
    fn num_sites(&self) -> usize {
        self.context.n
    }

    fn log_probs(&self, configs: &[SpinConfiguration]) -> Result<Vec<f64>> {
        let missing: Vec<SpinConfiguration> = {
            let memo = self.memo.borrow();
            let mut seen = std::collections::HashSet::new();
            configs
                .iter()
                .filter(|c| !memo.contains_key(c.bits()) && seen.insert(c.bits()))
                .cloned()
                .collect()
        };
        if !missing.is_empty() {
            let lp = self.model.log_probs(&self.context, &missing)?;
            let mut memo = self.memo.borrow_mut();
            for (c, v) in missing.into_iter().zip(lp) {
                memo.insert(c.bits().to_vec(), v);
            }
        }
        let memo = self.memo.borrow();
        Ok(configs.iter().map(|c| memo[c.bits()]).collect())
    }
}
