//! Maximum-likelihood training on measurement datasets.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{combined_digest, Dataset};
use crate::error::{Error, Result};
use crate::lattice::InteractionGraph;
use crate::model::network::token_log_probs;
use crate::model::{encode, mix_seed, Bound, ForwardMode, ModelCheckpoint, ModelConfig};
use crate::spin::SpinConfiguration;
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eta_min: f64,
    #[serde(rename = "T0")]
    pub t0: f64,
    #[serde(rename = "T_mult")]
    pub t_mult: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Kept for configuration parity; every dataset is held in memory.
    pub dataset_buffer: usize,
    pub datasets: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            learning_rate: 1e-3,
            eta_min: 1e-5,
            t0: 1.0,
            t_mult: 2.0,
            dropout: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 1,
            seed: 0,
            dataset_buffer: 50,
            datasets: Vec::new(),
            output_dir: PathBuf::from("."),
            resume: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min > 0.0 && self.eta_min < self.learning_rate) {
            return Err(Error::invalid(format!(
                "need 0 < eta_min < learning_rate, got {} and {}",
                self.eta_min, self.learning_rate
            )));
        }
        if !(self.t0 >= 1.0) || !(self.t_mult >= 1.0) {
            return Err(Error::invalid("need T0 >= 1 and T_mult >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("need 0 <= beta1, beta2 < 1, eps > 0, weight_decay >= 0"));
        }
        self.model.validate()
    }
}

/// `η_min + (η_max − η_min)(1 + cos(π T_cur / T_i)) / 2`
pub fn cosine_lr(t_cur: f64, t_i: f64, eta_max: f64, eta_min: f64) -> f64 {
    eta_min + (eta_max - eta_min) * (1.0 + (std::f64::consts::PI * t_cur / t_i).cos()) / 2.0
}

/// Learning rate after `t` epochs under warm restarts with periods
/// `T_i = T0 · T_mult^i`. A restart point belongs to the new period, so the
/// rate there is `η_max`.
pub fn lr_schedule(t: f64, config: &TrainConfig) -> f64 {
    let (t0, mult) = (config.t0, config.t_mult);
    let t = t.max(0.0);
    let (start, period) = if mult == 1.0 {
        let i = (t / t0).floor();
        (i * t0, t0)
    } else {
        let mut i = ((t / t0 * (mult - 1.0) + 1.0).ln() / mult.ln()).floor().max(0.0);
        let start_of = |i: f64| t0 * (mult.powf(i) - 1.0) / (mult - 1.0);
        // Guard the logarithm against rounding at period boundaries.
        while i > 0.0 && start_of(i) > t {
            i -= 1.0;
        }
        while start_of(i + 1.0) <= t {
            i += 1.0;
        }
        (start_of(i), t0 * mult.powf(i))
    };
    cosine_lr(t - start, period, config.learning_rate, config.eta_min)
}

/// Decoupled-weight-decay Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: &TrainConfig, sizes: &[usize]) -> Self {
        AdamW {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·wd·θ`. A non-finite gradient aborts the
    /// step before anything is modified.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], names: &[String], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid("optimizer: parameter block count mismatch"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != p.len() {
                return Err(Error::invalid(format!("optimizer: block {i} size mismatch")));
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                let name = names.get(i).map_or("?", String::as_str);
                return Err(Error::numerical(format!(
                    "non-finite gradient {} in {name}[{j}]; step aborted",
                    g[j]
                )));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] = p[j] - lr * mh / (vh.sqrt() + self.eps) - lr * self.weight_decay * p[j];
            }
        }
        Ok(())
    }
}

/// Distinct configurations of a batch with their multiplicities, in first-seen order.
pub fn dedup(batch: &[SpinConfiguration]) -> Vec<(SpinConfiguration, usize)> {
    let mut index: HashMap<&SpinConfiguration, usize> = HashMap::new();
    let mut out: Vec<(SpinConfiguration, usize)> = Vec::new();
    for c in batch {
        match index.get(c) {
            Some(&i) => out[i].1 += 1,
            None => {
                index.insert(c, out.len());
                out.push((c.clone(), 1));
            }
        }
    }
    out
}

/// Per-token NLL `−(1/(B·N)) Σ log p(σ)` of one batch on `graph`, recorded on
/// `tape` for the parameters in `b`. Repeated configurations are evaluated
/// once and weighted by their count.
pub fn nll_loss(
    tape: &mut Tape,
    b: &Bound,
    graph: &InteractionGraph,
    batch: &[SpinConfiguration],
    mode: ForwardMode,
) -> Result<crate::tensor::Var> {
    let n = graph.num_nodes();
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(c) = batch.iter().find(|c| c.len() != n) {
        return Err(Error::invalid(format!(
            "mixed lattice sizes in one batch: {} sites vs {n}",
            c.len()
        )));
    }
    let unique = dedup(batch);
    let rows: Vec<&[u8]> = unique.iter().map(|(c, _)| c.bits()).collect();
    let ctx = encode(tape, b, graph, mode)?;
    let lp = token_log_probs(tape, b, ctx, &rows, n, mode)?;
    let norm = -1.0 / (batch.len() * n) as f64;
    let weights: Vec<f64> = unique
        .iter()
        .flat_map(|(_, count)| std::iter::repeat(*count as f64 * norm).take(n))
        .collect();
    let w = tape.constant(&[weights.len()], weights)?;
    let weighted = tape.mul(lp, w)?;
    Ok(tape.sum(weighted))
}

/// Evaluation-mode per-token NLL over whole datasets.
pub fn evaluate_loss(ck: &ModelCheckpoint, datasets: &[Dataset]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for d in datasets {
        let graph = d.graph()?;
        for chunk in d.records.chunks(4096) {
            let mut tape = Tape::new();
            let b = Bound::bind(&mut tape, &ck.config, &ck.params, false);
            let loss = nll_loss(&mut tape, &b, &graph, chunk, ForwardMode::EVAL)?;
            let t = chunk.len() * graph.num_nodes();
            total += tape.value(loss)[0] * t as f64;
            tokens += t;
        }
    }
    if tokens == 0 {
        return Err(Error::invalid("no records to evaluate"));
    }
    Ok(total / tokens as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub step: u64,
    pub loss_per_token: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,step,loss_per_token,lr,seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?}",
            self.epoch, self.step, self.loss_per_token, self.lr, self.seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub metrics: Vec<EpochMetrics>,
}

struct Batch {
    dataset: usize,
    range: std::ops::Range<usize>,
}

/// Runs `config.epochs` epochs starting from `init`, continuing its step and
/// epoch counters. `on_epoch` sees each finished epoch (metrics plus the
/// checkpoint); a non-finite loss stops training before the epoch is reported.
pub fn train(
    datasets: &[Dataset],
    init: ModelCheckpoint,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &ModelCheckpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if datasets.is_empty() {
        return Err(Error::invalid("no training datasets"));
    }
    for d in datasets {
        d.validate()?;
        if d.records.is_empty() {
            return Err(Error::invalid("training dataset has no records"));
        }
    }
    let graphs = datasets.iter().map(Dataset::graph).collect::<Result<Vec<_>>>()?;
    let mut ck = init;
    ck.validate()?;
    ck.config.dropout = config.dropout;
    ck.meta.dataset_digest = combined_digest(datasets)?;
    ck.meta.seed = config.seed;

    let steps_per_epoch: usize = datasets
        .iter()
        .map(|d| d.records.len().div_ceil(config.batch_size))
        .sum();
    let sizes: Vec<usize> = ck.params.tensors().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(config, &sizes);
    let names = ck.params.names().to_vec();
    let mut metrics = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        let epoch = ck.meta.epoch;
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, epoch]));
        // Shuffle records within each dataset, cut into homogeneous batches,
        // then shuffle the batch order.
        let orders: Vec<Vec<usize>> = datasets
            .iter()
            .map(|d| {
                let mut o: Vec<usize> = (0..d.records.len()).collect();
                o.shuffle(&mut rng);
                o
            })
            .collect();
        let mut batches: Vec<Batch> = datasets
            .iter()
            .enumerate()
            .flat_map(|(i, d)| {
                (0..d.records.len()).step_by(config.batch_size).map(move |s| Batch {
                    dataset: i,
                    range: s..(s + config.batch_size).min(d.records.len()),
                })
            })
            .collect();
        batches.shuffle(&mut rng);

        let (mut loss_sum, mut token_sum) = (0.0, 0usize);
        let mut lr = config.learning_rate;
        for batch in &batches {
            let d = &datasets[batch.dataset];
            let records: Vec<SpinConfiguration> = orders[batch.dataset][batch.range.clone()]
                .iter()
                .map(|&i| d.records[i].clone())
                .collect();
            let step = ck.meta.step;
            lr = lr_schedule(step as f64 / steps_per_epoch as f64, config);
            let mut tape = Tape::new();
            let b = Bound::bind(&mut tape, &ck.config, &ck.params, true);
            let mode = ForwardMode::train(mix_seed(&[config.seed, step, 1]));
            let loss = nll_loss(&mut tape, &b, &graphs[batch.dataset], &records, mode)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite loss {value} at step {step}; last good checkpoint is from epoch {epoch}"
                )));
            }
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = b
                .vars()
                .iter()
                .zip(&sizes)
                .map(|(&v, &n)| tape.grad(v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec))
                .collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut param_refs: Vec<&mut [f64]> = ck.params.tensors_mut().iter_mut().map(|t| t.values_mut()).collect();
            opt.step(&mut param_refs, &grad_refs, &names, lr)?;
            let tokens = records.len() * graphs[batch.dataset].num_nodes();
            loss_sum += value * tokens as f64;
            token_sum += tokens;
            ck.meta.step += 1;
        }
        ck.meta.epoch += 1;
        let m = EpochMetrics {
            epoch: ck.meta.epoch,
            step: ck.meta.step,
            loss_per_token: loss_sum / token_sum as f64,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&m, &ck)?;
        metrics.push(m);
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        metrics,
    })
}

#[cfg(test)]
mod tests;
