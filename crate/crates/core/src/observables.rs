//! Sample-based estimators of physical observables.
//!
//! Off-diagonal estimators need wavefunction ratios `Ψ(σ')/Ψ(σ)`, supplied by
//! an [`AmplitudeProvider`]. Ratios are formed in log space as
//! `exp(½(log p(σ') − log p(σ)))`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::exact::{diagonal_energy, OracleState};
use crate::lattice::{ExperimentalSettings, InteractionGraph};
use crate::spin::SpinConfiguration;

/// Positive real wavefunction over occupation configurations.
pub trait AmplitudeProvider {
    fn num_sites(&self) -> usize;

    /// `log p(σ) = 2 log Ψ(σ)` for a batch of configurations.
    fn log_probs(&self, configs: &[SpinConfiguration]) -> Result<Vec<f64>>;

    fn psi(&self, config: &SpinConfiguration) -> Result<f64> {
        Ok((0.5 * self.log_probs(std::slice::from_ref(config))?[0]).exp())
    }
}

/// `Ψ(σ) = √p(σ)` of an exact state. For ground states this is the true
/// amplitude; for thermal states it is the positive wavefunction sharing the
/// occupation distribution.
pub struct OracleProvider<'a> {
    state: &'a OracleState,
}

impl<'a> OracleProvider<'a> {
    pub fn new(state: &'a OracleState) -> Self {
        OracleProvider { state }
    }
}

impl AmplitudeProvider for OracleProvider<'_> {
    fn num_sites(&self) -> usize {
        self.state.num_sites()
    }

    fn log_probs(&self, configs: &[SpinConfiguration]) -> Result<Vec<f64>> {
        configs
            .iter()
            .map(|c| {
                check_len(c, self.num_sites())?;
                Ok(match self.state.amplitudes() {
                    Some(a) => 2.0 * a[c.index()].ln(),
                    None => self.state.probabilities()[c.index()].ln(),
                })
            })
            .collect()
    }
}

/// Equal superposition of all `2^N` configurations.
pub struct UniformProvider {
    n: usize,
}

impl UniformProvider {
    pub fn new(n: usize) -> Self {
        UniformProvider { n }
    }
}

impl AmplitudeProvider for UniformProvider {
    fn num_sites(&self) -> usize {
        self.n
    }

    fn log_probs(&self, configs: &[SpinConfiguration]) -> Result<Vec<f64>> {
        let lp = -(self.n as f64) * std::f64::consts::LN_2;
        configs.iter().map(|c| check_len(c, self.n).map(|_| lp)).collect()
    }
}

fn check_len(c: &SpinConfiguration, n: usize) -> Result<()> {
    if c.len() != n {
        return Err(Error::invalid(format!(
            "configuration has {} sites, expected {n}",
            c.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservableEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub sample_count: usize,
}

impl ObservableEstimate {
    /// Mean and i.i.d. standard error (sample standard deviation / √n).
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::invalid("cannot estimate from zero samples"));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Ok(ObservableEstimate {
            mean,
            std_error,
            sample_count: n,
        })
    }
}

/// `(1/N) |Σ_i (−1)^i (n_i − ½)|` with `i` the snake index.
pub fn staggered_value(bits: &[u8]) -> f64 {
    let s: f64 = bits
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let d = b as f64 - 0.5;
            if i % 2 == 0 {
                d
            } else {
                -d
            }
        })
        .sum();
    s.abs() / bits.len() as f64
}

fn uniform_len(samples: &[SpinConfiguration]) -> Result<usize> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty sample set"))?;
    let n = first.len();
    if samples.iter().any(|s| s.len() != n) {
        return Err(Error::invalid("samples have differing lengths"));
    }
    Ok(n)
}

pub fn staggered_magnetization(samples: &[SpinConfiguration]) -> Result<ObservableEstimate> {
    uniform_len(samples)?;
    let values: Vec<f64> = samples.iter().map(|s| staggered_value(s.bits())).collect();
    ObservableEstimate::from_values(&values)
}

/// Configurations one spin flip away, in snake-site order.
pub fn ssf_set(config: &SpinConfiguration) -> Vec<SpinConfiguration> {
    (0..config.len()).map(|i| config.flipped(i)).collect()
}

/// Memoized log-probabilities of every configuration a set of samples and
/// their single-flip neighbours touch; one batched provider call.
struct LogProbTable(HashMap<SpinConfiguration, f64>);

impl LogProbTable {
    fn build(samples: &[SpinConfiguration], provider: &dyn AmplitudeProvider) -> Result<Self> {
        let mut needed: Vec<SpinConfiguration> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for s in samples {
            if !seen.insert(s.clone()) {
                continue;
            }
            needed.push(s.clone());
        }
        let distinct = needed.clone();
        for s in &distinct {
            for nb in ssf_set(s) {
                if seen.insert(nb.clone()) {
                    needed.push(nb);
                }
            }
        }
        let lps = provider.log_probs(&needed)?;
        Ok(LogProbTable(needed.into_iter().zip(lps).collect()))
    }

    /// `Σ_{σ'∈SSF(σ)} Ψ(σ')/Ψ(σ)`
    fn flip_ratio_sum(&self, config: &SpinConfiguration) -> Result<f64> {
        let here = self.0[config];
        if !here.is_finite() {
            return Err(Error::numerical(format!(
                "amplitude of sampled configuration {config} is zero"
            )));
        }
        Ok(ssf_set(config).iter().map(|nb| (0.5 * (self.0[nb] - here)).exp()).sum())
    }
}

fn check_provider(samples: &[SpinConfiguration], provider: &dyn AmplitudeProvider) -> Result<usize> {
    let n = uniform_len(samples)?;
    if n != provider.num_sites() {
        return Err(Error::invalid(format!(
            "samples have {n} sites but provider has {}",
            provider.num_sites()
        )));
    }
    Ok(n)
}

/// Site-averaged `<σx>`.
pub fn sigma_x(samples: &[SpinConfiguration], provider: &dyn AmplitudeProvider) -> Result<ObservableEstimate> {
    let n = check_provider(samples, provider)?;
    let table = LogProbTable::build(samples, provider)?;
    let values = samples
        .iter()
        .map(|s| Ok(table.flip_ratio_sum(s)? / n as f64))
        .collect::<Result<Vec<f64>>>()?;
    ObservableEstimate::from_values(&values)
}

/// `E_loc(σ) = E_diag(σ) − (Ω/2) Σ_{σ'∈SSF(σ)} Ψ(σ')/Ψ(σ)`
pub fn local_energy(
    config: &SpinConfiguration,
    provider: &dyn AmplitudeProvider,
    graph: &InteractionGraph,
    settings: &ExperimentalSettings,
) -> Result<f64> {
    Ok(local_energies(std::slice::from_ref(config), provider, graph, settings)?[0])
}

pub fn local_energies(
    samples: &[SpinConfiguration],
    provider: &dyn AmplitudeProvider,
    graph: &InteractionGraph,
    settings: &ExperimentalSettings,
) -> Result<Vec<f64>> {
    let n = check_provider(samples, provider)?;
    if graph.num_nodes() != n {
        return Err(Error::invalid(format!(
            "graph has {} nodes but samples have {n} sites",
            graph.num_nodes()
        )));
    }
    let table = LogProbTable::build(samples, provider)?;
    let mut cache: HashMap<&SpinConfiguration, f64> = HashMap::new();
    samples
        .iter()
        .map(|s| {
            if let Some(&e) = cache.get(s) {
                return Ok(e);
            }
            let e = diagonal_energy(graph, settings, s) - 0.5 * settings.omega * table.flip_ratio_sum(s)?;
            cache.insert(s, e);
            Ok(e)
        })
        .collect()
}

pub fn energy(
    samples: &[SpinConfiguration],
    provider: &dyn AmplitudeProvider,
    graph: &InteractionGraph,
    settings: &ExperimentalSettings,
) -> Result<ObservableEstimate> {
    ObservableEstimate::from_values(&local_energies(samples, provider, graph, settings)?)
}
