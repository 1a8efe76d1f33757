//! Command-line front end. `main.rs` only forwards to [`run`].

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint;
use crate::dataset::{generate, Dataset, DatasetHeader, Generator};
use crate::error::{Error, Result};
use crate::exact::{build_hamiltonian, exact_observables, ground_state, thermal_diagonal, MAX_THERMAL_SITES};
use crate::lattice::{square_graph, ExperimentalSettings};
use crate::model::{init_params, Model, ModelCheckpoint};
use crate::observables::{energy, sigma_x, staggered_magnetization, AmplitudeProvider, OracleProvider};
use crate::sampling::{sample, sample_cached};
use crate::spin::enumerate;
use crate::training::{train, EpochMetrics, TrainConfig, METRICS_HEADER};

#[derive(Parser, Debug)]
#[command(
    name = "rydberggpt",
    version,
    about = "Hamiltonian-conditioned transformer for Rydberg atom arrays"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a measurement dataset from the exact ground or thermal state.
    GenData(GenData),
    /// Train a model from a JSON configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Draw configurations from a checkpoint.
    Sample(SampleArgs),
    /// Estimate an observable on a dataset.
    Estimate(EstimateArgs),
    /// Enumerate all configurations and audit the model's normalization.
    Enumerate(EnumerateArgs),
    /// Compare reverse-mode gradients with central differences on a 2×2 instance.
    Gradcheck(GradcheckArgs),
    /// Estimate observables over a range of detunings or temperatures.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone)]
struct System {
    #[arg(long = "L")]
    l: usize,
    #[arg(long, allow_hyphen_values = true)]
    delta: f64,
    #[arg(long, default_value_t = 1.15)]
    rb: f64,
    #[arg(long, default_value_t = 16.0)]
    beta: f64,
}

impl System {
    fn settings(&self) -> Result<ExperimentalSettings> {
        ExperimentalSettings::new(self.delta, self.rb, self.beta)
    }
}

#[derive(Args, Debug)]
struct GenData {
    #[command(flatten)]
    system: System,
    #[arg(long)]
    samples: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Sample the thermal occupation distribution at --beta instead of the ground state.
    #[arg(long)]
    thermal: bool,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    system: System,
    #[arg(long)]
    samples: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Use the full-recompute sampler instead of the cached one.
    #[arg(long)]
    uncached: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Observable {
    Energy,
    Sx,
    Stag,
}

impl Observable {
    fn name(self) -> &'static str {
        match self {
            Observable::Energy => "energy",
            Observable::Sx => "sx",
            Observable::Stag => "stag",
        }
    }
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long, value_enum)]
    observable: Observable,
    #[arg(long)]
    data: PathBuf,
    /// Model supplying amplitudes for energy and sx.
    #[arg(long, conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Use the exact state of the dataset's settings as the amplitude provider.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args, Debug)]
struct EnumerateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Audit a fresh random initialization with this seed instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    init_seed: Option<u64>,
    #[command(flatten)]
    system: System,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Coordinates visited per parameter block; all when omitted.
    #[arg(long)]
    max_per_block: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "L")]
    l: usize,
    #[arg(long, default_value_t = 1.15)]
    rb: f64,
    /// Inverse temperature for a detuning sweep.
    #[arg(long, default_value_t = 16.0)]
    beta: f64,
    /// Fixed detuning for a temperature sweep.
    #[arg(long, allow_hyphen_values = true)]
    delta: Option<f64>,
    /// `start:stop:count` over δ/Ω.
    #[arg(
        long,
        allow_hyphen_values = true,
        required_unless_present = "temperature_range",
        conflicts_with = "temperature_range"
    )]
    delta_range: Option<String>,
    /// `start:stop:count` over T/Ω = 1/(βΩ); needs --delta.
    #[arg(long, allow_hyphen_values = true, requires = "delta")]
    temperature_range: Option<String>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Write CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `start:stop:count` into `count` evenly spaced values, endpoints included.
pub fn parse_range(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::invalid(format!("range {spec:?} must look like start:stop:count"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let b: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if n == 0 || !a.is_finite() || !b.is_finite() {
        return Err(bad());
    }
    if n == 1 {
        return Ok(vec![a]);
    }
    let mut out: Vec<f64> = (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect();
    out[n - 1] = b;
    Ok(out)
}

fn resolve_seed(seed: Option<u64>, err: &mut dyn Write) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        let _ = writeln!(err, "seed: {s}");
        s
    })
}

fn json_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::invalid(format!("cannot serialize output: {e}")))
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code; diagnostics go to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{rendered}");
            } else {
                let _ = write!(err, "{rendered}");
            }
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a, err),
        Command::Train { config } => train_cmd(&config, out),
        Command::Sample(a) => sample_cmd(a, err),
        Command::Estimate(a) => estimate_cmd(a, out),
        Command::Enumerate(a) => enumerate_cmd(a, out),
        Command::Gradcheck(a) => gradcheck_cmd(a, out),
        Command::Sweep(a) => sweep_cmd(a, out, err),
    }
}

fn gen_data(a: GenData, err: &mut dyn Write) -> Result<()> {
    let seed = resolve_seed(a.seed, err);
    let settings = a.system.settings()?;
    let (data, _) = generate(a.system.l, &settings, a.samples, seed, a.thermal)?;
    data.write(&a.out)
}

/// Reads a training configuration, resolving relative paths against its directory.
pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path, format!("line {}, column {}: {e}", e.line(), e.column())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for d in &mut cfg.datasets {
        *d = base.join(&*d);
    }
    cfg.output_dir = base.join(&cfg.output_dir);
    if let Some(r) = cfg.resume.as_mut() {
        *r = base.join(&*r);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

/// Trains as described by a configuration file: one checkpoint per epoch and
/// one CSV row per epoch in `metrics.csv` under the output directory.
pub fn train_from_config(path: &Path) -> Result<(ModelCheckpoint, Vec<EpochMetrics>)> {
    let cfg = load_train_config(path)?;
    let datasets = cfg
        .datasets
        .iter()
        .map(|p| Dataset::read(p))
        .collect::<Result<Vec<_>>>()?;
    let init = match &cfg.resume {
        Some(p) => {
            let ck = checkpoint::read(p)?;
            let mut expected = cfg.model;
            expected.dropout = ck.config.dropout;
            if ck.config != expected {
                return Err(Error::ArtifactMismatch(format!(
                    "{}: checkpoint architecture differs from the configured model",
                    p.display()
                )));
            }
            ck
        }
        None => init_params(&cfg.model, cfg.seed)?,
    };
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let csv = cfg.output_dir.join("metrics.csv");
    if !csv.exists() {
        std::fs::write(&csv, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&csv, e))?;
    }
    let dir = cfg.output_dir.clone();
    let outcome = train(&datasets, init, &cfg, |m, ck| {
        checkpoint::write(ck, &checkpoint_path(&dir, m.epoch))?;
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&csv)
            .map_err(|e| Error::io(&csv, e))?;
        writeln!(f, "{}", m.csv_row()).map_err(|e| Error::io(&csv, e))
    })?;
    Ok((outcome.checkpoint, outcome.metrics))
}

fn train_cmd(config: &Path, out: &mut dyn Write) -> Result<()> {
    let (_, metrics) = train_from_config(config)?;
    for m in metrics {
        writeln!(out, "{}", m.csv_row()).map_err(out_err)?;
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    Model::new(checkpoint::read(path)?)
}

fn sample_cmd(a: SampleArgs, err: &mut dyn Write) -> Result<()> {
    let seed = resolve_seed(a.seed, err);
    let model = load_model(&a.checkpoint)?;
    let settings = a.system.settings()?;
    let graph = square_graph(a.system.l, &settings)?;
    let records = if a.uncached {
        sample(&model, &graph, a.samples, seed)?
    } else {
        sample_cached(&model, &graph, a.samples, seed)?
    };
    let header = DatasetHeader::new(
        a.system.l,
        &settings,
        records.len(),
        Generator {
            kind: "model".into(),
            seed,
        },
    );
    Dataset::new(header, records)?.write(&a.out)
}

#[derive(Serialize)]
struct EstimateOutput {
    observable: &'static str,
    mean: f64,
    std_error: f64,
    n_samples: usize,
}

fn estimate_cmd(a: EstimateArgs, out: &mut dyn Write) -> Result<()> {
    let data = Dataset::read(&a.data)?;
    let est = if a.observable == Observable::Stag {
        staggered_magnetization(&data.records)?
    } else {
        let settings = data.header.settings();
        let graph = data.graph()?;
        let run = |p: &dyn AmplitudeProvider| match a.observable {
            Observable::Energy => energy(&data.records, p, &graph, &settings),
            _ => sigma_x(&data.records, p),
        };
        match (&a.checkpoint, a.oracle) {
            (Some(path), _) => {
                let model = load_model(path)?;
                run(&model.provider(&graph)?)?
            }
            (None, true) => {
                let h = build_hamiltonian(&graph, &settings)?;
                let state = if data.header.generator.kind == "ed_thermal" {
                    thermal_diagonal(&h, settings.beta_omega)?
                } else {
                    ground_state(&h)?
                };
                run(&OracleProvider::new(&state))?
            }
            (None, false) => {
                return Err(Error::invalid(format!(
                    "{} needs amplitudes: pass --checkpoint or --oracle",
                    a.observable.name()
                )))
            }
        }
    };
    let o = EstimateOutput {
        observable: a.observable.name(),
        mean: est.mean,
        std_error: est.std_error,
        n_samples: est.sample_count,
    };
    writeln!(out, "{}", json_line(&o)?).map_err(out_err)
}

#[derive(Serialize)]
struct EnumerateOutput {
    num_sites: usize,
    configurations: usize,
    total_mass: f64,
    max_log_prob: f64,
    min_log_prob: f64,
}

fn enumerate_cmd(a: EnumerateArgs, out: &mut dyn Write) -> Result<()> {
    let n = a.system.l * a.system.l;
    if n > MAX_THERMAL_SITES {
        return Err(Error::ResourceLimit(format!(
            "enumeration limited to N <= {MAX_THERMAL_SITES} sites, got {n}"
        )));
    }
    let model = match (&a.checkpoint, a.init_seed) {
        (Some(p), _) => load_model(p)?,
        (None, Some(seed)) => Model::new(init_params(&Default::default(), seed)?)?,
        (None, None) => return Err(Error::invalid("pass --checkpoint or --init-seed")),
    };
    let graph = square_graph(a.system.l, &a.system.settings()?)?;
    let ctx = model.context(&graph)?;
    let all: Vec<_> = enumerate(n).collect();
    let lp = model.log_probs(&ctx, &all)?;
    let o = EnumerateOutput {
        num_sites: n,
        configurations: all.len(),
        total_mass: lp.iter().map(|v| v.exp()).sum(),
        max_log_prob: lp.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min_log_prob: lp.iter().copied().fold(f64::INFINITY, f64::min),
    };
    writeln!(out, "{}", json_line(&o)?).map_err(out_err)
}

fn gradcheck_cmd(a: GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let ck = match &a.checkpoint {
        Some(p) => checkpoint::read(p)?,
        None => init_params(&Default::default(), a.seed)?,
    };
    let rep = crate::model::full_gradcheck(&ck, a.step, a.tol, a.max_per_block)?;
    let mut w = |s: String| -> Result<()> { writeln!(out, "{s}").map_err(out_err) };
    w(format!(
        "{:<32} {:>8} {:>8} {:>14}  status",
        "block", "checked", "excluded", "max_rel_error"
    ))?;
    for b in &rep.blocks {
        let status = if b.max_rel_error < rep.tolerance {
            "pass"
        } else {
            "FAIL"
        };
        w(format!(
            "{:<32} {:>8} {:>8} {:>14.3e}  {status}",
            b.name, b.checked, b.excluded, b.max_rel_error
        ))?;
    }
    let verdict = if rep.passed() { "PASS" } else { "FAIL" };
    w(format!(
        "{verdict} max_rel_error={:e} tol={:e}",
        rep.max_rel_error(),
        rep.tolerance
    ))?;
    if rep.passed() {
        Ok(())
    } else {
        Err(Error::numerical(format!(
            "gradient check failed: {:e} >= {:e}",
            rep.max_rel_error(),
            rep.tolerance
        )))
    }
}

fn sweep_cmd(a: SweepArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let seed = resolve_seed(a.seed, err);
    let model = load_model(&a.checkpoint)?;
    let n = a.l * a.l;
    let (column, points, thermal) = match (&a.delta_range, &a.temperature_range) {
        (Some(r), _) => ("delta_over_omega", parse_range(r)?, false),
        (None, Some(r)) => ("T_over_omega", parse_range(r)?, true),
        (None, None) => return Err(Error::invalid("pass --delta-range or --temperature-range")),
    };
    let with_oracle = if thermal {
        n <= MAX_THERMAL_SITES
    } else {
        n <= crate::exact::MAX_GROUND_SITES
    };
    let mut csv = format!("{column},energy,energy_err,sx,sx_err,stag,stag_err");
    if with_oracle {
        csv.push_str(",exact_energy,exact_sx,exact_stag");
    }
    csv.push('\n');
    for (i, &x) in points.iter().enumerate() {
        let settings = if thermal {
            if !(x > 0.0) {
                return Err(Error::invalid(format!("temperature must be > 0, got {x}")));
            }
            ExperimentalSettings::new(a.delta.unwrap_or_default(), a.rb, 1.0 / x)?
        } else {
            ExperimentalSettings::new(x, a.rb, a.beta)?
        };
        let graph = square_graph(a.l, &settings)?;
        let samples = sample_cached(&model, &graph, a.samples, crate::model::mix_seed(&[seed, i as u64]))?;
        let provider = model.provider(&graph)?;
        let e = energy(&samples, &provider, &graph, &settings)?;
        let sx = sigma_x(&samples, &provider)?;
        let st = staggered_magnetization(&samples)?;
        csv.push_str(&format!(
            "{x:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            e.mean, e.std_error, sx.mean, sx.std_error, st.mean, st.std_error
        ));
        if with_oracle {
            let h = build_hamiltonian(&graph, &settings)?;
            let state = if thermal {
                thermal_diagonal(&h, settings.beta_omega)?
            } else {
                ground_state(&h)?
            };
            let ex = exact_observables(&state, &h)?;
            csv.push_str(&format!(",{:?},{:?},{:?}", ex.energy, ex.sigma_x, ex.staggered));
        }
        csv.push('\n');
    }
    match &a.out {
        Some(p) => std::fs::write(p, csv).map_err(|e| Error::io(p, e)),
        None => out.write_all(csv.as_bytes()).map_err(out_err),
    }
}
