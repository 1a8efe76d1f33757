//! Measurement datasets: a JSON header line followed by one `0`/`1` string per
//! record, sites in snake order.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exact::{build_hamiltonian, ground_state, sample_born, thermal_diagonal, OracleState};
use crate::lattice::{square_graph, ExperimentalSettings, InteractionGraph};
use crate::spin::SpinConfiguration;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generator {
    /// `ed_ground`, `ed_thermal` or `model`.
    pub kind: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    #[serde(rename = "L")]
    pub l: usize,
    pub omega: f64,
    pub delta_over_omega: f64,
    pub rb_over_a: f64,
    pub beta_omega: f64,
    pub num_samples: usize,
    pub order: String,
    pub generator: Generator,
}

impl DatasetHeader {
    pub fn new(l: usize, settings: &ExperimentalSettings, num_samples: usize, generator: Generator) -> Self {
        DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            l,
            omega: settings.omega,
            delta_over_omega: settings.delta_over_omega,
            rb_over_a: settings.rb_over_a,
            beta_omega: settings.beta_omega,
            num_samples,
            order: "snake".into(),
            generator,
        }
    }

    pub fn settings(&self) -> ExperimentalSettings {
        ExperimentalSettings {
            omega: self.omega,
            delta_over_omega: self.delta_over_omega,
            rb_over_a: self.rb_over_a,
            beta_omega: self.beta_omega,
        }
    }

    pub fn num_sites(&self) -> usize {
        self.l * self.l
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<SpinConfiguration>,
}

impl Dataset {
    pub fn new(header: DatasetHeader, records: Vec<SpinConfiguration>) -> Result<Self> {
        let d = Dataset { header, records };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported dataset format_version {}",
                h.format_version
            )));
        }
        if h.order != "snake" {
            return Err(Error::invalid(format!("unsupported site order {:?}", h.order)));
        }
        if h.l == 0 {
            return Err(Error::invalid("dataset L must be at least 1"));
        }
        h.settings().validate()?;
        if h.num_samples != self.records.len() {
            return Err(Error::invalid(format!(
                "header declares {} samples, found {}",
                h.num_samples,
                self.records.len()
            )));
        }
        let n = h.num_sites();
        if let Some((i, r)) = self.records.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(Error::invalid(format!(
                "record {} has {} sites, expected {n}",
                i + 1,
                r.len()
            )));
        }
        Ok(())
    }

    pub fn graph(&self) -> Result<InteractionGraph> {
        square_graph(self.header.l, &self.header.settings())
    }

    pub fn to_text(&self) -> Result<String> {
        let header = serde_json::to_string(&self.header)
            .map_err(|e| Error::invalid(format!("cannot serialize dataset header: {e}")))?;
        let n = self.header.num_sites();
        let mut out = String::with_capacity(header.len() + 1 + self.records.len() * (n + 1));
        out.push_str(&header);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{r}");
        }
        Ok(out)
    }

    /// Parses dataset text; `origin` names the source in error messages.
    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let first = lines.next().ok_or_else(|| Error::parse(origin, "empty dataset file"))?;
        let header: DatasetHeader = serde_json::from_str(first)
            .map_err(|e| Error::parse(origin, format!("line 1, column {}: {e}", e.column())))?;
        let records = lines
            .enumerate()
            .map(|(i, line)| {
                line.parse::<SpinConfiguration>()
                    .map_err(|e| Error::parse(origin, format!("line {}: {e}", i + 2)))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(header, records).map_err(|e| Error::parse(origin, e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_text()?.as_bytes())))
    }
}

/// Draws `samples` Born-rule measurements from the exact ground state, or
/// from the thermal occupation distribution at `settings.beta_omega` when
/// `thermal` is set. Returns the oracle state alongside the data.
pub fn generate(
    l: usize,
    settings: &ExperimentalSettings,
    samples: usize,
    seed: u64,
    thermal: bool,
) -> Result<(Dataset, OracleState)> {
    if samples == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let graph = square_graph(l, settings)?;
    let h = build_hamiltonian(&graph, settings)?;
    let (state, kind) = if thermal {
        (thermal_diagonal(&h, settings.beta_omega)?, "ed_thermal")
    } else {
        (ground_state(&h)?, "ed_ground")
    };
    let records = sample_born(&state, samples, seed);
    let header = DatasetHeader::new(
        l,
        settings,
        samples,
        Generator {
            kind: kind.into(),
            seed,
        },
    );
    Ok((Dataset::new(header, records)?, state))
}

/// Combined digest of several datasets, order sensitive.
pub fn combined_digest(datasets: &[Dataset]) -> Result<String> {
    let mut h = Sha256::new();
    for d in datasets {
        h.update(d.digest()?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}
