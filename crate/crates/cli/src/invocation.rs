//! Fully resolved command invocations.
//!
//! An [`Invocation`] carries everything a command reads: model documents are
//! embedded verbatim and external batch files are pinned by SHA-256, so a
//! run manifest alone is enough to repeat the run.

use std::path::Path;

use hiercomp_core::spec_format::load_model;
use hiercomp_core::stats::CiTest;
use hiercomp_core::{DiscreteCombination, HierModel};
use hiercomp_toy::{Arm, ToyConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// A model document and where it was read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSource {
    pub path: String,
    pub document: String,
}

impl ModelSource {
    pub fn read(path: &Path) -> CliResult<Self> {
        let document = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read model file {}: {e}", path.display())))?;
        Ok(Self { path: path.display().to_string(), document })
    }

    /// Parses the document. Structural validity is not checked here.
    pub fn parse(&self) -> CliResult<HierModel> {
        load_model(&self.document).map_err(|e| CliError::from(e).context(&self.path))
    }

    /// Parses and requires a structurally valid model.
    pub fn parse_valid(&self) -> CliResult<HierModel> {
        let model = self.parse()?;
        let report = model.validate();
        if !report.is_valid() {
            return Err(CliError::usage(format!("{}: model does not validate:\n{report}", self.path)));
        }
        Ok(model)
    }
}

/// An input file pinned by content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnedFile {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl PinnedFile {
    pub fn pin(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        Ok(Self { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
    }

    /// Fails when the file changed since it was pinned.
    pub fn verify(&self) -> CliResult<()> {
        let now = Self::pin(Path::new(&self.path))?;
        if now.sha256 != self.sha256 {
            return Err(CliError::usage(format!("{} changed since the run was recorded", self.path)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Candidates {
    /// The Cartesian product of the training marginals.
    Cartesian,
    Listed(Vec<DiscreteCombination>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    Invertibility,
    Ci,
    Variability,
}

impl Check {
    pub const ALL: [Check; 3] = [Check::Invertibility, Check::Ci, Check::Variability];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Invertibility => "invertibility",
            Self::Ci => "ci",
            Self::Variability => "variability",
        }
    }

    pub fn parse(s: &str) -> CliResult<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| CliError::usage(format!("unknown check `{s}` (expected invertibility, ci, variability)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifySettings {
    pub checks: Vec<Check>,
    /// Levels to examine; `None` picks per check (see `commands::identify`).
    pub levels: Option<Vec<usize>>,
    pub probes: usize,
    pub budget: usize,
    pub pool_rows: usize,
    pub points: usize,
    pub ci_rows: usize,
    pub alpha: f64,
    pub ci_test: CiTest,
    pub finite_differences: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecoverSource {
    /// Sample `n` rows in total, split evenly over every combination.
    Sampled {
        n: usize,
    },
    Batches(Vec<PinnedFile>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverSettings {
    pub source: RecoverSource,
    pub alpha: f64,
    pub test: CiTest,
    pub bonferroni: bool,
    pub max_conditioning: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    Validate {
        model: ModelSource,
    },
    Composability {
        model: ModelSource,
        train: Vec<DiscreteCombination>,
        candidates: Candidates,
        cells: usize,
        n: usize,
        seed: u64,
        exact: bool,
    },
    Identify {
        model: ModelSource,
        settings: IdentifySettings,
        seed: u64,
    },
    Recover {
        model: ModelSource,
        truth: Option<ModelSource>,
        settings: RecoverSettings,
        seed: u64,
    },
    Sample {
        model: ModelSource,
        combinations: Option<Vec<DiscreteCombination>>,
        n: usize,
        seed: u64,
    },
    Toy {
        config: ToyConfig,
        arms: Vec<Arm>,
        seed: u64,
    },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Validate { .. } => "validate",
            Self::Composability { .. } => "composability",
            Self::Identify { .. } => "identify",
            Self::Recover { .. } => "recover",
            Self::Sample { .. } => "sample",
            Self::Toy { .. } => "toy",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Self::Validate { .. } => None,
            Self::Composability { seed, .. }
            | Self::Identify { seed, .. }
            | Self::Recover { seed, .. }
            | Self::Sample { seed, .. }
            | Self::Toy { seed, .. } => Some(*seed),
        }
    }

    /// Stable identifier: SHA-256 of the canonical JSON form.
    pub fn id(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("invocations serialize").as_bytes())
    }
}

/// Reads a list of discrete combinations, one per line (`[0,1]`, `0,1` or
/// `0 1`); blank lines and `#` comments are skipped.
pub fn read_combinations(path: &Path) -> CliResult<Vec<DiscreteCombination>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read combination file {}: {e}", path.display())))?;
    parse_combinations(&text).map_err(|e| e.context(path.display()))
}

pub fn parse_combinations(text: &str) -> CliResult<Vec<DiscreteCombination>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(DiscreteCombination::parse(line).map_err(|e| CliError::from(e).context(format!("line {}", i + 1)))?);
    }
    Ok(out)
}
