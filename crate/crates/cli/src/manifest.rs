//! Run manifests and report emission.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::commands::Outcome;
use crate::error::{CliError, CliResult};
use crate::invocation::Invocation;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.txt";
pub const REPORT_JSON_FILE: &str = "report.json";

/// Everything needed to repeat a run, plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// SHA-256 of the canonical invocation; reports cite it.
    pub id: String,
    pub command: String,
    /// The fully resolved invocation.
    pub config: Invocation,
    /// Hash of the analysed model document, or of the trained parameters.
    pub model_hash: Option<String>,
    pub seed: Option<u64>,
    pub version: String,
    /// Elapsed seconds; the only field that differs between identical runs.
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn new(inv: &Invocation, outcome: &Outcome, wall_clock_seconds: f64) -> Self {
        Self {
            id: inv.id(),
            command: inv.name().into(),
            config: inv.clone(),
            model_hash: outcome.model_hash.clone(),
            seed: inv.seed(),
            version: env!("CARGO_PKG_VERSION").into(),
            wall_clock_seconds,
        }
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }
}

/// The plain-text report: a header citing the manifest, then the body.
pub fn render_report(inv: &Invocation, outcome: &Outcome) -> String {
    format!("run {}\ncommand {}\n{}", inv.id(), inv.name(), outcome.text)
}

/// Machine-readable duplicate of the report.
pub fn render_report_json(inv: &Invocation, outcome: &Outcome) -> String {
    let doc = json!({ "run": inv.id(), "command": inv.name(), "result": outcome.json });
    serde_json::to_string_pretty(&doc).expect("reports serialize") + "\n"
}

/// Writes the report pair, every artifact and the manifest under `dir`.
pub fn write_run(dir: &Path, inv: &Invocation, outcome: &Outcome, manifest: &RunManifest) -> CliResult<()> {
    let io = |e: std::io::Error, p: &Path| CliError::usage(format!("cannot write {}: {e}", p.display()));
    fs::create_dir_all(dir).map_err(|e| io(e, dir))?;
    let mut files: Vec<(String, Vec<u8>)> = vec![
        (REPORT_FILE.into(), render_report(inv, outcome).into_bytes()),
        (REPORT_JSON_FILE.into(), render_report_json(inv, outcome).into_bytes()),
    ];
    files.extend(outcome.artifacts.iter().map(|a| (a.path.clone(), a.bytes.clone())));
    files.push((MANIFEST_FILE.into(), (serde_json::to_string_pretty(manifest)? + "\n").into_bytes()));
    for (rel, bytes) in files {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io(e, parent))?;
        }
        fs::write(&path, bytes).map_err(|e| io(e, &path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commands::Artifact;
    use crate::error::ExitClass;
    use crate::invocation::ModelSource;

    fn sample_run() -> (Invocation, Outcome) {
        let inv = Invocation::Validate {
            model: ModelSource { path: "m.toml".into(), document: "levels = [1, 1, 1]\n".into() },
        };
        let outcome = Outcome {
            class: ExitClass::Success,
            text: "valid\n".into(),
            json: json!({ "valid": true }),
            artifacts: vec![Artifact { path: "sub/a.txt".into(), bytes: b"x".to_vec() }],
            model_hash: Some("abc".into()),
        };
        (inv, outcome)
    }

    #[test]
    fn report_cites_the_manifest() {
        let (inv, outcome) = sample_run();
        let manifest = RunManifest::new(&inv, &outcome, 0.5);
        assert!(render_report(&inv, &outcome).starts_with(&format!("run {}\n", manifest.id)));
        assert!(render_report_json(&inv, &outcome).contains(&manifest.id));
    }

    #[test]
    fn runs_are_written_and_manifests_read_back() {
        let (inv, outcome) = sample_run();
        let manifest = RunManifest::new(&inv, &outcome, 1.25);
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &inv, &outcome, &manifest).unwrap();
        assert_eq!(fs::read(dir.path().join("sub/a.txt")).unwrap(), b"x");
        assert!(dir.path().join(REPORT_JSON_FILE).exists());
        let back = RunManifest::read(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, manifest);
    }
}
