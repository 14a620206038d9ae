//! Command execution: an [`Invocation`] in, a deterministic [`Outcome`] out.
//! Nothing here touches the filesystem except reading pinned inputs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use hiercomp_core::composability::{analyze, ComposabilityReport};
use hiercomp_core::identifiability::{
    check_conditional_independence, check_invertibility, check_sufficient_variability, render_variability, CheckStatus,
    CiSource, DerivativeMode, VariabilityOptions,
};
use hiercomp_core::sampler::{sample_many, BatchMetadata, SampleBatch};
use hiercomp_core::spec_format::model_hash;
use hiercomp_core::structure::{recover_structure, render_score, score_graph, RecoveryOptions};
use hiercomp_core::support::{SupportOptions, SupportTable};
use hiercomp_core::{DiscreteCombination, HierError, HierModel};
use hiercomp_toy::experiment::{paired_comparison, run_arm};
use hiercomp_toy::io::{encode_manifest, encode_parameters};
use hiercomp_toy::Arm;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult, ExitClass};
use crate::invocation::{
    sha256_hex, Candidates, Check, IdentifySettings, Invocation, ModelSource, RecoverSettings, RecoverSource,
};

/// A file produced by a command, relative to the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub path: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    fn text(path: impl Into<String>, text: impl Into<String>) -> Self {
        Self { path: path.into(), bytes: text.into().into_bytes() }
    }
}

/// Result of a command that ran to completion.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    /// [`ExitClass::Success`] or [`ExitClass::Negative`].
    pub class: ExitClass,
    pub text: String,
    pub json: Value,
    pub artifacts: Vec<Artifact>,
    pub model_hash: Option<String>,
}

pub fn execute(inv: &Invocation) -> CliResult<Outcome> {
    match inv {
        Invocation::Validate { model } => validate(model),
        Invocation::Composability { model, train, candidates, cells, n, seed, exact } => {
            let opts = SupportOptions { n: *n, seed: *seed, cells: *cells, prefer_exact: *exact };
            composability(model, train, candidates, &opts)
        }
        Invocation::Identify { model, settings, seed } => identify(model, settings, *seed),
        Invocation::Recover { model, truth, settings, seed } => recover(model, truth.as_ref(), settings, *seed),
        Invocation::Sample { model, combinations, n, seed } => sample(model, combinations.as_deref(), *n, *seed),
        Invocation::Toy { config, arms, seed } => toy(config, arms, *seed),
    }
}

fn negative_if(flag: bool) -> ExitClass {
    if flag {
        ExitClass::Negative
    } else {
        ExitClass::Success
    }
}

fn validate(source: &ModelSource) -> CliResult<Outcome> {
    let model = source.parse()?;
    let report = model.validate();
    let violations: Vec<Value> = report
        .violations
        .iter()
        .map(|v| json!({ "kind": v.kind.as_str(), "ids": v.ids, "detail": v.detail }))
        .collect();
    Ok(Outcome {
        class: negative_if(!report.is_valid()),
        text: report.to_string(),
        json: json!({ "valid": report.is_valid(), "violations": violations }),
        artifacts: Vec::new(),
        model_hash: Some(model_hash(&model)),
    })
}

fn composability_json(model: &HierModel, table: &SupportTable, report: &ComposabilityReport) -> Value {
    let verdicts: Vec<Value> = report
        .verdicts
        .iter()
        .map(|v| {
            let witness: serde_json::Map<String, Value> =
                v.witness.iter().map(|(z, w)| (model.name(*z), json!(w.to_string()))).collect();
            let blockers: Vec<Value> = v
                .blockers
                .iter()
                .map(|b| {
                    let parents = model.parents(b.latent).unwrap_or(&[]);
                    let cells: Vec<Value> = b
                        .uncovered
                        .iter()
                        .map(|cell| {
                            parents
                                .iter()
                                .zip(cell)
                                .map(|(p, &c)| (model.name(*p), json!(table.grid().describe(*p, c))))
                                .collect::<serde_json::Map<String, Value>>()
                                .into()
                        })
                        .collect();
                    json!({
                        "latent": model.name(b.latent),
                        "nearest": b.nearest.as_ref().map(ToString::to_string),
                        "uncovered": cells,
                    })
                })
                .collect();
            let resampled: Vec<String> = v.resampled.iter().map(|z| model.name(*z)).collect();
            json!({
                "d": v.d.to_string(),
                "composable": v.composable,
                "witness": witness,
                "blockers": blockers,
                "resampled": resampled,
            })
        })
        .collect();
    let train: Vec<String> = report.train.iter().map(ToString::to_string).collect();
    json!({
        "train": train,
        "cartesian_size": report.cartesian_size,
        "composable_count": report.composable_count(),
        "verdicts": verdicts,
    })
}

fn composability(
    source: &ModelSource,
    train: &[DiscreteCombination],
    candidates: &Candidates,
    opts: &SupportOptions,
) -> CliResult<Outcome> {
    if train.is_empty() {
        return Err(CliError::usage("the training support is empty"));
    }
    let model = source.parse_valid()?;
    let train: BTreeSet<DiscreteCombination> = train.iter().cloned().collect();
    let listed = match candidates {
        Candidates::Cartesian => None,
        Candidates::Listed(c) => Some(c.as_slice()),
    };
    let (report, table) = analyze(&model, &train, listed, opts)?;
    let all_certified = report.verdicts.iter().all(|v| v.composable);
    Ok(Outcome {
        class: negative_if(!all_certified),
        text: report.render(&model, &table),
        json: composability_json(&model, &table, &report),
        artifacts: Vec::new(),
        model_hash: Some(model_hash(&model)),
    })
}

/// One line of the identifiability summary.
struct CheckLine {
    check: Check,
    level: usize,
    /// `None` when the model family does not support the check.
    status: Option<CheckStatus>,
    note: String,
    detail: Value,
}

/// Errors that mean "this check does not apply to the model" rather than
/// "the command failed".
fn unsupported(e: &HierError) -> bool {
    matches!(e, HierError::UnsupportedFamily { .. } | HierError::TestDegenerate(_))
}

fn run_check(
    check: Check,
    level: usize,
    f: impl FnOnce() -> hiercomp_core::Result<(CheckStatus, String, Value)>,
) -> CliResult<CheckLine> {
    match f() {
        Ok((status, note, detail)) => Ok(CheckLine { check, level, status: Some(status), note, detail }),
        Err(e) if unsupported(&e) => {
            Ok(CheckLine { check, level, status: None, note: e.to_string(), detail: Value::Null })
        }
        Err(e) => Err(CliError::from(e).context(format!("{} check at level {level}", check.as_str()))),
    }
}

fn identify(source: &ModelSource, s: &IdentifySettings, seed: u64) -> CliResult<Outcome> {
    let model = source.parse_valid()?;
    let top = model.num_levels();
    let inner: Vec<usize> = (1..top).collect();
    let mut lines = Vec::new();
    let mut details = String::new();
    for &check in &s.checks {
        let levels = s.levels.clone().unwrap_or_else(|| match check {
            Check::Invertibility => vec![top],
            Check::Ci | Check::Variability => inner.clone(),
        });
        if levels.is_empty() {
            lines.push(CheckLine {
                check,
                level: 0,
                status: Some(CheckStatus::Violated),
                note: "no level has a latent child level".into(),
                detail: Value::Null,
            });
            continue;
        }
        for level in levels {
            let line = match check {
                Check::Invertibility => run_check(check, level, || {
                    let r = check_invertibility(&model, level, s.points, seed)?;
                    let status = if r.pass {
                        CheckStatus::Pass
                    } else if r.output_dim < r.input_dim {
                        CheckStatus::Violated
                    } else {
                        CheckStatus::NotVerified
                    };
                    let _ = writeln!(
                        details,
                        "invertibility level {level}: input dim {}, output dim {}, points {}, singular values [{:.6e}, {:.6e}], {}",
                        r.input_dim, r.output_dim, r.points, r.min_singular_value, r.max_singular_value, r.message
                    );
                    Ok((status, r.message.clone(), serde_json::to_value(&r).expect("report serializes")))
                })?,
                Check::Ci => run_check(check, level, || {
                    // Children without noise are functions of their parents, so
                    // they are independent given them by construction; sample
                    // tests would only measure how nonlinear the tables are.
                    let deterministic = level < top
                        && model
                            .level_vars(level + 1)
                            .iter()
                            .all(|v| model.mechanism(*v).is_some_and(|m| m.noise.scale == 0.0));
                    let batch;
                    let source = if deterministic {
                        CiSource::Model(&model)
                    } else {
                        let combos = model.all_combinations();
                        let per = (s.ci_rows / combos.len().max(1)).max(1);
                        batch = sample_many(&model, &combos, per, seed)?;
                        CiSource::Batch(&batch)
                    };
                    let r = check_conditional_independence(source, level, s.ci_test, s.alpha)?;
                    let dependent: Vec<String> = r
                        .pairs
                        .iter()
                        .filter(|p| !p.independent)
                        .map(|p| format!("{} ~ {}", model.name(p.u), model.name(p.v)))
                        .collect();
                    for p in &r.pairs {
                        let _ = writeln!(
                            details,
                            "ci level {level}: {} vs {} statistic {:.6e} p {:.6e}",
                            model.name(p.u),
                            model.name(p.v),
                            p.statistic,
                            p.p_value
                        );
                    }
                    let (status, note) = if r.pairs.is_empty() {
                        (CheckStatus::Pass, "single child: nothing to test".to_string())
                    } else if r.structural {
                        (
                            CheckStatus::Pass,
                            "noiseless children: independent given their parents by construction".to_string(),
                        )
                    } else if dependent.is_empty() {
                        (CheckStatus::Pass, format!("{} pairs independent at alpha {}", r.pairs.len(), s.alpha))
                    } else {
                        (CheckStatus::Violated, format!("dependent at alpha {}: {}", s.alpha, dependent.join(", ")))
                    };
                    Ok((status, note, serde_json::to_value(&r).expect("report serializes")))
                })?,
                Check::Variability => run_check(check, level, || {
                    let opts = VariabilityOptions {
                        budget: s.budget,
                        probes: s.probes,
                        pool_rows: s.pool_rows,
                        seed,
                        mode: if s.finite_differences {
                            DerivativeMode::FiniteDifference
                        } else {
                            DerivativeMode::Analytic
                        },
                    };
                    let r = check_sufficient_variability(&model, level, &opts)?;
                    details.push_str(&render_variability(&r));
                    let note = format!(
                        "min rank {} of {} over {} probes (structural bound {})",
                        r.min_rank,
                        r.required_rank,
                        r.probes.len(),
                        r.structural_bound
                    );
                    Ok((r.status, note, serde_json::to_value(&r).expect("report serializes")))
                })?,
            };
            lines.push(line);
        }
    }
    let mut text = String::new();
    for l in &lines {
        let status = l.status.map_or("UNSUPPORTED".to_string(), |s| s.to_string());
        let _ = writeln!(text, "{} level {}: {} ({})", l.check.as_str(), l.level, status, l.note);
    }
    text.push_str("details\n");
    text.push_str(&details);
    let negative = lines.iter().any(|l| matches!(l.status, Some(CheckStatus::Violated | CheckStatus::NotVerified)));
    let json_lines: Vec<Value> = lines
        .iter()
        .map(|l| {
            json!({
                "check": l.check.as_str(),
                "level": l.level,
                "status": l.status.map_or("UNSUPPORTED".to_string(), |s| s.to_string()),
                "note": l.note,
                "detail": l.detail,
            })
        })
        .collect();
    Ok(Outcome {
        class: negative_if(negative),
        text,
        json: json!({ "checks": json_lines }),
        artifacts: Vec::new(),
        model_hash: Some(model_hash(&model)),
    })
}

fn recover(source: &ModelSource, truth: Option<&ModelSource>, s: &RecoverSettings, seed: u64) -> CliResult<Outcome> {
    let model = source.parse_valid()?;
    let batches = match &s.source {
        RecoverSource::Sampled { n } => {
            let combos = model.all_combinations();
            let per = n / combos.len().max(1);
            if per == 0 {
                return Err(CliError::usage(format!("n = {n} is smaller than the {} combinations", combos.len())));
            }
            vec![sample_many(&model, &combos, per, seed)?]
        }
        RecoverSource::Batches(files) => {
            if files.is_empty() {
                return Err(CliError::usage("no batch files given"));
            }
            files
                .iter()
                .map(|f| {
                    f.verify()?;
                    SampleBatch::import(&model, Path::new(&f.path)).map_err(|e| CliError::from(e).context(&f.path))
                })
                .collect::<CliResult<Vec<_>>>()?
        }
    };
    let truth_model = match (truth, &s.source) {
        (Some(t), _) => Some(t.parse_valid()?),
        (None, RecoverSource::Sampled { .. }) => Some(model.clone()),
        (None, RecoverSource::Batches(_)) => None,
    };
    let opts = RecoveryOptions {
        test: s.test,
        alpha: s.alpha,
        max_conditioning: s.max_conditioning,
        bonferroni: s.bonferroni,
        ..RecoveryOptions::default()
    };
    let graph = recover_structure(&batches, model.widths(), &opts)?;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "recovered {} edges from {} rows (test {}, alpha {}, per-test alpha {:e})",
        graph.edges.len(),
        batches.iter().map(SampleBatch::len).sum::<usize>(),
        graph.test,
        graph.alpha,
        graph.effective_alpha
    );
    for (p, c) in &graph.edges {
        let _ = writeln!(text, "  {} -> {}", model.name(*p), model.name(*c));
    }
    let edges: Vec<(String, String)> = graph.edges.iter().map(|(p, c)| (model.name(*p), model.name(*c))).collect();
    let mut json = json!({
        "edges": edges,
        "rows": batches.iter().map(SampleBatch::len).sum::<usize>(),
        "test": graph.test,
        "alpha": graph.alpha,
        "effective_alpha": graph.effective_alpha,
    });
    let mut class = ExitClass::Success;
    if let Some(t) = &truth_model {
        let score = score_graph(&graph, t)?;
        text.push_str("score against truth\n");
        for line in render_score(&score).lines() {
            let _ = writeln!(text, "  {line}");
        }
        class = negative_if(!score.exact_match);
        json["score"] = serde_json::to_value(&score).expect("score serializes");
    }
    Ok(Outcome {
        class,
        text,
        json,
        artifacts: vec![
            Artifact::text("recovered.toml", graph.to_spec_edges()),
            Artifact::text("tests.log", graph.render_log()),
        ],
        model_hash: Some(model_hash(&model)),
    })
}

fn sample(source: &ModelSource, combos: Option<&[DiscreteCombination]>, n: usize, seed: u64) -> CliResult<Outcome> {
    let model = source.parse_valid()?;
    let combos = combos.map_or_else(|| model.all_combinations(), <[_]>::to_vec);
    if combos.is_empty() {
        return Err(CliError::usage("no combinations to sample"));
    }
    let batch = sample_many(&model, &combos, n, seed)?;
    let mut csv = Vec::new();
    batch.write_csv(&model, &mut csv)?;
    let meta = BatchMetadata {
        seed,
        conditioning: combos.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect(),
        rows: batch.len(),
        model_hash: model_hash(&model),
    };
    let header = batch.header(&model);
    let mut text = String::new();
    let _ = writeln!(text, "{} rows ({} per combination over {} combinations)", batch.len(), n, combos.len());
    let _ = writeln!(text, "columns: {}", header.join(","));
    let shown: Vec<String> = combos.iter().map(ToString::to_string).collect();
    let _ = writeln!(text, "combinations: {}", shown.join(" "));
    Ok(Outcome {
        class: ExitClass::Success,
        text,
        json: json!({ "rows": batch.len(), "columns": header, "combinations": shown }),
        artifacts: vec![
            Artifact { path: "batch.csv".into(), bytes: csv },
            Artifact::text("batch.csv.meta.json", serde_json::to_string_pretty(&meta)? + "\n"),
        ],
        model_hash: Some(model_hash(&model)),
    })
}

fn toy(config: &hiercomp_toy::ToyConfig, arms: &[Arm], seed: u64) -> CliResult<Outcome> {
    if arms.is_empty() {
        return Err(CliError::usage("no arm given"));
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = arms.iter().find(|a| !seen.insert(**a)) {
        return Err(CliError::usage(format!("arm {dup} given twice")));
    }
    let mut text = String::new();
    let mut artifacts = Vec::new();
    let mut summaries = Vec::new();
    let mut hashed = Vec::new();
    for &arm in arms {
        let run = run_arm(config, arm, seed)?;
        let dir = arm.as_str();
        let mut metrics = Vec::new();
        run.log.write_csv(&mut metrics)?;
        let params = encode_parameters(&run.model);
        hashed.extend_from_slice(&params);
        let report = run.summary.render();
        text.push_str(&report);
        artifacts.push(Artifact { path: format!("{dir}/metrics.csv"), bytes: metrics });
        artifacts
            .push(Artifact::text(format!("{dir}/summary.json"), serde_json::to_string_pretty(&run.summary)? + "\n"));
        artifacts.push(Artifact::text(format!("{dir}/report.txt"), report));
        artifacts.push(Artifact::text(format!("{dir}/split.toml"), run.dataset.manifest.to_toml()?));
        artifacts.push(Artifact { path: format!("{dir}/denoiser.bin"), bytes: params });
        artifacts.push(Artifact::text(format!("{dir}/denoiser.toml"), encode_manifest(&run.model)?));
        summaries.push(run.summary);
    }
    let mut comparisons = Vec::new();
    if let Some(full) = summaries.iter().find(|s| s.arm == Arm::Full) {
        for other in summaries.iter().filter(|s| s.arm != Arm::Full) {
            let c = paired_comparison(full, other);
            text.push_str(&c);
            comparisons.push(c);
        }
    }
    Ok(Outcome {
        class: ExitClass::Success,
        text,
        json: json!({ "arms": summaries, "comparisons": comparisons }),
        artifacts,
        model_hash: Some(sha256_hex(&hashed)),
    })
}
