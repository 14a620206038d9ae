//! Support-containment certificates for unseen concept combinations.
//!
//! A combination `d` is certified composable when every continuous latent
//! `z` has some training combination `d'` with
//! `supp(pa(z) | d) ⊆ supp(pa(z) | d')`. The witness `d'` may differ per
//! latent. The certificate is sufficient, not necessary: a `false` verdict
//! means "not certified", never "provably not composable".

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::sync::OnceLock;

use serde::Serialize;

use crate::error::{HierError, Result};
use crate::model::{cartesian_of_marginals, DiscreteCombination, HierModel, VariableId};
use crate::par;
use crate::sampler::{occupied_cells, sample, SampleBatch};
use crate::support::{Cell, Provenance, SupportOptions, SupportTable};

/// Cells of `supp(pa(z) | d)` not covered by the best training combination.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Blocker {
    pub latent: VariableId,
    /// Training combination covering the most cells (lexicographic tie-break).
    pub nearest: Option<DiscreteCombination>,
    pub uncovered: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComposabilityVerdict {
    pub d: DiscreteCombination,
    /// Certified composable.
    pub composable: bool,
    pub witness: BTreeMap<VariableId, DiscreteCombination>,
    pub blockers: Vec<Blocker>,
    /// Latents that needed the 4n resample to find their witness.
    pub resampled: Vec<VariableId>,
}

/// Resampled training supports at `4n`, shared across verdicts.
struct Resampler<'a> {
    model: &'a HierModel,
    batches: BTreeMap<DiscreteCombination, OnceLock<Result<SampleBatch, String>>>,
}

impl<'a> Resampler<'a> {
    fn new(model: &'a HierModel, train: &BTreeSet<DiscreteCombination>) -> Self {
        Self { model, batches: train.iter().map(|d| (d.clone(), OnceLock::new())).collect() }
    }

    fn cells(
        &self,
        d: &DiscreteCombination,
        vars: &[VariableId],
        n: usize,
        seed: u64,
        table: &SupportTable,
    ) -> Result<BTreeSet<Cell>> {
        let slot = self.batches.get(d).ok_or_else(|| HierError::invalid(format!("{d} not in training set")))?;
        let batch = slot
            .get_or_init(|| sample(self.model, d, 4 * n, seed).map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| HierError::invalid(e.clone()))?;
        occupied_cells(batch, vars, table.grid())
    }
}

/// Candidate witnesses in the order they are tried: `d` itself when it is a
/// training combination, then the training set in lexicographic order.
fn witness_order<'b>(
    train: &'b BTreeSet<DiscreteCombination>,
    d: &'b DiscreteCombination,
) -> impl Iterator<Item = &'b DiscreteCombination> {
    let own = train.get(d);
    own.into_iter().chain(train.iter().filter(move |t| Some(*t) != own))
}

fn verdict(
    model: &HierModel,
    train: &BTreeSet<DiscreteCombination>,
    d: &DiscreteCombination,
    table: &SupportTable,
    resampler: &Resampler<'_>,
) -> Result<ComposabilityVerdict> {
    if train.is_empty() {
        return Err(HierError::invalid("training set is empty"));
    }
    model.check_combination(d)?;
    let mut witness = BTreeMap::new();
    let mut blockers = Vec::new();
    let mut resampled = Vec::new();
    for z in model.latents() {
        let vars = model.parents(z)?.to_vec();
        let target = &table.require(model, &vars, d)?.cells;
        let mut found = None;
        let mut retry = Vec::new();
        for cand in witness_order(train, d) {
            let entry = table.require(model, &vars, cand)?;
            if target.is_subset(&entry.cells) {
                found = Some(cand.clone());
                break;
            }
            if let Provenance::Empirical { n, seed } = entry.provenance {
                retry.push((cand, n, seed));
            }
        }
        if found.is_none() {
            for &(cand, n, seed) in &retry {
                let cells = resampler.cells(cand, &vars, n, seed, table)?;
                if target.is_subset(&cells) {
                    found = Some(cand.clone());
                    resampled.push(z);
                    break;
                }
            }
        }
        match found {
            Some(w) => {
                witness.insert(z, w);
            }
            None => {
                let mut best: Option<(&DiscreteCombination, Vec<Cell>)> = None;
                for cand in train {
                    let cells = &table.require(model, &vars, cand)?.cells;
                    let missing: Vec<Cell> = target.difference(cells).cloned().collect();
                    if best.as_ref().is_none_or(|(_, m)| missing.len() < m.len()) {
                        best = Some((cand, missing));
                    }
                }
                let (nearest, uncovered) =
                    best.map_or((None, target.iter().cloned().collect()), |(c, m)| (Some(c.clone()), m));
                blockers.push(Blocker { latent: z, nearest, uncovered });
            }
        }
    }
    Ok(ComposabilityVerdict { d: d.clone(), composable: blockers.is_empty(), witness, blockers, resampled })
}

/// Certifies one combination against the training set.
pub fn check_composability(
    model: &HierModel,
    train: &BTreeSet<DiscreteCombination>,
    d: &DiscreteCombination,
    table: &SupportTable,
) -> Result<ComposabilityVerdict> {
    verdict(model, train, d, table, &Resampler::new(model, train))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComposabilityReport {
    pub train: Vec<DiscreteCombination>,
    pub cartesian_size: usize,
    pub verdicts: Vec<ComposabilityVerdict>,
}

impl ComposabilityReport {
    pub fn composable(&self) -> BTreeSet<DiscreteCombination> {
        self.verdicts.iter().filter(|v| v.composable).map(|v| v.d.clone()).collect()
    }

    pub fn composable_count(&self) -> usize {
        self.verdicts.iter().filter(|v| v.composable).count()
    }

    /// Plain-text report: one record per candidate and a summary table.
    pub fn render(&self, model: &HierModel, table: &SupportTable) -> String {
        let mut out = String::new();
        let train: Vec<String> = self.train.iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "training combinations: {}", train.join(" "));
        for v in &self.verdicts {
            let _ = writeln!(out, "candidate {}", v.d);
            let _ = writeln!(out, "  composable: {}", if v.composable { "certified" } else { "not certified" });
            for (z, w) in &v.witness {
                let _ = writeln!(out, "  witness {} <- {}", model.name(*z), w);
            }
            for z in &v.resampled {
                let _ = writeln!(out, "  resampled {}", model.name(*z));
            }
            for b in &v.blockers {
                let parents = model.parents(b.latent).unwrap_or(&[]);
                let nearest = b.nearest.as_ref().map_or("-".to_string(), ToString::to_string);
                let _ = writeln!(out, "  blocker {} (nearest {nearest}):", model.name(b.latent));
                for cell in &b.uncovered {
                    let parts: Vec<String> = parents
                        .iter()
                        .zip(cell)
                        .map(|(p, &c)| format!("{}={}", model.name(*p), table.grid().describe(*p, c)))
                        .collect();
                    let _ = writeln!(out, "    uncovered ({})", parts.join(", "));
                }
            }
        }
        let _ = writeln!(out, "summary");
        let _ = writeln!(out, "  |D_s|       {}", self.train.len());
        let _ = writeln!(out, "  |composable| {}", self.composable_count());
        let _ = writeln!(out, "  |D_x|       {}", self.cartesian_size);
        out
    }
}

/// Verdicts for every candidate (default: the Cartesian product of the
/// training marginals). Training combinations are always included.
pub fn enumerate_composable_space(
    model: &HierModel,
    train: &BTreeSet<DiscreteCombination>,
    candidates: Option<&[DiscreteCombination]>,
    table: &SupportTable,
) -> Result<ComposabilityReport> {
    if train.is_empty() {
        return Err(HierError::invalid("training set is empty"));
    }
    let product = cartesian_of_marginals(train);
    let mut cands: BTreeSet<DiscreteCombination> = match candidates {
        Some(c) => c.iter().cloned().collect(),
        None => product.iter().cloned().collect(),
    };
    cands.extend(train.iter().cloned());
    let cands: Vec<_> = cands.into_iter().collect();
    let resampler = Resampler::new(model, train);
    let verdicts = par::map_slice(&cands, |d| verdict(model, train, d, table, &resampler))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(ComposabilityReport { train: train.iter().cloned().collect(), cartesian_size: product.len(), verdicts })
}

/// Builds the support table for `train ∪ candidates` and enumerates.
pub fn analyze(
    model: &HierModel,
    train: &BTreeSet<DiscreteCombination>,
    candidates: Option<&[DiscreteCombination]>,
    opts: &SupportOptions,
) -> Result<(ComposabilityReport, SupportTable)> {
    let mut combos: BTreeSet<DiscreteCombination> = train.clone();
    match candidates {
        Some(c) => combos.extend(c.iter().cloned()),
        None => combos.extend(cartesian_of_marginals(train)),
    }
    let combos: Vec<_> = combos.into_iter().collect();
    let table = SupportTable::build(model, &combos, opts)?;
    let report = enumerate_composable_space(model, train, candidates, &table)?;
    Ok((report, table))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub label: String,
    pub max_parents: usize,
    pub edges: usize,
    pub composable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Pairs `(i, j)` with `edges(i) ⊆ edges(j)` but more composable
    /// combinations for `j`. Empty for injective mechanisms.
    pub violations: Vec<(usize, usize)>,
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>5} {:>6} {:>11}", "model", "k", "edges", "composable")?;
        for r in &self.rows {
            writeln!(f, "{:<16} {:>5} {:>6} {:>11}", r.label, r.max_parents, r.edges, r.composable)?;
        }
        writeln!(f, "monotone: {}", self.violations.is_empty())
    }
}

/// Composable-set size across a family of models that differ only in edges.
pub fn sparsity_sweep(
    family: &[(String, HierModel)],
    train: &BTreeSet<DiscreteCombination>,
    opts: &SupportOptions,
) -> Result<SweepReport> {
    let Some((_, first)) = family.first() else {
        return Ok(SweepReport { rows: Vec::new(), violations: Vec::new() });
    };
    for (label, m) in family {
        if m.widths() != first.widths() {
            return Err(HierError::NotComparable(format!(
                "{label} has widths {:?}, expected {:?}",
                m.widths(),
                first.widths()
            )));
        }
    }
    let rows = family
        .iter()
        .map(|(label, m)| {
            let (report, _) = analyze(m, train, None, opts)?;
            let max_parents = m
                .latents()
                .iter()
                .filter(|v| v.level >= 2)
                .map(|&v| m.parents(v).map_or(0, <[_]>::len))
                .max()
                .unwrap_or(0);
            Ok(SweepRow {
                label: label.clone(),
                max_parents,
                edges: m.edges().len(),
                composable: report.composable_count(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut violations = Vec::new();
    for (i, (_, a)) in family.iter().enumerate() {
        for (j, (_, b)) in family.iter().enumerate() {
            if i != j && a.edges().is_subset(b.edges()) && rows[j].composable > rows[i].composable {
                violations.push((i, j));
            }
        }
    }
    Ok(SweepReport { rows, violations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn d(v: &[u32]) -> DiscreteCombination {
        DiscreteCombination::new(v.to_vec())
    }

    fn set(items: &[&[u32]]) -> BTreeSet<DiscreteCombination> {
        items.iter().map(|v| d(v)).collect()
    }

    fn exact() -> SupportOptions {
        SupportOptions::default()
    }

    #[test]
    fn training_member_is_its_own_witness() {
        let m = fixtures::layered_table();
        let train = set(&[&[0, 1], &[1, 0], &[0, 0]]);
        let (_, table) = analyze(&m, &train, None, &exact()).unwrap();
        let v = check_composability(&m, &train, &d(&[1, 0]), &table).unwrap();
        assert!(v.composable);
        assert!(v.witness.values().all(|w| *w == d(&[1, 0])));
    }

    #[test]
    fn singleton_parents_compose() {
        let m = fixtures::two_root_singleton_table();
        let train = set(&[&[0, 1], &[1, 0]]);
        let (report, table) = analyze(&m, &train, None, &exact()).unwrap();
        let v = check_composability(&m, &train, &d(&[1, 1]), &table).unwrap();
        assert!(v.composable, "{:?}", v.blockers);
        // different witnesses per latent
        assert_eq!(v.witness[&VariableId::latent(2, 1)], d(&[1, 0]));
        assert_eq!(v.witness[&VariableId::latent(2, 2)], d(&[0, 1]));
        assert_eq!(report.composable().len(), 4);
    }

    #[test]
    fn joint_parent_blocks() {
        let m = fixtures::layered_table();
        let train = set(&[&[0, 1], &[1, 0]]);
        let (_, table) = analyze(&m, &train, None, &exact()).unwrap();
        let v = check_composability(&m, &train, &d(&[1, 1]), &table).unwrap();
        assert!(!v.composable);
        let z22 = VariableId::latent(2, 2);
        let b = v.blockers.iter().find(|b| b.latent == z22).expect("z2.2 blocked");
        // cells are (z1.1, z1.2) with both present (values 1 or 2)
        assert!(b.uncovered.iter().all(|c| c[0] >= 1_000_000_000 && c[1] >= 1_000_000_000));
    }

    #[test]
    fn two_root_composable_space() {
        let train = set(&[&[0, 0], &[0, 1], &[1, 0]]);
        let (single, _) = analyze(&fixtures::two_root_singleton_table(), &train, None, &exact()).unwrap();
        assert_eq!(single.composable(), set(&[&[0, 0], &[0, 1], &[1, 0], &[1, 1]]));
        let (joint, _) = analyze(&fixtures::two_root_joint_table(), &train, None, &exact()).unwrap();
        assert_eq!(joint.composable(), train);
        let full = set(&[&[0, 0], &[0, 1], &[1, 0], &[1, 1]]);
        let (all, _) = analyze(&fixtures::two_root_joint_table(), &full, None, &exact()).unwrap();
        assert_eq!(all.composable(), full);
    }

    #[test]
    fn empirical_tables_agree_on_two_root_fixtures() {
        let train = set(&[&[0, 0], &[0, 1], &[1, 0]]);
        let opts = SupportOptions { n: 5_000, seed: 3, prefer_exact: false, ..Default::default() };
        let (single, _) = analyze(&fixtures::two_root_singleton(), &train, None, &opts).unwrap();
        assert_eq!(single.composable_count(), 4);
        let (joint, _) = analyze(&fixtures::two_root_joint(), &train, None, &opts).unwrap();
        assert_eq!(joint.composable_count(), 3);
    }

    #[test]
    fn missing_entry_is_an_error() {
        let m = fixtures::two_root_singleton_table();
        let train = set(&[&[0, 1]]);
        let table = SupportTable::build(&m, &[d(&[0, 1])], &exact()).unwrap();
        let err = check_composability(&m, &train, &d(&[1, 1]), &table).unwrap_err();
        assert!(matches!(err, HierError::MissingEntry { .. }));
    }

    #[test]
    fn sweep_counts_and_rejects_mismatched_widths() {
        let train = set(&[&[0, 0], &[0, 1], &[1, 0]]);
        let family = vec![
            ("k=1".to_string(), fixtures::two_root_singleton_table()),
            ("k=2".to_string(), fixtures::two_root_joint_table()),
        ];
        let report = sparsity_sweep(&family, &train, &exact()).unwrap();
        assert_eq!(report.rows[0].composable, 4);
        assert_eq!(report.rows[1].composable, 3);
        assert!(report.violations.is_empty());
        let same = vec![family[0].clone(), family[0].clone()];
        let r = sparsity_sweep(&same, &train, &exact()).unwrap();
        assert_eq!(r.rows[0].composable, r.rows[1].composable);
        let bad = vec![family[0].clone(), ("layered".to_string(), fixtures::layered_table())];
        assert!(matches!(sparsity_sweep(&bad, &train, &exact()), Err(HierError::NotComparable(_))));
    }

    #[test]
    fn witnesses_recheck_from_table() {
        let m = fixtures::layered_table();
        let train = set(&[&[0, 1], &[1, 0], &[1, 1]]);
        let (report, table) = analyze(&m, &train, Some(&fixtures::binary_combinations(2)), &exact()).unwrap();
        for v in &report.verdicts {
            for (z, w) in &v.witness {
                let vars = m.parents(*z).unwrap();
                assert!(table.get(vars, &v.d).unwrap().cells.is_subset(&table.get(vars, w).unwrap().cells));
            }
        }
    }
}
