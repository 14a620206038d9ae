//! Level-stratified structure recovery from latent samples, and scoring of a
//! recovered graph against the truth up to per-level index permutations.
//!
//! Levels fix edge orientation, so only the skeleton phase of a PC-style
//! search is needed, and only between adjacent latent levels: the edge
//! `u -> v` (u at level l, v at l+1) is dropped as soon as `u ⟂ v | C` for
//! some `C ⊆ level(l) \ {u}`, searched by increasing `|C|`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use pathfinding::prelude::{kuhn_munkres, Matrix};
use serde::{Deserialize, Serialize};

use crate::error::{HierError, Result};
use crate::model::{parse_variable_name, HierModel, VariableId};
use crate::par;
use crate::sampler::SampleBatch;
use crate::stats::CiTest;

pub type Edge = (VariableId, VariableId);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestRecord {
    pub parent: VariableId,
    pub child: VariableId,
    pub conditioning: Vec<VariableId>,
    pub statistic: f64,
    pub p_value: f64,
    pub independent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveredGraph {
    /// `n(d), n(z_1) .. n(z_L), d_x`, as in the model spec.
    pub widths: Vec<usize>,
    pub edges: BTreeSet<Edge>,
    /// Every test run, ordered by (parent, child) and then search order.
    pub log: Vec<TestRecord>,
    pub alpha: f64,
    /// Per-test level after any multiple-testing correction.
    pub effective_alpha: f64,
    pub test: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryOptions {
    pub test: CiTest,
    pub alpha: f64,
    /// Largest conditioning set; `None` means `min(width - 1, 3)`.
    pub max_conditioning: Option<usize>,
    /// Divide `alpha` by the number of candidate pairs.
    pub bonferroni: bool,
    /// Rows required before any test is run.
    pub min_samples: usize,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        Self {
            test: CiTest::PartialCorrelation,
            alpha: 0.01,
            max_conditioning: None,
            bonferroni: false,
            min_samples: 1000,
        }
    }
}

pub const DEFAULT_CONDITIONING_CAP: usize = 3;

fn subsets_of_size(items: &[VariableId], k: usize) -> Vec<Vec<VariableId>> {
    fn go(items: &[VariableId], k: usize, start: usize, cur: &mut Vec<VariableId>, out: &mut Vec<Vec<VariableId>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            cur.push(items[i]);
            go(items, k, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(items, k, 0, &mut Vec::new(), &mut out);
    out
}

/// Recovers latent-to-latent edges from batches drawn under varied `d`.
pub fn recover_structure(batches: &[SampleBatch], widths: &[usize], opts: &RecoveryOptions) -> Result<RecoveredGraph> {
    if widths.len() < 3 {
        return Err(HierError::invalid("widths need n(d), at least one latent level and d_x"));
    }
    let pooled = SampleBatch::concat(batches.to_vec())?;
    if pooled.len() < opts.min_samples {
        return Err(HierError::InsufficientSamples { needed: opts.min_samples, have: pooled.len() });
    }
    let top = widths.len() - 2;
    let level_vars = |l: usize| (1..=widths[l] as u32).map(|i| VariableId::latent(l as u32, i)).collect::<Vec<_>>();
    let mut pairs = Vec::new();
    for l in 1..top {
        for u in level_vars(l) {
            for v in level_vars(l + 1) {
                pairs.push((u, v));
            }
        }
    }
    let effective_alpha =
        if opts.bonferroni && !pairs.is_empty() { opts.alpha / pairs.len() as f64 } else { opts.alpha };
    let results = par::map_slice(&pairs, |&(u, v)| -> Result<(bool, Vec<TestRecord>)> {
        let others: Vec<VariableId> = level_vars(u.level as usize).into_iter().filter(|w| *w != u).collect();
        let cap = opts.max_conditioning.unwrap_or(DEFAULT_CONDITIONING_CAP).min(others.len());
        let (xu, xv) = (pooled.column(u)?, pooled.column(v)?);
        let mut log = Vec::new();
        for size in 0..=cap {
            for c in subsets_of_size(&others, size) {
                let cond = pooled.columns_for(&c)?;
                let out = opts.test.run(xu, xv, &cond)?;
                let independent = out.p_value > effective_alpha;
                log.push(TestRecord {
                    parent: u,
                    child: v,
                    conditioning: c,
                    statistic: out.statistic,
                    p_value: out.p_value,
                    independent,
                });
                if independent {
                    return Ok((false, log));
                }
            }
        }
        Ok((true, log))
    });
    let mut edges = BTreeSet::new();
    let mut log = Vec::new();
    for (&pair, res) in pairs.iter().zip(results) {
        let (present, records) = res?;
        if present {
            edges.insert(pair);
        }
        log.extend(records);
    }
    Ok(RecoveredGraph {
        widths: widths.to_vec(),
        edges,
        log,
        alpha: opts.alpha,
        effective_alpha,
        test: opts.test.name().to_string(),
    })
}

fn name(v: VariableId) -> String {
    format!("z{}.{}", v.level, v.index)
}

#[derive(Serialize, Deserialize)]
struct EdgeDoc {
    levels: Vec<usize>,
    edges: Vec<(String, String)>,
}

impl RecoveredGraph {
    /// The recovered edges in the model-spec syntax (`levels` and `edges`).
    pub fn to_spec_edges(&self) -> String {
        let doc = EdgeDoc {
            levels: self.widths.clone(),
            edges: self.edges.iter().map(|&(p, c)| (name(p), name(c))).collect(),
        };
        toml::to_string(&doc).expect("plain document serializes")
    }

    /// Parses `levels`/`edges` back into an edge graph (tests and diffs).
    pub fn from_spec_edges(text: &str) -> Result<Self> {
        let doc: EdgeDoc = toml::from_str(text).map_err(|e| HierError::parse(None, None, e.to_string()))?;
        let levels = doc.levels.len().saturating_sub(2);
        let edges = doc
            .edges
            .iter()
            .map(|(p, c)| Ok((parse_variable_name(p, levels)?, parse_variable_name(c, levels)?)))
            .collect::<Result<BTreeSet<_>>>()?;
        Ok(Self::from_edges(doc.levels, edges))
    }

    pub fn from_edges(widths: Vec<usize>, edges: BTreeSet<Edge>) -> Self {
        Self { widths, edges, log: Vec::new(), alpha: 0.0, effective_alpha: 0.0, test: String::new() }
    }

    /// Latent-latent edges of a model as a graph.
    pub fn from_model(model: &HierModel) -> Self {
        Self::from_edges(model.widths().to_vec(), model.latent_edges())
    }

    /// Test log as text, one record per line.
    pub fn render_log(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "test {} alpha {} effective {:e}", self.test, self.alpha, self.effective_alpha);
        for r in &self.log {
            let cond: Vec<String> = r.conditioning.iter().map(|v| name(*v)).collect();
            let _ = writeln!(
                out,
                "{} -> {} | {{{}}} stat {:.6e} p {:.6e} {}",
                name(r.parent),
                name(r.child),
                cond.join(","),
                r.statistic,
                r.p_value,
                if r.independent { "independent" } else { "dependent" }
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub exact_match: bool,
    /// `permutations[l - 1][i]` is the truth index (0-based) assigned to the
    /// recovered variable `z_l.(i+1)`.
    pub permutations: Vec<Vec<usize>>,
    pub matched_edges: usize,
    pub recovered_edges: usize,
    pub true_edges: usize,
}

/// Joint exhaustive search is used while the product of per-level
/// factorials stays below this bound.
const EXHAUSTIVE_LIMIT: f64 = 1e6;
/// Per-level exhaustive search width inside coordinate ascent.
const LEVEL_EXHAUSTIVE_WIDTH: usize = 8;

fn matched(rec: &BTreeSet<Edge>, truth: &BTreeSet<Edge>, perms: &[Vec<usize>]) -> usize {
    rec.iter()
        .filter(|(p, c)| {
            let map = |v: &VariableId| {
                VariableId::latent(v.level, perms[v.level as usize - 1][v.index as usize - 1] as u32 + 1)
            };
            truth.contains(&(map(p), map(c)))
        })
        .count()
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("pivot exists");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut out = vec![p.clone()];
    while next_permutation(&mut p) {
        out.push(p.clone());
    }
    out
}

fn exhaustive(rec: &BTreeSet<Edge>, truth: &BTreeSet<Edge>, latent_widths: &[usize]) -> Vec<Vec<usize>> {
    let options: Vec<Vec<Vec<usize>>> = latent_widths.iter().map(|&w| all_permutations(w)).collect();
    let mut idx = vec![0usize; options.len()];
    let mut best = (0usize, options.iter().map(|o| o[0].clone()).collect::<Vec<_>>());
    let mut cur = best.1.clone();
    best.0 = matched(rec, truth, &cur);
    loop {
        let mut l = 0;
        loop {
            if l == idx.len() {
                return best.1;
            }
            idx[l] += 1;
            if idx[l] < options[l].len() {
                cur[l] = options[l][idx[l]].clone();
                break;
            }
            idx[l] = 0;
            cur[l] = options[l][0].clone();
            l += 1;
        }
        let m = matched(rec, truth, &cur);
        if m > best.0 {
            best = (m, cur.clone());
        }
    }
}

fn coordinate_ascent(rec: &BTreeSet<Edge>, truth: &BTreeSet<Edge>, latent_widths: &[usize]) -> Vec<Vec<usize>> {
    let mut perms: Vec<Vec<usize>> = latent_widths.iter().map(|&w| (0..w).collect()).collect();
    let mut score = matched(rec, truth, &perms);
    loop {
        let before = score;
        for l in 0..perms.len() {
            let w = latent_widths[l];
            let candidate = if w <= LEVEL_EXHAUSTIVE_WIDTH {
                let mut best = (score, perms[l].clone());
                for p in all_permutations(w) {
                    let mut trial = perms.clone();
                    trial[l] = p;
                    let m = matched(rec, truth, &trial);
                    if m > best.0 {
                        best = (m, trial[l].clone());
                    }
                }
                best.1
            } else {
                // weight(i, j): edges at level l matched if recovered i maps to truth j
                let weights = Matrix::from_fn(w, w, |(i, j)| {
                    let mut trial = perms.clone();
                    let mut single = vec![usize::MAX; w];
                    single[i] = j;
                    trial[l] = single;
                    rec.iter()
                        .filter(|(p, c)| {
                            p.level as usize == l + 1 && p.index as usize == i + 1
                                || c.level as usize == l + 1 && c.index as usize == i + 1
                        })
                        .filter(|(p, c)| {
                            let map = |v: &VariableId| {
                                let t = trial[v.level as usize - 1][v.index as usize - 1];
                                VariableId::latent(v.level, t as u32 + 1)
                            };
                            truth.contains(&(map(p), map(c)))
                        })
                        .count() as i64
                });
                kuhn_munkres(&weights).1
            };
            let mut trial = perms.clone();
            trial[l] = candidate;
            let m = matched(rec, truth, &trial);
            if m > score {
                score = m;
                perms = trial;
            }
        }
        if score == before {
            return perms;
        }
    }
}

/// Scores latent-latent edges of `recovered` against `truth` up to per-level
/// permutations, maximizing the number of matched edges.
pub fn score_graph(recovered: &RecoveredGraph, truth: &HierModel) -> Result<GraphScore> {
    let tw = truth.widths();
    let rw = &recovered.widths;
    if rw.len() != tw.len() || rw[1..rw.len() - 1] != tw[1..tw.len() - 1] {
        return Err(HierError::ShapeMismatch(format!("latent widths differ: {rw:?} vs {tw:?}")));
    }
    let truth_edges = truth.latent_edges().into_iter().filter(|(p, _)| p.level >= 1).collect::<BTreeSet<_>>();
    let rec: BTreeSet<Edge> =
        recovered.edges.iter().filter(|(p, c)| p.level >= 1 && (c.level as usize) < tw.len() - 1).copied().collect();
    let latent_widths = &tw[1..tw.len() - 1];
    let size: f64 = latent_widths.iter().map(|&w| (1..=w).map(|k| k as f64).product::<f64>()).product();
    let permutations = if size <= EXHAUSTIVE_LIMIT {
        exhaustive(&rec, &truth_edges, latent_widths)
    } else {
        coordinate_ascent(&rec, &truth_edges, latent_widths)
    };
    let m = matched(&rec, &truth_edges, &permutations);
    let precision =
        if rec.is_empty() { f64::from(u8::from(truth_edges.is_empty())) } else { m as f64 / rec.len() as f64 };
    let recall = if truth_edges.is_empty() { 1.0 } else { m as f64 / truth_edges.len() as f64 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(GraphScore {
        precision,
        recall,
        f1,
        exact_match: m == rec.len() && m == truth_edges.len(),
        permutations,
        matched_edges: m,
        recovered_edges: rec.len(),
        true_edges: truth_edges.len(),
    })
}

/// Relabels latent indices per level: `z_l.i` becomes `z_l.(perm[l-1][i-1]+1)`.
pub fn permute_edges(edges: &BTreeSet<Edge>, perms: &[Vec<usize>]) -> BTreeSet<Edge> {
    let map = |v: VariableId| VariableId::latent(v.level, perms[v.level as usize - 1][v.index as usize - 1] as u32 + 1);
    edges.iter().map(|&(p, c)| (map(p), map(c))).collect()
}

/// Summary lines for a score.
pub fn render_score(score: &GraphScore) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "precision {:.6}", score.precision);
    let _ = writeln!(out, "recall {:.6} ({}/{})", score.recall, score.matched_edges, score.true_edges);
    let _ = writeln!(out, "exact_match {}", score.exact_match);
    for (l, p) in score.permutations.iter().enumerate() {
        let shown: Vec<String> = p.iter().map(|i| (i + 1).to_string()).collect();
        let _ = writeln!(out, "permutation level {} [{}]", l + 1, shown.join(","));
    }
    out
}

/// Pairs of per-variable truth maps, for callers that want a lookup.
pub fn permutation_maps(score: &GraphScore) -> BTreeMap<VariableId, VariableId> {
    let mut out = BTreeMap::new();
    for (l, p) in score.permutations.iter().enumerate() {
        for (i, &t) in p.iter().enumerate() {
            out.insert(VariableId::latent(l as u32 + 1, i as u32 + 1), VariableId::latent(l as u32 + 1, t as u32 + 1));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::sampler::sample_many;

    fn swap_level(edges: &BTreeSet<Edge>, level: u32, a: u32, b: u32) -> BTreeSet<Edge> {
        let f = |v: VariableId| {
            if v.level != level {
                v
            } else if v.index == a {
                VariableId::latent(level, b)
            } else if v.index == b {
                VariableId::latent(level, a)
            } else {
                v
            }
        };
        edges.iter().map(|&(p, c)| (f(p), f(c))).collect()
    }

    #[test]
    fn truth_scores_perfectly() {
        let m = fixtures::layered_linear(0.5);
        let s = score_graph(&RecoveredGraph::from_model(&m), &m).unwrap();
        assert!(s.exact_match);
        assert_eq!((s.precision, s.recall), (1.0, 1.0));
        assert_eq!(s.true_edges, 16);
    }

    #[test]
    fn swapped_indices_still_match() {
        let m = fixtures::layered_linear(0.5);
        let edges = swap_level(&m.latent_edges(), 2, 1, 3);
        let g = RecoveredGraph::from_edges(m.widths().to_vec(), edges.clone());
        let s = score_graph(&g, &m).unwrap();
        assert!(s.exact_match);
        assert_eq!(permute_edges(&edges, &s.permutations), m.latent_edges());
    }

    #[test]
    fn missing_edge_lowers_recall() {
        let m = fixtures::layered_linear(0.5);
        let mut edges = m.latent_edges();
        let first = *edges.iter().find(|(p, _)| p.level == 2).unwrap();
        edges.remove(&first);
        let s = score_graph(&RecoveredGraph::from_edges(m.widths().to_vec(), edges), &m).unwrap();
        assert!(!s.exact_match);
        assert_eq!(s.matched_edges, 15);
        assert_eq!(s.precision, 1.0);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let m = fixtures::layered_linear(0.5);
        let g = RecoveredGraph::from_edges(vec![2, 2, 3, 6, 10], BTreeSet::new());
        assert!(matches!(score_graph(&g, &m), Err(HierError::ShapeMismatch(_))));
    }

    #[test]
    fn coordinate_ascent_finds_swaps() {
        let m = fixtures::layered_linear(0.5);
        let truth = m.latent_edges();
        // a heuristic: single-level relabelings are always undone
        let edges = swap_level(&truth, 3, 2, 5);
        let perms = coordinate_ascent(&edges, &truth, &[2, 4, 6]);
        assert_eq!(matched(&edges, &truth, &perms), truth.len());
    }

    #[test]
    fn chain_recovery() {
        let m = fixtures::chain(0.5);
        let batches = sample_many(&m, &m.all_combinations(), 5000, 1).unwrap();
        let g = recover_structure(std::slice::from_ref(&batches), m.widths(), &RecoveryOptions::default()).unwrap();
        assert_eq!(g.edges, m.latent_edges().into_iter().filter(|(p, _)| p.level >= 1).collect());
        let parsed = RecoveredGraph::from_spec_edges(&g.to_spec_edges()).unwrap();
        assert_eq!(parsed.edges, g.edges);
    }

    #[test]
    fn too_few_rows() {
        let m = fixtures::chain(0.5);
        let batches = sample_many(&m, &m.all_combinations(), 10, 1).unwrap();
        let err =
            recover_structure(std::slice::from_ref(&batches), m.widths(), &RecoveryOptions::default()).unwrap_err();
        assert!(matches!(err, HierError::InsufficientSamples { .. }));
    }

    #[test]
    fn subsets_enumerate_in_order() {
        let vars: Vec<VariableId> = (1..=4).map(|i| VariableId::latent(1, i)).collect();
        assert_eq!(subsets_of_size(&vars, 2).len(), 6);
        assert_eq!(subsets_of_size(&vars, 0), vec![Vec::<VariableId>::new()]);
    }
}
