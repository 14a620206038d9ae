//! Finite surrogates for `supp(S | d)`.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{HierError, Result};
use crate::model::{DiscreteCombination, HierModel, VariableId};
use crate::par;
use crate::sampler::{occupied_cells, sample};

/// One grid cell per variable of a set.
pub type Cell = Vec<i64>;

/// Quantization of continuous values. Discrete concepts (level 0) always map
/// to their integer value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum QuantizationGrid {
    /// `cells` equal bins per variable over a per-variable range; values
    /// outside the range fall into the edge bins.
    Uniform { cells: usize, ranges: BTreeMap<VariableId, (f64, f64)> },
    /// Distinct values get distinct cells (rounded at 1e-9).
    Exact,
}

pub const DEFAULT_CELLS: usize = 16;

impl QuantizationGrid {
    pub fn uniform(cells: usize) -> Self {
        Self::Uniform { cells: cells.max(1), ranges: BTreeMap::new() }
    }

    pub fn with_range(mut self, v: VariableId, lo: f64, hi: f64) -> Self {
        if let Self::Uniform { ranges, .. } = &mut self {
            ranges.insert(v, (lo, hi));
        }
        self
    }

    /// Fits per-variable ranges to pooled quantiles (`tail` in each direction)
    /// of the given batches.
    pub fn fit(cells: usize, vars: &[VariableId], batches: &[&crate::sampler::SampleBatch], tail: f64) -> Result<Self> {
        let mut grid = Self::uniform(cells);
        for &v in vars.iter().filter(|v| v.level > 0) {
            let mut pooled: Vec<f64> = Vec::new();
            for b in batches {
                pooled.extend_from_slice(b.column(v)?);
            }
            if pooled.is_empty() {
                continue;
            }
            pooled.sort_by(f64::total_cmp);
            let q = |p: f64| pooled[((pooled.len() - 1) as f64 * p).round() as usize];
            grid = grid.with_range(v, q(tail), q(1.0 - tail));
        }
        Ok(grid)
    }

    pub fn cell(&self, v: VariableId, value: f64) -> i64 {
        if v.level == 0 {
            return value as i64;
        }
        match self {
            Self::Exact => (value * 1e9).round() as i64,
            Self::Uniform { cells, ranges } => {
                let (lo, hi) = ranges.get(&v).copied().unwrap_or((0.0, 1.0));
                if hi <= lo {
                    return 0;
                }
                let pos = ((value - lo) / (hi - lo) * *cells as f64).floor();
                pos.clamp(0.0, (*cells - 1) as f64) as i64
            }
        }
    }

    /// Human-readable bounds of a cell index for one variable.
    pub fn describe(&self, v: VariableId, cell: i64) -> String {
        if v.level == 0 {
            return cell.to_string();
        }
        match self {
            Self::Exact => format!("{}", cell as f64 / 1e9),
            Self::Uniform { cells, ranges } => {
                let (lo, hi) = ranges.get(&v).copied().unwrap_or((0.0, 1.0));
                let w = (hi - lo) / *cells as f64;
                let a = lo + w * cell as f64;
                format!("#{cell}[{a:.4},{:.4})", a + w)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Empirical { n: usize, seed: u64 },
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportEntry {
    pub cells: BTreeSet<Cell>,
    pub provenance: Provenance,
}

pub type EntryKey = (Vec<VariableId>, DiscreteCombination);

/// `supp(S | d)` for variable sets `S` (sorted) and combinations `d`, on one grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportTable {
    grid: QuantizationGrid,
    entries: BTreeMap<EntryKey, SupportEntry>,
}

/// How to build a table for a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupportOptions {
    /// Rows per combination for empirical entries.
    pub n: usize,
    pub seed: u64,
    /// Bins per dimension for the empirical grid.
    pub cells: usize,
    /// Use exact enumeration when the model allows it.
    pub prefer_exact: bool,
}

impl Default for SupportOptions {
    fn default() -> Self {
        Self { n: 10_000, seed: 0, cells: DEFAULT_CELLS, prefer_exact: true }
    }
}

/// Pooled-quantile tail used when fitting empirical grids.
const GRID_TAIL: f64 = 0.005;

impl SupportTable {
    pub fn new(grid: QuantizationGrid) -> Self {
        Self { grid, entries: BTreeMap::new() }
    }

    pub fn grid(&self) -> &QuantizationGrid {
        &self.grid
    }

    pub fn entries(&self) -> &BTreeMap<EntryKey, SupportEntry> {
        &self.entries
    }

    /// Inserts an entry; exact entries are never replaced by empirical ones.
    pub fn insert(&mut self, vars: Vec<VariableId>, d: DiscreteCombination, entry: SupportEntry) {
        let key = (vars, d);
        if let Some(existing) = self.entries.get(&key) {
            if existing.provenance == Provenance::Exact && entry.provenance != Provenance::Exact {
                return;
            }
        }
        self.entries.insert(key, entry);
    }

    pub fn get(&self, vars: &[VariableId], d: &DiscreteCombination) -> Option<&SupportEntry> {
        self.entries.get(&(vars.to_vec(), d.clone()))
    }

    pub fn require(&self, model: &HierModel, vars: &[VariableId], d: &DiscreteCombination) -> Result<&SupportEntry> {
        self.get(vars, d).ok_or_else(|| HierError::MissingEntry {
            variables: format!("[{}]", vars.iter().map(|v| model.name(*v)).collect::<Vec<_>>().join(",")),
            combination: d.to_string(),
        })
    }

    /// Parent sets of every continuous latent.
    pub fn parent_sets(model: &HierModel) -> Result<Vec<(VariableId, Vec<VariableId>)>> {
        model.latents().into_iter().map(|z| Ok((z, model.parents(z)?.to_vec()))).collect()
    }

    /// Builds the table for every latent's parent set under each combination:
    /// exact when the model is enumerable and `prefer_exact`, otherwise from
    /// samples on a grid fitted to the pooled draws.
    pub fn build(model: &HierModel, combos: &[DiscreteCombination], opts: &SupportOptions) -> Result<Self> {
        if opts.prefer_exact && model.is_enumerable() {
            Self::exact(model, combos, QuantizationGrid::Exact)
        } else {
            Self::empirical(model, combos, opts)
        }
    }

    pub fn empirical(model: &HierModel, combos: &[DiscreteCombination], opts: &SupportOptions) -> Result<Self> {
        let sets = Self::parent_sets(model)?;
        let batches = par::map_slice(combos, |d| sample(model, d, opts.n, opts.seed));
        let batches = batches.into_iter().collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = batches.iter().collect();
        let grid = QuantizationGrid::fit(opts.cells, &model.latents(), &refs, GRID_TAIL)?;
        let mut table = Self::new(grid);
        for (d, batch) in combos.iter().zip(&batches) {
            for (_, vars) in &sets {
                let cells = occupied_cells(batch, vars, &table.grid)?;
                table.insert(
                    vars.clone(),
                    d.clone(),
                    SupportEntry { cells, provenance: Provenance::Empirical { n: opts.n, seed: opts.seed } },
                );
            }
        }
        Ok(table)
    }

    /// Exact supports by enumerating every root configuration and propagating
    /// through the (noiseless, table) mechanisms.
    pub fn exact(model: &HierModel, combos: &[DiscreteCombination], grid: QuantizationGrid) -> Result<Self> {
        if !model.is_enumerable() {
            return Err(HierError::UnsupportedFamily {
                variable: "model".into(),
                reason: "exact supports need finite roots and noiseless table mechanisms".into(),
            });
        }
        let sets = Self::parent_sets(model)?;
        let mut table = Self::new(grid);
        for d in combos {
            let configs = enumerate_values(model, d)?;
            for (_, vars) in &sets {
                let cells = configs
                    .iter()
                    .map(|values| vars.iter().map(|v| table.grid.cell(*v, values[v])).collect())
                    .collect();
                table.insert(vars.clone(), d.clone(), SupportEntry { cells, provenance: Provenance::Exact });
            }
        }
        Ok(table)
    }
}

/// Every joint value assignment of `d` and the latents reachable under `d`,
/// one per root-atom configuration.
pub fn enumerate_values(model: &HierModel, d: &DiscreteCombination) -> Result<Vec<BTreeMap<VariableId, f64>>> {
    model.check_combination(d)?;
    let roots = model.level_vars(1);
    let mut configs: Vec<BTreeMap<VariableId, f64>> = vec![BTreeMap::new()];
    for &z in &roots {
        let c = d.values()[z.index as usize - 1] as usize;
        let spec = model.root(z.index).ok_or_else(|| HierError::UnknownVariable(model.name(z)))?;
        let atoms = spec.values[c].atoms().ok_or_else(|| HierError::UnsupportedFamily {
            variable: model.name(z),
            reason: "continuous root cannot be enumerated".into(),
        })?;
        configs = configs
            .into_iter()
            .flat_map(|cfg| {
                atoms.iter().map(move |&(value, _)| {
                    let mut next = cfg.clone();
                    next.insert(z, value);
                    next
                })
            })
            .collect();
    }
    for cfg in &mut configs {
        for (i, &c) in d.values().iter().enumerate() {
            cfg.insert(VariableId::discrete(i as u32 + 1), f64::from(c));
        }
        for l in 2..=model.num_levels() {
            for v in model.level_vars(l) {
                let mech = model.mechanism(v).ok_or_else(|| HierError::UnknownVariable(model.name(v)))?;
                let pa: Vec<f64> = model.parents(v)?.iter().map(|p| cfg[p]).collect();
                cfg.insert(v, mech.eval_latent(&pa, 0.0));
            }
        }
    }
    Ok(configs)
}
