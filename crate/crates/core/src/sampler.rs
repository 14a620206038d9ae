//! Ancestral sampling with counter-based noise.
//!
//! Every uniform draw is addressed by `(seed, variable, row, slot)`: the
//! generator is ChaCha8 keyed by the seed, with the variable selecting the
//! stream and `row * slots + slot` selecting the 64-bit word pair. Gaussian
//! noise is the standard normal inverse CDF of `(bits >> 11 + 0.5) / 2^53`,
//! uniform noise is `2u - 1`. Rows are therefore independent of batch size
//! (the first `n` rows of a `2n` batch equal the `n` batch) and can be
//! generated in any order.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{HierError, Result};
use crate::model::{DiscreteCombination, HierModel, NoiseFamily, VariableId};
use crate::par;
use crate::spec_format::model_hash;
use crate::support::{Cell, QuantizationGrid};

/// Addressable uniform stream.
#[derive(Clone)]
pub struct NoiseSource {
    base: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self { base: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Fills `out` with the uniforms for `(stream, row)`; `out.len()` is the
    /// per-row slot count and must be constant for a given stream.
    pub fn uniforms(&self, stream: u64, row: u64, out: &mut [f64]) {
        let mut rng = self.base.clone();
        rng.set_stream(stream);
        rng.set_word_pos(u128::from(row) * out.len() as u128 * 2);
        for u in out.iter_mut() {
            *u = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
        }
    }
}

fn stream_id(v: VariableId) -> u64 {
    (u64::from(v.level) << 32) | u64::from(v.index)
}

pub fn standard_normal(u: f64) -> f64 {
    Normal::standard().inverse_cdf(u)
}

fn transform(family: NoiseFamily, u: f64) -> f64 {
    match family {
        NoiseFamily::Gaussian => standard_normal(u),
        NoiseFamily::Uniform => 2.0 * u - 1.0,
    }
}

/// Draws of every variable, column-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    /// Conditioning combination of each row.
    pub conditioning: Vec<DiscreteCombination>,
    /// `d` and `z` columns keyed by variable.
    pub columns: BTreeMap<VariableId, Vec<f64>>,
    /// `d_x` observation columns.
    pub observation: Vec<Vec<f64>>,
    pub seed: u64,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.conditioning.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditioning.is_empty()
    }

    pub fn column(&self, v: VariableId) -> Result<&[f64]> {
        self.columns.get(&v).map(Vec::as_slice).ok_or_else(|| HierError::UnknownVariable(format!("{v:?}")))
    }

    /// Columns for a variable list, in the given order.
    pub fn columns_for(&self, vars: &[VariableId]) -> Result<Vec<&[f64]>> {
        vars.iter().map(|&v| self.column(v)).collect()
    }

    /// Concatenates rows. Seeds of later batches are dropped.
    pub fn concat(batches: Vec<SampleBatch>) -> Result<SampleBatch> {
        let mut iter = batches.into_iter();
        let mut out = iter.next().ok_or_else(|| HierError::invalid("no batches to concatenate"))?;
        for b in iter {
            if b.columns.keys().ne(out.columns.keys()) || b.observation.len() != out.observation.len() {
                return Err(HierError::ShapeMismatch("batches have different variables".into()));
            }
            out.conditioning.extend(b.conditioning);
            for (k, col) in b.columns {
                out.columns.get_mut(&k).expect("checked keys").extend(col);
            }
            for (dst, src) in out.observation.iter_mut().zip(b.observation) {
                dst.extend(src);
            }
        }
        Ok(out)
    }

    /// Header names in export order.
    pub fn header(&self, model: &HierModel) -> Vec<String> {
        self.columns
            .keys()
            .map(|&v| model.name(v))
            .chain((1..=self.observation.len()).map(|k| format!("x.{k}")))
            .collect()
    }

    /// Writes the columnar export: a header row then one row per sample.
    pub fn write_csv<W: Write>(&self, model: &HierModel, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.header(model))?;
        let cols: Vec<&Vec<f64>> = self.columns.values().chain(self.observation.iter()).collect();
        let mut record = Vec::with_capacity(cols.len());
        for r in 0..self.len() {
            record.clear();
            record.extend(cols.iter().map(|c| format_value(c[r])));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `<path>` and the sidecar `<path>.meta.json`.
    pub fn export(&self, model: &HierModel, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(model, std::io::BufWriter::new(file))?;
        let meta = BatchMetadata {
            seed: self.seed,
            conditioning: distinct(&self.conditioning),
            rows: self.len(),
            model_hash: model_hash(model),
        };
        let meta_path = sidecar_path(path);
        std::fs::write(meta_path, serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    /// Reads an export produced by [`export`](Self::export). Conditioning is
    /// rebuilt from the `d.*` columns.
    pub fn import(model: &HierModel, path: &Path) -> Result<SampleBatch> {
        let meta: BatchMetadata = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let mut reader = csv::Reader::from_path(path)?;
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let mut columns: BTreeMap<VariableId, Vec<f64>> = BTreeMap::new();
        let mut keys = Vec::new();
        let mut obs_count = 0;
        for name in &header {
            if let Some(k) = name.strip_prefix("x.") {
                k.parse::<usize>().map_err(|_| HierError::parse(Some(1), Some(name), "bad observation column"))?;
                keys.push(None);
                obs_count += 1;
            } else {
                let v = model.parse_name(name)?;
                columns.insert(v, Vec::new());
                keys.push(Some(v));
            }
        }
        let mut observation = vec![Vec::new(); obs_count];
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let mut obs_idx = 0;
            for (field, key) in record.iter().zip(&keys) {
                let value: f64 =
                    field.parse().map_err(|_| HierError::parse(Some(line + 2), Some(field), "not a number"))?;
                match key {
                    Some(v) => columns.get_mut(v).expect("header key").push(value),
                    None => {
                        observation[obs_idx].push(value);
                        obs_idx += 1;
                    }
                }
            }
        }
        let n = observation.first().map_or_else(|| columns.values().next().map_or(0, Vec::len), Vec::len);
        let d_vars: Vec<VariableId> = columns.keys().filter(|v| v.level == 0).copied().collect();
        let conditioning =
            (0..n).map(|r| DiscreteCombination(d_vars.iter().map(|v| columns[v][r] as u32).collect())).collect();
        Ok(SampleBatch { conditioning, columns, observation, seed: meta.seed })
    }
}

fn format_value(v: f64) -> String {
    // shortest representation that round-trips
    format!("{v:?}")
}

fn distinct(rows: &[DiscreteCombination]) -> Vec<DiscreteCombination> {
    rows.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect()
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    s.into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetadata {
    pub seed: u64,
    pub conditioning: Vec<DiscreteCombination>,
    pub rows: usize,
    pub model_hash: String,
}

/// Evaluation plan shared by all rows.
struct Plan<'a> {
    model: &'a HierModel,
    order: Vec<VariableId>,
    slot: BTreeMap<VariableId, usize>,
    parent_slots: Vec<Vec<usize>>,
    noise_dims: Vec<usize>,
}

impl<'a> Plan<'a> {
    fn new(model: &'a HierModel) -> Result<Self> {
        let report = model.validate();
        if !report.is_valid() {
            return Err(HierError::InvalidModel(report.to_string()));
        }
        let order: Vec<VariableId> = (0..=model.num_levels()).flat_map(|l| model.level_vars(l)).collect();
        let slot: BTreeMap<VariableId, usize> = order.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let x = model.observation();
        let all: Vec<VariableId> = order.iter().copied().chain([x]).collect();
        let parent_slots = all
            .iter()
            .map(|&v| model.parents(v).map(|ps| ps.iter().map(|p| slot[p]).collect()))
            .collect::<Result<Vec<Vec<usize>>>>()?;
        let noise_dims = all
            .iter()
            .map(
                |&v| if model.is_observation(v) { model.obs_dim() - model.parents(v).map_or(0, <[_]>::len) } else { 1 },
            )
            .collect();
        Ok(Self { model, order, slot, parent_slots, noise_dims })
    }

    /// Values of `order` followed by the `d_x` observation coordinates.
    fn row(&self, noise: &NoiseSource, d: &DiscreteCombination, row: u64) -> Vec<f64> {
        let model = self.model;
        let n_vars = self.order.len();
        let mut values = vec![0.0; n_vars + model.obs_dim()];
        let mut pa = Vec::new();
        let mut u = [0.0];
        for (i, &v) in self.order.iter().enumerate() {
            values[i] = match v.level {
                0 => f64::from(d.values()[v.index as usize - 1]),
                1 => {
                    noise.uniforms(stream_id(v), row, &mut u);
                    let c = d.values()[v.index as usize - 1] as usize;
                    model.root(v.index).expect("validated root").values[c].draw(u[0])
                }
                _ => {
                    let mech = model.mechanism(v).expect("validated mechanism");
                    pa.clear();
                    pa.extend(self.parent_slots[i].iter().map(|&s| values[s]));
                    noise.uniforms(stream_id(v), row, &mut u);
                    mech.eval_latent(&pa, transform(mech.noise.family, u[0]))
                }
            };
        }
        let x = model.observation();
        let mech = model.mechanism(x).expect("validated observation");
        pa.clear();
        pa.extend(self.parent_slots[n_vars].iter().map(|&s| values[s]));
        let mut eps = vec![0.0; self.noise_dims[n_vars]];
        if !eps.is_empty() {
            noise.uniforms(stream_id(x), row, &mut eps);
            for e in eps.iter_mut() {
                *e = transform(mech.noise.family, *e);
            }
        }
        let (_, obs) = values.split_at_mut(n_vars);
        mech.eval_observation(&pa, &eps, obs);
        values
    }
}

/// Draws `n` rows of every variable under the combination `d`.
pub fn sample(model: &HierModel, d: &DiscreteCombination, n: usize, seed: u64) -> Result<SampleBatch> {
    if n == 0 {
        return Err(HierError::invalid("sample size must be at least 1"));
    }
    let plan = Plan::new(model)?;
    model.check_combination(d)?;
    let noise = NoiseSource::new(seed);
    let rows = par::map_range(n, |r| plan.row(&noise, d, r as u64));
    let n_vars = plan.order.len();
    let mut columns: BTreeMap<VariableId, Vec<f64>> = plan.order.iter().map(|&v| (v, Vec::with_capacity(n))).collect();
    let mut observation = vec![Vec::with_capacity(n); model.obs_dim()];
    for row in &rows {
        for (&v, &value) in plan.order.iter().zip(row) {
            columns.get_mut(&v).expect("planned").push(value);
        }
        for (col, &value) in observation.iter_mut().zip(&row[n_vars..]) {
            col.push(value);
        }
    }
    debug_assert_eq!(plan.slot.len(), n_vars);
    Ok(SampleBatch { conditioning: vec![d.clone(); n], columns, observation, seed })
}

/// Samples `n_each` rows under each combination and concatenates them. The
/// combination at position `k` uses seed `seed + k`, so groups never share
/// noise.
pub fn sample_many(model: &HierModel, combos: &[DiscreteCombination], n_each: usize, seed: u64) -> Result<SampleBatch> {
    let indexed: Vec<(usize, &DiscreteCombination)> = combos.iter().enumerate().collect();
    let batches = par::map_slice(&indexed, |&(k, d)| sample(model, d, n_each, seed.wrapping_add(k as u64)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut out = SampleBatch::concat(batches)?;
    out.seed = seed;
    Ok(out)
}

/// Occupied grid cells of the joint values of `vars` in `batch`.
pub fn occupied_cells(batch: &SampleBatch, vars: &[VariableId], grid: &QuantizationGrid) -> Result<BTreeSet<Cell>> {
    let cols = batch.columns_for(vars)?;
    Ok((0..batch.len()).map(|r| vars.iter().zip(&cols).map(|(&v, c)| grid.cell(v, c[r])).collect()).collect())
}

/// Empirical support of `vars` under `d`: the set of occupied grid cells
/// among `n` draws. Under the seed-prefix contract the result only grows
/// with `n`.
pub fn sample_marginal_support(
    model: &HierModel,
    d: &DiscreteCombination,
    vars: &[VariableId],
    n: usize,
    seed: u64,
    grid: &QuantizationGrid,
) -> Result<BTreeSet<Cell>> {
    for &v in vars {
        if !model.contains(v) || model.is_observation(v) {
            return Err(HierError::UnknownVariable(model.name(v)));
        }
    }
    let batch = sample(model, d, n, seed)?;
    occupied_cells(&batch, vars, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::{MechanismSpec, NoiseSpec, RootConditionalSpec};

    fn d(v: &[u32]) -> DiscreteCombination {
        DiscreteCombination::new(v.to_vec())
    }

    #[test]
    fn absent_root_is_constant() {
        let m = fixtures::layered_linear(0.3);
        let b = sample(&m, &d(&[0, 1]), 500, 3).unwrap();
        let col = b.column(VariableId::latent(1, 1)).unwrap();
        assert!(col.iter().all(|&v| v == 0.0));
        let present = b.column(VariableId::latent(1, 2)).unwrap();
        assert!(present.iter().all(|&v| (1.0..=2.0).contains(&v)));
    }

    #[test]
    fn zero_noise_chain_copies() {
        let m = fixtures::chain(0.0);
        let b = sample(&m, &d(&[1]), 200, 9).unwrap();
        assert_eq!(b.column(VariableId::latent(1, 1)).unwrap(), b.column(VariableId::latent(2, 1)).unwrap());
        assert_eq!(b.observation[0], b.column(VariableId::latent(2, 1)).unwrap());
    }

    #[test]
    fn seed_prefix_contract() {
        let m = fixtures::layered_linear(0.3);
        let small = sample(&m, &d(&[1, 1]), 100, 42).unwrap();
        let big = sample(&m, &d(&[1, 1]), 200, 42).unwrap();
        for (v, col) in &small.columns {
            assert_eq!(&big.columns[v][..100], &col[..]);
        }
        for (a, b) in small.observation.iter().zip(&big.observation) {
            assert_eq!(&b[..100], &a[..]);
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let m = fixtures::layered_linear(0.3);
        let a = sample(&m, &d(&[1, 1]), 64, 1).unwrap();
        let b = sample(&m, &d(&[1, 1]), 64, 1).unwrap();
        let c = sample(&m, &d(&[1, 1]), 64, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.columns, c.columns);
    }

    #[test]
    fn out_of_range_combination_is_rejected() {
        let m = fixtures::layered_linear(0.3);
        assert!(matches!(sample(&m, &d(&[2, 0]), 1, 0), Err(HierError::InvalidCombination(_))));
        assert!(matches!(sample(&m, &d(&[1]), 1, 0), Err(HierError::InvalidCombination(_))));
    }

    #[test]
    fn gaussian_noise_moments() {
        let m = fixtures::chain(1.0);
        let b = sample(&m, &d(&[0]), 20_000, 5).unwrap();
        // z1 absent at 0, so z2 is pure unit noise
        let z2 = b.column(VariableId::latent(2, 1)).unwrap();
        let n = z2.len() as f64;
        let mean = z2.iter().sum::<f64>() / n;
        let var = z2.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 4.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn degenerate_support_is_one_cell() {
        let m = fixtures::layered_linear(0.3);
        let grid = QuantizationGrid::uniform(16).with_range(VariableId::latent(1, 1), 0.0, 2.0);
        let cells = sample_marginal_support(&m, &d(&[0, 1]), &[VariableId::latent(1, 1)], 1000, 0, &grid).unwrap();
        assert_eq!(cells.len(), 1);
    }

    #[test]
    fn uniform_root_fills_four_cells() {
        // exact oracle: U[0,1] with 4 equal cells puts mass 1/4 in each, so
        // P(some cell empty at n=1e4) <= 4 * 0.75^1e4
        let mut roots = BTreeMap::new();
        roots.insert(1, RootConditionalSpec::binary_uniform(-1.0, 0.0, 1.0));
        let z1 = VariableId::latent(1, 1);
        let x = VariableId::new(2, 1);
        let mut mechs = BTreeMap::new();
        mechs.insert(x, MechanismSpec::observation(&[(1.0, 0.0)], NoiseSpec::none()));
        let m = HierModel::new(vec![1, 1, 1], [(VariableId::discrete(1), z1), (z1, x)], mechs, roots);
        let grid = QuantizationGrid::uniform(4).with_range(z1, 0.0, 1.0);
        let cells = sample_marginal_support(&m, &d(&[1]), &[z1], 10_000, 11, &grid).unwrap();
        let expected: BTreeSet<Cell> = (0..4).map(|c| vec![c]).collect();
        assert_eq!(cells, expected);
    }

    #[test]
    fn support_grows_with_n() {
        let m = fixtures::layered_linear(0.3);
        let vars = [VariableId::latent(2, 2), VariableId::latent(2, 3)];
        let grid = QuantizationGrid::uniform(16).with_range(vars[0], -2.0, 2.0).with_range(vars[1], 0.0, 3.5);
        let small = sample_marginal_support(&m, &d(&[1, 1]), &vars, 500, 7, &grid).unwrap();
        let big = sample_marginal_support(&m, &d(&[1, 1]), &vars, 1000, 7, &grid).unwrap();
        assert!(small.is_subset(&big));
    }

    #[test]
    fn csv_round_trip() {
        let m = fixtures::layered_linear(0.3);
        let b = sample(&m, &d(&[1, 0]), 50, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.csv");
        b.export(&m, &path).unwrap();
        let back = SampleBatch::import(&m, &path).unwrap();
        assert_eq!(back, b);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("d.1,d.2,z1.1,z1.2,z2.1"));
    }
}
