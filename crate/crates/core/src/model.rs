//! Leveled causal generative models.
//!
//! A [`HierModel`] stacks discrete concepts `d` (level 0), continuous latent
//! levels `z_1..z_L`, and a single multi-dimensional observation `x` at level
//! `L+1`. Every edge connects adjacent levels, each `z_{1,i}` is driven by its
//! own `d_i`, and every other variable is produced by a mechanism of its
//! parents plus independent exogenous noise.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{HierError, Result};

/// Position of a variable in the hierarchy. Indices are 1-based.
///
/// Level 0 holds the discrete concepts, level `L+1` the observation (which
/// always has index 1 and is multi-dimensional).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VariableId {
    pub level: u32,
    pub index: u32,
}

impl VariableId {
    pub const fn new(level: u32, index: u32) -> Self {
        Self { level, index }
    }

    pub const fn discrete(index: u32) -> Self {
        Self { level: 0, index }
    }

    pub const fn latent(level: u32, index: u32) -> Self {
        Self { level, index }
    }
}

/// Mechanism families. The set is closed; `PiecewiseTable` is the escape
/// hatch for arbitrary finite functions and exact-enumeration fixtures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MechanismFamily {
    LinearGaussian,
    AffineTanh,
    LocationScaleGaussian,
    PiecewiseTable,
}

impl MechanismFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::LinearGaussian => "linear-gaussian",
            Self::AffineTanh => "affine-tanh",
            Self::LocationScaleGaussian => "location-scale-gaussian",
            Self::PiecewiseTable => "piecewise-table",
        }
    }
}

impl fmt::Display for MechanismFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    Gaussian,
    /// Uniform on `[-1, 1]` before scaling.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub scale: f64,
}

impl NoiseSpec {
    pub const fn gaussian(scale: f64) -> Self {
        Self { family: NoiseFamily::Gaussian, scale }
    }

    pub const fn none() -> Self {
        Self { family: NoiseFamily::Gaussian, scale: 0.0 }
    }
}

/// Parameterization of `v := g_v(pa(v), eps_v)`.
///
/// With `k` parents in [`HierModel::parents`] order, `params` is laid out as:
///
/// | family | latent child | observation `x` |
/// |---|---|---|
/// | linear-gaussian | `a_1..a_k, b`: `a·pa + b + s·eps` | `s_1, o_1, .., s_k, o_k`: `x_j = s_j pa_j + o_j` |
/// | affine-tanh | `a_1..a_k, b`: `tanh(a·pa + b) + s·eps` | as above with `tanh` |
/// | location-scale-gaussian | `a_1..a_k, b, c_1..c_k, e`: mean `a·pa + b`, std `s·exp((c·pa + e)/2)` | unsupported |
/// | piecewise-table | `default, (key_1..key_k, value)*` | unsupported |
///
/// For the observation, coordinates beyond `k` carry `s·eps_j`, so the map
/// `(z_L, eps_x) -> x` is invertible whenever every `s_j` is nonzero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    pub family: MechanismFamily,
    pub params: Vec<f64>,
    pub noise: NoiseSpec,
}

impl MechanismSpec {
    pub fn linear(coefficients: &[f64], intercept: f64, noise: NoiseSpec) -> Self {
        let mut params = coefficients.to_vec();
        params.push(intercept);
        Self { family: MechanismFamily::LinearGaussian, params, noise }
    }

    pub fn affine_tanh(coefficients: &[f64], bias: f64, noise: NoiseSpec) -> Self {
        let mut params = coefficients.to_vec();
        params.push(bias);
        Self { family: MechanismFamily::AffineTanh, params, noise }
    }

    /// Gaussian with mean `mean·pa + mean_bias` and variance
    /// `scale² · exp(log_var·pa + log_var_bias)`.
    pub fn location_scale(mean: &[f64], mean_bias: f64, log_var: &[f64], log_var_bias: f64, scale: f64) -> Self {
        let mut params = mean.to_vec();
        params.push(mean_bias);
        params.extend_from_slice(log_var);
        params.push(log_var_bias);
        Self { family: MechanismFamily::LocationScaleGaussian, params, noise: NoiseSpec::gaussian(scale) }
    }

    /// Deterministic lookup table; inputs not listed map to `default`.
    pub fn table(default: f64, entries: &[(Vec<f64>, f64)]) -> Self {
        let mut params = vec![default];
        for (key, value) in entries {
            params.extend_from_slice(key);
            params.push(*value);
        }
        Self { family: MechanismFamily::PiecewiseTable, params, noise: NoiseSpec::none() }
    }

    /// Observation mechanism with per-parent affine images.
    pub fn observation(affine: &[(f64, f64)], noise: NoiseSpec) -> Self {
        let params = affine.iter().flat_map(|&(s, o)| [s, o]).collect();
        Self { family: MechanismFamily::LinearGaussian, params, noise }
    }

    /// Whether `params.len()` fits `parents` parents.
    pub fn arity_ok(&self, parents: usize, observation: bool) -> bool {
        let n = self.params.len();
        if observation {
            return match self.family {
                MechanismFamily::LinearGaussian | MechanismFamily::AffineTanh => n == 2 * parents,
                _ => false,
            };
        }
        match self.family {
            MechanismFamily::LinearGaussian | MechanismFamily::AffineTanh => n == parents + 1,
            MechanismFamily::LocationScaleGaussian => n == 2 * parents + 2,
            // `is_multiple_of` postdates the declared minimum Rust version.
            #[allow(clippy::manual_is_multiple_of)]
            MechanismFamily::PiecewiseTable => n >= 1 && (n - 1) % (parents + 1) == 0,
        }
    }

    /// Conditional mean and standard deviation of the child given parent values,
    /// for the families whose noise enters additively.
    pub fn location_scale_at(&self, pa: &[f64]) -> Option<(f64, f64)> {
        let k = pa.len();
        let dot = |w: &[f64]| w.iter().zip(pa).map(|(a, p)| a * p).sum::<f64>();
        match self.family {
            MechanismFamily::LinearGaussian => Some((dot(&self.params[..k]) + self.params[k], self.noise.scale)),
            MechanismFamily::AffineTanh => Some(((dot(&self.params[..k]) + self.params[k]).tanh(), self.noise.scale)),
            MechanismFamily::LocationScaleGaussian => {
                let mean = dot(&self.params[..k]) + self.params[k];
                let log_var = dot(&self.params[k + 1..2 * k + 1]) + self.params[2 * k + 1];
                Some((mean, self.noise.scale * (0.5 * log_var).exp()))
            }
            MechanismFamily::PiecewiseTable => None,
        }
    }

    /// Table lookup: exact match on the key with a small absolute tolerance.
    pub fn table_lookup(&self, pa: &[f64]) -> f64 {
        let k = pa.len();
        let stride = k + 1;
        self.params[1..]
            .chunks_exact(stride)
            .find(|row| row[..k].iter().zip(pa).all(|(a, b)| (a - b).abs() <= 1e-9))
            .map_or(self.params[0], |row| row[k])
    }

    /// Evaluates a latent mechanism for parent values and a standardized noise draw.
    pub fn eval_latent(&self, pa: &[f64], eps: f64) -> f64 {
        match self.family {
            MechanismFamily::PiecewiseTable => self.table_lookup(pa) + self.noise.scale * eps,
            _ => {
                let (mean, std) = self.location_scale_at(pa).expect("additive family");
                mean + std * eps
            }
        }
    }

    /// Evaluates the observation mechanism into `out` (length `d_x`).
    pub fn eval_observation(&self, pa: &[f64], eps: &[f64], out: &mut [f64]) {
        let k = pa.len();
        for j in 0..k {
            let lin = self.params[2 * j] * pa[j] + self.params[2 * j + 1];
            out[j] = match self.family {
                MechanismFamily::AffineTanh => lin.tanh(),
                _ => lin,
            };
        }
        for (slot, e) in out[k..].iter_mut().zip(eps) {
            *slot = self.noise.scale * e;
        }
    }
}

/// Density family of a present root on its interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RootDensity {
    Uniform,
    /// Uniform over `points` equally spaced values including both endpoints.
    Lattice {
        points: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RootValue {
    Degenerate { value: f64 },
    Interval { lo: f64, hi: f64, density: RootDensity },
}

impl RootValue {
    /// Maps a uniform draw in (0,1) to a root value.
    pub fn draw(&self, u: f64) -> f64 {
        match *self {
            RootValue::Degenerate { value } => value,
            RootValue::Interval { lo, hi, density: RootDensity::Uniform } => lo + (hi - lo) * u,
            RootValue::Interval { lo, hi, density: RootDensity::Lattice { points } } => {
                let j = ((u * points as f64) as u32).min(points - 1);
                lattice_point(lo, hi, points, j)
            }
        }
    }

    /// Finite support with probabilities, when the distribution is discrete.
    pub fn atoms(&self) -> Option<Vec<(f64, f64)>> {
        match *self {
            RootValue::Degenerate { value } => Some(vec![(value, 1.0)]),
            RootValue::Interval { lo, hi, density: RootDensity::Lattice { points } } => {
                let p = 1.0 / points as f64;
                Some((0..points).map(|j| (lattice_point(lo, hi, points, j), p)).collect())
            }
            RootValue::Interval { density: RootDensity::Uniform, .. } => None,
        }
    }
}

fn lattice_point(lo: f64, hi: f64, points: u32, j: u32) -> f64 {
    if points <= 1 {
        lo
    } else {
        lo + (hi - lo) * j as f64 / (points - 1) as f64
    }
}

/// `p(z_{1,i} | d_i = c)` for each value `c`; the cardinality is `values.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootConditionalSpec {
    pub values: Vec<RootValue>,
}

impl RootConditionalSpec {
    /// Binary root: absent at `absent`, uniform on `[lo, hi]` when present.
    pub fn binary_uniform(absent: f64, lo: f64, hi: f64) -> Self {
        Self {
            values: vec![
                RootValue::Degenerate { value: absent },
                RootValue::Interval { lo, hi, density: RootDensity::Uniform },
            ],
        }
    }

    pub fn binary_lattice(absent: f64, lo: f64, hi: f64, points: u32) -> Self {
        Self {
            values: vec![
                RootValue::Degenerate { value: absent },
                RootValue::Interval { lo, hi, density: RootDensity::Lattice { points } },
            ],
        }
    }

    pub fn cardinality(&self) -> usize {
        self.values.len()
    }
}

/// A value assignment to all discrete concepts.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DiscreteCombination(pub Vec<u32>);

impl DiscreteCombination {
    pub fn new(values: impl Into<Vec<u32>>) -> Self {
        Self(values.into())
    }

    pub fn values(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Parses `"1,0"`, `"1 0"` or `"[1, 0]"`.
    pub fn parse(text: &str) -> Result<Self> {
        let inner = text.trim().trim_start_matches('[').trim_end_matches(']');
        let values = inner
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<u32>().map_err(|_| HierError::invalid(format!("bad combination entry `{s}` in `{text}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(HierError::invalid(format!("empty combination `{text}`")));
        }
        Ok(Self(values))
    }
}

impl fmt::Display for DiscreteCombination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    MissingLevels,
    EmptyLevel,
    UnknownVariable,
    NonAdjacentEdge,
    RootPairing,
    MissingParent,
    MissingMechanism,
    UnexpectedMechanism,
    MissingRootConditional,
    ArityMismatch,
    InvalidNoise,
    UnsupportedFamily,
    AbsenceNotDegenerate,
    SupportMismatch,
    InvalidInterval,
    ObservationTooNarrow,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MissingLevels => "missing levels",
            Self::EmptyLevel => "empty level",
            Self::UnknownVariable => "unknown variable",
            Self::NonAdjacentEdge => "non-adjacent-level edge",
            Self::RootPairing => "root pairing",
            Self::MissingParent => "missing parent",
            Self::MissingMechanism => "missing mechanism",
            Self::UnexpectedMechanism => "unexpected mechanism",
            Self::MissingRootConditional => "missing root conditional",
            Self::ArityMismatch => "parameter arity mismatch",
            Self::InvalidNoise => "invalid noise scale",
            Self::UnsupportedFamily => "unsupported family",
            Self::AbsenceNotDegenerate => "absence not degenerate",
            Self::SupportMismatch => "nonzero supports differ",
            Self::InvalidInterval => "invalid interval",
            Self::ObservationTooNarrow => "observation too narrow",
        }
    }
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub ids: Vec<String>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.ids.join(", "))?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

/// Every structural problem found by [`HierModel::validate`]; empty iff well-formed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    fn push(&mut self, kind: ViolationKind, ids: Vec<String>, detail: impl Into<String>) {
        self.violations.push(Violation { kind, ids, detail: detail.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return writeln!(f, "valid: no violations");
        }
        writeln!(f, "invalid: {} violation(s)", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

/// The hierarchical data-generating process. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct HierModel {
    widths: Vec<usize>,
    edges: BTreeSet<(VariableId, VariableId)>,
    mechanisms: BTreeMap<VariableId, MechanismSpec>,
    roots: BTreeMap<u32, RootConditionalSpec>,
    parents: BTreeMap<VariableId, Vec<VariableId>>,
}

impl HierModel {
    /// Builds a model. `widths` is `[n(d), n(z_1), .., n(z_L), d_x]`; `roots`
    /// is keyed by the 1-based index `i` of `d_i`. Structural checks are left
    /// to [`validate`](Self::validate) so that malformed models can be reported on.
    pub fn new(
        widths: Vec<usize>,
        edges: impl IntoIterator<Item = (VariableId, VariableId)>,
        mechanisms: BTreeMap<VariableId, MechanismSpec>,
        roots: BTreeMap<u32, RootConditionalSpec>,
    ) -> Self {
        let edges: BTreeSet<_> = edges.into_iter().collect();
        let mut parents: BTreeMap<VariableId, Vec<VariableId>> = BTreeMap::new();
        for &(p, c) in &edges {
            parents.entry(c).or_default().push(p);
        }
        // BTreeSet iteration is ordered by (parent, child); sort per child anyway
        // so the order never depends on insertion.
        for list in parents.values_mut() {
            list.sort();
        }
        Self { widths, edges, mechanisms, roots, parents }
    }

    /// Number of latent levels `L`.
    pub fn num_levels(&self) -> usize {
        self.widths.len().saturating_sub(2)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Width of `level` (`n(d)` for 0, `d_x` for `L+1`).
    pub fn width(&self, level: usize) -> usize {
        self.widths.get(level).copied().unwrap_or(0)
    }

    pub fn num_discrete(&self) -> usize {
        self.width(0)
    }

    pub fn obs_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn observation(&self) -> VariableId {
        VariableId::new(self.num_levels() as u32 + 1, 1)
    }

    pub fn is_observation(&self, v: VariableId) -> bool {
        v == self.observation()
    }

    pub fn edges(&self) -> &BTreeSet<(VariableId, VariableId)> {
        &self.edges
    }

    /// Edges between continuous latents only.
    pub fn latent_edges(&self) -> BTreeSet<(VariableId, VariableId)> {
        let top = self.num_levels() as u32;
        self.edges.iter().filter(|(p, c)| p.level >= 1 && c.level <= top).copied().collect()
    }

    pub fn mechanisms(&self) -> &BTreeMap<VariableId, MechanismSpec> {
        &self.mechanisms
    }

    pub fn mechanism(&self, v: VariableId) -> Option<&MechanismSpec> {
        self.mechanisms.get(&v)
    }

    pub fn roots(&self) -> &BTreeMap<u32, RootConditionalSpec> {
        &self.roots
    }

    pub fn root(&self, i: u32) -> Option<&RootConditionalSpec> {
        self.roots.get(&i)
    }

    /// Declared cardinality of `d_i` (2 when no conditional is declared).
    pub fn cardinality(&self, i: u32) -> usize {
        self.roots.get(&i).map_or(2, RootConditionalSpec::cardinality)
    }

    pub fn contains(&self, v: VariableId) -> bool {
        let level = v.level as usize;
        if level > self.num_levels() + 1 || v.index == 0 {
            return false;
        }
        if level == self.num_levels() + 1 {
            return v.index == 1;
        }
        (v.index as usize) <= self.width(level)
    }

    /// Variables of one level in index order (`[x]` for the observation level).
    pub fn level_vars(&self, level: usize) -> Vec<VariableId> {
        if level == self.num_levels() + 1 {
            return vec![self.observation()];
        }
        (1..=self.width(level) as u32).map(|i| VariableId::new(level as u32, i)).collect()
    }

    /// All continuous latents, ordered by level then index.
    pub fn latents(&self) -> Vec<VariableId> {
        (1..=self.num_levels()).flat_map(|l| self.level_vars(l)).collect()
    }

    /// `pa(v)` ordered by level, then index.
    pub fn parents(&self, v: VariableId) -> Result<&[VariableId]> {
        if !self.contains(v) {
            return Err(HierError::UnknownVariable(self.name(v)));
        }
        Ok(self.parents.get(&v).map_or(&[], Vec::as_slice))
    }

    pub fn children(&self, v: VariableId) -> Vec<VariableId> {
        self.edges.iter().filter(|(p, _)| *p == v).map(|&(_, c)| c).collect()
    }

    /// Canonical text name: `d.i`, `z{l}.{i}`, or `x`.
    pub fn name(&self, v: VariableId) -> String {
        if v.level == 0 {
            format!("d.{}", v.index)
        } else if v.level as usize == self.num_levels() + 1 && v.index == 1 {
            "x".to_string()
        } else {
            format!("z{}.{}", v.level, v.index)
        }
    }

    /// Inverse of [`name`](Self::name). Does not check membership.
    pub fn parse_name(&self, name: &str) -> Result<VariableId> {
        parse_variable_name(name, self.num_levels())
    }

    /// Every combination in the Cartesian product of declared cardinalities,
    /// in lexicographic order.
    pub fn all_combinations(&self) -> Vec<DiscreteCombination> {
        let cards: Vec<u32> = (1..=self.num_discrete() as u32).map(|i| self.cardinality(i) as u32).collect();
        cartesian(&cards)
    }

    pub fn check_combination(&self, d: &DiscreteCombination) -> Result<()> {
        if d.len() != self.num_discrete() {
            return Err(HierError::InvalidCombination(format!(
                "{d} has {} entries, model has {} discrete concepts",
                d.len(),
                self.num_discrete()
            )));
        }
        for (i, &c) in d.values().iter().enumerate() {
            let card = self.cardinality(i as u32 + 1);
            if c as usize >= card {
                return Err(HierError::InvalidCombination(format!(
                    "{d}: d.{} = {c} outside cardinality {card}",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Number of exogenous noise coordinates introduced at `level`
    /// (one per latent with nonzero noise; for `x`, its extra coordinates).
    pub fn noise_dims(&self, level: usize) -> usize {
        if level == self.num_levels() + 1 {
            let x = self.observation();
            let k = self.parents.get(&x).map_or(0, Vec::len);
            let scale = self.mechanisms.get(&x).map_or(0.0, |m| m.noise.scale);
            return if scale > 0.0 { self.obs_dim().saturating_sub(k) } else { 0 };
        }
        self.level_vars(level).iter().filter(|v| self.mechanisms.get(v).is_some_and(|m| m.noise.scale > 0.0)).count()
    }

    /// True when every root is finitely supported and every latent mechanism
    /// is a noiseless table, so supports and distributions can be enumerated.
    pub fn is_enumerable(&self) -> bool {
        let roots_finite = self.roots.values().all(|r| r.values.iter().all(|v| v.atoms().is_some()));
        let mechs_finite = self.latents().iter().filter(|v| v.level >= 2).all(|v| {
            self.mechanisms.get(v).is_some_and(|m| m.family == MechanismFamily::PiecewiseTable && m.noise.scale == 0.0)
        });
        roots_finite && mechs_finite
    }

    /// Same widths, mechanisms and roots, different edge set. Used for
    /// sparsity families.
    pub fn with_edges(
        &self,
        edges: impl IntoIterator<Item = (VariableId, VariableId)>,
        mechanisms: BTreeMap<VariableId, MechanismSpec>,
    ) -> Self {
        Self::new(self.widths.clone(), edges, mechanisms, self.roots.clone())
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.widths.len() < 3 {
            report.push(
                ViolationKind::MissingLevels,
                vec![],
                format!("need d, at least one latent level and x; got {} level(s)", self.widths.len()),
            );
            return report;
        }
        for (l, &w) in self.widths.iter().enumerate() {
            if w == 0 {
                report.push(ViolationKind::EmptyLevel, vec![format!("level {l}")], "");
            }
        }
        let top = self.num_levels() as u32 + 1;

        for &(p, c) in &self.edges {
            let ids = vec![self.name(p), self.name(c)];
            if !self.contains(p) || !self.contains(c) {
                report.push(ViolationKind::UnknownVariable, ids, "edge endpoint outside declared widths");
                continue;
            }
            if c.level != p.level + 1 {
                report.push(ViolationKind::NonAdjacentEdge, ids, format!("level {} -> level {}", p.level, c.level));
            }
        }

        if self.width(0) != self.width(1) {
            report.push(
                ViolationKind::RootPairing,
                vec![],
                format!("n(d) = {} but n(z1) = {}", self.width(0), self.width(1)),
            );
        }
        for v in self.level_vars(1) {
            let pa = self.parents.get(&v).map_or(&[][..], Vec::as_slice);
            if pa != [VariableId::discrete(v.index)] {
                let got: Vec<String> = pa.iter().map(|p| self.name(*p)).collect();
                report.push(
                    ViolationKind::RootPairing,
                    vec![self.name(v)],
                    format!("expected exactly d.{} as parent, found [{}]", v.index, got.join(", ")),
                );
            }
        }

        for level in 2..=top as usize {
            for v in self.level_vars(level) {
                if self.parents.get(&v).is_none_or(Vec::is_empty) {
                    report.push(ViolationKind::MissingParent, vec![self.name(v)], "");
                }
            }
        }

        for (&v, mech) in &self.mechanisms {
            if !self.contains(v) || v.level < 2 {
                report.push(
                    ViolationKind::UnexpectedMechanism,
                    vec![self.name(v)],
                    "mechanisms apply to non-root variables only",
                );
                continue;
            }
            let obs = self.is_observation(v);
            let k = self.parents.get(&v).map_or(0, Vec::len);
            if obs && !matches!(mech.family, MechanismFamily::LinearGaussian | MechanismFamily::AffineTanh) {
                report.push(
                    ViolationKind::UnsupportedFamily,
                    vec![self.name(v)],
                    format!("{} cannot generate the observation", mech.family),
                );
            } else if !mech.arity_ok(k, obs) {
                report.push(
                    ViolationKind::ArityMismatch,
                    vec![self.name(v)],
                    format!("{} params for {} with {k} parent(s)", mech.params.len(), mech.family),
                );
            }
            if !(mech.noise.scale.is_finite() && mech.noise.scale >= 0.0) {
                report.push(ViolationKind::InvalidNoise, vec![self.name(v)], format!("scale {}", mech.noise.scale));
            }
            if obs && k > self.obs_dim() {
                report.push(
                    ViolationKind::ObservationTooNarrow,
                    vec![self.name(v)],
                    format!("d_x = {} < {k} parents", self.obs_dim()),
                );
            }
        }
        for level in 2..=top as usize {
            for v in self.level_vars(level) {
                if !self.mechanisms.contains_key(&v) {
                    report.push(ViolationKind::MissingMechanism, vec![self.name(v)], "");
                }
            }
        }

        for i in 1..=self.width(1) as u32 {
            let Some(root) = self.roots.get(&i) else {
                report.push(ViolationKind::MissingRootConditional, vec![format!("z1.{i}")], "");
                continue;
            };
            let id = vec![format!("z1.{i}")];
            if root.values.len() < 2 {
                report.push(ViolationKind::InvalidInterval, id.clone(), "cardinality must be at least 2");
            }
            if let Some(first) = root.values.first() {
                if !matches!(first, RootValue::Degenerate { .. }) {
                    report.push(ViolationKind::AbsenceNotDegenerate, id.clone(), "value 0 must be degenerate");
                }
            }
            let mut interval: Option<(f64, f64)> = None;
            for (c, rv) in root.values.iter().enumerate().skip(1) {
                match *rv {
                    RootValue::Degenerate { .. } => report.push(
                        ViolationKind::SupportMismatch,
                        id.clone(),
                        format!("value {c} is degenerate; nonzero values share one interval"),
                    ),
                    RootValue::Interval { lo, hi, density } => {
                        let bad_lattice = matches!(density, RootDensity::Lattice { points: 0 });
                        if !(lo.is_finite() && hi.is_finite() && lo <= hi) || bad_lattice {
                            report.push(ViolationKind::InvalidInterval, id.clone(), format!("value {c}: [{lo}, {hi}]"));
                        }
                        match interval {
                            None => interval = Some((lo, hi)),
                            Some(prev) if prev != (lo, hi) => report.push(
                                ViolationKind::SupportMismatch,
                                id.clone(),
                                format!("value {c}: [{lo}, {hi}] vs [{}, {}]", prev.0, prev.1),
                            ),
                            Some(_) => {}
                        }
                    }
                }
            }
        }
        for &i in self.roots.keys() {
            if i == 0 || i as usize > self.width(0) {
                report.push(
                    ViolationKind::UnknownVariable,
                    vec![format!("d.{i}")],
                    "root conditional for undeclared concept",
                );
            }
        }
        report
    }
}

/// Parses `d.i`, `z{l}.{i}` or `x` against a model with `num_levels` latent levels.
pub fn parse_variable_name(name: &str, num_levels: usize) -> Result<VariableId> {
    let bad = || HierError::invalid(format!("bad variable name `{name}`"));
    let name = name.trim();
    if name == "x" {
        return Ok(VariableId::new(num_levels as u32 + 1, 1));
    }
    if let Some(rest) = name.strip_prefix("d.") {
        let i = rest.parse::<u32>().map_err(|_| bad())?;
        return Ok(VariableId::discrete(i));
    }
    let rest = name.strip_prefix('z').ok_or_else(bad)?;
    let (l, i) = rest.split_once('.').ok_or_else(bad)?;
    let l = l.parse::<u32>().map_err(|_| bad())?;
    let i = i.parse::<u32>().map_err(|_| bad())?;
    if l == 0 {
        return Err(bad());
    }
    Ok(VariableId::latent(l, i))
}

/// Lexicographic Cartesian product of `{0..card_i}`.
pub fn cartesian(cards: &[u32]) -> Vec<DiscreteCombination> {
    let mut out = vec![Vec::new()];
    for &card in cards {
        out = out
            .into_iter()
            .flat_map(|prefix: Vec<u32>| {
                (0..card).map(move |c| {
                    let mut next = prefix.clone();
                    next.push(c);
                    next
                })
            })
            .collect();
    }
    out.into_iter().map(DiscreteCombination).collect()
}

/// The Cartesian product of the marginal supports of a set of combinations.
pub fn cartesian_of_marginals(train: &BTreeSet<DiscreteCombination>) -> Vec<DiscreteCombination> {
    let Some(first) = train.iter().next() else {
        return Vec::new();
    };
    let mut marginals: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); first.len()];
    for d in train {
        for (m, &v) in marginals.iter_mut().zip(d.values()) {
            m.insert(v);
        }
    }
    let mut out = vec![Vec::new()];
    for m in &marginals {
        out = out
            .into_iter()
            .flat_map(|prefix: Vec<u32>| {
                m.iter().map(move |&c| {
                    let mut next = prefix.clone();
                    next.push(c);
                    next
                })
            })
            .collect();
    }
    out.into_iter().map(DiscreteCombination).collect()
}
