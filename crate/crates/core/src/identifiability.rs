//! Checks of the identifiability conditions on a declared model, and scoring
//! of candidate latents against true latents.
//!
//! * invertibility of `g_l: (z_l, eps_l) -> x`, where `eps_l` collects every
//!   exogenous noise coordinate introduced strictly below level `l`
//!   (levels `l+1 ..= L` and the observation);
//! * conditional independence of same-level latents given the level above;
//! * sufficient variability of the `w` vectors of `log p(z_{l+1} | z_l)`;
//! * component-wise matching up to permutation and monotone maps.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use nalgebra::DMatrix;
use pathfinding::prelude::{kuhn_munkres, Matrix};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{HierError, Result};
use crate::model::{HierModel, MechanismFamily, MechanismSpec, NoiseFamily, VariableId};
use crate::par;
use crate::sampler::{sample, standard_normal, SampleBatch};
use crate::stats::{self, CiTest};

/// Three-way outcome of a condition check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckStatus {
    Pass,
    /// The randomized search did not find a certificate; inconclusive.
    NotVerified,
    /// The condition is impossible by construction.
    Violated,
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pass => "PASS",
            Self::NotVerified => "NOT-VERIFIED",
            Self::Violated => "VIOLATED",
        })
    }
}

/// How partial derivatives of the log-density are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerivativeMode {
    Analytic,
    /// Central differences with step `1e-4 · sigma`.
    FiniteDifference,
}

impl DerivativeMode {
    /// Singular-value ratio below which a direction counts as null.
    pub fn rank_tolerance(self) -> f64 {
        match self {
            Self::Analytic => 1e-8,
            Self::FiniteDifference => 1e-4,
        }
    }
}

/// Gaussian conditional `N(mean(pa), std(pa)²)` of a latent, or an error for
/// families without a smooth density.
fn gaussian_conditional(model: &HierModel, v: VariableId) -> Result<&MechanismSpec> {
    let mech = model.mechanism(v).ok_or_else(|| HierError::UnknownVariable(model.name(v)))?;
    let unsupported = |reason: &str| HierError::UnsupportedFamily { variable: model.name(v), reason: reason.into() };
    if mech.family == MechanismFamily::PiecewiseTable {
        return Err(unsupported("piecewise-table mechanisms have no smooth conditional density"));
    }
    if mech.noise.family != NoiseFamily::Gaussian {
        return Err(unsupported("uniform noise has a non-smooth density"));
    }
    if mech.noise.scale <= 0.0 {
        return Err(unsupported("noiseless mechanism has no density"));
    }
    Ok(mech)
}

fn level_parents(model: &HierModel, level: usize) -> Result<()> {
    if level == 0 || level + 1 > model.num_levels() {
        return Err(HierError::invalid(format!(
            "level {level} has no latent child level (valid: 1..={})",
            model.num_levels().saturating_sub(1)
        )));
    }
    Ok(())
}

fn parent_values(model: &HierModel, child: VariableId, level: usize, z_l: &[f64]) -> Result<Vec<f64>> {
    model
        .parents(child)?
        .iter()
        .map(|p| {
            if p.level as usize != level {
                return Err(HierError::invalid(format!("{} has a parent outside level {level}", model.name(child))));
            }
            Ok(z_l[p.index as usize - 1])
        })
        .collect()
}

fn log_density(mean: f64, std: f64, z: f64) -> f64 {
    let r = (z - mean) / std;
    -0.5 * r * r - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// `(∂ log p / ∂z_{l+1,j})_j` followed by `(∂² log p / ∂z_{l+1,j}²)_j`,
/// length `2 n(z_{l+1})`.
pub fn w_vector(
    model: &HierModel,
    level: usize,
    z_next: &[f64],
    z_l: &[f64],
    mode: DerivativeMode,
) -> Result<Vec<f64>> {
    level_parents(model, level)?;
    let children = model.level_vars(level + 1);
    if z_next.len() != children.len() || z_l.len() != model.width(level) {
        return Err(HierError::ShapeMismatch(format!(
            "expected points of length {} and {}, got {} and {}",
            children.len(),
            model.width(level),
            z_next.len(),
            z_l.len()
        )));
    }
    let n = children.len();
    let mut w = vec![0.0; 2 * n];
    for (j, &child) in children.iter().enumerate() {
        let mech = gaussian_conditional(model, child)?;
        let pa = parent_values(model, child, level, z_l)?;
        let (mean, std) = mech.location_scale_at(&pa).expect("gaussian family");
        let z = z_next[j];
        let var = std * std;
        match mode {
            DerivativeMode::Analytic => {
                w[j] = -(z - mean) / var;
                w[n + j] = -1.0 / var;
            }
            DerivativeMode::FiniteDifference => {
                let h = 1e-4 * std;
                let f = |t: f64| log_density(mean, std, t);
                let (fp, f0, fm) = (f(z + h), f(z), f(z - h));
                w[j] = (fp - fm) / (2.0 * h);
                w[n + j] = (fp - 2.0 * f0 + fm) / (h * h);
            }
        }
    }
    Ok(w)
}

/// One anchor set and its difference matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariabilityReport {
    pub level: usize,
    /// The child point `z_{l+1}` at which the `w` vectors are evaluated.
    pub probe: Vec<f64>,
    /// `2n + 1` parent points; row `k` of the matrix is `w(anchor_k) - w(anchor_0)`.
    pub anchors: Vec<Vec<f64>>,
    pub matrix: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    pub determinant: f64,
    pub rank: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Rank by singular-value ratio: `sigma_i > tol · sigma_max`.
pub fn numerical_rank(singular_values: &[f64], tol: f64) -> usize {
    let max = singular_values.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 || !max.is_finite() {
        return 0;
    }
    singular_values.iter().filter(|&&s| s > tol * max).count()
}

/// Evaluates the difference matrix for fixed anchors.
pub fn variability_at_anchors(
    model: &HierModel,
    level: usize,
    probe: &[f64],
    anchors: &[Vec<f64>],
    mode: DerivativeMode,
) -> Result<VariabilityReport> {
    level_parents(model, level)?;
    let n = model.width(level + 1);
    if anchors.len() != 2 * n + 1 {
        return Err(HierError::ShapeMismatch(format!("need {} anchors, got {}", 2 * n + 1, anchors.len())));
    }
    let w0 = w_vector(model, level, probe, &anchors[0], mode)?;
    let mut matrix = Vec::with_capacity(2 * n);
    for a in &anchors[1..] {
        let w = w_vector(model, level, probe, a, mode)?;
        matrix.push(w.iter().zip(&w0).map(|(x, y)| x - y).collect::<Vec<_>>());
    }
    let m = DMatrix::from_fn(2 * n, 2 * n, |i, j| matrix[i][j]);
    let mut singular_values: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    singular_values.sort_by(|a, b| b.total_cmp(a));
    let tolerance = mode.rank_tolerance();
    let rank = numerical_rank(&singular_values, tolerance);
    Ok(VariabilityReport {
        level,
        probe: probe.to_vec(),
        anchors: anchors.to_vec(),
        determinant: m.determinant(),
        matrix,
        singular_values,
        rank,
        tolerance,
        pass: rank == 2 * n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariabilityOptions {
    /// Random anchor sets tried per probe.
    pub budget: usize,
    /// Child points at which the condition is probed.
    pub probes: usize,
    /// Rows sampled per discrete combination for the point pools.
    pub pool_rows: usize,
    pub seed: u64,
    pub mode: DerivativeMode,
}

impl Default for VariabilityOptions {
    fn default() -> Self {
        Self { budget: 200, probes: 25, pool_rows: 200, seed: 0, mode: DerivativeMode::Analytic }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariabilityOutcome {
    pub level: usize,
    pub status: CheckStatus,
    pub required_rank: usize,
    /// Minimum over probes of the best rank found.
    pub min_rank: usize,
    /// Upper bound on the rank from which `w` entries can vary at all.
    pub structural_bound: usize,
    /// Best certificate per probe, in probe order.
    pub probes: Vec<VariabilityReport>,
}

/// Number of `w` coordinates that can vary with the parents: the first
/// partial of child `j` varies when its mean or scale depends on a parent,
/// the second partial only when the scale does.
fn structural_bound(model: &HierModel, level: usize) -> Result<usize> {
    let mut bound = 0;
    for child in model.level_vars(level + 1) {
        let mech = gaussian_conditional(model, child)?;
        let k = model.parents(child)?.len();
        let p = &mech.params;
        let mean_varies = p[..k].iter().any(|a| *a != 0.0);
        let scale_varies =
            mech.family == MechanismFamily::LocationScaleGaussian && p[k + 1..2 * k + 1].iter().any(|c| *c != 0.0);
        bound += usize::from(mean_varies || scale_varies) + usize::from(scale_varies);
    }
    Ok(bound)
}

/// Pooled rows of the level's values over every discrete combination.
fn level_pool(model: &HierModel, level: usize, rows: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let vars = model.level_vars(level);
    let mut pool = Vec::new();
    for (k, d) in model.all_combinations().iter().enumerate() {
        let batch = sample(model, d, rows, seed.wrapping_add(k as u64))?;
        let cols = batch.columns_for(&vars)?;
        pool.extend((0..batch.len()).map(|i| cols.iter().map(|c| c[i]).collect::<Vec<_>>()));
    }
    if pool.is_empty() {
        return Err(HierError::invalid("no points to probe"));
    }
    Ok(pool)
}

/// Randomized search for anchor sets with full-rank difference matrices.
pub fn check_sufficient_variability(
    model: &HierModel,
    level: usize,
    opts: &VariabilityOptions,
) -> Result<VariabilityOutcome> {
    level_parents(model, level)?;
    let n = model.width(level + 1);
    let bound = structural_bound(model, level)?;
    let parents = level_pool(model, level, opts.pool_rows, opts.seed)?;
    let children = level_pool(model, level + 1, opts.pool_rows, opts.seed)?;
    let probes = par::map_range(opts.probes.max(1), |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0000);
        rng.set_stream(p as u64);
        let probe = children.choose(&mut rng).expect("nonempty pool").clone();
        let mut best: Option<VariabilityReport> = None;
        for _ in 0..opts.budget.max(1) {
            let anchors: Vec<Vec<f64>> =
                (0..=2 * n).map(|_| parents.choose(&mut rng).expect("nonempty").clone()).collect();
            let report = variability_at_anchors(model, level, &probe, &anchors, opts.mode)?;
            let better = best.as_ref().is_none_or(|b| report.rank > b.rank);
            if better {
                best = Some(report);
            }
            if best.as_ref().is_some_and(|b| b.pass) {
                break;
            }
        }
        Ok(best.expect("budget >= 1"))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let min_rank = probes.iter().map(|r| r.rank).min().unwrap_or(0);
    let status = if min_rank == 2 * n {
        CheckStatus::Pass
    } else if bound < 2 * n {
        CheckStatus::Violated
    } else {
        CheckStatus::NotVerified
    };
    Ok(VariabilityOutcome { level, status, required_rank: 2 * n, min_rank, structural_bound: bound, probes })
}

/// Verdict for one same-level pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairVerdict {
    pub u: VariableId,
    pub v: VariableId,
    pub statistic: f64,
    pub p_value: f64,
    pub independent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CiReport {
    pub level: usize,
    pub test: String,
    pub alpha: f64,
    /// Verdicts from the factorization of the declared model rather than data.
    pub structural: bool,
    pub pairs: Vec<PairVerdict>,
}

impl CiReport {
    pub fn all_independent(&self) -> bool {
        self.pairs.iter().all(|p| p.independent)
    }
}

/// Where conditional-independence verdicts come from.
pub enum CiSource<'a> {
    /// Exact verdicts from the model's factorization.
    Model(&'a HierModel),
    /// Empirical tests on a sampled batch.
    Batch(&'a SampleBatch),
}

/// Minimum rows for empirical conditional-independence checks.
pub const MIN_CI_ROWS: usize = 1000;

/// For every pair `(u, v)` at level `l + 1`, tests `u ⟂ v | z_l`.
pub fn check_conditional_independence(
    source: CiSource<'_>,
    level: usize,
    test: CiTest,
    alpha: f64,
) -> Result<CiReport> {
    match source {
        CiSource::Model(model) => {
            level_parents(model, level)?;
            let vars = model.level_vars(level + 1);
            let mut pairs = Vec::new();
            for (i, &u) in vars.iter().enumerate() {
                for &v in &vars[i + 1..] {
                    pairs.push(PairVerdict { u, v, statistic: 0.0, p_value: 1.0, independent: true });
                }
            }
            Ok(CiReport { level, test: "structural".into(), alpha, structural: true, pairs })
        }
        CiSource::Batch(batch) => {
            if batch.len() < MIN_CI_ROWS {
                return Err(HierError::InsufficientSamples { needed: MIN_CI_ROWS, have: batch.len() });
            }
            let at = |l: usize| batch.columns.keys().filter(|v| v.level as usize == l).copied().collect::<Vec<_>>();
            let cond_vars = at(level);
            let vars = at(level + 1);
            if cond_vars.is_empty() || vars.is_empty() {
                return Err(HierError::invalid(format!("batch has no columns at levels {level} and {}", level + 1)));
            }
            let cond = batch.columns_for(&cond_vars)?;
            let mut jobs = Vec::new();
            for (i, &u) in vars.iter().enumerate() {
                for &v in &vars[i + 1..] {
                    jobs.push((u, v));
                }
            }
            let pairs = par::map_slice(&jobs, |&(u, v)| {
                let out = test.run(batch.column(u)?, batch.column(v)?, &cond)?;
                Ok(PairVerdict {
                    u,
                    v,
                    statistic: out.statistic,
                    p_value: out.p_value,
                    independent: out.p_value > alpha,
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            Ok(CiReport { level, test: test.name().into(), alpha, structural: false, pairs })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvertibilityReport {
    pub level: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub points: usize,
    pub tolerance: f64,
    /// Smallest and largest singular value over all points.
    pub min_singular_value: f64,
    pub max_singular_value: f64,
    /// Largest `input_dim - rank` seen at any point.
    pub rank_deficit: usize,
    pub pass: bool,
    pub message: String,
}

/// Absolute singular-value floor for the Jacobian of `g_l`.
pub const JACOBIAN_TOLERANCE: f64 = 1e-6;

/// Noise-carrying coordinates of `g_l`'s input beyond `z_l`, in order.
fn noise_slots(model: &HierModel, level: usize) -> Vec<(VariableId, usize)> {
    let mut slots = Vec::new();
    for l in level + 1..=model.num_levels() {
        for v in model.level_vars(l) {
            if model.mechanism(v).is_some_and(|m| m.noise.scale > 0.0) {
                slots.push((v, 1));
            }
        }
    }
    let x_noise = model.noise_dims(model.num_levels() + 1);
    if x_noise > 0 {
        slots.push((model.observation(), x_noise));
    }
    slots
}

/// Evaluates `g_l(z_l, eps_l)`.
fn compose(model: &HierModel, level: usize, input: &[f64], slots: &[(VariableId, usize)]) -> Result<Vec<f64>> {
    let mut values: BTreeMap<VariableId, f64> = BTreeMap::new();
    let width = model.width(level);
    for (i, v) in model.level_vars(level).into_iter().enumerate() {
        values.insert(v, input[i]);
    }
    let mut eps: BTreeMap<VariableId, &[f64]> = BTreeMap::new();
    let mut offset = width;
    for &(v, len) in slots {
        eps.insert(v, &input[offset..offset + len]);
        offset += len;
    }
    for l in level + 1..=model.num_levels() {
        for v in model.level_vars(l) {
            let mech = model.mechanism(v).ok_or_else(|| HierError::UnknownVariable(model.name(v)))?;
            if mech.family == MechanismFamily::PiecewiseTable {
                return Err(HierError::UnsupportedFamily {
                    variable: model.name(v),
                    reason: "piecewise-table mechanisms are not differentiable".into(),
                });
            }
            let pa: Vec<f64> = model.parents(v)?.iter().map(|p| values[p]).collect();
            let e = eps.get(&v).map_or(0.0, |s| s[0]);
            values.insert(v, mech.eval_latent(&pa, e));
        }
    }
    let x = model.observation();
    let mech = model.mechanism(x).ok_or_else(|| HierError::UnknownVariable("x".into()))?;
    let pa: Vec<f64> = model.parents(x)?.iter().map(|p| values[p]).collect();
    let zeros = vec![0.0; model.obs_dim()];
    let e = eps.get(&x).copied().unwrap_or(&zeros);
    let mut out = vec![0.0; model.obs_dim()];
    mech.eval_observation(&pa, e, &mut out);
    Ok(out)
}

/// Numerical Jacobian rank of `g_l` at sampled points.
pub fn check_invertibility(model: &HierModel, level: usize, points: usize, seed: u64) -> Result<InvertibilityReport> {
    if level == 0 || level > model.num_levels() {
        return Err(HierError::invalid(format!("level must be in 1..={}", model.num_levels())));
    }
    let slots = noise_slots(model, level);
    let input_dim = model.width(level) + slots.iter().map(|s| s.1).sum::<usize>();
    let output_dim = model.obs_dim();
    let base = InvertibilityReport {
        level,
        input_dim,
        output_dim,
        points: 0,
        tolerance: JACOBIAN_TOLERANCE,
        min_singular_value: 0.0,
        max_singular_value: 0.0,
        rank_deficit: input_dim.saturating_sub(output_dim),
        pass: false,
        message: String::new(),
    };
    if output_dim < input_dim {
        return Ok(InvertibilityReport {
            message: format!("dimension deficit: d_x = {output_dim} < n(z_{level}) + n(eps_{level}) = {input_dim}"),
            ..base
        });
    }
    let combos = model.all_combinations();
    let per = points.div_ceil(combos.len().max(1)).max(1);
    let vars = model.level_vars(level);
    let mut inputs = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (k, d) in combos.iter().enumerate() {
        let batch = sample(model, d, per, seed.wrapping_add(k as u64))?;
        let cols = batch.columns_for(&vars)?;
        for i in 0..batch.len() {
            let mut input: Vec<f64> = cols.iter().map(|c| c[i]).collect();
            for _ in 0..input_dim - vars.len() {
                input.push(standard_normal(rng.random_range(1e-12..1.0)));
            }
            inputs.push(input);
        }
    }
    inputs.truncate(points.max(1));
    let svs = par::map_slice(&inputs, |input| -> Result<Vec<f64>> {
        let mut jac = DMatrix::zeros(output_dim, input_dim);
        for j in 0..input_dim {
            let h = 1e-6 * input[j].abs().max(1.0);
            let mut plus = input.clone();
            let mut minus = input.clone();
            plus[j] += h;
            minus[j] -= h;
            let (fp, fm) = (compose(model, level, &plus, &slots)?, compose(model, level, &minus, &slots)?);
            for i in 0..output_dim {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        Ok(jac.svd(false, false).singular_values.iter().copied().collect())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut min_sv = f64::INFINITY;
    let mut max_sv: f64 = 0.0;
    let mut deficit = 0;
    for s in &svs {
        min_sv = min_sv.min(s.iter().copied().fold(f64::INFINITY, f64::min));
        max_sv = max_sv.max(s.iter().copied().fold(0.0, f64::max));
        deficit = deficit.max(s.iter().filter(|&&v| v <= JACOBIAN_TOLERANCE).count());
    }
    let pass = deficit == 0;
    let message = if pass { "full column rank at every point".to_string() } else { format!("rank deficit {deficit}") };
    Ok(InvertibilityReport {
        points: svs.len(),
        min_singular_value: min_sv,
        max_singular_value: max_sv,
        rank_deficit: deficit,
        pass,
        message,
        ..base
    })
}

/// Result of matching candidate components to true components.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    /// `permutation[i]` is the true component matched to candidate `i`.
    pub permutation: Vec<usize>,
    /// `|rank correlation|` of each matched pair.
    pub scores: Vec<f64>,
    /// R² of the best monotone fit of each candidate on its match.
    pub monotone_r2: Vec<f64>,
    pub invertible: Vec<bool>,
    /// `|rank correlation|`, rows = candidates, columns = true components.
    pub score_matrix: Vec<Vec<f64>>,
    pub threshold: f64,
    pub pass: bool,
}

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.95;

/// Optimal assignment of candidate to true components by `|Spearman|`.
pub fn match_components(z_true: &[Vec<f64>], z_hat: &[Vec<f64>], threshold: f64) -> Result<MatchResult> {
    if z_true.len() != z_hat.len() {
        return Err(HierError::ShapeMismatch(format!(
            "{} true components vs {} candidates",
            z_true.len(),
            z_hat.len()
        )));
    }
    let k = z_true.len();
    if k == 0 {
        return Err(HierError::ShapeMismatch("no components".into()));
    }
    let rows = z_true[0].len();
    if z_true.iter().chain(z_hat).any(|c| c.len() != rows) {
        return Err(HierError::ShapeMismatch("components differ in row count".into()));
    }
    for (i, c) in z_true.iter().chain(z_hat).enumerate() {
        if c.iter().all(|v| *v == c[0]) {
            return Err(HierError::ConstantColumn(i));
        }
    }
    let true_ranks: Vec<Vec<f64>> = par::map_slice(z_true, |c| stats::ranks(c));
    let hat_ranks: Vec<Vec<f64>> = par::map_slice(z_hat, |c| stats::ranks(c));
    let score_matrix: Vec<Vec<f64>> =
        par::map_slice(&hat_ranks, |h| true_ranks.iter().map(|t| stats::pearson(h, t).map_or(0.0, f64::abs)).collect());
    const SCALE: f64 = 1e12;
    let weights = Matrix::from_rows(
        score_matrix.iter().map(|r| r.iter().map(|s| (s * SCALE).round() as i64).collect::<Vec<_>>()),
    )
    .map_err(|e| HierError::ShapeMismatch(e.to_string()))?;
    let (_, permutation) = kuhn_munkres(&weights);
    let scores: Vec<f64> = permutation.iter().enumerate().map(|(i, &j)| score_matrix[i][j]).collect();
    let monotone_r2: Vec<f64> = par::map_range(k, |i| stats::monotone_r2(&z_true[permutation[i]], &z_hat[i]));
    let invertible: Vec<bool> = monotone_r2.iter().map(|r| *r >= threshold).collect();
    let pass = scores.iter().all(|s| *s >= threshold) && invertible.iter().all(|b| *b);
    Ok(MatchResult { permutation, scores, monotone_r2, invertible, score_matrix, threshold, pass })
}

/// Plain-text rendering of a variability outcome with full matrices.
pub fn render_variability(out: &VariabilityOutcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "variability level {} -> {}: {}", out.level, out.level + 1, out.status);
    let _ = writeln!(
        s,
        "  required rank {}, min rank over {} probes {}, structural bound {}",
        out.required_rank,
        out.probes.len(),
        out.min_rank,
        out.structural_bound
    );
    for (p, r) in out.probes.iter().enumerate() {
        let _ = writeln!(s, "  probe {p} z = {}", fmt_vec(&r.probe));
        for (k, a) in r.anchors.iter().enumerate() {
            let _ = writeln!(s, "    anchor {k} {}", fmt_vec(a));
        }
        for row in &r.matrix {
            let _ = writeln!(s, "    row {}", fmt_vec(row));
        }
        let _ = writeln!(s, "    singular values {}", fmt_vec(&r.singular_values));
        let _ = writeln!(s, "    rank {} tol {:e}", r.rank, r.tolerance);
    }
    s
}

pub fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.10e}")).collect();
    format!("[{}]", parts.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{self, ScaleFixture};
    use crate::model::DiscreteCombination;
    use approx::assert_abs_diff_eq;

    #[test]
    fn w_vector_closed_form() {
        let m = fixtures::location_scale(ScaleFixture::Heteroscedastic);
        let w = w_vector(&m, 1, &[0.0], &[0.0], DerivativeMode::Analytic).unwrap();
        assert_eq!(w, vec![0.0, -1.0]);
        // z = 1, u = 1: mean 1 -> first partial 0; sigma² = e
        let w = w_vector(&m, 1, &[1.0], &[1.0], DerivativeMode::Analytic).unwrap();
        assert_abs_diff_eq!(w[0], 0.0);
        assert_abs_diff_eq!(w[1], -(-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn parent_free_w_is_constant() {
        let m = fixtures::location_scale(ScaleFixture::ParentFree);
        let a = w_vector(&m, 1, &[0.3], &[0.0], DerivativeMode::Analytic).unwrap();
        let b = w_vector(&m, 1, &[0.3], &[1.7], DerivativeMode::Analytic).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn determinant_matches_closed_form() {
        let m = fixtures::location_scale(ScaleFixture::Heteroscedastic);
        let anchors = vec![vec![0.0], vec![1.0], vec![2.0]];
        let r = variability_at_anchors(&m, 1, &[0.0], &anchors, DerivativeMode::Analytic).unwrap();
        let e1 = (-1.0f64).exp();
        assert_abs_diff_eq!(r.matrix[0][0], e1, epsilon = 1e-15);
        assert_abs_diff_eq!(r.matrix[0][1], 1.0 - e1, epsilon = 1e-15);
        assert_abs_diff_eq!(r.determinant, e1 * (1.0 - e1) * (1.0 - e1), epsilon = 1e-12);
        assert!(r.pass);
    }

    #[test]
    fn variability_verdicts() {
        let opts = VariabilityOptions { probes: 5, budget: 20, ..Default::default() };
        let het =
            check_sufficient_variability(&fixtures::location_scale(ScaleFixture::Heteroscedastic), 1, &opts).unwrap();
        assert_eq!(het.status, CheckStatus::Pass);
        let cv =
            check_sufficient_variability(&fixtures::location_scale(ScaleFixture::ConstantVariance), 1, &opts).unwrap();
        assert_eq!((cv.status, cv.min_rank), (CheckStatus::Violated, 1));
        let pf = check_sufficient_variability(&fixtures::location_scale(ScaleFixture::ParentFree), 1, &opts).unwrap();
        assert_eq!((pf.status, pf.min_rank), (CheckStatus::Violated, 0));
        let two = check_sufficient_variability(&fixtures::location_scale_2d(), 1, &opts).unwrap();
        assert_eq!(two.status, CheckStatus::Pass);
    }

    #[test]
    fn tables_are_unsupported() {
        let m = fixtures::layered_table();
        let err = w_vector(&m, 1, &[1.0; 4], &[1.0; 2], DerivativeMode::Analytic).unwrap_err();
        assert!(matches!(err, HierError::UnsupportedFamily { .. }));
    }

    #[test]
    fn structural_ci_is_independent() {
        let m = fixtures::layered_linear(0.5);
        let r = check_conditional_independence(CiSource::Model(&m), 2, CiTest::PartialCorrelation, 0.01).unwrap();
        assert_eq!(r.pairs.len(), 15);
        assert!(r.all_independent());
    }

    #[test]
    fn small_batch_rejected() {
        let m = fixtures::layered_linear(0.5);
        let b = sample(&m, &DiscreteCombination::new(vec![1, 1]), 100, 0).unwrap();
        let err = check_conditional_independence(CiSource::Batch(&b), 1, CiTest::PartialCorrelation, 0.01).unwrap_err();
        assert!(matches!(err, HierError::InsufficientSamples { .. }));
    }

    #[test]
    fn identity_observation_is_invertible() {
        let m = fixtures::chain(0.5);
        let r = check_invertibility(&m, m.num_levels(), 10, 0).unwrap();
        assert!(r.pass, "{r:?}");
        assert_abs_diff_eq!(r.min_singular_value, 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(r.max_singular_value, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn upper_levels_fail_by_dimension() {
        let m = fixtures::layered_linear(0.5);
        let r = check_invertibility(&m, 2, 5, 0).unwrap();
        assert!(!r.pass);
        assert!(r.message.starts_with("dimension deficit"));
    }

    #[test]
    fn match_identity() {
        let m = fixtures::layered_linear(0.5);
        let b = sample(&m, &DiscreteCombination::new(vec![1, 1]), 500, 0).unwrap();
        let cols: Vec<Vec<f64>> = m.level_vars(3).iter().map(|v| b.column(*v).unwrap().to_vec()).collect();
        let r = match_components(&cols, &cols, DEFAULT_MATCH_THRESHOLD).unwrap();
        assert_eq!(r.permutation, (0..6).collect::<Vec<_>>());
        assert!(r.scores.iter().all(|s| (*s - 1.0).abs() < 1e-12));
        assert!(r.pass);
        let mut bad = cols.clone();
        bad[2] = vec![1.0; 500];
        assert!(matches!(match_components(&cols, &bad, 0.95), Err(HierError::ConstantColumn(_))));
    }
}
