//! Small statistics toolkit: correlations, conditional-independence tests and
//! isotonic regression.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{HierError, Result};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn centered(x: &[f64]) -> Vec<f64> {
    let m = mean(x);
    x.iter().map(|v| v - m).collect()
}

/// Pearson correlation; `None` when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let (a, b) = (centered(x), centered(y));
    let sxy: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum();
    let sxx: f64 = a.iter().map(|p| p * p).sum();
    let syy: f64 = b.iter().map(|q| q * q).sum();
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

/// Residuals of `y` after least-squares regression on `cond` plus an
/// intercept. Fails when the conditioning covariance is singular.
pub fn residualize(y: &[f64], cond: &[&[f64]]) -> Result<Vec<f64>> {
    let n = y.len();
    if cond.is_empty() {
        return Ok(centered(y));
    }
    let centered_cond: Vec<Vec<f64>> = cond.iter().map(|c| centered(c)).collect();
    let x = DMatrix::from_fn(n, cond.len(), |i, j| centered_cond[j][i]);
    let svd = x.clone().svd(true, true);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if max <= 0.0 || min <= 1e-10 * max {
        return Err(HierError::TestDegenerate("singular conditioning covariance".into()));
    }
    let yv = DVector::from_vec(centered(y));
    let beta = svd.solve(&yv, 1e-12 * max).map_err(|e| HierError::TestDegenerate(e.to_string()))?;
    Ok((yv - x * beta).iter().copied().collect())
}

/// Outcome of one conditional-independence test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CiOutcome {
    pub statistic: f64,
    pub p_value: f64,
}

/// Which conditional-independence test to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiTest {
    /// Fisher-z test on the partial correlation.
    PartialCorrelation,
    /// Plug-in conditional mutual information on quantile bins, with
    /// within-stratum permutation p-values.
    BinnedMutualInformation { bins: usize, permutations: usize, seed: u64 },
}

impl CiTest {
    pub const DEFAULT_BINS: usize = 4;
    pub const DEFAULT_PERMUTATIONS: usize = 200;

    pub fn binned_default() -> Self {
        Self::BinnedMutualInformation { bins: Self::DEFAULT_BINS, permutations: Self::DEFAULT_PERMUTATIONS, seed: 0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::PartialCorrelation => "partial-correlation",
            Self::BinnedMutualInformation { .. } => "binned-mutual-information",
        }
    }

    pub fn run(&self, x: &[f64], y: &[f64], cond: &[&[f64]]) -> Result<CiOutcome> {
        match *self {
            Self::PartialCorrelation => partial_correlation_test(x, y, cond),
            Self::BinnedMutualInformation { bins, permutations, seed } => {
                binned_cmi_test(x, y, cond, bins, permutations, seed)
            }
        }
    }
}

/// Two-sided Fisher-z test of zero partial correlation of `x, y` given `cond`.
/// The statistic is the partial correlation itself.
pub fn partial_correlation_test(x: &[f64], y: &[f64], cond: &[&[f64]]) -> Result<CiOutcome> {
    let n = x.len();
    let dof = n as f64 - cond.len() as f64 - 3.0;
    if dof <= 0.0 {
        return Err(HierError::InsufficientSamples { needed: cond.len() + 4, have: n });
    }
    let rx = residualize(x, cond)?;
    let ry = residualize(y, cond)?;
    let r = pearson(&rx, &ry).ok_or_else(|| HierError::TestDegenerate("constant residual".into()))?;
    let r_c = r.clamp(-1.0 + 1e-15, 1.0 - 1e-15);
    let z = r_c.atanh() * dof.sqrt();
    let normal = Normal::standard();
    let p = 2.0 * normal.sf(z.abs());
    Ok(CiOutcome { statistic: r, p_value: p.clamp(0.0, 1.0) })
}

/// Quantile bin index in `0..bins` for each value.
pub fn quantile_bins(x: &[f64], bins: usize) -> Vec<usize> {
    let r = ranks(x);
    let n = x.len() as f64;
    r.iter().map(|&rk| (((rk - 0.5) / n * bins as f64) as usize).min(bins - 1)).collect()
}

fn cmi_from_codes(x: &[usize], y: &[usize], strata: &[usize], bins: usize, num_strata: usize) -> f64 {
    let n = x.len() as f64;
    let mut joint = vec![0.0; num_strata * bins * bins];
    let mut sx = vec![0.0; num_strata * bins];
    let mut sy = vec![0.0; num_strata * bins];
    let mut s = vec![0.0; num_strata];
    for i in 0..x.len() {
        let k = strata[i];
        joint[(k * bins + x[i]) * bins + y[i]] += 1.0;
        sx[k * bins + x[i]] += 1.0;
        sy[k * bins + y[i]] += 1.0;
        s[k] += 1.0;
    }
    let mut total = 0.0;
    for k in 0..num_strata {
        for a in 0..bins {
            for b in 0..bins {
                let c = joint[(k * bins + a) * bins + b];
                if c > 0.0 {
                    total += c / n * (c * s[k] / (sx[k * bins + a] * sy[k * bins + b])).ln();
                }
            }
        }
    }
    total
}

/// Conditional mutual information of binned `x, y` given binned `cond`, with
/// a permutation p-value from shuffling `y` within conditioning strata.
pub fn binned_cmi_test(
    x: &[f64],
    y: &[f64],
    cond: &[&[f64]],
    bins: usize,
    permutations: usize,
    seed: u64,
) -> Result<CiOutcome> {
    if bins < 2 {
        return Err(HierError::invalid("binned test needs at least 2 bins"));
    }
    let n = x.len();
    if n < bins * bins {
        return Err(HierError::InsufficientSamples { needed: bins * bins, have: n });
    }
    for c in cond {
        if c.iter().all(|v| *v == c[0]) {
            return Err(HierError::TestDegenerate("constant conditioning variable".into()));
        }
    }
    let bx = quantile_bins(x, bins);
    let by = quantile_bins(y, bins);
    let mut strata = vec![0usize; n];
    let mut num_strata = 1;
    for c in cond {
        let bc = quantile_bins(c, bins);
        for (s, b) in strata.iter_mut().zip(bc) {
            *s = *s * bins + b;
        }
        num_strata *= bins;
    }
    let observed = cmi_from_codes(&bx, &by, &strata, bins, num_strata);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); num_strata];
    for (i, &s) in strata.iter().enumerate() {
        groups[s].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceed = 0usize;
    let mut perm_y = by.clone();
    for _ in 0..permutations {
        for g in &groups {
            let mut vals: Vec<usize> = g.iter().map(|&i| by[i]).collect();
            vals.shuffle(&mut rng);
            for (&i, v) in g.iter().zip(vals) {
                perm_y[i] = v;
            }
        }
        if cmi_from_codes(&bx, &perm_y, &strata, bins, num_strata) >= observed - 1e-12 {
            exceed += 1;
        }
    }
    Ok(CiOutcome { statistic: observed, p_value: (1 + exceed) as f64 / (1 + permutations) as f64 })
}

/// Pool-adjacent-violators fit of a non-decreasing sequence to `y`.
pub fn isotonic_fit(y: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, w2) = blocks[blocks.len() - 1];
            let (m1, w1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let w = w1 + w2;
            *blocks.last_mut().unwrap() = ((m1 * w1 as f64 + m2 * w2 as f64) / w as f64, w);
        }
    }
    blocks.into_iter().flat_map(|(m, w)| std::iter::repeat_n(m, w)).collect()
}

/// R² of the best monotone (increasing or decreasing) fit of `y` on `x`.
pub fn monotone_r2(x: &[f64], y: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    let sorted: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let m = mean(y);
    let sst: f64 = y.iter().map(|v| (v - m) * (v - m)).sum();
    if sst <= 0.0 {
        return 0.0;
    }
    let r2 = |fit: &[f64], target: &[f64]| {
        let sse: f64 = fit.iter().zip(target).map(|(f, t)| (f - t) * (f - t)).sum();
        1.0 - sse / sst
    };
    let up = isotonic_fit(&sorted);
    // For the decreasing fit, break ties in x the other way round.
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[b].total_cmp(&y[a])));
    let neg: Vec<f64> = idx.iter().map(|&i| -y[i]).collect();
    let down = isotonic_fit(&neg);
    r2(&up, &sorted).max(r2(&down, &neg))
}
