//! Attention-map kernels for hierarchical diffusion conditioning: the
//! interpolation schedule, global/local map interpolation, DICE overlap, the
//! pairwise sparsity loss with its analytic gradient, and the combined loss.

use std::io::{Read, Write};

use ndarray::{Array2, Zip};

use crate::error::{HierError, Result};

/// Default weight of the sparsity term.
pub const DEFAULT_LAMBDA: f64 = 1e-4;

/// Non-negative, finite attention map (rows = positions).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap(Array2<f64>);

impl AttentionMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(HierError::invalid(format!("attention entries must be finite and non-negative, got {bad}")));
        }
        Ok(Self(values))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(HierError::ShapeMismatch("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(Array2::from_shape_vec((r, c), flat).expect("shape checked"))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self(Array2::zeros((rows, cols)))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    /// Entrywise L1 norm; equals the entry sum for non-negative maps.
    pub fn l1(&self) -> f64 {
        self.0.sum()
    }

    /// Writes the map as headerless CSV, one row per line.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        for row in self.0.rows() {
            w.write_record(row.iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| f.trim().parse::<f64>().map_err(|e| HierError::parse(Some(i + 1), None, e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }
}

fn same_shape(maps: &[&AttentionMap]) -> Result<()> {
    if let Some(first) = maps.first() {
        if let Some(bad) = maps.iter().find(|m| m.shape() != first.shape()) {
            return Err(HierError::ShapeMismatch(format!("{:?} vs {:?}", bad.shape(), first.shape())));
        }
    }
    Ok(())
}

/// `s(t) = cos(π t / (2(T − 1)))`, with exact endpoints `s(0) = 1`, `s(T−1) = 0`.
pub fn schedule(t: usize, total: usize) -> Result<f64> {
    if total < 2 {
        return Err(HierError::invalid(format!("schedule needs at least 2 steps, got {total}")));
    }
    if t > total - 1 {
        return Err(HierError::invalid(format!("step {t} outside 0..={}", total - 1)));
    }
    Ok(if t == 0 {
        1.0
    } else if t == total - 1 {
        0.0
    } else {
        (std::f64::consts::PI * t as f64 / (2.0 * (total - 1) as f64)).cos()
    })
}

/// Global map `A_{T−1}`, local maps `A_0^{(m)}`, and the step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub global: AttentionMap,
    pub locals: Vec<AttentionMap>,
    pub t: usize,
    pub total: usize,
}

/// `A_t = (1 − s(t)) A_{T−1} + s(t)/M Σ_m A_0^{(m)}`. The endpoints return the
/// global map and the mean of the locals exactly.
pub fn interpolate_attention(stack: &AttentionStack) -> Result<AttentionMap> {
    if stack.locals.is_empty() {
        return Err(HierError::invalid("at least one local map is required"));
    }
    let mut all: Vec<&AttentionMap> = vec![&stack.global];
    all.extend(&stack.locals);
    same_shape(&all)?;
    let s = schedule(stack.t, stack.total)?;
    if stack.t == stack.total - 1 {
        return Ok(stack.global.clone());
    }
    let mut sum = stack.locals[0].0.clone();
    for l in &stack.locals[1..] {
        sum += &l.0;
    }
    let m = stack.locals.len() as f64;
    if stack.t == 0 {
        return Ok(AttentionMap(sum / m));
    }
    let w = s / m;
    let mut out = stack.global.0.clone();
    Zip::from(&mut out).and(&sum).for_each(|g, l| *g = (1.0 - s) * *g + w * l);
    Ok(AttentionMap(out))
}

/// Reading of the overlap numerator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiceMode {
    /// `Σ_ij H1_ij H2_ij`.
    #[default]
    Elementwise,
    /// The literal matrix-product trace `tr(H1 H2)`; needs square maps.
    StrictTrace,
}

/// `D(H1, H2) = 2·⟨H1, H2⟩ / (‖H1‖₁ + ‖H2‖₁)`.
///
/// Symmetric, zero iff the supports are disjoint, and homogeneous of degree
/// one: `D(cH1, cH2) = c·D(H1, H2)`. It lies in `[0, 1]` when every entry is
/// at most 1 (e.g. softmax outputs), since then `H1·H2 ≤ (H1 + H2)/2`.
pub fn dice_overlap(h1: &AttentionMap, h2: &AttentionMap) -> Result<f64> {
    dice_overlap_with(h1, h2, DiceMode::Elementwise)
}

pub fn dice_overlap_with(h1: &AttentionMap, h2: &AttentionMap, mode: DiceMode) -> Result<f64> {
    same_shape(&[h1, h2])?;
    let denom = h1.l1() + h2.l1();
    if denom == 0.0 {
        return Err(HierError::UndefinedOverlap);
    }
    let num = match mode {
        DiceMode::Elementwise => (&h1.0 * &h2.0).sum(),
        DiceMode::StrictTrace => {
            let (r, c) = h1.shape();
            if r != c {
                return Err(HierError::ShapeMismatch(format!("strict trace needs square maps, got {r}x{c}")));
            }
            h1.0.dot(&h2.0).diag().sum()
        }
    };
    Ok(2.0 * num / denom)
}

/// `L_n = Σ_{m ≠ n} D(H_m, H_n)` over ordered pairs.
pub fn sparsity_loss(locals: &[AttentionMap]) -> Result<f64> {
    if locals.is_empty() {
        return Err(HierError::invalid("at least one local map is required"));
    }
    same_shape(&locals.iter().collect::<Vec<_>>())?;
    let mut total = 0.0;
    for (m, a) in locals.iter().enumerate() {
        for (n, b) in locals.iter().enumerate() {
            if m != n {
                total += dice_overlap(a, b)?;
            }
        }
    }
    Ok(total)
}

/// `L = L_d + λ·L_n`.
pub fn combined_loss(l_d: f64, locals: &[AttentionMap], lambda: f64) -> Result<f64> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(HierError::invalid(format!("lambda must be a finite non-negative number, got {lambda}")));
    }
    if !l_d.is_finite() {
        return Err(HierError::invalid("denoising loss must be finite"));
    }
    if lambda == 0.0 {
        return Ok(l_d);
    }
    Ok(l_d + lambda * sparsity_loss(locals)?)
}

/// `∂L_n/∂H_m = Σ_{n≠m} 2·∂D(H_m, H_n)/∂H_m`, with
/// `∂D(A, B)/∂A_ij = 2 B_ij / S − 2⟨A, B⟩ / S²`, `S = ‖A‖₁ + ‖B‖₁`.
pub fn grad_sparsity_loss(locals: &[AttentionMap]) -> Result<Vec<Array2<f64>>> {
    if locals.is_empty() {
        return Err(HierError::invalid("at least one local map is required"));
    }
    same_shape(&locals.iter().collect::<Vec<_>>())?;
    let sums: Vec<f64> = locals.iter().map(AttentionMap::l1).collect();
    let mut grads: Vec<Array2<f64>> = locals.iter().map(|l| Array2::zeros(l.0.dim())).collect();
    for m in 0..locals.len() {
        for n in 0..locals.len() {
            if m == n {
                continue;
            }
            let s = sums[m] + sums[n];
            if s == 0.0 {
                return Err(HierError::UndefinedOverlap);
            }
            let inner = (&locals[m].0 * &locals[n].0).sum();
            let shift = 2.0 * inner / (s * s);
            Zip::from(&mut grads[m]).and(&locals[n].0).for_each(|g, b| *g += 2.0 * (2.0 * b / s - shift));
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn map(a: Array2<f64>) -> AttentionMap {
        AttentionMap::new(a).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(schedule(0, 5).unwrap(), 1.0);
        assert_eq!(schedule(4, 5).unwrap(), 0.0);
        assert_eq!(schedule(2, 5).unwrap(), std::f64::consts::FRAC_PI_4.cos());
        assert!(schedule(5, 5).is_err());
        assert!(schedule(0, 1).is_err());
    }

    #[test]
    fn interpolation_cases() {
        let g = map(Array2::ones((2, 2)));
        let z = map(Array2::zeros((2, 2)));
        let stack = AttentionStack { global: g.clone(), locals: vec![z.clone()], t: 2, total: 5 };
        let out = interpolate_attention(&stack).unwrap();
        let expect = 1.0 - std::f64::consts::FRAC_PI_4.cos();
        assert!(out.values().iter().all(|v| (v - expect).abs() < 1e-15));
        let l1 = map(array![[0.3, 0.1], [0.7, 0.9]]);
        let l2 = map(array![[0.2, 0.4], [0.0, 1.3]]);
        let s0 = AttentionStack { global: g.clone(), locals: vec![l1.clone(), l2.clone()], t: 0, total: 5 };
        assert_eq!(interpolate_attention(&s0).unwrap().values(), &((l1.values() + l2.values()) / 2.0));
        let end = AttentionStack { global: l1.clone(), locals: vec![l2.clone()], t: 4, total: 5 };
        assert_eq!(interpolate_attention(&end).unwrap(), l1);
        let bad = AttentionStack { global: g, locals: vec![map(Array2::zeros((3, 2)))], t: 1, total: 5 };
        assert!(matches!(interpolate_attention(&bad), Err(HierError::ShapeMismatch(_))));
    }

    #[test]
    fn dice_hand_cases() {
        let eye = map(Array2::eye(2));
        assert_eq!(dice_overlap(&eye, &eye).unwrap(), 1.0);
        let a = map(array![[1.0, 0.0], [0.0, 0.0]]);
        let b = map(array![[1.0, 1.0], [0.0, 0.0]]);
        assert!((dice_overlap(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((dice_overlap_with(&a, &b, DiceMode::StrictTrace).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let c = map(array![[0.0, 0.0], [0.0, 1.0]]);
        assert_eq!(dice_overlap(&a, &c).unwrap(), 0.0);
        let zero = map(Array2::zeros((2, 2)));
        assert!(matches!(dice_overlap(&zero, &zero), Err(HierError::UndefinedOverlap)));
        // the two readings differ on non-symmetric maps
        let u = map(array![[0.0, 1.0], [0.0, 0.0]]);
        assert_eq!(dice_overlap(&u, &u).unwrap(), 1.0);
        assert_eq!(dice_overlap_with(&u, &u, DiceMode::StrictTrace).unwrap(), 0.0);
    }

    #[test]
    fn sparsity_and_combined() {
        let a = map(array![[1.0, 0.0], [0.0, 0.0]]);
        let b = map(array![[1.0, 1.0], [0.0, 0.0]]);
        let c = map(array![[0.0, 0.0], [0.0, 1.0]]);
        assert_eq!(sparsity_loss(std::slice::from_ref(&a)).unwrap(), 0.0);
        assert_eq!(sparsity_loss(&[a.clone(), c.clone()]).unwrap(), 0.0);
        let ln = sparsity_loss(&[a.clone(), b.clone()]).unwrap();
        assert!((ln - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(combined_loss(1.5, &[a.clone(), c], DEFAULT_LAMBDA).unwrap(), 1.5);
        assert!((combined_loss(0.0, &[a.clone(), b.clone()], 3.0).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(combined_loss(0.25, &[a.clone(), b.clone()], 0.0).unwrap(), 0.25);
        assert!(combined_loss(0.0, &[a, b], -1.0).is_err());
        assert_eq!(DEFAULT_LAMBDA, 1e-4);
    }

    #[test]
    fn gradient_of_disjoint_maps_is_zero() {
        let a = map(array![[1.0, 0.0], [0.0, 0.0]]);
        let c = map(array![[0.0, 0.0], [0.0, 1.0]]);
        let g = grad_sparsity_loss(&[a.clone(), c]).unwrap();
        // entries where the other map is zero get only the (zero) shift term
        assert_eq!(g[0][(0, 0)], 0.0);
        assert_eq!(grad_sparsity_loss(&[a]).unwrap()[0], Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn csv_round_trip() {
        let a = map(array![[0.25, 1.5e-7], [3.0, 0.0]]);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        assert_eq!(AttentionMap::read_csv(buf.as_slice()).unwrap(), a);
    }

    fn positive_maps(m: usize, r: usize, c: usize) -> impl Strategy<Value = Vec<AttentionMap>> {
        prop::collection::vec(prop::collection::vec(0.05f64..2.0, r * c), m)
            .prop_map(move |v| v.into_iter().map(|x| map(Array2::from_shape_vec((r, c), x).unwrap())).collect())
    }

    proptest! {
        #[test]
        fn gradient_matches_central_differences(maps in positive_maps(3, 3, 3)) {
            let grads = grad_sparsity_loss(&maps).unwrap();
            let h = 1e-6;
            for m in 0..maps.len() {
                for idx in [(0, 0), (1, 2), (2, 1)] {
                    let mut plus = maps.clone();
                    let mut minus = maps.clone();
                    plus[m].0[idx] += h;
                    minus[m].0[idx] -= h;
                    let fd = (sparsity_loss(&plus).unwrap() - sparsity_loss(&minus).unwrap()) / (2.0 * h);
                    let an = grads[m][idx];
                    prop_assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "fd {fd} analytic {an}");
                }
            }
        }

        #[test]
        fn dice_is_symmetric_and_degree_one(maps in positive_maps(2, 2, 3), c in 0.1f64..10.0) {
            let d = dice_overlap(&maps[0], &maps[1]).unwrap();
            prop_assert_eq!(d, dice_overlap(&maps[1], &maps[0]).unwrap());
            let scaled: Vec<AttentionMap> = maps.iter().map(|m| map(m.values() * c)).collect();
            let ds = dice_overlap(&scaled[0], &scaled[1]).unwrap();
            prop_assert!((ds - c * d).abs() <= 1e-12 * ds.max(1.0));
        }

        #[test]
        fn dice_is_bounded_for_unit_maps(maps in positive_maps(2, 3, 3)) {
            let unit: Vec<AttentionMap> = maps.iter().map(|m| map(m.values() / 2.0)).collect();
            let d = dice_overlap(&unit[0], &unit[1]).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn sparsity_is_permutation_invariant(maps in positive_maps(4, 2, 2)) {
            let mut rev = maps.clone();
            rev.reverse();
            prop_assert!((sparsity_loss(&maps).unwrap() - sparsity_loss(&rev).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn interpolation_is_convex(maps in positive_maps(3, 2, 2), t in 0usize..6) {
            let stack = AttentionStack { global: maps[0].clone(), locals: maps[1..].to_vec(), t, total: 6 };
            let out = interpolate_attention(&stack).unwrap();
            for ((o, g), (a, b)) in out.values().iter().zip(maps[0].values()).zip(maps[1].values().iter().zip(maps[2].values())) {
                let lo = g.min(*a).min(*b);
                let hi = g.max(*a).max(*b);
                prop_assert!(*o >= lo - 1e-12 && *o <= hi + 1e-12);
            }
        }

        #[test]
        fn schedule_strictly_decreasing(total in 2usize..200) {
            for t in 0..total - 1 {
                prop_assert!(schedule(t, total).unwrap() > schedule(t + 1, total).unwrap());
            }
        }
    }
}
