use hiercomp_core::fixtures::{self, ScaleFixture};
use hiercomp_core::identifiability::*;
use hiercomp_core::model::{DiscreteCombination, HierModel, MechanismSpec, NoiseSpec};
use hiercomp_core::sampler::sample;
use hiercomp_core::stats::CiTest;
use hiercomp_core::VariableId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn d(v: &[u32]) -> DiscreteCombination {
    DiscreteCombination::new(v.to_vec())
}

#[test]
fn finite_differences_agree_with_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for m in [fixtures::location_scale(ScaleFixture::Heteroscedastic), fixtures::location_scale_2d()] {
        let n = m.width(2);
        for _ in 0..100 {
            let z: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let u: Vec<f64> = (0..m.width(1)).map(|_| rng.random_range(-1.0..2.0)).collect();
            let a = w_vector(&m, 1, &z, &u, DerivativeMode::Analytic).unwrap();
            let f = w_vector(&m, 1, &z, &u, DerivativeMode::FiniteDifference).unwrap();
            for (x, y) in a.iter().zip(&f) {
                let scale = x.abs().max(1e-3);
                assert!((x - y).abs() / scale <= 1e-5, "analytic {x} fd {y}");
            }
        }
    }
}

#[test]
fn rank_is_invariant_to_anchor_order() {
    let m = fixtures::location_scale_2d();
    let anchors: Vec<Vec<f64>> =
        vec![vec![0.0, 0.0], vec![1.0, 0.2], vec![-0.4, 0.9], vec![0.7, -0.8], vec![-1.0, -0.3]];
    let probe = [0.3, -0.2];
    let base = variability_at_anchors(&m, 1, &probe, &anchors, DerivativeMode::Analytic).unwrap();
    assert!(base.pass);
    let mut swapped = anchors.clone();
    swapped.swap(1, 4);
    swapped.swap(2, 3);
    let r = variability_at_anchors(&m, 1, &probe, &swapped, DerivativeMode::Analytic).unwrap();
    assert_eq!(r.rank, base.rank);
    let mut scaled = anchors.clone();
    for a in scaled.iter_mut().skip(1) {
        for v in a.iter_mut() {
            *v *= 0.5;
        }
    }
    assert_eq!(variability_at_anchors(&m, 1, &probe, &scaled, DerivativeMode::Analytic).unwrap().rank, base.rank);
}

#[test]
fn constant_variance_rank_is_one() {
    let m = fixtures::location_scale(ScaleFixture::ConstantVariance);
    let r =
        variability_at_anchors(&m, 1, &[0.0], &[vec![0.0], vec![1.0], vec![2.0]], DerivativeMode::Analytic).unwrap();
    assert_eq!(r.rank, 1);
    assert!(r.matrix.iter().all(|row| row[1] == 0.0));
}

#[test]
fn parent_free_levels_never_pass() {
    let opts = VariabilityOptions { probes: 3, budget: 10, pool_rows: 50, ..Default::default() };
    for noise in [0.2, 0.7] {
        // linear mechanism with zero coefficients is parent-free
        let base = fixtures::chain(noise);
        let mut mechs = base.mechanisms().clone();
        mechs.insert(VariableId::latent(2, 1), MechanismSpec::linear(&[0.0], 0.3, NoiseSpec::gaussian(noise)));
        let m = base.with_edges(base.edges().iter().copied(), mechs);
        let out = check_sufficient_variability(&m, 1, &opts).unwrap();
        assert_eq!((out.status, out.min_rank), (CheckStatus::Violated, 0));
    }
    let out = check_sufficient_variability(&fixtures::location_scale(ScaleFixture::ParentFree), 1, &opts).unwrap();
    assert_eq!(out.status, CheckStatus::Violated);
}

#[test]
fn layered_pair_is_conditionally_independent() {
    let m = fixtures::layered_linear(0.5);
    let b = sample(&m, &d(&[1, 1]), 10_000, 5).unwrap();
    let r = check_conditional_independence(CiSource::Batch(&b), 1, CiTest::PartialCorrelation, 0.01).unwrap();
    let pair = r.pairs.iter().find(|p| p.u == VariableId::latent(2, 1) && p.v == VariableId::latent(2, 4)).unwrap();
    assert!(pair.independent, "p = {}", pair.p_value);
}

/// Replaces z2.3's noise with z2.2's standardized noise.
fn corrupt(m: &HierModel, batch: &mut hiercomp_core::sampler::SampleBatch) {
    let (z22, z23) = (VariableId::latent(2, 2), VariableId::latent(2, 3));
    let pa = |v: VariableId, i: usize, b: &hiercomp_core::sampler::SampleBatch| -> Vec<f64> {
        m.parents(v).unwrap().iter().map(|p| b.column(*p).unwrap()[i]).collect()
    };
    let (m22, m23) = (m.mechanism(z22).unwrap(), m.mechanism(z23).unwrap());
    for i in 0..batch.len() {
        let (mu, sd) = m22.location_scale_at(&pa(z22, i, batch)).unwrap();
        let eps = (batch.column(z22).unwrap()[i] - mu) / sd;
        let (mu3, sd3) = m23.location_scale_at(&pa(z23, i, batch)).unwrap();
        batch.columns.get_mut(&z23).unwrap()[i] = mu3 + sd3 * eps;
    }
}

#[test]
fn shared_noise_is_detected() {
    let m = fixtures::layered_linear(0.5);
    let mut b = sample(&m, &d(&[1, 1]), 10_000, 6).unwrap();
    corrupt(&m, &mut b);
    for test in [CiTest::PartialCorrelation, CiTest::BinnedMutualInformation { bins: 3, permutations: 100, seed: 1 }] {
        let r = check_conditional_independence(CiSource::Batch(&b), 1, test, 0.01).unwrap();
        let pair = r.pairs.iter().find(|p| p.u == VariableId::latent(2, 2) && p.v == VariableId::latent(2, 3)).unwrap();
        assert!(!pair.independent, "{} p = {}", test.name(), pair.p_value);
    }
}

#[test]
fn layered_top_level_is_invertible() {
    let m = fixtures::layered_linear(0.5);
    let r = check_invertibility(&m, 3, 50, 2).unwrap();
    assert!(r.pass, "{r:?}");
    assert_eq!(r.points, 50);
    assert_eq!((r.input_dim, r.output_dim), (10, 10));
}

#[test]
fn dropped_coordinate_is_a_rank_deficit() {
    let m = fixtures::layered_linear(0.5);
    let mut mechs = m.mechanisms().clone();
    let mut affine = vec![(1.0, 0.0); 6];
    affine[2] = (0.0, 0.0);
    mechs.insert(m.observation(), MechanismSpec::observation(&affine, NoiseSpec::gaussian(0.5)));
    let broken = m.with_edges(m.edges().iter().copied(), mechs);
    let r = check_invertibility(&broken, 3, 10, 2).unwrap();
    assert!(!r.pass);
    assert_eq!(r.rank_deficit, 1);
}

#[test]
fn monotone_transforms_and_permutations_are_recovered() {
    let m = fixtures::layered_linear(0.5);
    let b = sample(&m, &d(&[1, 1]), 2000, 8).unwrap();
    let truth: Vec<Vec<f64>> = m.level_vars(3).iter().map(|v| b.column(*v).unwrap().to_vec()).collect();
    let hat: Vec<Vec<f64>> = truth.iter().rev().map(|c| c.iter().map(|x| x.powi(3)).collect()).collect();
    let r = match_components(&truth, &hat, DEFAULT_MATCH_THRESHOLD).unwrap();
    assert_eq!(r.permutation, vec![5, 4, 3, 2, 1, 0]);
    assert!(r.scores.iter().all(|s| *s == 1.0));
    assert!(r.pass);
    // equivariance: permuting candidates permutes the assignment
    let mut shuffled = hat.clone();
    shuffled.swap(0, 3);
    let r2 = match_components(&truth, &shuffled, DEFAULT_MATCH_THRESHOLD).unwrap();
    assert_eq!(r2.permutation, vec![2, 4, 3, 5, 1, 0]);
}

#[test]
fn mixing_two_components_fails() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 10_000;
    let g = |rng: &mut ChaCha8Rng| hiercomp_core::sampler::standard_normal(rng.random_range(1e-12..1.0));
    let truth: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| g(&mut rng)).collect()).collect();
    let mut hat = truth.clone();
    hat[0] = truth[0].iter().zip(&truth[1]).map(|(a, b)| (a + b) / 2.0).collect();
    hat[1] = (0..n).map(|_| g(&mut rng)).collect();
    let r = match_components(&truth, &hat, DEFAULT_MATCH_THRESHOLD).unwrap();
    assert!(!r.pass);
    let best = r.score_matrix[0].iter().copied().fold(0.0, f64::max);
    // Spearman of a bivariate normal with rho = 1/sqrt(2)
    let expected = 6.0 / std::f64::consts::PI * (0.5 / 2f64.sqrt()).asin();
    assert!((best - expected).abs() < 0.02, "{best} vs {expected}");
}
