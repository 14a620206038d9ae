use hiercomp_core::model::DiscreteCombination;
use hiercomp_core::sampler::{sample, sample_many, SampleBatch};
use hiercomp_core::spec_format::{load_model, model_hash, save_model};
use hiercomp_core::{fixtures, par, VariableId};
use proptest::prelude::*;

fn d(v: &[u32]) -> DiscreteCombination {
    DiscreteCombination::new(v.to_vec())
}

#[test]
fn parallel_and_sequential_paths_agree() {
    let m = fixtures::layered_linear(0.5);
    let combos = m.all_combinations();
    let a = sample_many(&m, &combos, 300, 9).unwrap();
    let b = par::single_threaded(|| sample_many(&m, &combos, 300, 9).unwrap());
    assert_eq!(a, b);
}

#[test]
fn export_import_round_trip() {
    let m = fixtures::layered_linear(0.5);
    let batch = sample(&m, &d(&[1, 0]), 50, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.csv");
    batch.export(&m, &path).unwrap();
    let back = SampleBatch::import(&m, &path).unwrap();
    assert_eq!(back.len(), 50);
    assert_eq!(back.conditioning, batch.conditioning);
    for (v, col) in &batch.columns {
        let other = back.column(*v).unwrap();
        for (a, b) in col.iter().zip(other) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}

#[test]
fn absent_concepts_pin_their_subtree_inputs() {
    let m = fixtures::layered_linear(0.5);
    let batch = sample(&m, &d(&[0, 1]), 200, 1).unwrap();
    assert!(batch.column(VariableId::latent(1, 1)).unwrap().iter().all(|v| *v == 0.0));
    assert!(batch.column(VariableId::latent(1, 2)).unwrap().iter().all(|v| (1.0..=2.0).contains(v)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn seed_prefix_contract(seed in 0u64..10_000, n in 1usize..60, extra in 1usize..40) {
        let m = fixtures::layered_linear(0.3);
        let short = sample(&m, &d(&[1, 1]), n, seed).unwrap();
        let long = sample(&m, &d(&[1, 1]), n + extra, seed).unwrap();
        for (v, col) in &short.columns {
            prop_assert_eq!(&col[..], &long.column(*v).unwrap()[..n]);
        }
        for (a, b) in short.observation.iter().zip(&long.observation) {
            prop_assert_eq!(&a[..], &b[..n]);
        }
    }

    #[test]
    fn random_models_round_trip_through_spec(seed in 0u64..500) {
        let m = fixtures::random_table_model(seed, 3, 4);
        let text = save_model(&m);
        let back = load_model(&text).unwrap();
        prop_assert_eq!(model_hash(&back), model_hash(&m));
        prop_assert_eq!(back, m);
    }
}
