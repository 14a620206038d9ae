//! Canonical models used by tests, benches and the CLI examples.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{
    cartesian, DiscreteCombination, HierModel, MechanismSpec, NoiseSpec, RootConditionalSpec, VariableId,
};

fn z(level: u32, index: u32) -> VariableId {
    VariableId::latent(level, index)
}

/// Identity observation over the level-`L` latents plus `extra` noise coordinates.
fn identity_observation(parents: usize, noise: f64) -> MechanismSpec {
    MechanismSpec::observation(&vec![(1.0, 0.0); parents], NoiseSpec::gaussian(noise))
}

fn root_edges(n: u32) -> Vec<(VariableId, VariableId)> {
    (1..=n).map(|i| (VariableId::discrete(i), z(1, i))).collect()
}

/// Layered graph with widths 2-4-6 and linear-gaussian mechanisms. Coefficients are
/// chosen so every true edge keeps a population partial correlation of at
/// least 0.5 under every conditioning set searched by structure recovery
/// (no near-cancellations). Roots are absent at 0
/// and uniform on `[1, 2]` when present; `x` concatenates the six level-3
/// latents and four noise coordinates.
pub fn layered_linear(noise: f64) -> HierModel {
    let mut edges = root_edges(2);
    let level2: [(u32, &[(u32, f64)]); 4] =
        [(1, &[(1, 0.9)]), (2, &[(1, -0.9), (2, -0.8)]), (3, &[(1, -0.8), (2, 0.9)]), (4, &[(2, -0.6)])];
    let level3: [(u32, &[(u32, f64)]); 6] = [
        (1, &[(1, -0.6), (2, 0.6)]),
        (2, &[(1, 0.6), (2, -0.9)]),
        (3, &[(2, 0.8)]),
        (4, &[(3, 0.8)]),
        (5, &[(2, -0.5), (4, -0.9)]),
        (6, &[(3, -0.8), (4, 0.9)]),
    ];
    let mut mechanisms = BTreeMap::new();
    for (level, spec) in [(2u32, &level2[..]), (3, &level3[..])] {
        for &(child, parents) in spec {
            let coefs: Vec<f64> = parents.iter().map(|&(_, a)| a).collect();
            for &(p, _) in parents {
                edges.push((z(level - 1, p), z(level, child)));
            }
            mechanisms.insert(z(level, child), MechanismSpec::linear(&coefs, 0.0, NoiseSpec::gaussian(noise)));
        }
    }
    let x = VariableId::new(4, 1);
    for i in 1..=6 {
        edges.push((z(3, i), x));
    }
    mechanisms.insert(x, identity_observation(6, noise));
    let roots = (1..=2).map(|i| (i, RootConditionalSpec::binary_uniform(0.0, 1.0, 2.0))).collect();
    HierModel::new(vec![2, 2, 4, 6, 10], edges, mechanisms, roots)
}

/// `d -> z1 -> z2 -> x` with unit linear coefficients.
pub fn chain(noise: f64) -> HierModel {
    let mut edges = root_edges(1);
    edges.push((z(1, 1), z(2, 1)));
    edges.push((z(2, 1), VariableId::new(3, 1)));
    let mut mechanisms = BTreeMap::new();
    mechanisms.insert(z(2, 1), MechanismSpec::linear(&[1.0], 0.0, NoiseSpec::gaussian(noise)));
    mechanisms.insert(VariableId::new(3, 1), identity_observation(1, 0.0));
    let roots = [(1, RootConditionalSpec::binary_uniform(0.0, 1.0, 2.0))].into();
    HierModel::new(vec![1, 1, 1, 1], edges, mechanisms, roots)
}

/// Longer linear chain used for structure-recovery fixtures:
/// `d -> z1 -> z2 -> z3 -> x`, one latent per level.
pub fn chain3(noise: f64) -> HierModel {
    let mut edges = root_edges(1);
    edges.push((z(1, 1), z(2, 1)));
    edges.push((z(2, 1), z(3, 1)));
    edges.push((z(3, 1), VariableId::new(4, 1)));
    let mut mechanisms = BTreeMap::new();
    mechanisms.insert(z(2, 1), MechanismSpec::linear(&[1.0], 0.0, NoiseSpec::gaussian(noise)));
    mechanisms.insert(z(3, 1), MechanismSpec::linear(&[1.0], 0.0, NoiseSpec::gaussian(noise)));
    mechanisms.insert(VariableId::new(4, 1), identity_observation(1, 0.0));
    let roots = [(1, RootConditionalSpec::binary_uniform(0.0, 1.0, 2.0))].into();
    HierModel::new(vec![1, 1, 1, 1, 1], edges, mechanisms, roots)
}

fn two_root(parent_sets: [&[u32]; 2], tables: bool) -> HierModel {
    let mut edges = root_edges(2);
    let mut mechanisms = BTreeMap::new();
    for (child, parents) in parent_sets.iter().enumerate() {
        let child = child as u32 + 1;
        for &p in *parents {
            edges.push((z(1, p), z(2, child)));
        }
        let mech = if tables {
            injective_table(parents.len(), &[0.0, 1.0, 2.0], 10.0 * child as f64)
        } else {
            let coefs: Vec<f64> = parents.iter().map(|&p| if p == child { 1.0 } else { 0.8 }).collect();
            MechanismSpec::linear(&coefs, 0.0, NoiseSpec::gaussian(0.1))
        };
        mechanisms.insert(z(2, child), mech);
    }
    let x = VariableId::new(3, 1);
    edges.push((z(2, 1), x));
    edges.push((z(2, 2), x));
    mechanisms.insert(x, identity_observation(2, 0.0));
    let roots = (1..=2)
        .map(|i| {
            let r = if tables {
                RootConditionalSpec::binary_lattice(0.0, 1.0, 2.0, 2)
            } else {
                RootConditionalSpec::binary_uniform(0.0, 1.0, 2.0)
            };
            (i, r)
        })
        .collect();
    HierModel::new(vec![2, 2, 2, 2], edges, mechanisms, roots)
}

/// Table over every tuple of `values` (one slot per parent) with distinct outputs.
fn injective_table(parents: usize, values: &[f64], offset: f64) -> MechanismSpec {
    let cards = vec![values.len() as u32; parents];
    let entries: Vec<(Vec<f64>, f64)> = cartesian(&cards)
        .into_iter()
        .enumerate()
        .map(|(k, combo)| {
            let key = combo.values().iter().map(|&j| values[j as usize]).collect();
            (key, offset + k as f64)
        })
        .collect();
    MechanismSpec::table(-1.0, &entries)
}

/// Two roots, each level-2 latent with a single parent: `z2.1 <- z1.1`, `z2.2 <- z1.2`.
pub fn two_root_singleton() -> HierModel {
    two_root([&[1], &[2]], false)
}

/// Two roots, every level-2 latent depends on both level-1 latents.
pub fn two_root_joint() -> HierModel {
    two_root([&[1, 2], &[1, 2]], false)
}

/// Enumerable counterpart of [`two_root_singleton`] (lattice roots, tables).
pub fn two_root_singleton_table() -> HierModel {
    two_root([&[1], &[2]], true)
}

/// Enumerable counterpart of [`two_root_joint`].
pub fn two_root_joint_table() -> HierModel {
    two_root([&[1, 2], &[1, 2]], true)
}

/// The layered graph with noiseless injective tables, for exact support checks.
pub fn layered_table() -> HierModel {
    let lin = layered_linear(0.0);
    let mut mechanisms = BTreeMap::new();
    let mut values: BTreeMap<VariableId, Vec<f64>> = BTreeMap::new();
    values.insert(z(1, 1), vec![0.0, 1.0, 2.0]);
    values.insert(z(1, 2), vec![0.0, 1.0, 2.0]);
    let mut next = 10.0;
    for v in lin.latents().into_iter().filter(|v| v.level >= 2) {
        let parents = lin.parents(v).expect("fixture variable").to_vec();
        let cards: Vec<u32> = parents.iter().map(|p| values[p].len() as u32).collect();
        let mut entries = Vec::new();
        for combo in cartesian(&cards) {
            let key: Vec<f64> = combo.values().iter().zip(&parents).map(|(&j, p)| values[p][j as usize]).collect();
            entries.push((key, next));
            next += 1.0;
        }
        values.insert(v, entries.iter().map(|e| e.1).collect());
        mechanisms.insert(v, MechanismSpec::table(-1.0, &entries));
    }
    let x = lin.observation();
    mechanisms.insert(x, identity_observation(6, 0.0));
    let roots = (1..=2).map(|i| (i, RootConditionalSpec::binary_lattice(0.0, 1.0, 2.0, 2))).collect();
    HierModel::new(vec![2, 2, 4, 6, 6], lin.edges().iter().copied(), mechanisms, roots)
}

/// Variance behaviour of the one-dimensional location-scale fixtures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleFixture {
    /// `mu(u) = u`, `sigma²(u) = e^u`.
    Heteroscedastic,
    /// `mu(u) = u`, `sigma` constant.
    ConstantVariance,
    /// `p(z | u) = p(z)`.
    ParentFree,
}

/// `d -> z1.1 -> z2.1 -> x` with a location-scale gaussian between the latents.
pub fn location_scale(kind: ScaleFixture) -> HierModel {
    let mech = match kind {
        ScaleFixture::Heteroscedastic => MechanismSpec::location_scale(&[1.0], 0.0, &[1.0], 0.0, 1.0),
        ScaleFixture::ConstantVariance => MechanismSpec::location_scale(&[1.0], 0.0, &[0.0], 0.0, 1.0),
        ScaleFixture::ParentFree => MechanismSpec::location_scale(&[0.0], 0.0, &[0.0], 0.0, 1.0),
    };
    let mut edges = root_edges(1);
    edges.push((z(1, 1), z(2, 1)));
    edges.push((z(2, 1), VariableId::new(3, 1)));
    let mut mechanisms = BTreeMap::new();
    mechanisms.insert(z(2, 1), mech);
    mechanisms.insert(VariableId::new(3, 1), identity_observation(1, 0.0));
    let roots = [(1, RootConditionalSpec::binary_uniform(0.0, 0.0, 2.0))].into();
    HierModel::new(vec![1, 1, 1, 1], edges, mechanisms, roots)
}

/// Two-dimensional heteroscedastic level for variability checks on `n = 2`:
/// each child's mean and log-variance depend on different parent mixtures.
pub fn location_scale_2d() -> HierModel {
    let mut edges = root_edges(2);
    let x = VariableId::new(3, 1);
    let mut mechanisms = BTreeMap::new();
    let specs = [
        MechanismSpec::location_scale(&[1.0, 0.3], 0.0, &[0.8, -0.4], 0.0, 0.5),
        MechanismSpec::location_scale(&[-0.5, 1.0], 0.0, &[0.2, 0.9], 0.0, 0.5),
    ];
    for (i, mech) in specs.into_iter().enumerate() {
        let child = z(2, i as u32 + 1);
        edges.push((z(1, 1), child));
        edges.push((z(1, 2), child));
        edges.push((child, x));
        mechanisms.insert(child, mech);
    }
    mechanisms.insert(x, identity_observation(2, 0.0));
    let roots = (1..=2).map(|i| (i, RootConditionalSpec::binary_uniform(0.0, -1.0, 1.0))).collect();
    HierModel::new(vec![2, 2, 2, 2], edges, mechanisms, roots)
}

/// Random enumerable model: binary lattice roots on `{1, 2}` (absent at 0),
/// `levels` latent levels of width `1..=max_width`, random nonempty parent
/// sets, and injective noiseless tables defined on every reachable input.
pub fn random_table_model(seed: u64, levels: usize, max_width: usize) -> HierModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut widths = vec![0usize; levels + 2];
    widths[1] = rng.random_range(1..=max_width.min(3));
    widths[0] = widths[1];
    for w in widths.iter_mut().take(levels + 1).skip(2) {
        *w = rng.random_range(1..=max_width);
    }
    let mut edges = root_edges(widths[1] as u32);
    for l in 2..=levels {
        for c in 1..=widths[l] as u32 {
            let mut parents: Vec<u32> = (1..=widths[l - 1] as u32).filter(|_| rng.random_bool(0.5)).collect();
            if parents.is_empty() {
                parents.push(rng.random_range(1..=widths[l - 1] as u32));
            }
            for p in parents {
                edges.push((z(l as u32 - 1, p), z(l as u32, c)));
            }
        }
    }
    widths[levels + 1] = widths[levels];
    let x = VariableId::new(levels as u32 + 1, 1);
    for i in 1..=widths[levels] as u32 {
        edges.push((z(levels as u32, i), x));
    }
    let skeleton = HierModel::new(widths.clone(), edges.clone(), BTreeMap::new(), BTreeMap::new());
    let roots = (1..=widths[0] as u32).map(|i| (i, RootConditionalSpec::binary_lattice(0.0, 1.0, 2.0, 2))).collect();
    let mut mechanisms = fill_tables(&skeleton, &mut rng);
    mechanisms.insert(x, identity_observation(widths[levels], 0.0));
    HierModel::new(widths, edges, mechanisms, roots)
}

/// Same widths and roots as `model`, plus one extra adjacent-level edge
/// (if any is missing); tables are regenerated injectively.
pub fn add_random_edge(model: &HierModel, seed: u64) -> Option<HierModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut missing = Vec::new();
    for l in 2..=model.num_levels() {
        for c in model.level_vars(l) {
            for p in model.level_vars(l - 1) {
                if !model.edges().contains(&(p, c)) {
                    missing.push((p, c));
                }
            }
        }
    }
    let &(p, c) = missing.choose(&mut rng)?;
    let mut edges: BTreeSet<_> = model.edges().clone();
    edges.insert((p, c));
    let skeleton = HierModel::new(model.widths().to_vec(), edges.clone(), BTreeMap::new(), model.roots().clone());
    let mut mechanisms = fill_tables(&skeleton, &mut rng);
    let x = model.observation();
    mechanisms.insert(x, model.mechanism(x).cloned().expect("observation mechanism"));
    Some(model.with_edges(edges, mechanisms))
}

fn fill_tables(skeleton: &HierModel, rng: &mut ChaCha8Rng) -> BTreeMap<VariableId, MechanismSpec> {
    let mut values: BTreeMap<VariableId, Vec<f64>> = BTreeMap::new();
    for v in skeleton.level_vars(1) {
        values.insert(v, vec![0.0, 1.0, 2.0]);
    }
    let mut mechanisms = BTreeMap::new();
    for l in 2..=skeleton.num_levels() {
        for v in skeleton.level_vars(l) {
            let parents = skeleton.parents(v).expect("skeleton variable").to_vec();
            let cards: Vec<u32> = parents.iter().map(|p| values[p].len() as u32).collect();
            let keys = cartesian(&cards);
            let mut outputs: Vec<f64> = (0..keys.len() as i64 * 4).map(|k| (k - keys.len() as i64) as f64).collect();
            outputs.shuffle(rng);
            let entries: Vec<(Vec<f64>, f64)> = keys
                .iter()
                .zip(&outputs)
                .map(|(combo, &out)| {
                    let key = combo.values().iter().zip(&parents).map(|(&j, p)| values[p][j as usize]).collect();
                    (key, out)
                })
                .collect();
            values.insert(v, entries.iter().map(|e| e.1).collect());
            mechanisms.insert(v, MechanismSpec::table(-1000.0, &entries));
        }
    }
    mechanisms
}

/// Every binary combination over `n` concepts.
pub fn binary_combinations(n: usize) -> Vec<DiscreteCombination> {
    cartesian(&vec![2; n])
}
