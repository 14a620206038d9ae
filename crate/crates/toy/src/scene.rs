//! Synthetic scenes: each binary concept owns a region of the grid and, when
//! active, stamps a fixed shape there in an intensity drawn from its palette.

use hiercomp_core::sampler::NoiseSource;
use hiercomp_core::DiscreteCombination;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ToyError};

pub const DEFAULT_GRID: usize = 16;
pub const BACKGROUND: f64 = -1.0;

/// Axis-aligned block of pixels, `[row, row + height) × [col, col + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.height && c >= self.col && c < self.col + self.width
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.row < other.row + other.height
            && other.row < self.row + self.height
            && self.col < other.col + other.width
            && other.col < self.col + self.width
    }

    /// Flat pixel indices of the region in row-major order.
    pub fn pixels(&self, grid: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for r in self.row..self.row + self.height {
            for c in self.col..self.col + self.width {
                out.push(r * grid + c);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    pub region: Region,
    /// Pixels `(row, col)` painted when the concept is active.
    pub stamp: Vec<(usize, usize)>,
    /// Intensities the stamp may take, drawn uniformly per image.
    pub palette: Vec<f64>,
}

impl ConceptSpec {
    pub fn stamp_pixels(&self, grid: usize) -> Vec<usize> {
        self.stamp.iter().map(|&(r, c)| r * grid + c).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub grid: usize,
    pub concepts: Vec<ConceptSpec>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::two_concept(DEFAULT_GRID)
    }
}

impl SceneSpec {
    /// Two concepts: a cross in the left half and a rectangular ring in the
    /// right half. Works for any even grid of side at least 8.
    pub fn two_concept(grid: usize) -> Self {
        let half = grid / 2;
        let quarter = grid / 4;
        let mut cross = Vec::new();
        for r in quarter..grid - quarter {
            cross.push((r, quarter));
        }
        for c in 1..half - 1 {
            if c != quarter {
                cross.push((half, c));
            }
        }
        let mut ring = Vec::new();
        let (top, bottom) = (quarter, grid - quarter - 1);
        let (left, right) = (half + 1, grid - 2);
        for r in top..=bottom {
            for c in left..=right {
                if r == top || r == bottom || c == left || c == right {
                    ring.push((r, c));
                }
            }
        }
        let palette = vec![0.3, 0.65, 1.0];
        Self {
            grid,
            concepts: vec![
                ConceptSpec {
                    name: "cross".into(),
                    region: Region { row: 0, col: 0, height: grid, width: half },
                    stamp: cross,
                    palette: palette.clone(),
                },
                ConceptSpec {
                    name: "ring".into(),
                    region: Region { row: 0, col: half, height: grid, width: grid - half },
                    stamp: ring,
                    palette,
                },
            ],
        }
    }

    pub fn pixels(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 4 {
            return Err(ToyError::InvalidScene(format!("grid {} is too small", self.grid)));
        }
        if self.concepts.is_empty() {
            return Err(ToyError::InvalidScene("no concepts defined".into()));
        }
        for (i, c) in self.concepts.iter().enumerate() {
            let reg = c.region;
            if reg.height == 0 || reg.width == 0 || reg.row + reg.height > self.grid || reg.col + reg.width > self.grid
            {
                return Err(ToyError::InvalidScene(format!("region of concept {i} leaves the grid")));
            }
            if c.stamp.is_empty() || c.stamp.iter().any(|&(r, col)| !reg.contains(r, col)) {
                return Err(ToyError::InvalidScene(format!("stamp of concept {i} is empty or leaves its region")));
            }
            if c.stamp.len() == reg.height * reg.width {
                return Err(ToyError::InvalidScene(format!("stamp of concept {i} fills its region")));
            }
            if c.palette.is_empty() || c.palette.iter().any(|&v| !(v > BACKGROUND && v <= 1.0)) {
                return Err(ToyError::InvalidScene(format!("palette of concept {i} must lie in (-1, 1]")));
            }
            for (j, other) in self.concepts.iter().enumerate().skip(i + 1) {
                if reg.overlaps(&other.region) {
                    return Err(ToyError::InvalidScene(format!("regions of concepts {i} and {j} overlap")));
                }
            }
        }
        Ok(())
    }

    /// Checks that `d` names exactly this scene's concepts with binary values.
    pub fn check_combination(&self, d: &DiscreteCombination) -> Result<()> {
        let defined = self.concepts.len();
        if d.len() > defined {
            return Err(ToyError::UnknownConcept { id: defined, defined });
        }
        if d.len() < defined {
            return Err(ToyError::ShapeMismatch(format!(
                "combination {d} has {} entries, scene has {defined} concepts",
                d.len()
            )));
        }
        if d.values().iter().any(|&v| v > 1) {
            return Err(ToyError::InvalidConfig(format!("combination {d} is not binary")));
        }
        Ok(())
    }

    /// Renders `d`, choosing palette entry `colors[i]` for active concept `i`.
    pub fn render(&self, d: &DiscreteCombination, colors: &[usize]) -> Result<Vec<f64>> {
        self.check_combination(d)?;
        let mut img = vec![BACKGROUND; self.pixels()];
        for (i, c) in self.concepts.iter().enumerate() {
            if d.values()[i] == 1 {
                let value = *c
                    .palette
                    .get(colors[i])
                    .ok_or_else(|| ToyError::InvalidConfig(format!("palette index {} out of range", colors[i])))?;
                for p in c.stamp_pixels(self.grid) {
                    img[p] = value;
                }
            }
        }
        Ok(img)
    }

    /// Every binary combination over the scene's concepts, in lexicographic order.
    pub fn cartesian(&self) -> Vec<DiscreteCombination> {
        let n = self.concepts.len();
        (0..1u32 << n)
            .map(|bits| DiscreteCombination::new((0..n).rev().map(|i| (bits >> i) & 1).collect::<Vec<_>>()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub d: DiscreteCombination,
    pub image: Vec<f64>,
    /// Palette entry used per concept (meaningful only for active ones).
    pub colors: Vec<usize>,
}

/// Which combinations were trained on and which were held out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub n_per_combination: usize,
    pub train: Vec<String>,
    pub held_out: Vec<String>,
    pub examples: usize,
}

impl SplitManifest {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub scene: SceneSpec,
    pub examples: Vec<Example>,
    pub manifest: SplitManifest,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn train_combinations(&self) -> Vec<DiscreteCombination> {
        parse_list(&self.manifest.train)
    }

    pub fn held_out_combinations(&self) -> Vec<DiscreteCombination> {
        parse_list(&self.manifest.held_out)
    }
}

fn parse_list(items: &[String]) -> Vec<DiscreteCombination> {
    items.iter().filter_map(|s| DiscreteCombination::parse(s).ok()).collect()
}

/// Renders `n` images for every combination of `train`; palette draws come
/// from stream `k` (the combination's position) of the seed.
pub fn generate_dataset(scene: &SceneSpec, train: &[DiscreteCombination], n: usize, seed: u64) -> Result<Dataset> {
    scene.validate()?;
    if train.is_empty() {
        return Err(ToyError::InvalidConfig("the training support is empty".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for d in train {
        scene.check_combination(d)?;
        if !seen.insert(d.clone()) {
            return Err(ToyError::InvalidConfig(format!("combination {d} listed twice")));
        }
    }
    let noise = NoiseSource::new(seed);
    let k = scene.concepts.len();
    let mut examples = Vec::with_capacity(train.len() * n);
    let mut u = vec![0.0; k];
    for (stream, d) in train.iter().enumerate() {
        for row in 0..n {
            noise.uniforms(stream as u64, row as u64, &mut u);
            let colors: Vec<usize> = scene
                .concepts
                .iter()
                .zip(&u)
                .map(|(c, &ui)| ((ui * c.palette.len() as f64) as usize).min(c.palette.len() - 1))
                .collect();
            let image = scene.render(d, &colors)?;
            examples.push(Example { d: d.clone(), image, colors });
        }
    }
    let held_out = scene.cartesian().into_iter().filter(|d| !seen.contains(d)).map(|d| d.to_string()).collect();
    let manifest = SplitManifest {
        seed,
        n_per_combination: n,
        train: train.iter().map(ToString::to_string).collect(),
        held_out,
        examples: examples.len(),
    };
    Ok(Dataset { scene: scene.clone(), examples, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dc(v: &[u32]) -> DiscreteCombination {
        DiscreteCombination::new(v.to_vec())
    }

    #[test]
    fn default_scene_is_valid_and_disjoint() {
        let s = SceneSpec::default();
        s.validate().unwrap();
        assert_eq!(s.grid, 16);
        let a: std::collections::BTreeSet<_> = s.concepts[0].stamp_pixels(16).into_iter().collect();
        let b: std::collections::BTreeSet<_> = s.concepts[1].stamp_pixels(16).into_iter().collect();
        assert!(a.is_disjoint(&b));
        assert!(a.len() >= 10 && b.len() >= 10);
        SceneSpec::two_concept(8).validate().unwrap();
    }

    #[test]
    fn all_zero_renders_background() {
        let s = SceneSpec::default();
        let img = s.render(&dc(&[0, 0]), &[0, 0]).unwrap();
        assert!(img.iter().all(|&v| v == BACKGROUND));
    }

    #[test]
    fn active_concept_paints_only_its_stamp() {
        let s = SceneSpec::default();
        let img = s.render(&dc(&[0, 1]), &[0, 2]).unwrap();
        let stamp: Vec<usize> = s.concepts[1].stamp_pixels(16);
        for (p, &v) in img.iter().enumerate() {
            if stamp.contains(&p) {
                assert_eq!(v, 1.0);
            } else {
                assert_eq!(v, BACKGROUND);
            }
        }
    }

    #[test]
    fn unknown_concept_is_rejected() {
        let s = SceneSpec::default();
        assert!(matches!(s.render(&dc(&[0, 1, 1]), &[0, 0, 0]), Err(ToyError::UnknownConcept { .. })));
        assert!(generate_dataset(&s, &[dc(&[1, 0, 0])], 2, 0).is_err());
    }

    #[test]
    fn overlapping_regions_are_rejected() {
        let mut s = SceneSpec::default();
        s.concepts[1].region.col = 4;
        assert!(s.validate().is_err());
    }

    #[test]
    fn dataset_counts_and_manifest() {
        let s = SceneSpec::default();
        let ds = generate_dataset(&s, &[dc(&[0, 1]), dc(&[1, 0])], 500, 7).unwrap();
        assert_eq!(ds.len(), 1000);
        assert!(ds.examples.iter().all(|e| e.d.values() != [1, 1]));
        assert_eq!(ds.manifest.held_out, vec!["[0,0]".to_string(), "[1,1]".to_string()]);
        let text = ds.manifest.to_toml().unwrap();
        assert!(text.contains("held_out"));
    }

    #[test]
    fn dataset_is_deterministic() {
        let s = SceneSpec::default();
        let a = generate_dataset(&s, &[dc(&[1, 1])], 20, 3).unwrap();
        let b = generate_dataset(&s, &[dc(&[1, 1])], 20, 3).unwrap();
        assert_eq!(a.examples, b.examples);
        let c = generate_dataset(&s, &[dc(&[1, 1])], 20, 4).unwrap();
        assert_ne!(a.examples, c.examples);
    }

    #[test]
    fn empty_support_is_an_error() {
        assert!(generate_dataset(&SceneSpec::default(), &[], 5, 0).is_err());
    }
}
