//! Template classifier and composition success rates.

use std::fmt::Write as _;

use hiercomp_core::sampler::NoiseSource;
use hiercomp_core::stats::pearson;
use hiercomp_core::DiscreteCombination;
use serde::{Deserialize, Serialize};

use crate::diffusion::{reverse_sample, NoisePredictor, NoiseSchedule};
use crate::error::{Result, ToyError};
use crate::scene::{SceneSpec, BACKGROUND};

/// Minimum correlation between a region and its stamp template.
pub const MIN_TEMPLATE_CORRELATION: f64 = 0.6;
/// Minimum stamp-minus-surround contrast, as a fraction of the faintest
/// palette entry's contrast against the background.
pub const MIN_CONTRAST_FRACTION: f64 = 0.65;

/// Per-concept detection score for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub correlation: f64,
    pub contrast: f64,
    pub present: bool,
}

/// Matches each concept's region against its stamp: the concept is present
/// when the region correlates with the binary stamp template and the stamp
/// is markedly brighter than the rest of the region.
pub fn detect(scene: &SceneSpec, image: &[f64]) -> Result<Vec<Detection>> {
    if image.len() != scene.pixels() {
        return Err(ToyError::ShapeMismatch(format!("image has {} pixels, scene {}", image.len(), scene.pixels())));
    }
    scene
        .concepts
        .iter()
        .map(|c| {
            let stamp: std::collections::BTreeSet<usize> = c.stamp_pixels(scene.grid).into_iter().collect();
            let region = c.region.pixels(scene.grid);
            let template: Vec<f64> = region.iter().map(|p| if stamp.contains(p) { 1.0 } else { 0.0 }).collect();
            let values: Vec<f64> = region.iter().map(|&p| image[p]).collect();
            let correlation = pearson(&values, &template).unwrap_or(0.0);
            let (mut on, mut off, mut n_on) = (0.0, 0.0, 0usize);
            for (v, t) in values.iter().zip(&template) {
                if *t > 0.0 {
                    on += v;
                    n_on += 1;
                } else {
                    off += v;
                }
            }
            let contrast = on / n_on as f64 - off / (values.len() - n_on) as f64;
            let faintest = c.palette.iter().copied().fold(f64::INFINITY, f64::min) - BACKGROUND;
            let present = correlation >= MIN_TEMPLATE_CORRELATION && contrast >= MIN_CONTRAST_FRACTION * faintest;
            Ok(Detection { correlation, contrast, present })
        })
        .collect()
}

/// True when the detected concepts are exactly the active ones of `d`.
pub fn is_success(scene: &SceneSpec, image: &[f64], d: &DiscreteCombination) -> Result<bool> {
    scene.check_combination(d)?;
    let det = detect(scene, image)?;
    Ok(det.iter().zip(d.values()).all(|(x, &v)| x.present == (v == 1)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinationRate {
    pub d: String,
    pub samples: usize,
    pub successes: usize,
    pub rate: f64,
    /// How often each concept was detected.
    pub detected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub seed: u64,
    pub rates: Vec<CombinationRate>,
}

impl CompositionReport {
    pub fn rate(&self, d: &DiscreteCombination) -> Option<f64> {
        let key = d.to_string();
        self.rates.iter().find(|r| r.d == key).map(|r| r.rate)
    }

    pub fn mean_rate(&self) -> f64 {
        if self.rates.is_empty() {
            return 0.0;
        }
        self.rates.iter().map(|r| r.rate).sum::<f64>() / self.rates.len() as f64
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.rates {
            let det: Vec<String> = r.detected.iter().map(ToString::to_string).collect();
            let _ = writeln!(
                out,
                "combination {}: success {}/{} = {:.4} (detected per concept: {})",
                r.d,
                r.successes,
                r.samples,
                r.rate,
                det.join(",")
            );
        }
        out
    }
}

/// Draws `n` reverse-process samples per combination and scores them with
/// the template classifier. Sample `i` of combination `k` uses row `i` of
/// stream `k`, so results do not depend on evaluation order or threads.
pub fn evaluate_composition<P: NoisePredictor>(
    predictor: &P,
    scene: &SceneSpec,
    schedule: &NoiseSchedule,
    combos: &[DiscreteCombination],
    n: usize,
    seed: u64,
) -> Result<CompositionReport> {
    let pixels = scene.pixels();
    let noise = NoiseSource::new(seed);
    let mut rates = Vec::with_capacity(combos.len());
    for (k, d) in combos.iter().enumerate() {
        scene.check_combination(d)?;
        let outcomes = hiercomp_core::par::map_range(n, |i| -> Result<(bool, Vec<bool>)> {
            let mut u = vec![0.0; pixels * schedule.steps()];
            noise.uniforms(k as u64, i as u64, &mut u);
            let img = reverse_sample(predictor, schedule, d, pixels, &mut u)?;
            let det = detect(scene, &img)?;
            let ok = det.iter().zip(d.values()).all(|(x, &v)| x.present == (v == 1));
            Ok((ok, det.iter().map(|x| x.present).collect()))
        });
        let mut successes = 0;
        let mut detected = vec![0; scene.concepts.len()];
        for o in outcomes {
            let (ok, det) = o?;
            successes += usize::from(ok);
            for (c, p) in detected.iter_mut().zip(det) {
                *c += usize::from(p);
            }
        }
        let rate = if n == 0 { 0.0 } else { successes as f64 / n as f64 };
        rates.push(CombinationRate { d: d.to_string(), samples: n, successes, rate, detected });
    }
    Ok(CompositionReport { seed, rates })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dc(v: &[u32]) -> DiscreteCombination {
        DiscreteCombination::new(v.to_vec())
    }

    #[test]
    fn clean_renders_are_classified_exactly() {
        let s = SceneSpec::default();
        for d in s.cartesian() {
            for color in 0..3 {
                let img = s.render(&d, &[color, color]).unwrap();
                assert!(is_success(&s, &img, &d).unwrap(), "{d} color {color}");
            }
        }
    }

    #[test]
    fn background_is_not_detected() {
        let s = SceneSpec::default();
        let img = vec![BACKGROUND; 256];
        assert!(detect(&s, &img).unwrap().iter().all(|x| !x.present));
    }

    #[test]
    fn faint_stamp_is_rejected() {
        let s = SceneSpec::default();
        let mut img = vec![BACKGROUND; 256];
        for p in s.concepts[0].stamp_pixels(16) {
            img[p] = -0.7;
        }
        let det = detect(&s, &img).unwrap();
        assert!(det[0].correlation > 0.99);
        assert!(!det[0].present);
    }

    #[test]
    fn wrong_set_is_a_failure() {
        let s = SceneSpec::default();
        let img = s.render(&dc(&[1, 1]), &[2, 2]).unwrap();
        assert!(!is_success(&s, &img, &dc(&[1, 0])).unwrap());
    }
}
