//! Gaussian forward process with linearly spaced betas, the noise-prediction
//! surrogate for the variational bound, and ancestral reverse sampling.
//!
//! Steps are indexed `0..T`: step `k` holds `x_k = √ᾱ_k x_0 + √(1−ᾱ_k) ε`
//! with `ᾱ_k = Π_{j≤k} (1 − β_j)`, so step 0 is the least noisy and step
//! `T−1` the noisiest.

use hiercomp_core::sampler::{standard_normal, NoiseSource};
use hiercomp_core::DiscreteCombination;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ToyError};
use crate::scene::Example;

pub const DEFAULT_STEPS: usize = 8;
pub const DEFAULT_BETA_START: f64 = 0.05;
pub const DEFAULT_BETA_END: f64 = 0.7;

/// How the denoiser combines its conditioning across steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    /// The global map alone at every step (no time dependence).
    GlobalOnly,
    /// Global map at the noisiest step, mean of the local maps at step 0,
    /// blended by the cosine schedule in between.
    Interpolated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(ToyError::InvalidConfig(format!("need at least 2 diffusion steps, got {steps}")));
        }
        if !(0.0 < start && start <= end && end < 1.0) {
            return Err(ToyError::InvalidConfig(format!("betas must satisfy 0 < {start} <= {end} < 1")));
        }
        let betas: Vec<f64> = (0..steps).map(|k| start + (end - start) * k as f64 / (steps - 1) as f64).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn default_for(steps: usize) -> Result<Self> {
        Self::linear(steps, DEFAULT_BETA_START, DEFAULT_BETA_END)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `x_k` from `x_0` and `ε`.
    pub fn noisy(&self, x0: &[f64], eps: &[f64], k: usize) -> Vec<f64> {
        let a = self.alpha_bars[k].sqrt();
        let s = (1.0 - self.alpha_bars[k]).sqrt();
        x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
    }

    /// `x̂_0` implied by a noise prediction at step `k`.
    pub fn predict_x0(&self, xk: &[f64], eps_hat: &[f64], k: usize) -> Vec<f64> {
        let a = self.alpha_bars[k].sqrt();
        let s = (1.0 - self.alpha_bars[k]).sqrt();
        xk.iter().zip(eps_hat).map(|(x, e)| (x - s * e) / a).collect()
    }
}

/// Anything that predicts the noise in `x_k` under conditioning `d`.
pub trait NoisePredictor: Sync {
    fn predict(&self, xk: &[f64], d: &DiscreteCombination, step: usize) -> Result<Vec<f64>>;
}

/// Uniform → standard gaussian, filling `out`.
pub(crate) fn gaussians(u: &mut [f64]) {
    for v in u.iter_mut() {
        *v = standard_normal(*v);
    }
}

/// Noise-prediction surrogate of the variational bound: the squared error
/// `‖ε̂ − ε‖²` per pixel, averaged over examples and over all `T` steps
/// (the step sum divided by `T`). Noise for example `i` comes from row `i`
/// of the seed's stream.
pub fn elbo_loss<P: NoisePredictor>(
    predictor: &P,
    batch: &[Example],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(ToyError::InvalidConfig("empty batch".into()));
    }
    let pixels = batch[0].image.len();
    if batch.iter().any(|e| e.image.len() != pixels) {
        return Err(ToyError::ShapeMismatch("images of different sizes in one batch".into()));
    }
    let steps = schedule.steps();
    let noise = NoiseSource::new(seed);
    let per_example = hiercomp_core::par::map_range(batch.len(), |i| -> Result<f64> {
        let ex = &batch[i];
        let mut eps = vec![0.0; pixels * steps];
        noise.uniforms(0, i as u64, &mut eps);
        gaussians(&mut eps);
        let mut total = 0.0;
        for k in 0..steps {
            let e = &eps[k * pixels..(k + 1) * pixels];
            let xk = schedule.noisy(&ex.image, e, k);
            let pred = predictor.predict(&xk, &ex.d, k)?;
            if pred.len() != pixels {
                return Err(ToyError::ShapeMismatch(format!(
                    "prediction has {} entries, expected {pixels}",
                    pred.len()
                )));
            }
            total += pred.iter().zip(e).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pixels as f64;
        }
        Ok(total / steps as f64)
    });
    let mut sum = 0.0;
    for v in per_example {
        sum += v?;
    }
    Ok(sum / batch.len() as f64)
}

/// Ancestral sampling: start from `x_{T−1} ~ N(0, I)` and step down with the
/// posterior `q(x_{k−1} | x_k, x̂_0)`, clipping `x̂_0` to `[−1, 1]`. Returns
/// the final `x̂_0`. `uniforms` must hold `pixels · T` values.
pub fn reverse_sample<P: NoisePredictor>(
    predictor: &P,
    schedule: &NoiseSchedule,
    d: &DiscreteCombination,
    pixels: usize,
    uniforms: &mut [f64],
) -> Result<Vec<f64>> {
    let steps = schedule.steps();
    if uniforms.len() != pixels * steps {
        return Err(ToyError::ShapeMismatch(format!("need {} uniforms, got {}", pixels * steps, uniforms.len())));
    }
    gaussians(uniforms);
    let mut x = uniforms[..pixels].to_vec();
    for k in (0..steps).rev() {
        let eps_hat = predictor.predict(&x, d, k)?;
        let mut x0 = schedule.predict_x0(&x, &eps_hat, k);
        for v in &mut x0 {
            *v = v.clamp(-1.0, 1.0);
        }
        if k == 0 {
            return Ok(x0);
        }
        let ab = schedule.alpha_bars[k];
        let ab_prev = schedule.alpha_bars[k - 1];
        let beta = schedule.betas[k];
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ck = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        let z = &uniforms[k * pixels..(k + 1) * pixels];
        x = x0.iter().zip(&x).zip(z).map(|((a, b), n)| c0 * a + ck * b + sigma * n).collect();
    }
    unreachable!("the loop returns at step 0")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_dataset, SceneSpec};

    #[test]
    fn linear_schedule_endpoints() {
        let s = NoiseSchedule::default_for(8).unwrap();
        assert_eq!(s.betas[0], 0.05);
        assert!((s.betas[7] - 0.7).abs() < 1e-15);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(4, 0.3, 0.2).is_err());
    }

    #[test]
    fn x0_round_trip() {
        let s = NoiseSchedule::default_for(8).unwrap();
        let x0 = vec![0.5, -1.0, 0.25];
        let eps = vec![0.1, -2.0, 1.3];
        let xk = s.noisy(&x0, &eps, 5);
        let back = s.predict_x0(&xk, &eps, 5);
        for (a, b) in back.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    struct Zero;
    impl NoisePredictor for Zero {
        fn predict(&self, xk: &[f64], _: &DiscreteCombination, _: usize) -> Result<Vec<f64>> {
            Ok(vec![0.0; xk.len()])
        }
    }

    #[test]
    fn zero_predictor_loss_is_unit_per_pixel() {
        let scene = SceneSpec::default();
        let ds = generate_dataset(&scene, &[DiscreteCombination::new(vec![1, 0])], 5, 0).unwrap();
        let s = NoiseSchedule::default_for(8).unwrap();
        // 5 examples × 8 steps × 256 pixels = 10240 squared gaussians.
        let loss = elbo_loss(&Zero, &ds.examples, &s, 11).unwrap();
        let n = 5.0 * 8.0 * 256.0;
        let sd = (2.0f64 / n).sqrt();
        assert!((loss - 1.0).abs() < 3.0 * sd, "loss {loss}");
    }
}
