//! Mini-batch Adam on `L = L_d + λ·L_n`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use hiercomp_core::kernels::DEFAULT_LAMBDA;
use hiercomp_core::sampler::NoiseSource;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserShape, LayoutPrior, ToyDenoiser};
use crate::diffusion::{
    gaussians, Conditioning, NoisePredictor, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS,
};
use crate::error::{Result, ToyError};
use crate::scene::Dataset;

pub const DEFAULT_GROUNDING: f64 = 2.0;

/// Ablation arm: time-dependent conditioning (TD) and sparsity
/// regularization (SR) switched on or off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Full,
    NoTd,
    NoSr,
    NoTdNoSr,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Full, Arm::NoTd, Arm::NoSr, Arm::NoTdNoSr];

    pub fn with_td(self) -> bool {
        matches!(self, Arm::Full | Arm::NoSr)
    }

    pub fn with_sr(self) -> bool {
        matches!(self, Arm::Full | Arm::NoTd)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoTd => "no-td",
            Arm::NoSr => "no-sr",
            Arm::NoTdNoSr => "no-td-no-sr",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = ToyError;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| {
            ToyError::InvalidConfig(format!("unknown arm `{s}` (expected full, no-td, no-sr or no-td-no-sr)"))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lambda: f64,
    pub slots: usize,
    /// Initial learning rate; it follows a cosine decay over the epochs
    /// down to `learning_rate · final_lr_fraction`.
    pub learning_rate: f64,
    pub final_lr_fraction: f64,
    /// Decay of the exponential moving average of the weights; the averaged
    /// weights are the trained model and the ones `L_d` is measured on.
    /// Zero keeps the raw weights.
    pub ema_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub with_td: bool,
    pub with_sr: bool,
    /// Strength of the region-per-concept layout prior on the local
    /// attention logits; zero disables it.
    pub grounding: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            lambda: DEFAULT_LAMBDA,
            slots: 3,
            learning_rate: 3e-3,
            final_lr_fraction: 0.05,
            ema_decay: 0.995,
            epochs: 300,
            batch_size: 16,
            seed: 0,
            with_td: true,
            with_sr: true,
            grounding: DEFAULT_GROUNDING,
        }
    }
}

impl TrainConfig {
    pub fn for_arm(mut self, arm: Arm) -> Self {
        self.with_td = arm.with_td();
        self.with_sr = arm.with_sr();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ToyError::InvalidConfig(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if self.slots == 0 {
            return Err(ToyError::InvalidConfig("M must be at least 1".into()));
        }
        if !(self.grounding >= 0.0 && self.grounding.is_finite()) {
            return Err(ToyError::InvalidConfig(format!(
                "grounding must be finite and non-negative, got {}",
                self.grounding
            )));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ToyError::InvalidConfig("batch size and learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(ToyError::InvalidConfig(format!("EMA decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(ToyError::InvalidConfig(format!(
                "final learning-rate fraction must lie in [0, 1], got {}",
                self.final_lr_fraction
            )));
        }
        Ok(())
    }

    /// Learning rate for `epoch`: cosine decay from `learning_rate` at the
    /// first epoch to `learning_rate · final_lr_fraction` at the last.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let lo = self.learning_rate * self.final_lr_fraction;
        let progress = if self.epochs > 1 { epoch as f64 / (self.epochs - 1) as f64 } else { 0.0 };
        lo + 0.5 * (self.learning_rate - lo) * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }

    pub fn conditioning(&self) -> Conditioning {
        if self.with_td {
            Conditioning::Interpolated
        } else {
            Conditioning::GlobalOnly
        }
    }

    /// λ actually applied: zero when sparsity regularization is off.
    pub fn effective_lambda(&self) -> f64 {
        if self.with_sr {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// One epoch's training metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Denoising loss at the end of the epoch on the fixed evaluation draws
    /// (see [`evaluation_draws`]).
    pub l_d: f64,
    /// Mean denoising loss over the epoch's mini-batches.
    pub l_d_batch: f64,
    /// Mean sparsity loss over the epoch's mini-batches.
    pub l_n: f64,
    /// Mean DICE over unordered pairs of local maps, `L_n / (M(M−1))`.
    pub mean_dice: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn final_row(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Trailing moving averages of `L_d` over `window` epochs.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let v: Vec<f64> = self.rows.iter().map(|r| r.l_d).collect();
        if window == 0 || v.len() < window {
            return Vec::new();
        }
        v.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
    }
}

/// Adam with the usual defaults and bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Loss terms and averaged gradient of one mini-batch.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    pub l_d: f64,
    pub l_n: f64,
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Noise draw for one training example: a step and a gaussian image.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub step: usize,
    pub eps: Vec<f64>,
}

/// The draw for position `row` of epoch `epoch`.
pub fn noise_draw(seed: u64, epoch: usize, row: usize, pixels: usize, steps: usize) -> NoiseDraw {
    let mut u = vec![0.0; pixels + 1];
    NoiseSource::new(seed).uniforms(epoch as u64, row as u64, &mut u);
    let step = ((u[0] * steps as f64) as usize).min(steps - 1);
    let mut eps = u[1..].to_vec();
    gaussians(&mut eps);
    NoiseDraw { step, eps }
}

/// Fixed draws used to measure `L_d` after every epoch: example `i` is
/// noised at step `i mod T`, so all steps are covered equally, with noise
/// from stream 0 (training epochs use streams `1..`). Using the same draws
/// every epoch makes epoch-to-epoch differences reflect the model only.
pub fn evaluation_draws(seed: u64, examples: usize, pixels: usize, steps: usize) -> Vec<(usize, NoiseDraw)> {
    (0..examples)
        .map(|i| {
            let mut d = noise_draw(seed, 0, i, pixels, steps);
            d.step = i % steps;
            (i, d)
        })
        .collect()
}

/// Mean per-pixel squared noise-prediction error over `(example, draw)`
/// pairs; forward passes only.
pub fn denoising_loss(
    model: &ToyDenoiser,
    data: &Dataset,
    items: &[(usize, NoiseDraw)],
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if items.is_empty() {
        return Err(ToyError::InvalidConfig("no evaluation draws".into()));
    }
    let per = hiercomp_core::par::map_slice(items, |(i, draw)| -> Result<f64> {
        let ex = &data.examples[*i];
        let xk = schedule.noisy(&ex.image, &draw.eps, draw.step);
        let pred = model.predict(&xk, &ex.d, draw.step)?;
        Ok(pred.iter().zip(&draw.eps).map(|(p, e)| (p - e) * (p - e)).sum::<f64>() / pred.len() as f64)
    });
    let mut sum = 0.0;
    for v in per {
        sum += v?;
    }
    Ok(sum / items.len() as f64)
}

/// Mean loss and gradient over `(example index, draw)` pairs. Per-example
/// work runs in parallel; the reduction is sequential and in order.
pub fn batch_gradient(
    model: &ToyDenoiser,
    data: &Dataset,
    items: &[(usize, NoiseDraw)],
    schedule: &NoiseSchedule,
    lambda: f64,
) -> Result<BatchGrad> {
    if items.is_empty() {
        return Err(ToyError::InvalidConfig("empty mini-batch".into()));
    }
    let per = hiercomp_core::par::map_slice(items, |(i, draw)| {
        let ex = &data.examples[*i];
        let xk = schedule.noisy(&ex.image, &draw.eps, draw.step);
        model.loss_and_grad(&xk, &draw.eps, &ex.d, draw.step, lambda)
    });
    let b = items.len() as f64;
    let mut grad = vec![0.0; model.parameter_count()];
    let (mut l_d, mut l_n) = (0.0, 0.0);
    for r in per {
        let r = r?;
        l_d += r.l_d;
        l_n += r.l_n;
        for (g, v) in grad.iter_mut().zip(&r.grad) {
            *g += v;
        }
    }
    for g in &mut grad {
        *g /= b;
    }
    let (l_d, l_n) = (l_d / b, l_n / b);
    Ok(BatchGrad { l_d, l_n, loss: l_d + lambda * l_n, grad })
}

/// Trains a fresh denoiser on `data`; deterministic given `config.seed`.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<(ToyDenoiser, MetricsLog)> {
    config.validate()?;
    if data.is_empty() {
        return Err(ToyError::InvalidConfig("empty dataset".into()));
    }
    let schedule = config.schedule()?;
    let shape = DenoiserShape::new(data.scene.grid, data.scene.concepts.len(), config.slots, config.steps)
        .with_betas(config.beta_start, config.beta_end);
    let mut model = ToyDenoiser::new(shape, config.conditioning(), config.seed)?;
    if config.grounding > 0.0 {
        let regions = data.scene.concepts.iter().map(|c| c.region).collect();
        model = model.with_layout(LayoutPrior { strength: config.grounding, regions })?;
    }
    let mut adam = Adam::new(model.parameter_count(), config.learning_rate);
    let lambda = config.effective_lambda();
    let pairs = (config.slots * (config.slots - 1)).max(1) as f64;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffler = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = MetricsLog::default();
    let mut averaged = model.clone();
    let mut updates = 0usize;
    let probe = evaluation_draws(config.seed, data.len(), shape.pixels(), config.steps);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffler);
        adam.set_learning_rate(config.learning_rate_at(epoch));
        let (mut sum_d, mut sum_n) = (0.0, 0.0);
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let items: Vec<(usize, NoiseDraw)> = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    (i, noise_draw(config.seed, epoch + 1, batch * config.batch_size + j, shape.pixels(), config.steps))
                })
                .collect();
            let bg = batch_gradient(&model, data, &items, &schedule, lambda)?;
            if !bg.loss.is_finite() || bg.grad.iter().any(|g| !g.is_finite()) {
                return Err(ToyError::Diverged { epoch, batch, l_d: bg.l_d, l_n: bg.l_n });
            }
            adam.step(model.parameters_mut(), &bg.grad);
            updates += 1;
            // Warm-up keeps the average from being dominated by the
            // initialization early on.
            let decay = config.ema_decay.min((1 + updates) as f64 / (10 + updates) as f64);
            for (a, p) in averaged.parameters_mut().iter_mut().zip(model.parameters()) {
                *a = decay * *a + (1.0 - decay) * p;
            }
            sum_d += bg.l_d * chunk.len() as f64;
            sum_n += bg.l_n * chunk.len() as f64;
        }
        let n = data.len() as f64;
        let l_d = denoising_loss(&averaged, data, &probe, &schedule)?;
        log.rows.push(MetricsRow { epoch, l_d, l_d_batch: sum_d / n, l_n: sum_n / n, mean_dice: sum_n / n / pairs });
    }
    Ok((averaged, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arms_map_to_flags() {
        assert!(Arm::Full.with_td() && Arm::Full.with_sr());
        assert!(!Arm::NoTd.with_td() && Arm::NoTd.with_sr());
        assert!(Arm::NoSr.with_td() && !Arm::NoSr.with_sr());
        assert!(!Arm::NoTdNoSr.with_td() && !Arm::NoTdNoSr.with_sr());
        for a in Arm::ALL {
            assert_eq!(a.as_str().parse::<Arm>().unwrap(), a);
        }
        assert!("no-xx".parse::<Arm>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert_eq!(c.steps, 8);
        assert_eq!(c.slots, 3);
        assert_eq!(c.lambda, 1e-4);
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        let c = TrainConfig { slots: 0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { lambda: 0.5, ..TrainConfig::default() }.for_arm(Arm::NoSr);
        assert_eq!(c.effective_lambda(), 0.0);
        assert_eq!(c.conditioning(), Conditioning::Interpolated);
        assert_eq!(TrainConfig::default().for_arm(Arm::NoTd).conditioning(), Conditioning::GlobalOnly);
    }

    #[test]
    fn learning_rate_decays_between_endpoints() {
        let c = TrainConfig { epochs: 11, learning_rate: 0.2, final_lr_fraction: 0.1, ..TrainConfig::default() };
        assert!((c.learning_rate_at(0) - 0.2).abs() < 1e-15);
        assert!((c.learning_rate_at(5) - 0.11).abs() < 1e-15);
        assert!((c.learning_rate_at(10) - 0.02).abs() < 1e-15);
        assert!((0..10).all(|e| c.learning_rate_at(e + 1) < c.learning_rate_at(e)));
        assert!(TrainConfig { final_lr_fraction: 1.5, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn metrics_csv_round_trip() {
        let log = MetricsLog {
            rows: vec![
                MetricsRow { epoch: 0, l_d: 0.5, l_d_batch: 0.6, l_n: 2.0, mean_dice: 1.0 / 3.0 },
                MetricsRow { epoch: 1, l_d: 0.25, l_d_batch: 0.3, l_n: 1.5, mean_dice: 0.25 },
            ],
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("epoch,l_d,l_d_batch,l_n,mean_dice\n"));
        assert_eq!(MetricsLog::read_csv(&buf[..]).unwrap(), log);
        assert_eq!(log.moving_average(2), vec![0.375]);
    }

    #[test]
    fn noise_draws_are_addressable() {
        let a = noise_draw(3, 1, 5, 16, 8);
        let b = noise_draw(3, 1, 5, 16, 8);
        assert_eq!(a, b);
        assert_ne!(a, noise_draw(3, 2, 5, 16, 8));
        assert!(a.step < 8);
    }
}
