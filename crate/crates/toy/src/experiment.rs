//! End-to-end runs of one ablation arm and paired comparisons between arms.

use std::fmt::Write as _;

use hiercomp_core::DiscreteCombination;
use serde::{Deserialize, Serialize};

use crate::denoiser::ToyDenoiser;
use crate::error::{Result, ToyError};
use crate::eval::{evaluate_composition, CombinationRate, CompositionReport};
use crate::scene::{generate_dataset, Dataset, SceneSpec, DEFAULT_GRID};
use crate::train::{train, Arm, MetricsLog, TrainConfig};

/// Everything needed to reproduce one toy run besides the arm and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub grid: usize,
    /// Training support, e.g. `["[0,1]", "[1,0]"]`.
    pub train_support: Vec<String>,
    pub n_per_combination: usize,
    pub eval_samples: usize,
    pub train: TrainConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            grid: DEFAULT_GRID,
            train_support: vec!["[0,1]".into(), "[1,0]".into()],
            n_per_combination: 64,
            eval_samples: 50,
            train: TrainConfig::default(),
        }
    }
}

impl ToyConfig {
    /// The ablation fixture: two concepts on 16×16, each seen only alone,
    /// with λ = 10⁻².
    pub fn fixture() -> Self {
        Self { train: TrainConfig { lambda: 1e-2, ..TrainConfig::default() }, ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn scene(&self) -> SceneSpec {
        SceneSpec::two_concept(self.grid)
    }

    pub fn support(&self) -> Result<Vec<DiscreteCombination>> {
        self.train_support.iter().map(|s| DiscreteCombination::parse(s).map_err(ToyError::from)).collect()
    }

    pub fn dataset(&self, seed: u64) -> Result<Dataset> {
        generate_dataset(&self.scene(), &self.support()?, self.n_per_combination, seed)
    }
}

/// Final metrics and success rates of one trained arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub seed: u64,
    pub lambda: f64,
    pub epochs: usize,
    pub final_l_d: f64,
    pub final_l_n: f64,
    pub final_mean_dice: f64,
    pub train_rates: Vec<CombinationRate>,
    pub held_out_rates: Vec<CombinationRate>,
}

impl ArmSummary {
    pub fn held_out_rate(&self, d: &str) -> Option<f64> {
        self.held_out_rates.iter().find(|r| r.d == d).map(|r| r.rate)
    }

    pub fn train_rate(&self) -> f64 {
        if self.train_rates.is_empty() {
            return 0.0;
        }
        self.train_rates.iter().map(|r| r.rate).sum::<f64>() / self.train_rates.len() as f64
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "arm {} (seed {}, lambda {}, epochs {})", self.arm, self.seed, self.lambda, self.epochs);
        let _ = writeln!(
            out,
            "final L_d {:.6}  L_n {:.6}  mean pairwise DICE {:.6}",
            self.final_l_d, self.final_l_n, self.final_mean_dice
        );
        let _ = writeln!(out, "training support:");
        out.push_str(&indent(&CompositionReport { seed: self.seed, rates: self.train_rates.clone() }.render()));
        let _ = writeln!(out, "held out:");
        out.push_str(&indent(&CompositionReport { seed: self.seed, rates: self.held_out_rates.clone() }.render()));
        out
    }
}

fn indent(text: &str) -> String {
    text.lines().map(|l| format!("  {l}\n")).collect()
}

/// A trained arm with its log and summary.
#[derive(Debug, Clone)]
pub struct ArmRun {
    pub model: ToyDenoiser,
    pub log: MetricsLog,
    pub summary: ArmSummary,
    pub dataset: Dataset,
}

/// Generates the data, trains `arm` and evaluates every combination of the
/// Cartesian product. All randomness derives from `seed`.
pub fn run_arm(config: &ToyConfig, arm: Arm, seed: u64) -> Result<ArmRun> {
    let data = config.dataset(seed)?;
    let tc = TrainConfig { seed, ..config.train.clone() }.for_arm(arm);
    let (model, log) = train(&tc, &data)?;
    let schedule = tc.schedule()?;
    let scene = &data.scene;
    let train_combos = data.train_combinations();
    let held_out = data.held_out_combinations();
    let eval_seed = seed ^ 0x5eed_e7a1;
    let train_rates =
        evaluate_composition(&model, scene, &schedule, &train_combos, config.eval_samples, eval_seed)?.rates;
    let held_out_rates =
        evaluate_composition(&model, scene, &schedule, &held_out, config.eval_samples, eval_seed.wrapping_add(1))?
            .rates;
    let last = log.final_row().copied().ok_or_else(|| ToyError::InvalidConfig("zero epochs".into()))?;
    let summary = ArmSummary {
        arm,
        seed,
        lambda: tc.effective_lambda(),
        epochs: tc.epochs,
        final_l_d: last.l_d,
        final_l_n: last.l_n,
        final_mean_dice: last.mean_dice,
        train_rates,
        held_out_rates,
    };
    Ok(ArmRun { model, log, summary, dataset: data })
}

/// Side-by-side comparison of two arms trained with the same seed.
pub fn paired_comparison(a: &ArmSummary, b: &ArmSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "paired comparison: {} vs {} (seeds {} / {})", a.arm, b.arm, a.seed, b.seed);
    let _ = writeln!(out, "  final mean pairwise DICE: {:.6} vs {:.6}", a.final_mean_dice, b.final_mean_dice);
    let _ = writeln!(out, "  final L_d: {:.6} vs {:.6}", a.final_l_d, b.final_l_d);
    let _ = writeln!(out, "  training-support success: {:.4} vs {:.4}", a.train_rate(), b.train_rate());
    for r in &a.held_out_rates {
        if let Some(other) = b.held_out_rate(&r.d) {
            let _ = writeln!(out, "  held-out {} success: {:.4} vs {:.4}", r.d, r.rate, other);
        }
    }
    out
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_defaults() {
        let c = ToyConfig::fixture();
        assert_eq!(c.train.lambda, 1e-2);
        let text = c.to_toml().unwrap();
        assert_eq!(ToyConfig::from_toml(&text).unwrap(), c);
        let partial = ToyConfig::from_toml("grid = 8\n[train]\nepochs = 2\n").unwrap();
        assert_eq!(partial.grid, 8);
        assert_eq!(partial.train.epochs, 2);
        assert_eq!(partial.train.steps, 8);
        assert!(ToyConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
