//! The `hiercomp` command line: argument parsing, invocation resolution and
//! run bookkeeping. Every analysis command resolves its flags into an
//! [`Invocation`], executes it, prints the report and, with `--out`, writes
//! the report pair, artifacts and a [`RunManifest`].

pub mod commands;
pub mod error;
pub mod invocation;
pub mod manifest;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hiercomp_core::fixtures::{self, ScaleFixture};
use hiercomp_core::spec_format::save_model;
use hiercomp_core::stats::CiTest;
use hiercomp_core::support::DEFAULT_CELLS;
use hiercomp_toy::{Arm, ToyConfig};

pub use error::{CliError, CliResult, ExitClass};
pub use invocation::Invocation;
pub use manifest::RunManifest;

use invocation::{
    read_combinations, Candidates, Check, IdentifySettings, ModelSource, PinnedFile, RecoverSettings, RecoverSource,
};

#[derive(Debug, Parser)]
#[command(
    name = "hiercomp",
    version,
    about = "Composability, identifiability and structure analyses for hierarchical concept models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Directory for report.txt, report.json, artifacts and manifest.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TestArg {
    PartialCorrelation,
    Binned,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    /// Conditional-independence test.
    #[arg(long = "test", value_enum, default_value = "partial-correlation")]
    pub test: TestArg,
    /// Quantile bins per variable for the binned test.
    #[arg(long, default_value_t = CiTest::DEFAULT_BINS)]
    pub bins: usize,
    /// Permutations for the binned test's p-value.
    #[arg(long, default_value_t = CiTest::DEFAULT_PERMUTATIONS)]
    pub permutations: usize,
}

impl TestArgs {
    fn resolve(&self, seed: u64) -> CiTest {
        match self.test {
            TestArg::PartialCorrelation => CiTest::PartialCorrelation,
            TestArg::Binned => {
                CiTest::BinnedMutualInformation { bins: self.bins, permutations: self.permutations, seed }
            }
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a model file against the structural requirements.
    Validate {
        model: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Certify unseen discrete combinations by parent-support containment.
    Composability {
        model: PathBuf,
        /// File listing the training combinations, one per line.
        #[arg(long)]
        train: PathBuf,
        /// `cartesian` for the product of training marginals, or a file of combinations.
        #[arg(long, default_value = "cartesian")]
        candidates: String,
        /// Grid cells per dimension for sampled supports.
        #[arg(long, default_value_t = DEFAULT_CELLS)]
        grid: usize,
        /// Rows per combination for sampled supports.
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Always estimate supports by sampling, even for enumerable models.
        #[arg(long)]
        sampled: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Run identifiability condition checks.
    Identify {
        model: PathBuf,
        /// Comma-separated subset of invertibility, ci, variability.
        #[arg(long, default_value = "invertibility,ci,variability", value_delimiter = ',')]
        checks: Vec<String>,
        /// Levels to check (default: the top level for invertibility, every
        /// level with a latent child for ci and variability).
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<usize>>,
        /// Probe points for the variability check.
        #[arg(long, default_value_t = 25)]
        probes: usize,
        /// Anchor sets tried per probe.
        #[arg(long, default_value_t = 200)]
        budget: usize,
        /// Rows per combination in the variability point pool.
        #[arg(long, default_value_t = 200)]
        pool_rows: usize,
        /// Points for the Jacobian rank check.
        #[arg(long, default_value_t = 200)]
        points: usize,
        /// Total rows for the conditional-independence check.
        #[arg(long, default_value_t = 5_000)]
        ci_rows: usize,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        /// Use finite differences instead of closed-form derivatives.
        #[arg(long)]
        finite_differences: bool,
        #[command(flatten)]
        test: TestArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Recover latent edges from samples and score them against a truth.
    Recover {
        /// Model giving the variable layout; sampled from unless --batch is given.
        #[arg(long)]
        model: PathBuf,
        /// Total rows to sample, split evenly over every combination.
        #[arg(long, default_value_t = 50_000, conflicts_with = "batch")]
        n: usize,
        /// Sample exports to read instead of sampling.
        #[arg(long, num_args = 1..)]
        batch: Vec<PathBuf>,
        /// Model to score against (default: --model when sampling).
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        /// Divide alpha by the number of candidate edges.
        #[arg(long)]
        bonferroni: bool,
        /// Largest conditioning set.
        #[arg(long)]
        max_conditioning: Option<usize>,
        #[command(flatten)]
        test: TestArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Draw samples from a model and export them.
    Sample {
        model: PathBuf,
        /// Rows per combination.
        #[arg(long)]
        n: usize,
        /// File of combinations (default: every combination).
        #[arg(long)]
        combinations: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train and evaluate ablation arms of the diffusion toy.
    Toy {
        /// Toy configuration (TOML); defaults to the built-in fixture.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Arms to run: full, no-td, no-sr, no-td-no-sr. Repeatable.
        #[arg(long, required = true)]
        arm: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Repeat a recorded run from its manifest.
    Replay {
        manifest: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Print a built-in model (or the toy configuration) as TOML.
    Fixture {
        #[arg(value_enum)]
        name: FixtureName,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FixtureName {
    Layered,
    LayeredTable,
    Chain,
    Chain3,
    TwoRootSingleton,
    TwoRootJoint,
    TwoRootSingletonTable,
    TwoRootJointTable,
    LocationScale,
    ConstantVariance,
    ParentFree,
    LocationScale2d,
    Toy,
}

/// Noise scale of the linear-gaussian fixtures as printed by `fixture`.
pub const FIXTURE_NOISE: f64 = 0.5;

pub fn fixture_text(name: FixtureName) -> CliResult<String> {
    let model = match name {
        FixtureName::Layered => fixtures::layered_linear(FIXTURE_NOISE),
        FixtureName::LayeredTable => fixtures::layered_table(),
        FixtureName::Chain => fixtures::chain(FIXTURE_NOISE),
        FixtureName::Chain3 => fixtures::chain3(FIXTURE_NOISE),
        FixtureName::TwoRootSingleton => fixtures::two_root_singleton(),
        FixtureName::TwoRootJoint => fixtures::two_root_joint(),
        FixtureName::TwoRootSingletonTable => fixtures::two_root_singleton_table(),
        FixtureName::TwoRootJointTable => fixtures::two_root_joint_table(),
        FixtureName::LocationScale => fixtures::location_scale(ScaleFixture::Heteroscedastic),
        FixtureName::ConstantVariance => fixtures::location_scale(ScaleFixture::ConstantVariance),
        FixtureName::ParentFree => fixtures::location_scale(ScaleFixture::ParentFree),
        FixtureName::LocationScale2d => fixtures::location_scale_2d(),
        FixtureName::Toy => return Ok(ToyConfig::fixture().to_toml()?),
    };
    Ok(save_model(&model))
}

fn model(path: &Path) -> CliResult<ModelSource> {
    ModelSource::read(path)
}

/// Turns parsed flags into a self-contained invocation (reading every input).
/// Turns parsed arguments into a fully resolved invocation, reading every
/// input file. `fixture` has no invocation and is rejected here.
pub fn resolve(command: &Command) -> CliResult<Invocation> {
    Ok(match command {
        Command::Validate { model: m, .. } => Invocation::Validate { model: model(m)? },
        Command::Composability { model: m, train, candidates, grid, n, seed, sampled, .. } => {
            let train = read_combinations(train)?;
            if train.is_empty() {
                return Err(CliError::usage("the training support file lists no combinations"));
            }
            let candidates = if candidates == "cartesian" {
                Candidates::Cartesian
            } else {
                Candidates::Listed(read_combinations(Path::new(candidates))?)
            };
            Invocation::Composability {
                model: model(m)?,
                train,
                candidates,
                cells: *grid,
                n: *n,
                seed: *seed,
                exact: !sampled,
            }
        }
        Command::Identify {
            model: m,
            checks,
            levels,
            probes,
            budget,
            pool_rows,
            points,
            ci_rows,
            alpha,
            finite_differences,
            test,
            seed,
            ..
        } => {
            let mut parsed = checks.iter().map(|c| Check::parse(c.trim())).collect::<CliResult<Vec<_>>>()?;
            parsed.sort();
            parsed.dedup();
            if parsed.is_empty() {
                return Err(CliError::usage("no checks requested"));
            }
            Invocation::Identify {
                model: model(m)?,
                settings: IdentifySettings {
                    checks: parsed,
                    levels: levels.clone(),
                    probes: *probes,
                    budget: *budget,
                    pool_rows: *pool_rows,
                    points: *points,
                    ci_rows: *ci_rows,
                    alpha: *alpha,
                    ci_test: test.resolve(*seed),
                    finite_differences: *finite_differences,
                },
                seed: *seed,
            }
        }
        Command::Recover { model: m, n, batch, truth, alpha, bonferroni, max_conditioning, test, seed, .. } => {
            let source = if batch.is_empty() {
                RecoverSource::Sampled { n: *n }
            } else {
                RecoverSource::Batches(batch.iter().map(|p| PinnedFile::pin(p)).collect::<CliResult<Vec<_>>>()?)
            };
            if !(*alpha > 0.0 && *alpha < 1.0) {
                return Err(CliError::usage(format!("alpha must lie in (0, 1), got {alpha}")));
            }
            Invocation::Recover {
                model: model(m)?,
                truth: truth.as_deref().map(model).transpose()?,
                settings: RecoverSettings {
                    source,
                    alpha: *alpha,
                    test: test.resolve(*seed),
                    bonferroni: *bonferroni,
                    max_conditioning: *max_conditioning,
                },
                seed: *seed,
            }
        }
        Command::Sample { model: m, n, combinations, seed, .. } => Invocation::Sample {
            model: model(m)?,
            combinations: combinations.as_deref().map(read_combinations).transpose()?,
            n: *n,
            seed: *seed,
        },
        Command::Toy { config, arm, seed, .. } => {
            let config = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| CliError::usage(format!("cannot read toy config {}: {e}", p.display())))?;
                    ToyConfig::from_toml(&text).map_err(|e| CliError::from(e).context(p.display()))?
                }
                None => ToyConfig::fixture(),
            };
            let arms = arm
                .iter()
                .map(|a| a.parse::<Arm>().map_err(|e| CliError::usage(e.to_string())))
                .collect::<CliResult<Vec<_>>>()?;
            Invocation::Toy { config, arms, seed: *seed }
        }
        Command::Replay { manifest, .. } => RunManifest::read(manifest)?.config,
        Command::Fixture { .. } => return Err(CliError::usage("fixture is not an analysis command")),
    })
}

fn out_dir(command: &Command) -> Option<&Path> {
    match command {
        Command::Validate { out, .. }
        | Command::Composability { out, .. }
        | Command::Identify { out, .. }
        | Command::Recover { out, .. }
        | Command::Sample { out, .. }
        | Command::Toy { out, .. }
        | Command::Replay { out, .. } => out.out.as_deref(),
        Command::Fixture { .. } => None,
    }
}

/// Runs a resolved invocation, prints its report and writes the run
/// directory when requested. Returns the exit class of the verdict.
pub fn run_invocation(inv: &Invocation, out: Option<&Path>) -> CliResult<ExitClass> {
    let started = Instant::now();
    let outcome = commands::execute(inv)?;
    let manifest = RunManifest::new(inv, &outcome, started.elapsed().as_secs_f64());
    let report = manifest::render_report(inv, &outcome);
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(report.as_bytes())?;
    stdout.flush()?;
    if let Some(dir) = out {
        manifest::write_run(dir, inv, &outcome, &manifest)?;
    }
    Ok(outcome.class)
}

/// Entry point shared by the binary: returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Fixture { name } => fixture_text(*name).and_then(|text| {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(ExitClass::Success)
        }),
        command => resolve(command).and_then(|inv| run_invocation(&inv, out_dir(command))),
    };
    match result {
        Ok(class) => class.code(),
        Err(e) => {
            eprintln!("error: {e}");
            e.class.code()
        }
    }
}
