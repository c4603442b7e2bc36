//! Command-line surface of `dmle-lab`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dmle_core::verify::Suite;
use dmle_core::{AcquisitionKind, DatasetSpec, EstimatorKind, Strategy};

/// Environment variable that overrides `--out-dir`.
pub const OUT_ENV: &str = "DMLE_LAB_OUT";

#[derive(Debug, Parser)]
#[command(
    name = "dmle-lab",
    version,
    about = "Active learning with dependency-aware maximum likelihood"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment matrix and write curves, aggregates and comparisons.
    Run(Box<RunArgs>),
    /// Run the property suites and print measured values.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AcquisitionArg {
    Entropy,
    Bald,
    #[value(name = "least_confidence", alias = "least-confidence")]
    LeastConfidence,
    Coreset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Topk,
    Ssms,
    Sps,
    Ssrs,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Topk => Strategy::TopK,
            StrategyArg::Ssms => Strategy::Ssms,
            StrategyArg::Sps => Strategy::Sps,
            StrategyArg::Ssrs => Strategy::Ssrs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    Imle,
    Dmle,
    Both,
}

impl EstimatorArg {
    pub fn kinds(self) -> Vec<EstimatorKind> {
        match self {
            EstimatorArg::Imle => vec![EstimatorKind::Imle],
            EstimatorArg::Dmle => vec![EstimatorKind::Dmle],
            EstimatorArg::Both => vec![EstimatorKind::Dmle, EstimatorKind::Imle],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Gumbel,
    Gradients,
    Theorems,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Gumbel => Suite::Gumbel,
            SuiteArg::Gradients => Suite::Gradients,
            SuiteArg::Theorems => Suite::Theorems,
            SuiteArg::All => Suite::All,
        }
    }
}

fn parse_dataset(s: &str) -> Result<DatasetSpec, String> {
    DatasetSpec::parse(s).map_err(|e| e.to_string())
}

/// List-valued flags take comma-separated values; the matrix is their
/// cartesian product.
#[derive(Clone, Debug, Args)]
pub struct RunArgs {
    /// Flat `key=value` or JSON file mirroring these flags. Flags given on
    /// the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "iris", value_parser = parse_dataset)]
    pub dataset: Vec<DatasetSpec>,
    #[arg(long, value_delimiter = ',', default_value = "entropy")]
    pub acquisition: Vec<AcquisitionArg>,
    #[arg(long, value_delimiter = ',', default_value = "ssms")]
    pub selection: Vec<StrategyArg>,
    #[arg(long, value_enum, default_value = "both")]
    pub estimator: EstimatorArg,
    /// Batch size per cycle.
    #[arg(long, value_delimiter = ',', default_value = "10")]
    pub k: Vec<usize>,
    /// Selection coldness.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub beta: Vec<f64>,
    /// Acquisition cycles after the initial random pick.
    #[arg(long, default_value_t = 10)]
    pub cycles: usize,
    /// Number of seeds, counted up from `--base-seed`.
    #[arg(long, default_value_t = 8)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub base_seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs_per_cycle: usize,
    /// Keep the normalizers in the dependency term.
    #[arg(long)]
    pub exact_z: bool,
    /// Use sigmoid-smoothed ranks in the soft-rank dependency term.
    #[arg(long)]
    pub ssrs_smooth: bool,
    #[arg(long, default_value_t = 0.1)]
    pub smooth_temperature: f64,
    #[arg(long, default_value_t = AcquisitionKind::DEFAULT_BALD_SAMPLES)]
    pub bald_samples: usize,
    /// Reinitialize the model before every cycle instead of warm-starting.
    #[arg(long)]
    pub cold_start: bool,
    /// Fill the wall-clock columns of `curve.csv` (makes curves
    /// run-dependent).
    #[arg(long)]
    pub record_timing: bool,
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
    /// Parallel runs; defaults to the available cores.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, Args)]
pub struct VerifyArgs {
    #[arg(value_enum, default_value = "all")]
    pub suite: SuiteArg,
    /// Where to write `verify-<suite>.txt`.
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
}

impl AcquisitionArg {
    pub fn kind(self, bald_samples: usize) -> AcquisitionKind {
        match self {
            AcquisitionArg::Entropy => AcquisitionKind::Entropy,
            AcquisitionArg::Bald => AcquisitionKind::Bald {
                samples: bald_samples,
            },
            AcquisitionArg::LeastConfidence => AcquisitionKind::LeastConfidence,
            AcquisitionArg::Coreset => AcquisitionKind::Coreset,
        }
    }
}

/// `$DMLE_LAB_OUT` when set and non-empty, else the flag value.
pub fn resolve_out_dir(flag: PathBuf) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => v.into(),
        _ => flag,
    }
}
