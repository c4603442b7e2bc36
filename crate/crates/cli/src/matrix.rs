//! Expansion of the flag lists into runs, parallel execution and the output
//! tree:
//!
//! ```text
//! <out>/<configuration>/seed-<n>/{manifest.json, curve.csv, params.json}
//! <out>/<configuration>/aggregate.csv
//! <out>/comparison.json
//! ```
//!
//! A configuration directory is named after its parameters plus a hash of
//! the full configuration, so distinct cells never collide.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dmle_core::analysis::{aggregate_curves, wilcoxon_exact};
use dmle_core::engine::{curve_csv, prepare_dataset, run_on_dataset, RunOutcome};
use dmle_core::estimation::RankMode;
use dmle_core::{
    AggregateCurve, DatasetSpec, EstimatorConfig, EstimatorKind, ExperimentConfig, SelectionConfig,
    WilcoxonResult,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::RunArgs;
use crate::error::CliError;

/// One (configuration, seed) run.
#[derive(Clone, Debug)]
pub struct Cell {
    /// Shared by the DMLE and IMLE twins of a configuration.
    pub group: String,
    pub config_dir: String,
    pub config: ExperimentConfig,
    pub seed: u64,
}

impl Cell {
    pub fn estimator(&self) -> EstimatorKind {
        self.config.estimator.estimator
    }

    pub fn dir(&self, out: &Path) -> PathBuf {
        out.join(&self.config_dir)
            .join(format!("seed-{}", self.seed))
    }

    /// Hash of everything that determines the run's output.
    pub fn fingerprint(&self) -> String {
        let body = serde_json::json!({ "config": self.config, "seed": self.seed });
        hex(&Sha256::digest(body.to_string().as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct RunMatrix {
    pub cells: Vec<Cell>,
    pub out_dir: PathBuf,
    pub workers: usize,
}

impl RunMatrix {
    pub fn from_args(args: &RunArgs, out_dir: PathBuf) -> Result<Self, CliError> {
        if args.seeds == 0 {
            return Err(CliError::Usage("--seeds must be at least 1".into()));
        }
        let workers = match args.workers {
            Some(0) => return Err(CliError::Usage("--workers must be at least 1".into())),
            Some(w) => w,
            None => std::thread::available_parallelism().map_or(1, usize::from),
        };
        let rank_mode = if args.ssrs_smooth {
            RankMode::Smooth {
                temperature: args.smooth_temperature,
            }
        } else {
            RankMode::Hard
        };
        let mut cells = Vec::new();
        for dataset in &args.dataset {
            for &acq in &args.acquisition {
                for &strategy in &args.selection {
                    for &k in &args.k {
                        for &beta in &args.beta {
                            let selection =
                                SelectionConfig::new(strategy.into(), k, beta).map_err(usage)?;
                            let group = format!(
                                "{}_{}_{}_k{k}_b{beta}",
                                slug(&dataset.to_string()),
                                acq.kind(args.bald_samples).name(),
                                selection.strategy.name()
                            );
                            for estimator in args.estimator.kinds() {
                                let est = EstimatorConfig {
                                    estimator,
                                    include_z: args.exact_z,
                                    epochs_per_cycle: args.epochs_per_cycle,
                                    warm_start: !args.cold_start,
                                    rank_mode,
                                    ..EstimatorConfig::default()
                                };
                                let mut config = ExperimentConfig::new(
                                    dataset.clone(),
                                    acq.kind(args.bald_samples),
                                    selection,
                                    est,
                                    args.cycles,
                                );
                                config.record_timing = args.record_timing;
                                config.validate().map_err(usage)?;
                                let hash = hex(&Sha256::digest(serde_json::to_vec(&config)?));
                                let config_dir =
                                    format!("{group}_{}_{}", estimator.name(), &hash[..10]);
                                for seed in args.base_seed..args.base_seed + args.seeds {
                                    cells.push(Cell {
                                        group: group.clone(),
                                        config_dir: config_dir.clone(),
                                        config: config.clone(),
                                        seed,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        let matrix = Self {
            cells,
            out_dir,
            workers,
        };
        matrix.check_pool_sizes()?;
        Ok(matrix)
    }

    /// Rejects configurations that would run out of unlabeled samples.
    fn check_pool_sizes(&self) -> Result<(), CliError> {
        let mut train_sizes: BTreeMap<String, usize> = BTreeMap::new();
        for cell in &self.cells {
            let key = serde_json::to_string(&cell.config.dataset)?;
            let available = match train_sizes.get(&key) {
                Some(&n) => n,
                None => {
                    let n = train_size(&cell.config.dataset)?;
                    train_sizes.insert(key, n);
                    n
                }
            };
            let needed = cell.config.final_labeled();
            if needed > available {
                return Err(CliError::Usage(
                    dmle_core::Error::PoolExhausted { needed, available }.to_string(),
                ));
            }
        }
        Ok(())
    }
}

fn usage(e: dmle_core::Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn train_size(spec: &DatasetSpec) -> Result<usize, CliError> {
    let data = prepare_dataset(spec, 0)?;
    Ok(data.splits().map_or(0, |s| s.train.len()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub spec: String,
    pub provenance: dmle_core::data::Provenance,
    pub dataset_seed: Option<u64>,
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub fingerprint: String,
    pub dataset: DatasetInfo,
    pub code_version: String,
    pub params: String,
    pub status: String,
    pub failure: Option<String>,
    pub final_test_acc: Option<f64>,
}

pub const MANIFEST: &str = "manifest.json";
pub const CURVE: &str = "curve.csv";
pub const PARAMS: &str = "params.json";

/// What happened to one cell.
#[derive(Clone, Debug, PartialEq)]
pub enum CellStatus {
    Completed { accuracies: Vec<f64> },
    Skipped { accuracies: Vec<f64> },
    Failed(String),
}

impl CellStatus {
    pub fn accuracies(&self) -> Option<&[f64]> {
        match self {
            CellStatus::Completed { accuracies } | CellStatus::Skipped { accuracies } => {
                Some(accuracies)
            }
            CellStatus::Failed(_) => None,
        }
    }
}

fn write(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn test_accuracies(curve: &str) -> Option<Vec<f64>> {
    curve
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2)?.parse().ok())
        .collect()
}

/// A completed cell whose manifest matches is left alone.
fn completed(cell: &Cell, dir: &Path) -> Option<Vec<f64>> {
    let manifest: Manifest =
        serde_json::from_slice(&std::fs::read(dir.join(MANIFEST)).ok()?).ok()?;
    if manifest.status != "ok" || manifest.fingerprint != cell.fingerprint() {
        return None;
    }
    let accuracies = test_accuracies(&std::fs::read_to_string(dir.join(CURVE)).ok()?)?;
    (accuracies.len() == cell.config.cycles + 1).then_some(accuracies)
}

pub fn run_cell(cell: &Cell, out: &Path) -> Result<CellStatus, CliError> {
    let dir = cell.dir(out);
    if let Some(accuracies) = completed(cell, &dir) {
        return Ok(CellStatus::Skipped { accuracies });
    }
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let data = prepare_dataset(&cell.config.dataset, cell.seed)?;
    let splits = data.splits().expect("prepared datasets are split");
    let dataset = DatasetInfo {
        spec: cell.config.dataset.to_string(),
        provenance: data.provenance(),
        dataset_seed: data.seed(),
        samples: data.len(),
        features: data.num_features(),
        classes: data.num_classes(),
        train: splits.train.len(),
        val: splits.val.len(),
        test: splits.test.len(),
    };
    let outcome = run_on_dataset(&cell.config, &data, cell.seed);
    let (status, failure) = match &outcome {
        Ok(RunOutcome { failure: None, .. }) => ("ok", None),
        Ok(RunOutcome {
            failure: Some(f), ..
        }) => ("failed", Some(f.clone())),
        Err(e) => ("failed", Some(e.to_string())),
    };
    if let Ok(run) = &outcome {
        write(&dir.join(CURVE), curve_csv(&run.curve).as_bytes())?;
        write(
            &dir.join(PARAMS),
            &serde_json::to_vec(&run.params.snapshot())?,
        )?;
    }
    let manifest = Manifest {
        config: cell.config.clone(),
        seed: cell.seed,
        fingerprint: cell.fingerprint(),
        dataset,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        params: PARAMS.to_string(),
        status: status.to_string(),
        failure: failure.clone(),
        final_test_acc: outcome.as_ref().ok().and_then(RunOutcome::final_accuracy),
    };
    // the manifest goes last so an interrupted cell is rerun
    write(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(match (outcome, failure) {
        (Ok(run), None) => CellStatus::Completed {
            accuracies: run.curve.iter().map(|c| c.test_acc).collect(),
        },
        (_, f) => CellStatus::Failed(f.unwrap_or_default()),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub group: String,
    pub seeds: Vec<u64>,
    pub dmle_final: Vec<f64>,
    pub imle_final: Vec<f64>,
    pub dmle_mean: f64,
    pub imle_mean: f64,
    pub w: f64,
    pub n_effective: usize,
    pub p_value: f64,
    pub exact: bool,
}

#[derive(Clone, Debug)]
pub struct MatrixOutcome {
    pub statuses: Vec<(Cell, CellStatus)>,
    pub aggregates: BTreeMap<String, AggregateCurve>,
    pub comparisons: Vec<Comparison>,
}

impl MatrixOutcome {
    pub fn failures(&self) -> usize {
        self.statuses
            .iter()
            .filter(|(_, s)| matches!(s, CellStatus::Failed(_)))
            .count()
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (dir, agg) in &self.aggregates {
            if let (Some(m), Some(s)) = (agg.mean.last(), agg.std.last()) {
                let _ = writeln!(
                    out,
                    "{dir}: final test accuracy {m:.4} ± {s:.4} over {} seeds",
                    agg.n_seeds
                );
            }
        }
        for c in &self.comparisons {
            let _ = writeln!(
                out,
                "{}: dmle {:.4} vs imle {:.4}, W = {}, p = {:.4}{}",
                c.group,
                c.dmle_mean,
                c.imle_mean,
                c.w,
                c.p_value,
                if c.exact {
                    ""
                } else {
                    " (normal approximation)"
                }
            );
        }
        for (cell, status) in &self.statuses {
            if let CellStatus::Failed(why) = status {
                let _ = writeln!(out, "FAILED {}/seed-{}: {why}", cell.config_dir, cell.seed);
            }
        }
        out
    }
}

/// Runs every cell on a pool of `workers` threads, then writes the
/// aggregates and comparisons. Results do not depend on the worker count.
pub fn execute(matrix: &RunMatrix) -> Result<MatrixOutcome, CliError> {
    std::fs::create_dir_all(&matrix.out_dir).map_err(|e| CliError::io(&matrix.out_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(matrix.workers)
        .build()?;
    let results: Vec<Result<CellStatus, CliError>> = pool.install(|| {
        matrix
            .cells
            .par_iter()
            .map(|c| run_cell(c, &matrix.out_dir))
            .collect()
    });
    let statuses = matrix
        .cells
        .iter()
        .cloned()
        .zip(results)
        .map(|(cell, r)| {
            let status = r.unwrap_or_else(|e| CellStatus::Failed(e.to_string()));
            (cell, status)
        })
        .collect::<Vec<_>>();

    let mut curves: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (cell, status) in &statuses {
        if let Some(acc) = status.accuracies() {
            curves
                .entry(cell.config_dir.clone())
                .or_default()
                .push(acc.to_vec());
        }
    }
    let mut aggregates = BTreeMap::new();
    for (dir, c) in curves {
        let agg = aggregate_curves(&c)?;
        let path = matrix.out_dir.join(&dir).join("aggregate.csv");
        write(&path, agg.to_csv().as_bytes())?;
        aggregates.insert(dir, agg);
    }

    let comparisons = compare(&statuses)?;
    write(
        &matrix.out_dir.join("comparison.json"),
        &serde_json::to_vec_pretty(&comparisons)?,
    )?;
    Ok(MatrixOutcome {
        statuses,
        aggregates,
        comparisons,
    })
}

/// Pairs DMLE and IMLE runs of each configuration on shared seeds.
fn compare(statuses: &[(Cell, CellStatus)]) -> Result<Vec<Comparison>, CliError> {
    let mut finals: BTreeMap<&str, BTreeMap<u64, [Option<f64>; 2]>> = BTreeMap::new();
    for (cell, status) in statuses {
        let Some(last) = status.accuracies().and_then(|a| a.last().copied()) else {
            continue;
        };
        let slot = usize::from(cell.estimator() == EstimatorKind::Imle);
        finals
            .entry(&cell.group)
            .or_default()
            .entry(cell.seed)
            .or_default()[slot] = Some(last);
    }
    let mut out = Vec::new();
    for (group, by_seed) in finals {
        let paired: Vec<(u64, f64, f64)> = by_seed
            .into_iter()
            .filter_map(|(seed, [d, i])| Some((seed, d?, i?)))
            .collect();
        if paired.is_empty() {
            continue;
        }
        let pairs: Vec<(f64, f64)> = paired.iter().map(|&(_, d, i)| (d, i)).collect();
        let WilcoxonResult {
            w,
            n_effective,
            p_value,
            exact,
        } = wilcoxon_exact(&pairs)?;
        let n = pairs.len() as f64;
        out.push(Comparison {
            group: group.to_string(),
            seeds: paired.iter().map(|p| p.0).collect(),
            dmle_final: pairs.iter().map(|p| p.0).collect(),
            imle_final: pairs.iter().map(|p| p.1).collect(),
            dmle_mean: pairs.iter().map(|p| p.0).sum::<f64>() / n,
            imle_mean: pairs.iter().map(|p| p.1).sum::<f64>() / n,
            w,
            n_effective,
            p_value,
            exact,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::args::{Cli, Command};
    use clap::Parser;

    fn run_args(extra: &[&str]) -> RunArgs {
        let mut argv = vec!["dmle-lab", "run"];
        argv.extend(extra);
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Run(a) => *a,
            Command::Verify(_) => unreachable!(),
        }
    }

    #[test]
    fn iris_matrix_has_sixteen_cells_in_two_configurations() {
        let m = RunMatrix::from_args(&run_args(&["--k", "10", "--cycles", "10"]), "out".into())
            .unwrap();
        assert_eq!(m.cells.len(), 16);
        let dirs: std::collections::BTreeSet<_> =
            m.cells.iter().map(|c| c.config_dir.clone()).collect();
        assert_eq!(dirs.len(), 2);
        let groups: std::collections::BTreeSet<_> =
            m.cells.iter().map(|c| c.group.clone()).collect();
        assert_eq!(groups.len(), 1);
    }

    #[test]
    fn cell_directories_are_unique() {
        let args = run_args(&[
            "--selection",
            "ssms,sps,ssrs,topk",
            "--beta",
            "1,2",
            "--k",
            "1,5",
            "--seeds",
            "2",
        ]);
        let m = RunMatrix::from_args(&args, "out".into()).unwrap();
        let dirs: std::collections::BTreeSet<_> =
            m.cells.iter().map(|c| c.dir(Path::new("out"))).collect();
        assert_eq!(dirs.len(), m.cells.len());
        assert_eq!(m.cells.len(), 4 * 2 * 2 * 2 * 2);
    }

    #[test]
    fn exhausting_the_pool_is_a_usage_error() {
        let err = RunMatrix::from_args(&run_args(&["--k", "10", "--cycles", "20"]), "out".into())
            .unwrap_err();
        assert!(matches!(err, CliError::Usage(m) if m.contains("pool exhausted")));
    }

    #[test]
    fn rerun_skips_completed_cells() {
        let dir = tempfile::tempdir().unwrap();
        let args = run_args(&[
            "--k",
            "3",
            "--cycles",
            "2",
            "--seeds",
            "2",
            "--epochs-per-cycle",
            "2",
            "--workers",
            "2",
        ]);
        let m = RunMatrix::from_args(&args, dir.path().to_path_buf()).unwrap();
        let first = execute(&m).unwrap();
        assert_eq!(first.failures(), 0);
        assert!(first
            .statuses
            .iter()
            .all(|(_, s)| matches!(s, CellStatus::Completed { .. })));
        assert_eq!(first.comparisons.len(), 1);
        let second = execute(&m).unwrap();
        assert!(second
            .statuses
            .iter()
            .all(|(_, s)| matches!(s, CellStatus::Skipped { .. })));
        assert_eq!(first.summary(), second.summary());
        for (cell, _) in &first.statuses {
            let d = cell.dir(dir.path());
            for f in [MANIFEST, CURVE, PARAMS] {
                assert!(d.join(f).is_file(), "{}", d.join(f).display());
            }
        }
    }
}
