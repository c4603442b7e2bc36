//! Acceptance run: every criterion at its stated tolerance, one line each.
//!
//! Criteria 7 and 8 replicate published accuracy gaps. They are measured
//! and reported, but only the property criteria decide the exit status.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use clap::Parser;
use dmle_cli::args::{Cli, Command, RunArgs};
use dmle_cli::matrix::{execute, RunMatrix, CURVE};
use dmle_core::analysis::{fisher_gap_check, wilcoxon_exact, FisherSetup};
use dmle_core::selection::{select_positions, sequence_log_prob};
use dmle_core::verify::{
    beta_zero_gap, dmle_grad_error, kl_max_residual, ordered_sequences, ACQUISITIONS,
    ALL_STRATEGIES, STOCHASTIC,
};
use dmle_core::{Purpose, RngStreams, ScoreVector, SelectionConfig, Strategy};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

/// Selection weights written out directly from the strategy definitions.
fn weights(strategy: Strategy, scores: &[f64], beta: f64) -> Vec<f64> {
    match strategy {
        Strategy::TopK | Strategy::Ssms => scores.iter().map(|a| (beta * a).exp()).collect(),
        Strategy::Sps => scores.iter().map(|a| a.powf(beta)).collect(),
        Strategy::Ssrs => scores
            .iter()
            .map(|a| {
                let rank = 1 + scores.iter().filter(|b| *b > a).count();
                (rank as f64).powf(-beta)
            })
            .collect(),
    }
}

fn direct_sequence_prob(w: &[f64], seq: &[usize]) -> f64 {
    let mut remaining: f64 = w.iter().sum();
    let mut p = 1.0;
    for &i in seq {
        p *= w[i] / remaining;
        remaining -= w[i];
    }
    p
}

fn criterion_1() -> Outcome {
    let scores = [0.1, 0.4, 0.7, 1.0];
    let draws = 200_000;
    let mut worst: f64 = 0.0;
    let mut oracle_gap: f64 = 0.0;
    let mut parts = Vec::new();
    for (lane, strategy) in STOCHASTIC.into_iter().enumerate() {
        let config = SelectionConfig::new(strategy, 2, 1.0).unwrap();
        let mut rng = RngStreams::new(2024).stream(Purpose::Verification, lane);
        let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for _ in 0..draws {
            *counts
                .entry(select_positions(&config, &scores, &mut rng).unwrap())
                .or_default() += 1;
        }
        let sv = ScoreVector::from_scores(scores.to_vec());
        let w = weights(strategy, &scores, 1.0);
        let mut tv = 0.0;
        for seq in ordered_sequences(4, 2) {
            let exact = sequence_log_prob(strategy, 1.0, config.score_floor, &sv, &seq)
                .unwrap()
                .exp();
            oracle_gap = oracle_gap.max((exact - direct_sequence_prob(&w, &seq)).abs());
            tv += (exact - counts.get(&seq).copied().unwrap_or(0) as f64 / draws as f64).abs();
        }
        tv *= 0.5;
        worst = worst.max(tv);
        parts.push(format!("{}={tv:.4}", strategy.name()));
    }
    outcome(
        worst < 0.01 && oracle_gap < 1e-12,
        format!(
            "TV {} (< 0.01); exact vs direct product {oracle_gap:.1e}",
            parts.join(" ")
        ),
    )
}

fn criterion_2() -> Outcome {
    let pools: [[f64; 5]; 3] = [
        [0.1, 0.2, 0.3, 0.4, 0.5],
        [0.05, 0.9, 0.9, 1.3, 2.2],
        [1e-3, 0.5, 0.25, 0.125, 4.0],
    ];
    let mut worst: f64 = 0.0;
    for pool in &pools {
        for strategy in ALL_STRATEGIES {
            for beta in [0.5, 1.0, 3.0] {
                let sv = ScoreVector::from_scores(pool.to_vec());
                let total: f64 = ordered_sequences(5, 2)
                    .iter()
                    .map(|s| {
                        sequence_log_prob(strategy, beta, 1e-12, &sv, s)
                            .unwrap()
                            .exp()
                    })
                    .sum();
                worst = worst.max((total - 1.0).abs());
            }
        }
    }
    outcome(
        worst < 1e-10,
        format!("max |Σ P - 1| = {worst:.1e} (< 1e-10)"),
    )
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    for strategy in ALL_STRATEGIES {
        for acq in ACQUISITIONS {
            worst = worst.max(beta_zero_gap(strategy, acq, 3).unwrap());
        }
    }
    outcome(
        worst < 1e-10,
        format!("max |∇DMLE - ∇IMLE| at β=0 = {worst:.1e} (< 1e-10), 16 combinations"),
    )
}

fn criterion_4() -> Outcome {
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    for strategy in [Strategy::Ssms, Strategy::Sps] {
        let w = (0..20)
            .map(|t| dmle_grad_error(strategy, 500 + t).unwrap())
            .fold(0.0, f64::max);
        worst = worst.max(w);
        parts.push(format!("{}={w:.1e}", strategy.name()));
    }
    outcome(
        worst < 1e-4,
        format!(
            "worst relative error over 20 trials {} (< 1e-4)",
            parts.join(" ")
        ),
    )
}

fn criterion_5() -> Outcome {
    let r = fisher_gap_check(&FisherSetup::logistic_toy(0, 100_000)).unwrap();
    outcome(
        r.min_eig_i_x >= -1e-8 && r.min_eig_gap >= -1e-8,
        format!(
            "min eig I_x = {:.3e}, min eig (I_dmle - I_y) = {:.3e} (>= -1e-8), MC s.e. {:.1e}",
            r.min_eig_i_x, r.min_eig_gap, r.std_error
        ),
    )
}

fn criterion_6() -> Outcome {
    let worst = kl_max_residual(100, 6).unwrap();
    outcome(
        worst < 1e-10,
        format!("max residual over 100 models = {worst:.1e} (< 1e-10)"),
    )
}

fn run_args(args: &[&str]) -> RunArgs {
    let mut argv = vec!["dmle-lab", "run"];
    argv.extend(args);
    match Cli::try_parse_from(argv).unwrap().command {
        Command::Run(a) => *a,
        Command::Verify(_) => unreachable!(),
    }
}

fn research_row(args: &[&str], min_gap: f64) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let matrix = RunMatrix::from_args(&run_args(args), dir.path().to_path_buf()).unwrap();
    let result = execute(&matrix).unwrap();
    assert_eq!(result.failures(), 0, "{}", result.summary());
    let c = &result.comparisons[0];
    let gap = c.dmle_mean - c.imle_mean;
    let wins = c
        .dmle_final
        .iter()
        .zip(&c.imle_final)
        .filter(|(d, i)| d > i)
        .count();
    outcome(
        gap >= min_gap && c.p_value < 0.05,
        format!(
            "DMLE {:.4} vs IMLE {:.4}: gap {:+.1} points (need >= {:.0}), W = {}, p = {:.4} (need < 0.05), DMLE wins {wins}/{}",
            c.dmle_mean,
            c.imle_mean,
            100.0 * gap,
            100.0 * min_gap,
            c.w,
            c.p_value,
            c.seeds.len()
        ),
    )
}

fn criterion_7() -> Outcome {
    research_row(
        &[
            "--dataset",
            "two-arcs",
            "--acquisition",
            "entropy",
            "--selection",
            "topk",
            "--k",
            "1",
            "--cycles",
            "139",
            "--seeds",
            "8",
        ],
        0.03,
    )
}

fn criterion_8() -> Outcome {
    research_row(
        &[
            "--dataset",
            "iris",
            "--acquisition",
            "entropy",
            "--selection",
            "ssms",
            "--k",
            "10",
            "--cycles",
            "10",
            "--seeds",
            "8",
        ],
        0.05,
    )
}

/// Brute-force two-sided signed-rank p-value with float mid-ranks.
fn brute_wilcoxon(diffs: &[f64]) -> (f64, f64) {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return (0.0, 1.0);
    }
    let ranks: Vec<f64> = nz
        .iter()
        .map(|d| {
            let below = nz.iter().filter(|e| e.abs() < d.abs()).count() as f64;
            let tied = nz.iter().filter(|e| e.abs() == d.abs()).count() as f64;
            below + (tied + 1.0) / 2.0
        })
        .collect();
    let w: f64 = nz
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..1 << n {
        let s: f64 = (0..n)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| ranks[i])
            .sum();
        le += u64::from(s <= w);
        ge += u64::from(s >= w);
    }
    (w, ((2 * le.min(ge)) as f64 / (1u64 << n) as f64).min(1.0))
}

fn criterion_9() -> Outcome {
    let mut checked = 0;
    let mut mismatches = 0;
    let mut compare = |diffs: Vec<f64>| {
        let pairs: Vec<(f64, f64)> = diffs.iter().map(|&d| (d, 0.0)).collect();
        let r = wilcoxon_exact(&pairs).unwrap();
        let (w, p) = brute_wilcoxon(&diffs);
        checked += 1;
        if r.p_value != p || r.w != w {
            mismatches += 1;
        }
    };
    for n in 1..=8usize {
        for mask in 0u32..1 << n {
            compare(
                (0..n)
                    .map(|i| {
                        if mask >> i & 1 == 1 {
                            (i + 1) as f64
                        } else {
                            -((i + 1) as f64)
                        }
                    })
                    .collect(),
            );
        }
    }
    // tied magnitudes and zero differences
    for n in 1..=6usize {
        for code in 0..7usize.pow(n as u32) {
            let mut c = code;
            let diffs = (0..n)
                .map(|_| {
                    let v = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0][c % 7];
                    c /= 7;
                    v
                })
                .collect();
            compare(diffs);
        }
    }
    outcome(
        mismatches == 0,
        format!("{checked} inputs, {mismatches} mismatches against brute force"),
    )
}

fn read_curves(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for config in std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
    {
        for seed in std::fs::read_dir(&config)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_dir())
        {
            let key = seed.strip_prefix(dir).unwrap().display().to_string();
            out.insert(key, std::fs::read(seed.join(CURVE)).unwrap());
        }
    }
    out
}

fn criterion_10() -> Outcome {
    let base = [
        "--dataset",
        "iris,two-arcs",
        "--acquisition",
        "entropy,bald,coreset",
        "--selection",
        "ssms,ssrs",
        "--k",
        "4",
        "--cycles",
        "5",
        "--seeds",
        "2",
        "--epochs-per-cycle",
        "10",
    ];
    let mut curves = Vec::new();
    for workers in ["1", "8"] {
        let dir = tempfile::tempdir().unwrap();
        let mut args = base.to_vec();
        args.extend(["--workers", workers]);
        let matrix = RunMatrix::from_args(&run_args(&args), dir.path().to_path_buf()).unwrap();
        assert_eq!(execute(&matrix).unwrap().failures(), 0);
        curves.push(read_curves(dir.path()));
    }
    let same = curves[0] == curves[1];
    outcome(
        same && curves[0].len() == 48,
        format!(
            "{} curve.csv files, identical under 1 and 8 workers: {same}",
            curves[0].len()
        ),
    )
}

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "--dataset",
        "mnist",
        "--acquisition",
        "entropy",
        "--selection",
        "ssms",
        "--estimator",
        "dmle",
        "--k",
        "1",
        "--cycles",
        "100",
        "--seeds",
        "1",
        "--exact-z",
    ];
    let matrix = RunMatrix::from_args(&run_args(&args), dir.path().to_path_buf()).unwrap();
    assert_eq!(execute(&matrix).unwrap().failures(), 0);
    let curve = std::fs::read_to_string(matrix.cells[0].dir(dir.path()).join(CURVE)).unwrap();
    let trace: Vec<Option<f64>> = curve
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(5).and_then(|v| v.parse().ok()))
        .collect();
    let finite: Vec<f64> = trace[1..]
        .iter()
        .flatten()
        .copied()
        .filter(|v| v.is_finite())
        .collect();
    let ok = trace.len() == 101 && finite.len() == 100;
    // Σ ln Z grows with the number of records; the per-record mean shows how
    // much a single normalizer moves over the run
    let detail = if ok {
        format!(
            "100 finite Σ ln Z values, {:.3} after cycle 1 to {:.3} after cycle 100 (mean per record {:.3} -> {:.3})",
            finite[0],
            finite[99],
            finite[0],
            finite[99] / 100.0
        )
    } else {
        format!("{} of 100 cycles have a finite Σ ln Z", finite.len())
    };
    outcome(ok, detail)
}

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Duration,
    research: bool,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "Gumbel top-k sequence frequencies",
            limit: Duration::from_secs(30),
            research: false,
            run: criterion_1,
        },
        Criterion {
            id: 2,
            name: "sequence probability normalization",
            limit: Duration::from_secs(1),
            research: false,
            run: criterion_2,
        },
        Criterion {
            id: 3,
            name: "β=0 reduction to IMLE",
            limit: Duration::from_secs(10),
            research: false,
            run: criterion_3,
        },
        Criterion {
            id: 4,
            name: "DMLE gradient check",
            limit: Duration::from_secs(30),
            research: false,
            run: criterion_4,
        },
        Criterion {
            id: 5,
            name: "selection Fisher block is PSD",
            limit: Duration::from_secs(60),
            research: false,
            run: criterion_5,
        },
        Criterion {
            id: 6,
            name: "KL decomposition identity",
            limit: Duration::from_secs(5),
            research: false,
            run: criterion_6,
        },
        Criterion {
            id: 7,
            name: "two-arcs DMLE vs IMLE replication",
            limit: Duration::from_secs(20 * 60),
            research: true,
            run: criterion_7,
        },
        Criterion {
            id: 8,
            name: "Iris SSMS k=10 replication",
            limit: Duration::from_secs(10 * 60),
            research: true,
            run: criterion_8,
        },
        Criterion {
            id: 9,
            name: "exact Wilcoxon vs enumeration",
            limit: Duration::from_secs(10),
            research: false,
            run: criterion_9,
        },
        Criterion {
            id: 10,
            name: "worker-count determinism",
            limit: Duration::from_secs(5 * 60),
            research: false,
            run: criterion_10,
        },
        Criterion {
            id: 11,
            name: "log-Z diagnostic trace on MNIST",
            limit: Duration::from_secs(30 * 60),
            research: false,
            run: criterion_11,
        },
    ];
    let mut floor_failed = 0;
    let mut research_failed = 0;
    for c in &criteria {
        let started = Instant::now();
        let o = (c.run)();
        let elapsed = started.elapsed();
        let passed = o.passed && elapsed <= c.limit;
        println!(
            "criterion {:>2} {} {}: {} [{:.1}s, limit {}s]",
            c.id,
            if passed { "PASS" } else { "FAIL" },
            c.name,
            o.detail,
            elapsed.as_secs_f64(),
            c.limit.as_secs()
        );
        match (passed, c.research) {
            (true, _) => {}
            (false, true) => research_failed += 1,
            (false, false) => floor_failed += 1,
        }
    }
    println!(
        "property criteria: {} failed; replication criteria (7, 8): {} failed, reported without failing the run",
        floor_failed, research_failed
    );
    if floor_failed > 0 {
        std::process::exit(1);
    }
}
