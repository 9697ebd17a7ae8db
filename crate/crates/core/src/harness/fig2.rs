//! The two-agent quantization benchmark: quantized Gradient Tracking
//! diverges at every stepsize (faster for smaller stepsizes), quantized
//! Wang-Elia stays bounded with a small steady-state error.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::{fig2_preset, GammaConfig};
use super::run::{run_experiment, ExperimentReport};
use super::HarnessError;
use crate::dynamics::AlgorithmTag;

/// The four stepsizes of the benchmark, largest first.
pub fn fig2_gammas() -> [f64; 4] {
    [1e-2, 1e-3, 1e-4, 1e-5]
}

const FIG2_THRESHOLD: f64 = 1e3;
const FIG2_RESOLUTION: f64 = 1e-5;
const FIG2_MAX_HORIZON: usize = 10_000_000;
const FIG2_STEADY_TOL: f64 = 0.01;

/// Per-stepsize horizon covering both regimes: convergence of the stable
/// algorithm needs on the order of `1/gamma` steps, while the quantization
/// bias drives the fragile one across the threshold after on the order of
/// `gamma * threshold / resolution` steps.
pub fn fig2_horizon(gamma: f64) -> usize {
    let slow = (20.0 / gamma).ceil() as usize;
    let drift = (8.0 * gamma * FIG2_THRESHOLD / FIG2_RESOLUTION).ceil() as usize;
    slow.max(drift).min(FIG2_MAX_HORIZON)
}

#[derive(Debug, Clone, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Fig2Run {
    pub algorithm: AlgorithmTag,
    pub gamma: f64,
    pub horizon: usize,
    pub diverged_at: Option<usize>,
    pub steady_consensus_error: f64,
    pub final_consensus_error: f64,
    pub trajectory_csv: Option<String>,
    #[serde(skip)]
    pub report: ExperimentReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct Fig2Report {
    pub runs: Vec<Fig2Run>,
    pub assertions: Vec<Assertion>,
}

impl Fig2Report {
    pub fn all_passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn runs_for(&self, algorithm: AlgorithmTag) -> Vec<&Fig2Run> {
        self.runs
            .iter()
            .filter(|r| r.algorithm == algorithm)
            .collect()
    }
}

fn gamma_label(gamma: f64) -> String {
    format!("{gamma:e}")
}

/// Runs the eight benchmark simulations (both algorithms at four stepsizes,
/// concurrently), checks the qualitative claims, and writes per-run CSVs and
/// a combined summary when `outdir` is given.
pub fn reproduce_fig2(outdir: Option<&Path>) -> Result<Fig2Report, HarnessError> {
    let mut cases = Vec::new();
    for algorithm in [AlgorithmTag::GradientTracking, AlgorithmTag::WangElia] {
        for gamma in fig2_gammas() {
            let mut cfg = fig2_preset();
            cfg.algorithm = algorithm;
            cfg.gamma = GammaConfig::Value(gamma);
            cfg.horizon = fig2_horizon(gamma);
            cfg.record_stride = (cfg.horizon / 2_000).max(1);
            cfg.output_dir = outdir.map(Path::to_path_buf);
            cfg.trajectory_csv = Some(format!("fig2_{algorithm}_gamma_{}.csv", gamma_label(gamma)));
            cfg.report_json = Some(format!(
                "fig2_{algorithm}_gamma_{}.json",
                gamma_label(gamma)
            ));
            cases.push(cfg);
        }
    }

    let results: Vec<Result<ExperimentReport, HarnessError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cases
            .iter()
            .map(|cfg| scope.spawn(move || run_experiment(cfg).map(|a| a.report)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("benchmark run panicked"))
            .collect()
    });

    let mut runs = Vec::with_capacity(results.len());
    for (cfg, result) in cases.iter().zip(results) {
        let report = result?;
        runs.push(Fig2Run {
            algorithm: report.algorithm,
            gamma: report.gamma,
            horizon: cfg.horizon,
            diverged_at: report.diverged_at,
            steady_consensus_error: report.steady_consensus_error,
            final_consensus_error: report.final_consensus_error,
            trajectory_csv: report.trajectory_csv.clone(),
            report,
        });
    }

    let mut assertions = Vec::new();
    let gt: Vec<&Fig2Run> = runs
        .iter()
        .filter(|r| r.algorithm == AlgorithmTag::GradientTracking)
        .collect();
    let we: Vec<&Fig2Run> = runs
        .iter()
        .filter(|r| r.algorithm == AlgorithmTag::WangElia)
        .collect();

    let all_diverged = gt.iter().all(|r| r.diverged_at.is_some());
    assertions.push(Assertion {
        name: "gt_all_diverge".into(),
        passed: all_diverged,
        detail: gt
            .iter()
            .map(|r| {
                format!(
                    "gamma={}: {}",
                    gamma_label(r.gamma),
                    r.diverged_at
                        .map(|t| format!("diverged at t={t}"))
                        .unwrap_or_else(|| "bounded".into())
                )
            })
            .collect::<Vec<_>>()
            .join("; "),
    });

    // times to threshold shrink strictly as the stepsize shrinks
    let mut ordered = all_diverged;
    for pair in gt.windows(2) {
        match (pair[0].diverged_at, pair[1].diverged_at) {
            (Some(slow), Some(fast)) => ordered &= slow > fast,
            _ => ordered = false,
        }
    }
    assertions.push(Assertion {
        name: "gt_divergence_faster_for_smaller_gamma".into(),
        passed: ordered,
        detail: gt
            .iter()
            .map(|r| {
                format!(
                    "t({})={}",
                    gamma_label(r.gamma),
                    r.diverged_at.map(|t| t.to_string()).unwrap_or("-".into())
                )
            })
            .collect::<Vec<_>>()
            .join(", "),
    });

    let we_bounded = we.iter().all(|r| r.diverged_at.is_none());
    let we_steady = we
        .iter()
        .all(|r| r.steady_consensus_error <= FIG2_STEADY_TOL);
    assertions.push(Assertion {
        name: "we_all_bounded_with_small_steady_error".into(),
        passed: we_bounded && we_steady,
        detail: we
            .iter()
            .map(|r| {
                format!(
                    "gamma={}: steady_err={:.3e}{}",
                    gamma_label(r.gamma),
                    r.steady_consensus_error,
                    if r.diverged_at.is_some() {
                        " DIVERGED"
                    } else {
                        ""
                    }
                )
            })
            .collect::<Vec<_>>()
            .join("; "),
    });

    let report = Fig2Report { runs, assertions };
    if let Some(dir) = outdir {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("fig2_summary.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
    }
    Ok(report)
}
