//! Experiment execution: build, roll out, score, persist.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Serialize;

use super::config::{ExperimentConfig, GammaConfig, InitialConfig, OUTPUT_DIR_ENV};
use super::csvio;
use super::HarnessError;
use crate::certify::{
    self, build_error_system, check_delta_v, check_iss_bound, compute_certificate, Certificate,
    CertifyError, GammaChoice,
};
use crate::dynamics::{
    rollout, AlgorithmState, AlgorithmTag, NoiseKind, PerturbationSpec, RolloutOptions,
    TrajectoryRecord, UpdateMap,
};
use crate::linalg::DispersionBasis;
use crate::network::{
    build_k_custom, build_k_metropolis, build_stochastic_pair, Graph, StochasticPair, WeightMatrixK,
};
use crate::problem::{self, build_equilibrium, OptimalEquilibrium, ProblemInstance};

/// The weight matrices of the algorithm a run uses.
#[derive(Debug, Clone)]
pub enum Weights {
    Consensus(WeightMatrixK),
    Stochastic(StochasticPair),
}

/// Everything assembled from a configuration, ready to roll out.
#[derive(Debug, Clone)]
pub struct BuiltExperiment {
    pub problem: ProblemInstance,
    pub graph: Graph,
    pub basis: DispersionBasis,
    pub weights: Weights,
    pub gamma: f64,
    /// Present for Wang-Elia runs with an admissible stepsize.
    pub certificate: Option<Certificate>,
    /// Present for Wang-Elia runs (the optimal set depends on `K` and gamma).
    pub equilibrium: Option<OptimalEquilibrium>,
}

/// Builds problem, graph, weights, stepsize, certificate and equilibrium.
///
/// For Wang-Elia, `gamma: "auto"` resolves to half the certified threshold;
/// an explicit stepsize at or above the threshold still simulates, but
/// without a certificate.
pub fn build_experiment(cfg: &ExperimentConfig) -> Result<BuiltExperiment, HarnessError> {
    let problem = cfg.problem.build()?;
    let (graph, edge_weights) = cfg.graph.build()?;
    if graph.n() != problem.n() {
        return Err(HarnessError::semantic(
            "graph",
            format!(
                "graph has {} vertices but the problem has {} costs",
                graph.n(),
                problem.n()
            ),
        ));
    }
    let basis = crate::linalg::build_dispersion_basis(graph.n())?;

    match cfg.algorithm {
        AlgorithmTag::WangElia => {
            let k = match &edge_weights {
                Some(w) => build_k_custom(&graph, w)?,
                None => build_k_metropolis(&graph, cfg.k_scale)?,
            };
            let es = build_error_system(&k, &basis)?;
            let (gamma, certificate) = match cfg.gamma {
                GammaConfig::Auto => {
                    let cert = compute_certificate(&problem, &es, GammaChoice::Auto)?;
                    (cert.gamma, Some(cert))
                }
                GammaConfig::Value(v) => {
                    match compute_certificate(&problem, &es, GammaChoice::Value(v)) {
                        Ok(cert) => (v, Some(cert)),
                        Err(CertifyError::GammaOutOfRange { .. }) => (v, None),
                        Err(e) => return Err(e.into()),
                    }
                }
            };
            let equilibrium = Some(build_equilibrium(&problem, &k, &basis, gamma)?);
            Ok(BuiltExperiment {
                problem,
                graph,
                basis,
                weights: Weights::Consensus(k),
                gamma,
                certificate,
                equilibrium,
            })
        }
        AlgorithmTag::GradientTracking => {
            let GammaConfig::Value(gamma) = cfg.gamma else {
                return Err(HarnessError::semantic(
                    "gamma",
                    "\"auto\" needs a certificate, which only wang_elia has",
                ));
            };
            let rc = build_stochastic_pair(&graph, cfg.self_weight)?;
            Ok(BuiltExperiment {
                problem,
                graph,
                basis,
                weights: Weights::Stochastic(rc),
                gamma,
                certificate: None,
                equilibrium: None,
            })
        }
    }
}

/// Per-sample derived series aligned with the trajectory samples; `NaN`
/// where no equilibrium or certificate applies.
#[derive(Debug, Clone)]
pub struct DerivedSeries {
    pub dist: Vec<f64>,
    pub v: Vec<f64>,
    pub iss_bound: Vec<f64>,
    pub slack: Vec<f64>,
}

impl DerivedSeries {
    pub fn nan(len: usize) -> Self {
        DerivedSeries {
            dist: vec![f64::NAN; len],
            v: vec![f64::NAN; len],
            iss_bound: vec![f64::NAN; len],
            slack: vec![f64::NAN; len],
        }
    }
}

/// Summary of one run; every statistic is recomputable from the exported
/// trajectory CSV (together with `theta_star` echoed here).
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub algorithm: AlgorithmTag,
    pub gamma: f64,
    pub n: usize,
    pub horizon: usize,
    pub record_stride: usize,
    pub seed: u64,
    pub theta_star: f64,
    pub divergence_threshold: f64,
    /// Final time index reached (the divergence time if the run diverged).
    pub steps_run: usize,
    pub diverged_at: Option<usize>,
    /// Alias of `diverged_at` in the role of first threshold crossing.
    pub time_to_threshold: Option<usize>,
    pub converged: bool,
    pub final_state_norm: f64,
    /// `max_i |x_i - theta*|` at the final sample.
    pub final_consensus_error: f64,
    /// `max_i |x_i - theta*|` maximized over the last tenth of the samples.
    pub steady_consensus_error: f64,
    pub final_distance: Option<f64>,
    pub min_iss_slack: Option<f64>,
    pub min_iss_slack_t: Option<usize>,
    pub iss_bound_holds: Option<bool>,
    pub max_delta_v_scaled_residual: Option<f64>,
    pub integral_average_bounded: bool,
    pub integral_max_abs: f64,
    pub integral_threshold: f64,
    /// Log-linear fit of the distance decay, when an equilibrium exists.
    pub empirical_rate: Option<f64>,
    /// The certified decay rate `mu`, when a certificate exists.
    pub certified_rate: Option<f64>,
    pub certificate: Option<Certificate>,
    pub trajectory_csv: Option<String>,
}

/// A finished run: report, raw trajectory, and derived per-sample series.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: ExperimentReport,
    pub trajectory: TrajectoryRecord,
    pub derived: DerivedSeries,
    pub built: BuiltExperiment,
}

fn initial_state(cfg: &ExperimentConfig, n: usize) -> AlgorithmState {
    match &cfg.initial {
        InitialConfig::Named(_) => AlgorithmState::zeros(n),
        InitialConfig::Explicit { x, z } => AlgorithmState::new(
            DVector::from_vec(x.clone()),
            DVector::from_vec(z.clone()),
            0,
        ),
    }
}

/// Least-squares slope of `ln(d)` against `t`, returned as a per-step decay
/// factor `exp(slope)`. Points at or below the relative floor are skipped.
fn fit_exponential_rate(points: &[(usize, f64)]) -> Option<f64> {
    let d0 = points.first()?.1;
    if !(d0 > 0.0) {
        return None;
    }
    let floor = d0 * 1e-13;
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, d)| d.is_finite() && *d > floor)
        .map(|&(t, d)| (t as f64, d.ln()))
        .collect();
    if usable.len() < 2 {
        return None;
    }
    let m = usable.len() as f64;
    let mean_t = usable.iter().map(|(t, _)| t).sum::<f64>() / m;
    let mean_y = usable.iter().map(|(_, y)| y).sum::<f64>() / m;
    let cov: f64 = usable
        .iter()
        .map(|(t, y)| (t - mean_t) * (y - mean_y))
        .sum();
    let var: f64 = usable
        .iter()
        .map(|(t, _)| (t - mean_t) * (t - mean_t))
        .sum();
    if var == 0.0 {
        return None;
    }
    Some((cov / var).exp())
}

fn resolve_output_dir(cfg: &ExperimentConfig) -> Option<PathBuf> {
    cfg.output_dir
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
}

/// Runs one experiment end to end: build, roll out, score against the
/// certificate where one exists, and persist the trajectory CSV and report
/// JSON when an output directory is configured (field or environment).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts, HarnessError> {
    cfg.validate()?;
    let built = build_experiment(cfg)?;
    let n = built.problem.n();
    let initial = initial_state(cfg, n);
    let opts = RolloutOptions {
        horizon: cfg.horizon,
        divergence_threshold: cfg.divergence_threshold,
        record_stride: cfg.record_stride,
    };
    let map = match &built.weights {
        Weights::Consensus(k) => UpdateMap::WangElia { k },
        Weights::Stochastic(rc) => UpdateMap::GradientTracking { rc },
    };
    let pert = seeded_perturbation(&cfg.perturbation, cfg.seed);
    let trajectory = rollout(&map, &built.problem, built.gamma, &initial, &pert, &opts)?;

    let mut derived = DerivedSeries::nan(trajectory.samples.len());
    let mut min_iss_slack = None;
    let mut min_iss_slack_t = None;
    let mut iss_bound_holds = None;
    let mut max_delta_v_scaled_residual = None;
    let mut empirical_rate = None;

    if let Some(eq) = &built.equilibrium {
        for (i, s) in trajectory.samples.iter().enumerate() {
            derived.dist[i] = problem::distance_to_optimal_set(&s.x, &s.z, eq, &built.basis)?;
        }
        let dist_points: Vec<(usize, f64)> = trajectory
            .samples
            .iter()
            .zip(&derived.dist)
            .map(|(s, &d)| (s.t, d))
            .collect();
        empirical_rate = fit_exponential_rate(&dist_points);

        if let Some(cert) = &built.certificate {
            let iss = check_iss_bound(&trajectory, cert, eq, &built.basis)?;
            for (i, pt) in iss.points.iter().enumerate() {
                derived.iss_bound[i] = pt.rhs;
                derived.slack[i] = pt.slack;
            }
            min_iss_slack = Some(iss.min_slack);
            min_iss_slack_t = Some(iss.min_slack_t);
            iss_bound_holds = Some(iss.holds);
            for (i, s) in trajectory.samples.iter().enumerate() {
                let coords = problem::error_coordinates(&s.x, &s.z, eq, &built.basis)?;
                derived.v[i] = certify::lyapunov_value(&coords, cert)?.v;
            }
            if trajectory.record_stride == 1 {
                let dv = check_delta_v(&trajectory, cert, eq, &built.basis)?;
                max_delta_v_scaled_residual = Some(dv.max_scaled_residual);
            }
        }
    }

    let diag = certify::integral_average_diagnostic(&trajectory, cfg.integral_bound_threshold);

    let last = trajectory.final_sample();
    let theta_star = built.problem.theta_star();
    let consensus_error =
        |x: &DVector<f64>| -> f64 { x.iter().map(|v| (v - theta_star).abs()).fold(0.0, f64::max) };
    let final_consensus_error = consensus_error(&last.x);
    let tail_from = trajectory
        .samples
        .len()
        .saturating_sub((trajectory.samples.len() / 10).max(1));
    let steady_consensus_error = trajectory.samples[tail_from..]
        .iter()
        .map(|s| consensus_error(&s.x))
        .fold(0.0, f64::max);

    let report = ExperimentReport {
        algorithm: trajectory.algorithm,
        gamma: built.gamma,
        n,
        horizon: cfg.horizon,
        record_stride: trajectory.record_stride,
        seed: cfg.seed,
        theta_star,
        divergence_threshold: cfg.divergence_threshold,
        steps_run: last.t,
        diverged_at: trajectory.diverged_at,
        time_to_threshold: trajectory.diverged_at,
        converged: trajectory.diverged_at.is_none() && final_consensus_error <= cfg.convergence_tol,
        final_state_norm: (last.x.norm_squared() + last.z.norm_squared()).sqrt(),
        final_consensus_error,
        steady_consensus_error,
        final_distance: derived.dist.last().copied().filter(|d| d.is_finite()),
        min_iss_slack,
        min_iss_slack_t,
        iss_bound_holds,
        max_delta_v_scaled_residual,
        integral_average_bounded: diag.bounded,
        integral_max_abs: diag.max_abs,
        integral_threshold: cfg.integral_bound_threshold,
        empirical_rate,
        certified_rate: built.certificate.as_ref().map(|c| c.mu),
        certificate: built.certificate.clone(),
        trajectory_csv: None,
    };

    let mut artifacts = RunArtifacts {
        report,
        trajectory,
        derived,
        built,
    };

    if let Some(dir) = resolve_output_dir(cfg) {
        fs::create_dir_all(&dir)?;
        let csv_name = cfg
            .trajectory_csv
            .clone()
            .unwrap_or_else(|| "trajectory.csv".to_string());
        let csv_path = dir.join(&csv_name);
        let mut writer = BufWriter::new(fs::File::create(&csv_path)?);
        csvio::write_trajectory_csv(&mut writer, &artifacts.trajectory, &artifacts.derived)?;
        artifacts.report.trajectory_csv = Some(csv_path.to_string_lossy().into_owned());

        let report_name = cfg
            .report_json
            .clone()
            .unwrap_or_else(|| "report.json".to_string());
        let report_path = dir.join(report_name);
        fs::write(
            &report_path,
            serde_json::to_string_pretty(&artifacts.report)?,
        )?;
    }

    Ok(artifacts)
}

fn seeded_perturbation(pert: &PerturbationSpec, seed: u64) -> PerturbationSpec {
    // The config-level seed feeds seeded perturbation kinds that carry no
    // explicit seed of their own (seed 0 means "inherit").
    match *pert {
        PerturbationSpec::Additive { wx, wz, seed: 0 } => {
            PerturbationSpec::Additive { wx, wz, seed }
        }
        PerturbationSpec::Vanishing {
            amplitude,
            decay,
            seed: 0,
        } => PerturbationSpec::Vanishing {
            amplitude,
            decay,
            seed,
        },
        other => other,
    }
}

/// Deterministic sub-seed for sweep cell `(i, j)` from a base seed.
pub fn derive_seed(base: u64, i: usize, j: usize) -> u64 {
    // splitmix64 over a packed index
    let mut s = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(1 + (i as u64) * 65_537 + j as u64));
    s ^= s >> 30;
    s = s.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    s ^= s >> 27;
    s = s.wrapping_mul(0x94D0_49BB_1331_11EB);
    s ^ (s >> 31)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub gamma: f64,
    pub amplitude: f64,
    pub report: ExperimentReport,
}

/// Cross product of stepsizes and uniform-noise amplitudes.
#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub gammas: Vec<f64>,
    pub amplitudes: Vec<f64>,
    /// Row-major over `(gamma, amplitude)`.
    pub cells: Vec<SweepCell>,
}

/// Runs the cross product of `gammas` and perturbation `amplitudes` over the
/// template config. Cells execute concurrently with independent
/// deterministic sub-seeds; an amplitude of zero reproduces the unperturbed
/// run exactly.
pub fn sweep(
    template: &ExperimentConfig,
    gammas: &[f64],
    amplitudes: &[f64],
) -> Result<SweepReport, HarnessError> {
    if gammas.is_empty() || amplitudes.is_empty() {
        return Err(HarnessError::semantic(
            "sweep",
            "gamma and amplitude lists must be non-empty",
        ));
    }
    for &g in gammas {
        if !(g > 0.0) {
            return Err(HarnessError::semantic(
                "sweep.gammas",
                format!("stepsizes must be positive, got {g}"),
            ));
        }
    }
    for &a in amplitudes {
        if !(a >= 0.0) {
            return Err(HarnessError::semantic(
                "sweep.amplitudes",
                format!("amplitudes must be nonnegative, got {a}"),
            ));
        }
    }

    let mut configs = Vec::new();
    for (i, &gamma) in gammas.iter().enumerate() {
        for (j, &amplitude) in amplitudes.iter().enumerate() {
            let mut cfg = template.clone();
            cfg.gamma = GammaConfig::Value(gamma);
            cfg.perturbation = PerturbationSpec::Additive {
                wx: NoiseKind::Uniform { amplitude },
                wz: NoiseKind::Uniform { amplitude },
                seed: derive_seed(template.seed, i, j),
            };
            if template.output_dir.is_some() {
                cfg.trajectory_csv = Some(format!("sweep_g{gamma:e}_a{amplitude:e}.csv"));
                cfg.report_json = Some(format!("sweep_g{gamma:e}_a{amplitude:e}.json"));
            }
            configs.push((gamma, amplitude, cfg));
        }
    }

    let results: Vec<Result<SweepCell, HarnessError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|(gamma, amplitude, cfg)| {
                scope.spawn(move || {
                    run_experiment(cfg).map(|artifacts| SweepCell {
                        gamma: *gamma,
                        amplitude: *amplitude,
                        report: artifacts.report,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep cell thread panicked"))
            .collect()
    });

    let mut cells = Vec::with_capacity(results.len());
    for r in results {
        cells.push(r?);
    }
    Ok(SweepReport {
        gammas: gammas.to_vec(),
        amplitudes: amplitudes.to_vec(),
        cells,
    })
}

/// Recomputes the headline summary statistics from an exported CSV, for
/// consistency checks against a report.
pub fn summarize_csv(path: &Path, report: &ExperimentReport) -> Result<CsvSummary, HarnessError> {
    let file = fs::File::open(path)?;
    let rows = csvio::read_trajectory_csv(std::io::BufReader::new(file))?;
    let last = rows.last().ok_or(HarnessError::CsvParse {
        line: 1,
        reason: "no data rows".into(),
    })?;
    let norm_sq: f64 = last.x.iter().chain(last.z.iter()).map(|v| v * v).sum();
    let final_consensus_error = last
        .x
        .iter()
        .map(|v| (v - report.theta_star).abs())
        .fold(0.0, f64::max);
    let tail_from = rows.len().saturating_sub((rows.len() / 10).max(1));
    let steady_consensus_error = rows[tail_from..]
        .iter()
        .map(|r| {
            r.x.iter()
                .map(|v| (v - report.theta_star).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    let min_slack = rows
        .iter()
        .map(|r| r.slack)
        .filter(|s| !s.is_nan())
        .fold(f64::INFINITY, f64::min);
    let crossed = norm_sq.sqrt() > report.divergence_threshold;
    Ok(CsvSummary {
        steps_run: last.t,
        final_state_norm: norm_sq.sqrt(),
        final_consensus_error,
        steady_consensus_error,
        final_distance: (!last.dist.is_nan()).then_some(last.dist),
        min_iss_slack: min_slack.is_finite().then_some(min_slack),
        time_to_threshold: crossed.then_some(last.t),
    })
}

/// Summary statistics recomputed from a trajectory CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSummary {
    pub steps_run: usize,
    pub final_state_norm: f64,
    pub final_consensus_error: f64,
    pub steady_consensus_error: f64,
    pub final_distance: Option<f64>,
    pub min_iss_slack: Option<f64>,
    pub time_to_threshold: Option<usize>,
}
