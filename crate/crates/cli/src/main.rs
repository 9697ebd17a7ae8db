//! `disopt`: simulate distributed consensus optimization and verify ISS
//! certificates from the command line.
//!
//! Exit codes: 0 on success, 1 when a run or validation fails an assertion,
//! 2 on configuration errors (including invalid flags).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use disopt_core::certify::{build_error_system, compute_certificate, CertifyError, GammaChoice};
use disopt_core::dynamics::AlgorithmTag;
use disopt_core::harness::{
    parse_config, reproduce_fig2, run_experiment, sweep, ExperimentConfig, GammaConfig,
    HarnessError, OUTPUT_DIR_ENV,
};
use disopt_core::linalg::build_dispersion_basis;
use disopt_core::network::{
    assemble_consensus_matrix, build_k_custom, build_k_metropolis, metropolis_weights, validate_k,
    Graph,
};

#[derive(Parser)]
#[command(
    name = "disopt",
    version,
    about = "Distributed consensus optimization: simulation and ISS certification"
)]
struct Cli {
    /// Output directory for CSV/JSON artifacts (default: $DISOPT_OUTDIR, then
    /// the current directory).
    #[arg(long, global = true)]
    outdir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment described by a JSON config file.
    Simulate {
        config: PathBuf,
        /// Override the stepsize (a number, or "auto").
        #[arg(long)]
        gamma: Option<String>,
        /// Override the algorithm: wang_elia or gradient_tracking.
        #[arg(long)]
        algorithm: Option<String>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        record_stride: Option<usize>,
    },
    /// Compute the ISS certificate for the configured problem and network.
    Certify {
        config: PathBuf,
        /// Override the stepsize (a number, or "auto").
        #[arg(long)]
        gamma: Option<String>,
    },
    /// Check a consensus matrix built from an edge list against every
    /// required condition, printing a pass/fail report.
    ValidateGraph {
        edgelist: PathBuf,
        /// Metropolis scale used when the edge list carries no weights.
        #[arg(long, default_value_t = 0.5)]
        scale: f64,
    },
    /// Run the two-agent quantization benchmark: both algorithms at four
    /// stepsizes, with per-run CSVs and a combined summary.
    ReproduceFig2,
    /// Run the cross product of stepsizes and uniform-noise amplitudes over
    /// a config template.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        gammas: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        amplitudes: Vec<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn parse_gamma_flag(raw: &str) -> Result<GammaConfig, HarnessError> {
    if raw == "auto" {
        return Ok(GammaConfig::Auto);
    }
    raw.parse::<f64>()
        .map(GammaConfig::Value)
        .map_err(|e| HarnessError::Semantic {
            field: "gamma".into(),
            reason: format!("expected a number or \"auto\": {e}"),
        })
}

fn parse_algorithm_flag(raw: &str) -> Result<AlgorithmTag, HarnessError> {
    match raw {
        "wang_elia" => Ok(AlgorithmTag::WangElia),
        "gradient_tracking" => Ok(AlgorithmTag::GradientTracking),
        other => Err(HarnessError::Semantic {
            field: "algorithm".into(),
            reason: format!("unknown algorithm `{other}`"),
        }),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

fn resolve_outdir(cfg_dir: Option<PathBuf>, flag: Option<PathBuf>) -> PathBuf {
    flag.or(cfg_dir)
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn dispatch(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::Simulate {
            config,
            gamma,
            algorithm,
            horizon,
            seed,
            record_stride,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(raw) = gamma {
                cfg.gamma = parse_gamma_flag(&raw)?;
            }
            if let Some(raw) = algorithm {
                cfg.algorithm = parse_algorithm_flag(&raw)?;
            }
            if let Some(h) = horizon {
                cfg.horizon = h;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = record_stride {
                cfg.record_stride = r;
            }
            cfg.output_dir = Some(resolve_outdir(cfg.output_dir.take(), cli.outdir));
            cfg.validate()?;
            let artifacts = run_experiment(&cfg)?;
            let r = &artifacts.report;
            println!(
                "{} gamma={:e} steps={} {}",
                r.algorithm,
                r.gamma,
                r.steps_run,
                match r.diverged_at {
                    Some(t) => format!("DIVERGED at t={t}"),
                    None => format!(
                        "final consensus error {:.3e}{}",
                        r.final_consensus_error,
                        if r.converged { " (converged)" } else { "" }
                    ),
                }
            );
            if let Some(slack) = r.min_iss_slack {
                println!(
                    "ISS bound: min slack {slack:.6e} at t={} ({})",
                    r.min_iss_slack_t.unwrap_or(0),
                    if r.iss_bound_holds == Some(true) {
                        "holds"
                    } else {
                        "VIOLATED"
                    }
                );
            }
            if let Some(csv) = &r.trajectory_csv {
                println!("trajectory: {csv}");
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Certify { config, gamma } => {
            let mut cfg = load_config(&config)?;
            if let Some(raw) = gamma {
                cfg.gamma = parse_gamma_flag(&raw)?;
            }
            if cfg.algorithm != AlgorithmTag::WangElia {
                return Err(HarnessError::Semantic {
                    field: "algorithm".into(),
                    reason: "certificates exist for wang_elia only".into(),
                });
            }
            let problem = cfg.problem.build()?;
            let (graph, edge_weights) = cfg.graph.build()?;
            let k = match &edge_weights {
                Some(w) => build_k_custom(&graph, w)?,
                None => build_k_metropolis(&graph, cfg.k_scale)?,
            };
            let basis = build_dispersion_basis(graph.n())?;
            let es = build_error_system(&k, &basis)?;
            let choice = match cfg.gamma {
                GammaConfig::Auto => GammaChoice::Auto,
                GammaConfig::Value(v) => GammaChoice::Value(v),
            };
            match compute_certificate(&problem, &es, choice) {
                Ok(cert) => {
                    println!("{}", serde_json::to_string_pretty(&cert)?);
                    Ok(ExitCode::SUCCESS)
                }
                Err(CertifyError::GammaOutOfRange { gamma, gamma_star }) => {
                    Err(HarnessError::Semantic {
                        field: "gamma".into(),
                        reason: format!(
                            "{gamma} is not certifiable; admissible interval is (0, {gamma_star})"
                        ),
                    })
                }
                Err(e) => Err(e.into()),
            }
        }

        Command::ValidateGraph { edgelist, scale } => {
            if !(scale > 0.0 && scale <= 1.0) {
                return Err(HarnessError::Semantic {
                    field: "scale".into(),
                    reason: format!("must lie in (0, 1], got {scale}"),
                });
            }
            let text = std::fs::read_to_string(&edgelist)?;
            let (graph, weights) = Graph::parse_edge_list(&text)?;
            let weights = weights.unwrap_or_else(|| metropolis_weights(&graph, scale));
            let matrix = assemble_consensus_matrix(graph.n(), &weights);
            let report = validate_k(&matrix, &graph);
            println!("{}", serde_json::to_string_pretty(&report)?);
            if report.all_passed() {
                println!("all conditions hold");
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("validation failed");
                Ok(ExitCode::from(1))
            }
        }

        Command::ReproduceFig2 => {
            let outdir = resolve_outdir(None, cli.outdir);
            let report = reproduce_fig2(Some(&outdir))?;
            for run in &report.runs {
                println!(
                    "{} gamma={:e} horizon={}: {}",
                    run.algorithm,
                    run.gamma,
                    run.horizon,
                    match run.diverged_at {
                        Some(t) => format!("diverged at t={t}"),
                        None =>
                            format!("steady consensus error {:.3e}", run.steady_consensus_error),
                    }
                );
            }
            let mut ok = true;
            for a in &report.assertions {
                println!(
                    "[{}] {}: {}",
                    if a.passed { "PASS" } else { "FAIL" },
                    a.name,
                    a.detail
                );
                ok &= a.passed;
            }
            println!("summary: {}", outdir.join("fig2_summary.json").display());
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }

        Command::Sweep {
            config,
            gammas,
            amplitudes,
        } => {
            let mut cfg = load_config(&config)?;
            cfg.output_dir = Some(resolve_outdir(cfg.output_dir.take(), cli.outdir));
            let report = sweep(&cfg, &gammas, &amplitudes)?;
            println!("gamma,amplitude,final_distance,empirical_rate,certified_rate,diverged_at");
            for cell in &report.cells {
                println!(
                    "{:e},{:e},{},{},{},{}",
                    cell.gamma,
                    cell.amplitude,
                    cell.report
                        .final_distance
                        .map(|d| format!("{d:e}"))
                        .unwrap_or_default(),
                    cell.report
                        .empirical_rate
                        .map(|r| format!("{r}"))
                        .unwrap_or_default(),
                    cell.report
                        .certified_rate
                        .map(|r| format!("{r}"))
                        .unwrap_or_default(),
                    cell.report
                        .diverged_at
                        .map(|t| t.to_string())
                        .unwrap_or_default()
                );
            }
            if let Some(dir) = &cfg.output_dir {
                let path = dir.join("sweep_summary.json");
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                println!("summary: {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
