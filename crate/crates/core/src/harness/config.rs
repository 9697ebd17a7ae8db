//! Experiment configuration: schema, defaults, presets and validation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::dynamics::{AlgorithmTag, NoiseKind, PerturbationSpec};
use crate::network::Graph;
use crate::problem::{make_quadratic_problem_with, ProblemInstance};

/// Environment variable read for the default output directory.
pub const OUTPUT_DIR_ENV: &str = "DISOPT_OUTDIR";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CostConfig {
    Quadratic { a: f64, b: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub costs: Vec<CostConfig>,
    /// Optional declared Lipschitz constant (must not undercut the exact one).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ell: Option<f64>,
    /// Optional declared strong-convexity constant (must not overshoot).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c0: Option<f64>,
}

impl ProblemConfig {
    pub fn build(&self) -> Result<ProblemInstance, HarnessError> {
        let params: Vec<(f64, f64)> = self
            .costs
            .iter()
            .map(|c| match *c {
                CostConfig::Quadratic { a, b } => (a, b),
            })
            .collect();
        Ok(make_quadratic_problem_with(&params, self.ell, self.c0)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GraphConfig {
    Builtin { builtin: String, n: usize },
    EdgeListPath { edge_list_path: PathBuf },
    EdgeListText { edge_list: String },
}

impl GraphConfig {
    /// Builds the graph; edge-list sources may also yield explicit weights.
    #[allow(clippy::type_complexity)]
    pub fn build(
        &self,
    ) -> Result<
        (
            Graph,
            Option<std::collections::BTreeMap<(usize, usize), f64>>,
        ),
        HarnessError,
    > {
        match self {
            GraphConfig::Builtin { builtin, n } => {
                let g = match builtin.as_str() {
                    "pair" => {
                        if *n != 2 {
                            return Err(HarnessError::semantic(
                                "graph.n",
                                format!("builtin `pair` requires n=2, got {n}"),
                            ));
                        }
                        Graph::new(2, [(1, 2)])?
                    }
                    "path" => Graph::path(*n)?,
                    "cycle" => Graph::cycle(*n)?,
                    "complete" => Graph::complete(*n)?,
                    "star" => Graph::star(*n)?,
                    other => {
                        return Err(HarnessError::semantic(
                            "graph.builtin",
                            format!("unknown builtin graph `{other}`"),
                        ))
                    }
                };
                Ok((g, None))
            }
            GraphConfig::EdgeListPath { edge_list_path } => {
                let text = std::fs::read_to_string(edge_list_path)?;
                Ok(Graph::parse_edge_list(&text)?)
            }
            GraphConfig::EdgeListText { edge_list } => Ok(Graph::parse_edge_list(edge_list)?),
        }
    }
}

/// Stepsize: an explicit value or `"auto"` (half the certified threshold).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum GammaConfig {
    #[default]
    Auto,
    Value(f64),
}

impl Serialize for GammaConfig {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        match self {
            GammaConfig::Auto => ser.serialize_str("auto"),
            GammaConfig::Value(v) => ser.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for GammaConfig {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Word(String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(v) => Ok(GammaConfig::Value(v)),
            Raw::Word(w) if w == "auto" => Ok(GammaConfig::Auto),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "gamma must be a number or \"auto\", got \"{w}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialConfig {
    Named(String),
    Explicit { x: Vec<f64>, z: Vec<f64> },
}

impl Default for InitialConfig {
    fn default() -> Self {
        InitialConfig::Named("zeros".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Name of the preset this config was expanded from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub problem: ProblemConfig,
    pub graph: GraphConfig,
    pub algorithm: AlgorithmTag,
    pub gamma: GammaConfig,
    /// Metropolis scale for the consensus matrix (Wang-Elia runs).
    pub k_scale: f64,
    /// Minimum diagonal weight of the stochastic pair (Gradient Tracking).
    pub self_weight: f64,
    pub perturbation: PerturbationSpec,
    pub horizon: usize,
    pub initial: InitialConfig,
    pub seed: u64,
    pub divergence_threshold: f64,
    pub record_stride: usize,
    /// Final consensus error below which a run is reported as converged.
    pub convergence_tol: f64,
    /// Threshold for the integral-average boundedness diagnostic.
    pub integral_bound_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_csv: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_json: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<String>,
    problem: Option<ProblemConfig>,
    graph: Option<GraphConfig>,
    algorithm: Option<AlgorithmTag>,
    gamma: Option<GammaConfig>,
    k_scale: Option<f64>,
    self_weight: Option<f64>,
    perturbation: Option<PerturbationSpec>,
    horizon: Option<usize>,
    initial: Option<InitialConfig>,
    seed: Option<u64>,
    divergence_threshold: Option<f64>,
    record_stride: Option<usize>,
    convergence_tol: Option<f64>,
    integral_bound_threshold: Option<f64>,
    output_dir: Option<PathBuf>,
    trajectory_csv: Option<String>,
    report_json: Option<String>,
}

/// The two-agent quantization benchmark, as a single-run configuration.
/// `reproduce-fig2` expands it across both algorithms and four stepsizes.
pub fn fig2_preset() -> ExperimentConfig {
    ExperimentConfig {
        preset: Some("fig2".into()),
        problem: ProblemConfig {
            costs: vec![
                CostConfig::Quadratic { a: 1.0, b: 1.0 },
                CostConfig::Quadratic { a: 1.0, b: 4.0 },
            ],
            ell: None,
            c0: None,
        },
        graph: GraphConfig::Builtin {
            builtin: "pair".into(),
            n: 2,
        },
        algorithm: AlgorithmTag::WangElia,
        gamma: GammaConfig::Value(1e-4),
        k_scale: 0.4,
        self_weight: 0.8,
        perturbation: PerturbationSpec::QuantizeZ { resolution: 1e-5 },
        horizon: super::fig2::fig2_horizon(1e-4),
        initial: InitialConfig::default(),
        seed: 0,
        divergence_threshold: 1e3,
        record_stride: 50,
        convergence_tol: 0.01,
        integral_bound_threshold: 1.0,
        output_dir: None,
        trajectory_csv: None,
        report_json: None,
    }
}

fn base_for(preset: Option<&str>) -> Result<ExperimentConfig, HarnessError> {
    match preset {
        None => Ok(ExperimentConfig {
            preset: None,
            problem: ProblemConfig {
                costs: vec![],
                ell: None,
                c0: None,
            },
            graph: GraphConfig::Builtin {
                builtin: "pair".into(),
                n: 2,
            },
            algorithm: AlgorithmTag::WangElia,
            gamma: GammaConfig::Auto,
            k_scale: 0.5,
            self_weight: 0.8,
            perturbation: PerturbationSpec::None,
            horizon: 10_000,
            initial: InitialConfig::default(),
            seed: 0,
            divergence_threshold: 1e6,
            record_stride: 1,
            convergence_tol: 1e-6,
            integral_bound_threshold: 1.0,
            output_dir: None,
            trajectory_csv: None,
            report_json: None,
        }),
        Some("fig2") => Ok(fig2_preset()),
        Some(other) => Err(HarnessError::UnknownPreset(other.to_string())),
    }
}

/// Parses, expands the preset (if any), applies defaults, and validates.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let raw: RawConfig = serde_json::from_str(text)?;
    let mut cfg = base_for(raw.preset.as_deref())?;
    if raw.preset.is_none() {
        let Some(problem) = raw.problem else {
            return Err(HarnessError::semantic(
                "problem",
                "missing (no preset given)",
            ));
        };
        let Some(graph) = raw.graph else {
            return Err(HarnessError::semantic("graph", "missing (no preset given)"));
        };
        cfg.problem = problem;
        cfg.graph = graph;
    } else {
        if let Some(problem) = raw.problem {
            cfg.problem = problem;
        }
        if let Some(graph) = raw.graph {
            cfg.graph = graph;
        }
    }
    if let Some(v) = raw.algorithm {
        cfg.algorithm = v;
    }
    if let Some(v) = raw.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = raw.k_scale {
        cfg.k_scale = v;
    }
    if let Some(v) = raw.self_weight {
        cfg.self_weight = v;
    }
    if let Some(v) = raw.perturbation {
        cfg.perturbation = v;
    }
    if let Some(v) = raw.horizon {
        cfg.horizon = v;
    }
    if let Some(v) = raw.initial {
        cfg.initial = v;
    }
    if let Some(v) = raw.seed {
        cfg.seed = v;
    }
    if let Some(v) = raw.divergence_threshold {
        cfg.divergence_threshold = v;
    }
    if let Some(v) = raw.record_stride {
        cfg.record_stride = v;
    }
    if let Some(v) = raw.convergence_tol {
        cfg.convergence_tol = v;
    }
    if let Some(v) = raw.integral_bound_threshold {
        cfg.integral_bound_threshold = v;
    }
    if raw.output_dir.is_some() {
        cfg.output_dir = raw.output_dir;
    }
    if raw.trajectory_csv.is_some() {
        cfg.trajectory_csv = raw.trajectory_csv;
    }
    if raw.report_json.is_some() {
        cfg.report_json = raw.report_json;
    }
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// Semantic validation: builds the problem and graph through their own
    /// validators and checks every scalar field.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let problem = self.problem.build()?;
        let (graph, _) = self.graph.build()?;
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
        match self.gamma {
            GammaConfig::Value(v) if !(v > 0.0) => {
                return Err(HarnessError::semantic(
                    "gamma",
                    format!("must be positive, got {v}"),
                ));
            }
            GammaConfig::Auto if self.algorithm == AlgorithmTag::GradientTracking => {
                return Err(HarnessError::semantic(
                    "gamma",
                    "\"auto\" needs a certificate, which only wang_elia has",
                ));
            }
            _ => {}
        }
        if !(self.k_scale > 0.0 && self.k_scale <= 1.0) {
            return Err(HarnessError::semantic(
                "k_scale",
                format!("must lie in (0, 1], got {}", self.k_scale),
            ));
        }
        if !(self.self_weight > 0.0 && self.self_weight < 1.0) {
            return Err(HarnessError::semantic(
                "self_weight",
                format!("must lie in (0, 1), got {}", self.self_weight),
            ));
        }
        if self.horizon == 0 {
            return Err(HarnessError::semantic("horizon", "must be at least 1"));
        }
        if self.record_stride == 0 {
            return Err(HarnessError::semantic(
                "record_stride",
                "must be at least 1",
            ));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(HarnessError::semantic(
                "divergence_threshold",
                "must be positive",
            ));
        }
        if !(self.integral_bound_threshold > 0.0) {
            return Err(HarnessError::semantic(
                "integral_bound_threshold",
                "must be positive",
            ));
        }
        validate_perturbation(&self.perturbation)?;
        match &self.initial {
            InitialConfig::Named(name) if name != "zeros" => {
                return Err(HarnessError::semantic(
                    "initial",
                    format!("unknown named initial state `{name}`"),
                ));
            }
            InitialConfig::Explicit { x, z } => {
                if x.len() != problem.n() || z.len() != problem.n() {
                    return Err(HarnessError::semantic(
                        "initial",
                        format!(
                            "x/z have lengths {}/{} but the problem has {} agents",
                            x.len(),
                            z.len(),
                            problem.n()
                        ),
                    ));
                }
                if x.iter().chain(z.iter()).any(|v| !v.is_finite()) {
                    return Err(HarnessError::semantic("initial", "entries must be finite"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn validate_noise(field: &str, kind: &NoiseKind) -> Result<(), HarnessError> {
    match *kind {
        NoiseKind::Uniform { amplitude } | NoiseKind::Alternating { amplitude } => {
            if !(amplitude >= 0.0) || !amplitude.is_finite() {
                return Err(HarnessError::semantic(
                    field,
                    format!("amplitude must be nonnegative, got {amplitude}"),
                ));
            }
        }
        NoiseKind::Constant { value } => {
            if !value.is_finite() {
                return Err(HarnessError::semantic(field, "value must be finite"));
            }
        }
    }
    Ok(())
}

fn validate_perturbation(p: &PerturbationSpec) -> Result<(), HarnessError> {
    match p {
        PerturbationSpec::None => Ok(()),
        PerturbationSpec::QuantizeZ { resolution } => {
            if !(*resolution > 0.0) {
                return Err(HarnessError::semantic(
                    "perturbation.resolution",
                    format!("must be positive, got {resolution}"),
                ));
            }
            Ok(())
        }
        PerturbationSpec::Additive { wx, wz, .. } => {
            validate_noise("perturbation.wx", wx)?;
            validate_noise("perturbation.wz", wz)
        }
        PerturbationSpec::Vanishing {
            amplitude, decay, ..
        } => {
            if !(*amplitude >= 0.0) {
                return Err(HarnessError::semantic(
                    "perturbation.amplitude",
                    "must be nonnegative",
                ));
            }
            if !(*decay > 0.0 && *decay < 1.0) {
                return Err(HarnessError::semantic(
                    "perturbation.decay",
                    format!("must lie in (0, 1), got {decay}"),
                ));
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_reference_expands_to_the_full_config() {
        let cfg = parse_config(r#"{"preset": "fig2"}"#).unwrap();
        assert_eq!(cfg, fig2_preset());
        // the preset pins the two-agent benchmark exactly
        assert_eq!(
            cfg.problem.costs,
            vec![
                CostConfig::Quadratic { a: 1.0, b: 1.0 },
                CostConfig::Quadratic { a: 1.0, b: 4.0 }
            ]
        );
        assert_eq!(cfg.k_scale, 0.4);
        assert_eq!(cfg.self_weight, 0.8);
        assert_eq!(
            cfg.perturbation,
            PerturbationSpec::QuantizeZ { resolution: 1e-5 }
        );
        assert_eq!(cfg.initial, InitialConfig::Named("zeros".into()));
        assert_eq!(cfg.divergence_threshold, 1e3);
    }

    #[test]
    fn preset_fields_can_be_overridden() {
        let cfg =
            parse_config(r#"{"preset": "fig2", "gamma": 1e-5, "algorithm": "gradient_tracking"}"#)
                .unwrap();
        assert_eq!(cfg.gamma, GammaConfig::Value(1e-5));
        assert_eq!(cfg.algorithm, AlgorithmTag::GradientTracking);
        assert_eq!(cfg.k_scale, 0.4);
    }

    #[test]
    fn negative_gamma_is_a_semantic_error() {
        let err = parse_config(r#"{"preset": "fig2", "gamma": -0.1}"#).unwrap_err();
        match err {
            HarnessError::Semantic { field, .. } => assert_eq!(field, "gamma"),
            other => panic!("expected semantic error, got {other}"),
        }
    }

    #[test]
    fn unknown_algorithm_is_rejected_with_position() {
        let err = parse_config(r#"{"preset": "fig2", "algorithm": "newton"}"#).unwrap_err();
        assert!(matches!(err, HarnessError::Syntax(_)));
        assert!(err.to_string().contains("column"), "{err}");
    }

    #[test]
    fn missing_problem_without_preset_is_semantic() {
        let err = parse_config(r#"{"graph": {"builtin": "pair", "n": 2}}"#).unwrap_err();
        assert!(matches!(err, HarnessError::Semantic { .. }));
    }

    #[test]
    fn graph_and_problem_sizes_must_agree() {
        let err = parse_config(
            r#"{
                "problem": {"costs": [{"type": "quadratic", "a": 1.0, "b": 0.0}]},
                "graph": {"builtin": "pair", "n": 2}
            }"#,
        )
        .unwrap_err();
        assert!(matches!(err, HarnessError::Semantic { .. }), "{err}");
    }

    #[test]
    fn auto_gamma_for_gradient_tracking_is_rejected() {
        let err = parse_config(
            r#"{"preset": "fig2", "algorithm": "gradient_tracking", "gamma": "auto"}"#,
        )
        .unwrap_err();
        assert!(matches!(err, HarnessError::Semantic { .. }));
    }

    #[test]
    fn round_trip_is_semantically_identical() {
        let text = r#"{
            "preset": "fig2",
            "gamma": 0.001,
            "horizon": 500,
            "perturbation": {"kind": "additive",
                             "wx": {"kind": "uniform", "amplitude": 0.1},
                             "wz": {"kind": "constant", "value": -0.001},
                             "seed": 7},
            "initial": {"x": [1.0, 2.0], "z": [0.0, 0.0]},
            "seed": 3
        }"#;
        let cfg = parse_config(text).unwrap();
        let serialized = serde_json::to_string_pretty(&cfg).unwrap();
        let reparsed = parse_config(&serialized).unwrap();
        assert_eq!(cfg, reparsed);
    }

    #[test]
    fn unknown_preset_and_unknown_field_are_rejected() {
        assert!(matches!(
            parse_config(r#"{"preset": "fig3"}"#),
            Err(HarnessError::UnknownPreset(_))
        ));
        assert!(matches!(
            parse_config(r#"{"preset": "fig2", "gamme": 0.1}"#),
            Err(HarnessError::Syntax(_))
        ));
    }

    #[test]
    fn declared_constants_are_checked_against_the_exact_ones() {
        // a looser Lipschitz constant and a smaller convexity constant pass
        let cfg = parse_config(
            r#"{
                "problem": {"costs": [
                    {"type": "quadratic", "a": 1.0, "b": 1.0},
                    {"type": "quadratic", "a": 1.0, "b": 4.0}
                ], "ell": 3.0, "c0": 0.5},
                "graph": {"builtin": "pair", "n": 2},
                "gamma": 0.001
            }"#,
        )
        .unwrap();
        let p = cfg.problem.build().unwrap();
        assert_eq!(p.lipschitz_ell(), 3.0);
        assert_eq!(p.strong_convexity_c0(), 0.5);

        // an undercutting Lipschitz constant is rejected
        let err = parse_config(
            r#"{
                "problem": {"costs": [
                    {"type": "quadratic", "a": 1.0, "b": 1.0},
                    {"type": "quadratic", "a": 1.0, "b": 4.0}
                ], "ell": 1.0},
                "graph": {"builtin": "pair", "n": 2},
                "gamma": 0.001
            }"#,
        )
        .unwrap_err();
        assert!(matches!(err, HarnessError::Problem(_)), "{err}");
    }

    #[test]
    fn edge_list_text_graphs_parse() {
        let cfg = parse_config(
            r#"{
                "problem": {"costs": [
                    {"type": "quadratic", "a": 1.0, "b": 0.0},
                    {"type": "quadratic", "a": 1.0, "b": 1.0},
                    {"type": "quadratic", "a": 1.0, "b": 2.0}
                ]},
                "graph": {"edge_list": "1 2\n2 3"},
                "gamma": 0.01
            }"#,
        )
        .unwrap();
        let (g, w) = cfg.graph.build().unwrap();
        assert_eq!(g.n(), 3);
        assert!(w.is_none());
    }
}
