//! One-step update maps and deterministic trajectory rollout.
//!
//! Wang-Elia:
//! ```text
//! x+ = (I - K) x - K z - gamma Phi(x) + wx
//! z+ = z + K x + wz
//! ```
//! Gradient Tracking (canonical coordinates, requiring `1^T z0 = 0`):
//! ```text
//! x+ = R x + z - gamma Phi(x) + wx
//! z+ = C z - gamma (C - I) Phi(x) + wz
//! ```
//! Perturbations enter additively. Structured faults (floor quantization of
//! the auxiliary state) are implemented natively and also exported as the
//! equivalent additive `wz`, so every run can be scored against the ISS
//! bound.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{StochasticPair, WeightMatrixK};
use crate::problem::ProblemInstance;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("state at t={0} has non-finite entries")]
    NonFiniteState(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("stepsize gamma must be positive, got {0}")]
    NonPositiveGamma(f64),
    #[error("quantization resolution must be positive, got {0}")]
    NonPositiveResolution(f64),
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("divergence threshold must be positive, got {0}")]
    NonPositiveThreshold(f64),
    #[error("noise decay must lie in (0, 1), got {0}")]
    InvalidDecay(f64),
    #[error(transparent)]
    Problem(#[from] crate::problem::ProblemError),
}

/// Which update map produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmTag {
    WangElia,
    GradientTracking,
}

impl std::fmt::Display for AlgorithmTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AlgorithmTag::WangElia => f.write_str("wang_elia"),
            AlgorithmTag::GradientTracking => f.write_str("gradient_tracking"),
        }
    }
}

/// The stacked pair of per-agent states at a time index.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmState {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub t: usize,
}

impl AlgorithmState {
    pub fn new(x: DVector<f64>, z: DVector<f64>, t: usize) -> Self {
        AlgorithmState { x, z, t }
    }

    pub fn zeros(n: usize) -> Self {
        AlgorithmState {
            x: DVector::zeros(n),
            z: DVector::zeros(n),
            t: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().all(|v| v.is_finite()) && self.z.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of the stacked state `(x, z)`.
    pub fn norm(&self) -> f64 {
        (self.x.norm_squared() + self.z.norm_squared()).sqrt()
    }
}

/// Per-component generator for one additive noise channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    /// i.i.d. uniform on `[-amplitude, amplitude]`, one draw per component
    /// per step.
    Uniform { amplitude: f64 },
    /// The same constant in every component at every step.
    Constant { value: f64 },
    /// `+amplitude` on even steps, `-amplitude` on odd steps, all components.
    Alternating { amplitude: f64 },
}

impl NoiseKind {
    fn fill(&self, t: usize, scale: f64, rng: &mut ChaCha8Rng, out: &mut DVector<f64>) {
        match *self {
            NoiseKind::Uniform { amplitude } => {
                for v in out.iter_mut() {
                    *v = scale * rng.gen_range(-amplitude..=amplitude);
                }
            }
            NoiseKind::Constant { value } => out.fill(scale * value),
            NoiseKind::Alternating { amplitude } => {
                let sign = if t.is_multiple_of(2) { 1.0 } else { -1.0 };
                out.fill(scale * sign * amplitude);
            }
        }
    }
}

/// What disturbs a rollout. Seeded kinds are reproducible: identical seeds
/// give bit-identical perturbation sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationSpec {
    /// Exact dynamics.
    None,
    /// Floor-quantize the auxiliary state inside the update; the induced
    /// additive `wz` is recorded.
    QuantizeZ { resolution: f64 },
    /// Additive noise on both channels.
    Additive {
        wx: NoiseKind,
        wz: NoiseKind,
        seed: u64,
    },
    /// Uniform noise on both channels whose amplitude shrinks by `decay`
    /// each step.
    Vanishing {
        amplitude: f64,
        decay: f64,
        seed: u64,
    },
}

impl PerturbationSpec {
    fn validate(&self) -> Result<(), DynamicsError> {
        match *self {
            PerturbationSpec::QuantizeZ { resolution } if !(resolution > 0.0) => {
                Err(DynamicsError::NonPositiveResolution(resolution))
            }
            PerturbationSpec::Vanishing { decay, .. } if !(decay > 0.0 && decay < 1.0) => {
                Err(DynamicsError::InvalidDecay(decay))
            }
            _ => Ok(()),
        }
    }

    fn seed(&self) -> Option<u64> {
        match *self {
            PerturbationSpec::Additive { seed, .. } | PerturbationSpec::Vanishing { seed, .. } => {
                Some(seed)
            }
            _ => None,
        }
    }
}

/// Componentwise `resolution * floor(v / resolution)`.
///
/// The reciprocal scale is snapped to the nearest integer when it is one (so
/// decimal resolutions such as 1e-5 treat decimal multiples exactly), and the
/// floor bias is enforced strictly: the output never exceeds the input.
pub fn quantize(v: &DVector<f64>, resolution: f64) -> DVector<f64> {
    let mut out = v.clone();
    quantize_into(v, resolution, &mut out);
    out
}

fn quantize_scale(resolution: f64) -> f64 {
    let recip = 1.0 / resolution;
    if (recip - recip.round()).abs() <= 1e-9 * recip.abs() {
        recip.round()
    } else {
        recip
    }
}

fn quantize_into(v: &DVector<f64>, resolution: f64, out: &mut DVector<f64>) {
    let scale = quantize_scale(resolution);
    for (o, &c) in out.iter_mut().zip(v.iter()) {
        let mut q = (c * scale).floor() * resolution;
        if q > c {
            q -= resolution;
        }
        *o = q;
    }
}

/// Scratch space reused across steps so the inner loop does not allocate.
#[derive(Debug)]
struct StepBuffers {
    phi: DVector<f64>,
    a: DVector<f64>,
    b: DVector<f64>,
    c: DVector<f64>,
    q: DVector<f64>,
}

impl StepBuffers {
    fn new(n: usize) -> Self {
        StepBuffers {
            phi: DVector::zeros(n),
            a: DVector::zeros(n),
            b: DVector::zeros(n),
            c: DVector::zeros(n),
            q: DVector::zeros(n),
        }
    }
}

fn check_step_inputs(
    s: &AlgorithmState,
    n: usize,
    p: &ProblemInstance,
    gamma: f64,
    wx: &DVector<f64>,
    wz: &DVector<f64>,
) -> Result<(), DynamicsError> {
    if !s.is_finite() {
        return Err(DynamicsError::NonFiniteState(s.t));
    }
    for len in [s.x.len(), s.z.len(), p.n(), wx.len(), wz.len()] {
        if len != n {
            return Err(DynamicsError::DimensionMismatch {
                expected: n,
                got: len,
            });
        }
    }
    if !(gamma > 0.0) {
        return Err(DynamicsError::NonPositiveGamma(gamma));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn we_step_into(
    k: &WeightMatrixK,
    p: &ProblemInstance,
    gamma: f64,
    x: &DVector<f64>,
    z: &DVector<f64>,
    wx: &DVector<f64>,
    wz: &DVector<f64>,
    buf: &mut StepBuffers,
    out_x: &mut DVector<f64>,
    out_z: &mut DVector<f64>,
) {
    p.phi_into(x, &mut buf.phi);
    buf.a.gemv(1.0, k.matrix(), x, 0.0); // K x
    buf.b.gemv(1.0, k.matrix(), z, 0.0); // K z
    for i in 0..x.len() {
        out_x[i] = x[i] - buf.a[i] - buf.b[i] - gamma * buf.phi[i] + wx[i];
        out_z[i] = z[i] + buf.a[i] + wz[i];
    }
}

#[allow(clippy::too_many_arguments)]
fn gt_step_into(
    rc: &StochasticPair,
    p: &ProblemInstance,
    gamma: f64,
    x: &DVector<f64>,
    z: &DVector<f64>,
    wx: &DVector<f64>,
    wz: &DVector<f64>,
    buf: &mut StepBuffers,
    out_x: &mut DVector<f64>,
    out_z: &mut DVector<f64>,
) {
    p.phi_into(x, &mut buf.phi);
    buf.a.gemv(1.0, rc.r(), x, 0.0); // R x
    buf.b.gemv(1.0, rc.c(), z, 0.0); // C z
    buf.c.gemv(1.0, rc.c(), &buf.phi, 0.0); // C Phi(x)
    for i in 0..x.len() {
        out_x[i] = buf.a[i] + z[i] - gamma * buf.phi[i] + wx[i];
        out_z[i] = buf.b[i] - gamma * (buf.c[i] - buf.phi[i]) + wz[i];
    }
}

/// Gradient Tracking with a floor-quantized auxiliary state:
/// `z+ = C Q(z) - gamma (C - I) Phi(x)`, the estimate update unchanged.
/// Writes the induced additive perturbation `wz = C (Q(z) - z)` into `wz_out`.
#[allow(clippy::too_many_arguments)]
fn gt_quantized_step_into(
    rc: &StochasticPair,
    p: &ProblemInstance,
    gamma: f64,
    resolution: f64,
    x: &DVector<f64>,
    z: &DVector<f64>,
    buf: &mut StepBuffers,
    out_x: &mut DVector<f64>,
    out_z: &mut DVector<f64>,
    wz_out: &mut DVector<f64>,
) {
    p.phi_into(x, &mut buf.phi);
    quantize_into(z, resolution, &mut buf.q);
    buf.a.gemv(1.0, rc.r(), x, 0.0); // R x
    buf.b.gemv(1.0, rc.c(), &buf.q, 0.0); // C Q(z)
    buf.c.gemv(1.0, rc.c(), &buf.phi, 0.0); // C Phi(x)
    wz_out.gemv(1.0, rc.c(), z, 0.0); // C z, reused for the induced wz
    for i in 0..x.len() {
        out_x[i] = buf.a[i] + z[i] - gamma * buf.phi[i];
        out_z[i] = buf.b[i] - gamma * (buf.c[i] - buf.phi[i]);
        wz_out[i] = buf.b[i] - wz_out[i]; // C Q(z) - C z
    }
}

/// Wang-Elia with a floor-quantized auxiliary state: `z+ = Q(z) + K x`, the
/// estimate update unchanged. Writes the induced `wz = Q(z) - z`.
#[allow(clippy::too_many_arguments)]
fn we_quantized_step_into(
    k: &WeightMatrixK,
    p: &ProblemInstance,
    gamma: f64,
    resolution: f64,
    x: &DVector<f64>,
    z: &DVector<f64>,
    buf: &mut StepBuffers,
    out_x: &mut DVector<f64>,
    out_z: &mut DVector<f64>,
    wz_out: &mut DVector<f64>,
) {
    p.phi_into(x, &mut buf.phi);
    quantize_into(z, resolution, &mut buf.q);
    buf.a.gemv(1.0, k.matrix(), x, 0.0); // K x
    buf.b.gemv(1.0, k.matrix(), z, 0.0); // K z
    for i in 0..x.len() {
        out_x[i] = x[i] - buf.a[i] - buf.b[i] - gamma * buf.phi[i];
        out_z[i] = buf.q[i] + buf.a[i];
        wz_out[i] = buf.q[i] - z[i];
    }
}

/// One perturbed Wang-Elia step.
pub fn wang_elia_step(
    s: &AlgorithmState,
    k: &WeightMatrixK,
    p: &ProblemInstance,
    gamma: f64,
    wx: &DVector<f64>,
    wz: &DVector<f64>,
) -> Result<AlgorithmState, DynamicsError> {
    check_step_inputs(s, k.n(), p, gamma, wx, wz)?;
    let mut buf = StepBuffers::new(k.n());
    let mut x = DVector::zeros(k.n());
    let mut z = DVector::zeros(k.n());
    we_step_into(k, p, gamma, &s.x, &s.z, wx, wz, &mut buf, &mut x, &mut z);
    Ok(AlgorithmState::new(x, z, s.t + 1))
}

/// One Wang-Elia step evaluated through the per-agent neighbor stencil:
/// each agent reads only its neighbors. Used to cross-check that the
/// aggregate path respects the communication sparsity.
pub fn wang_elia_step_agentwise(
    s: &AlgorithmState,
    k: &WeightMatrixK,
    p: &ProblemInstance,
    gamma: f64,
    wx: &DVector<f64>,
    wz: &DVector<f64>,
) -> Result<AlgorithmState, DynamicsError> {
    check_step_inputs(s, k.n(), p, gamma, wx, wz)?;
    let n = k.n();
    let mut x = DVector::zeros(n);
    let mut z = DVector::zeros(n);
    for i in 0..n {
        let mut coupling = 0.0;
        let mut consensus = 0.0;
        for j in 0..n {
            if let Some(w) = k.edge_weight(i + 1, j + 1) {
                coupling += w * (s.x[j] - s.x[i] + s.z[j] - s.z[i]);
                consensus += w * (s.x[j] - s.x[i]);
            }
        }
        x[i] = s.x[i] + coupling - gamma * p.costs()[i].grad(s.x[i]) + wx[i];
        z[i] = s.z[i] - consensus + wz[i];
    }
    Ok(AlgorithmState::new(x, z, s.t + 1))
}

/// One perturbed Gradient Tracking step.
pub fn gradient_tracking_step(
    s: &AlgorithmState,
    rc: &StochasticPair,
    p: &ProblemInstance,
    gamma: f64,
    wx: &DVector<f64>,
    wz: &DVector<f64>,
) -> Result<AlgorithmState, DynamicsError> {
    check_step_inputs(s, rc.n(), p, gamma, wx, wz)?;
    let mut buf = StepBuffers::new(rc.n());
    let mut x = DVector::zeros(rc.n());
    let mut z = DVector::zeros(rc.n());
    gt_step_into(rc, p, gamma, &s.x, &s.z, wx, wz, &mut buf, &mut x, &mut z);
    Ok(AlgorithmState::new(x, z, s.t + 1))
}

/// A quantized step together with the induced additive `wz`.
#[derive(Debug, Clone)]
pub struct QuantizedStep {
    pub state: AlgorithmState,
    pub induced_wz: DVector<f64>,
}

/// Gradient Tracking step with floor-quantized auxiliary state.
pub fn gt_quantized_z_step(
    s: &AlgorithmState,
    rc: &StochasticPair,
    p: &ProblemInstance,
    gamma: f64,
    resolution: f64,
) -> Result<QuantizedStep, DynamicsError> {
    let zeros = DVector::zeros(rc.n());
    check_step_inputs(s, rc.n(), p, gamma, &zeros, &zeros)?;
    if !(resolution > 0.0) {
        return Err(DynamicsError::NonPositiveResolution(resolution));
    }
    let mut buf = StepBuffers::new(rc.n());
    let mut x = DVector::zeros(rc.n());
    let mut z = DVector::zeros(rc.n());
    let mut wz = DVector::zeros(rc.n());
    gt_quantized_step_into(
        rc, p, gamma, resolution, &s.x, &s.z, &mut buf, &mut x, &mut z, &mut wz,
    );
    Ok(QuantizedStep {
        state: AlgorithmState::new(x, z, s.t + 1),
        induced_wz: wz,
    })
}

/// Wang-Elia step with floor-quantized auxiliary state.
pub fn we_quantized_z_step(
    s: &AlgorithmState,
    k: &WeightMatrixK,
    p: &ProblemInstance,
    gamma: f64,
    resolution: f64,
) -> Result<QuantizedStep, DynamicsError> {
    let zeros = DVector::zeros(k.n());
    check_step_inputs(s, k.n(), p, gamma, &zeros, &zeros)?;
    if !(resolution > 0.0) {
        return Err(DynamicsError::NonPositiveResolution(resolution));
    }
    let mut buf = StepBuffers::new(k.n());
    let mut x = DVector::zeros(k.n());
    let mut z = DVector::zeros(k.n());
    let mut wz = DVector::zeros(k.n());
    we_quantized_step_into(
        k, p, gamma, resolution, &s.x, &s.z, &mut buf, &mut x, &mut z, &mut wz,
    );
    Ok(QuantizedStep {
        state: AlgorithmState::new(x, z, s.t + 1),
        induced_wz: wz,
    })
}

/// Which update map a rollout iterates.
#[derive(Debug, Clone, Copy)]
pub enum UpdateMap<'a> {
    WangElia { k: &'a WeightMatrixK },
    GradientTracking { rc: &'a StochasticPair },
}

impl UpdateMap<'_> {
    pub fn tag(&self) -> AlgorithmTag {
        match self {
            UpdateMap::WangElia { .. } => AlgorithmTag::WangElia,
            UpdateMap::GradientTracking { .. } => AlgorithmTag::GradientTracking,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            UpdateMap::WangElia { k } => k.n(),
            UpdateMap::GradientTracking { rc } => rc.n(),
        }
    }
}

/// Rollout controls.
#[derive(Debug, Clone, Copy)]
pub struct RolloutOptions {
    pub horizon: usize,
    pub divergence_threshold: f64,
    /// Keep one sample every `record_stride` steps (the initial and final
    /// states are always kept). Running perturbation statistics are exact
    /// regardless of the stride.
    pub record_stride: usize,
}

impl RolloutOptions {
    pub fn new(horizon: usize) -> Self {
        RolloutOptions {
            horizon,
            divergence_threshold: 1e6,
            record_stride: 1,
        }
    }
}

/// One recorded point of a trajectory.
///
/// `wx`/`wz` are the perturbations applied when leaving time `t` (zero for
/// the final sample, which is never left). The running statistics cover all
/// steps strictly before `t`: `sup_wx_avg` is the supremum of `|mean(wx)|`,
/// `sup_disp` the supremum of the norm of the stacked dispersion components
/// of `(wx, wz)`, and `cum_wz_avg` the sum of `mean(wz)`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub t: usize,
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub wx: DVector<f64>,
    pub wz: DVector<f64>,
    pub sup_wx_avg: f64,
    pub sup_disp: f64,
    pub cum_wz_avg: f64,
}

/// A rolled-out trajectory with recorded samples and exact running
/// perturbation statistics.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub algorithm: AlgorithmTag,
    pub gamma: f64,
    pub n: usize,
    pub horizon: usize,
    pub record_stride: usize,
    pub divergence_threshold: f64,
    pub samples: Vec<Sample>,
    /// Time index at which the state norm first exceeded the divergence
    /// threshold (or went non-finite), if it did.
    pub diverged_at: Option<usize>,
    /// Largest `|cum_wz_avg|` over every step of the run.
    pub max_abs_cum_wz_avg: f64,
}

impl TrajectoryRecord {
    pub fn final_sample(&self) -> &Sample {
        self.samples.last().expect("rollout records at least t=0")
    }
}

/// Iterates the chosen update map for `horizon` steps, recording samples and
/// running perturbation statistics, halting early when the state norm
/// exceeds the divergence threshold. Deterministic: a fixed seed gives a
/// bit-identical record.
pub fn rollout(
    map: &UpdateMap,
    p: &ProblemInstance,
    gamma: f64,
    initial: &AlgorithmState,
    pert: &PerturbationSpec,
    opts: &RolloutOptions,
) -> Result<TrajectoryRecord, DynamicsError> {
    let n = map.n();
    if opts.horizon == 0 {
        return Err(DynamicsError::EmptyHorizon);
    }
    if !(opts.divergence_threshold > 0.0) {
        return Err(DynamicsError::NonPositiveThreshold(
            opts.divergence_threshold,
        ));
    }
    if !initial.is_finite() {
        return Err(DynamicsError::NonFiniteState(initial.t));
    }
    pert.validate()?;
    let zeros = DVector::zeros(n);
    check_step_inputs(initial, n, p, gamma, &zeros, &zeros)?;
    let stride = opts.record_stride.max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(pert.seed().unwrap_or(0));
    let mut buf = StepBuffers::new(n);
    let mut x = initial.x.clone();
    let mut z = initial.z.clone();
    let mut next_x = DVector::zeros(n);
    let mut next_z = DVector::zeros(n);
    let mut wx = DVector::zeros(n);
    let mut wz = DVector::zeros(n);
    let mut vanish_scale = 1.0f64;

    let mut sup_wx_avg = 0.0f64;
    let mut sup_disp = 0.0f64;
    let mut cum_wz_avg = 0.0f64;
    let mut max_abs_cum = 0.0f64;

    let mut samples = Vec::with_capacity(opts.horizon / stride + 2);
    let mut diverged_at = None;

    let nf = n as f64;
    let thresh_sq = opts.divergence_threshold * opts.divergence_threshold;

    for offset in 0..opts.horizon {
        let t = initial.t + offset;

        // Perturbation for the step leaving t, then the step itself.
        match *pert {
            PerturbationSpec::None => {
                wx.fill(0.0);
                wz.fill(0.0);
                match map {
                    UpdateMap::WangElia { k } => we_step_into(
                        k,
                        p,
                        gamma,
                        &x,
                        &z,
                        &wx,
                        &wz,
                        &mut buf,
                        &mut next_x,
                        &mut next_z,
                    ),
                    UpdateMap::GradientTracking { rc } => gt_step_into(
                        rc,
                        p,
                        gamma,
                        &x,
                        &z,
                        &wx,
                        &wz,
                        &mut buf,
                        &mut next_x,
                        &mut next_z,
                    ),
                }
            }
            PerturbationSpec::QuantizeZ { resolution } => {
                wx.fill(0.0);
                match map {
                    UpdateMap::WangElia { k } => we_quantized_step_into(
                        k,
                        p,
                        gamma,
                        resolution,
                        &x,
                        &z,
                        &mut buf,
                        &mut next_x,
                        &mut next_z,
                        &mut wz,
                    ),
                    UpdateMap::GradientTracking { rc } => gt_quantized_step_into(
                        rc,
                        p,
                        gamma,
                        resolution,
                        &x,
                        &z,
                        &mut buf,
                        &mut next_x,
                        &mut next_z,
                        &mut wz,
                    ),
                }
            }
            PerturbationSpec::Additive {
                wx: wx_kind,
                wz: wz_kind,
                ..
            } => {
                wx_kind.fill(t, 1.0, &mut rng, &mut wx);
                wz_kind.fill(t, 1.0, &mut rng, &mut wz);
                match map {
                    UpdateMap::WangElia { k } => we_step_into(
                        k,
                        p,
                        gamma,
                        &x,
                        &z,
                        &wx,
                        &wz,
                        &mut buf,
                        &mut next_x,
                        &mut next_z,
                    ),
                    UpdateMap::GradientTracking { rc } => gt_step_into(
                        rc,
                        p,
                        gamma,
                        &x,
                        &z,
                        &wx,
                        &wz,
                        &mut buf,
                        &mut next_x,
                        &mut next_z,
                    ),
                }
            }
            PerturbationSpec::Vanishing {
                amplitude, decay, ..
            } => {
                let kind = NoiseKind::Uniform { amplitude };
                kind.fill(t, vanish_scale, &mut rng, &mut wx);
                kind.fill(t, vanish_scale, &mut rng, &mut wz);
                vanish_scale *= decay;
                match map {
                    UpdateMap::WangElia { k } => we_step_into(
                        k,
                        p,
                        gamma,
                        &x,
                        &z,
                        &wx,
                        &wz,
                        &mut buf,
                        &mut next_x,
                        &mut next_z,
                    ),
                    UpdateMap::GradientTracking { rc } => gt_step_into(
                        rc,
                        p,
                        gamma,
                        &x,
                        &z,
                        &wx,
                        &wz,
                        &mut buf,
                        &mut next_x,
                        &mut next_z,
                    ),
                }
            }
        }

        if offset % stride == 0 {
            samples.push(Sample {
                t,
                x: x.clone(),
                z: z.clone(),
                wx: wx.clone(),
                wz: wz.clone(),
                sup_wx_avg,
                sup_disp,
                cum_wz_avg,
            });
        }

        // Fold this step's perturbation into the running statistics.
        let wx_avg = wx.sum() / nf;
        let wz_avg = wz.sum() / nf;
        let disp_sq = (wx.norm_squared() - nf * wx_avg * wx_avg).max(0.0)
            + (wz.norm_squared() - nf * wz_avg * wz_avg).max(0.0);
        sup_wx_avg = sup_wx_avg.max(wx_avg.abs());
        sup_disp = sup_disp.max(disp_sq.sqrt());
        cum_wz_avg += wz_avg;
        max_abs_cum = max_abs_cum.max(cum_wz_avg.abs());

        std::mem::swap(&mut x, &mut next_x);
        std::mem::swap(&mut z, &mut next_z);

        let norm_sq = x.norm_squared() + z.norm_squared();
        if !norm_sq.is_finite() || norm_sq > thresh_sq {
            diverged_at = Some(t + 1);
            break;
        }
    }

    // Always record the state the loop ended on.
    let end_t = diverged_at.unwrap_or(initial.t + opts.horizon);
    samples.push(Sample {
        t: end_t,
        x,
        z,
        wx: DVector::zeros(n),
        wz: DVector::zeros(n),
        sup_wx_avg,
        sup_disp,
        cum_wz_avg,
    });

    Ok(TrajectoryRecord {
        algorithm: map.tag(),
        gamma,
        n,
        horizon: opts.horizon,
        record_stride: stride,
        divergence_threshold: opts.divergence_threshold,
        samples,
        diverged_at,
        max_abs_cum_wz_avg: max_abs_cum,
    })
}
