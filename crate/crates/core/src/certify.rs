//! The ISS certificate and its pointwise verification along trajectories.
//!
//! In average-dispersion error coordinates the Wang-Elia dynamics splits into
//! a scalar average subsystem, a dispersion subsystem
//! `(xi_disp, zeta_disp)+ = A (xi_disp, zeta_disp) - gamma B Phi~ + delta`,
//! and a decoupled auxiliary average. With `M = S^T K S`,
//!
//! ```text
//! A = [ I - M   -M ]        B = [ S^T ]
//!     [   M      I ],           [  0  ].
//! ```
//!
//! `A` is Schur, so the Lyapunov equation `A^T P A - P = -3 I` has a unique
//! positive-definite solution `P`. From `P`, the Lipschitz constant `ell` and
//! the strong-convexity constant `c0`, a family of explicit constants and
//! stepsize thresholds is evaluated; for any stepsize `gamma` below the final
//! threshold `gamma_star` every solution satisfies
//!
//! ```text
//! dist(t) <= alpha * mu^t * dist(0) + rho * sup|avg wx| + tau * sup|disp w|
//! ```
//!
//! with `mu = sqrt(1 - c0 gamma)`, `rho = O(1/gamma)` and
//! `tau = O(1/sqrt(gamma))`. The certificate is conservative: empirical decay
//! beats `mu`, and the checks here verify the inequalities pointwise rather
//! than fitting them.

use nalgebra::{DMatrix, DVector};
use serde::ser::SerializeSeq;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::dynamics::{AlgorithmTag, TrajectoryRecord};
use crate::linalg::{self, DispersionBasis, LinalgError};
use crate::network::WeightMatrixK;
use crate::problem::{self, ErrorCoords, OptimalEquilibrium, ProblemInstance};

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("error-system invariant `{name}` violated: {detail}")]
    ErrorSystemInvariant { name: &'static str, detail: String },
    #[error("gamma {gamma} is not in the admissible interval (0, {gamma_star})")]
    GammaOutOfRange { gamma: f64, gamma_star: f64 },
    #[error("trajectory was generated by {got}, expected {expected}")]
    AlgorithmMismatch {
        expected: AlgorithmTag,
        got: AlgorithmTag,
    },
    #[error("trajectory gamma {traj} does not match certificate gamma {cert}")]
    GammaMismatch { traj: f64, cert: f64 },
    #[error("per-step checks need record stride 1, trajectory has {0}")]
    StrideNotOne(usize),
    #[error("trajectory must start at t=0, first sample is t={0}")]
    TrajectoryStart(usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Problem(#[from] crate::problem::ProblemError),
}

/// The dispersion error-system matrices and the block form of `T K T^{-1}`.
#[derive(Debug, Clone)]
pub struct ErrorSystemMatrices {
    /// `(2N-2) x (2N-2)` dispersion transition matrix.
    pub a: DMatrix<f64>,
    /// `(2N-2) x N` input matrix `[S^T; 0]` (unit operator norm).
    pub b: DMatrix<f64>,
    /// `T K T^{-1}`, whose first row and column vanish; the lower-right
    /// block is `S^T K S`.
    pub tkt: DMatrix<f64>,
    n: usize,
}

impl ErrorSystemMatrices {
    /// Network size `N`.
    pub fn n(&self) -> usize {
        self.n
    }
}

/// Assembles and validates the dispersion error system for a consensus
/// matrix: the block structure of `T K T^{-1}`, the Schur property of `A`
/// (every eigenvalue modulus strictly inside `(0, 1)`), and `|B| = 1`.
pub fn build_error_system(
    k: &WeightMatrixK,
    basis: &DispersionBasis,
) -> Result<ErrorSystemMatrices, CertifyError> {
    let n = k.n();
    if basis.n() != n {
        return Err(CertifyError::DimensionMismatch {
            expected: n,
            got: basis.n(),
        });
    }
    let s = basis.s();
    let m = s.tr_mul(k.matrix()) * s;
    let d = n - 1;

    let mut a = DMatrix::zeros(2 * d, 2 * d);
    a.view_mut((0, 0), (d, d))
        .copy_from(&(DMatrix::identity(d, d) - &m));
    a.view_mut((0, d), (d, d)).copy_from(&(-&m));
    a.view_mut((d, 0), (d, d)).copy_from(&m);
    a.view_mut((d, d), (d, d))
        .copy_from(&DMatrix::identity(d, d));

    let mut b = DMatrix::zeros(2 * d, n);
    b.view_mut((0, 0), (d, n)).copy_from(&s.transpose());

    let nf = n as f64;
    let mut t_mat = DMatrix::zeros(n, n);
    t_mat
        .view_mut((0, 0), (1, n))
        .copy_from(&DMatrix::from_element(1, n, 1.0 / nf));
    t_mat.view_mut((1, 0), (d, n)).copy_from(&s.transpose());
    let mut t_inv = DMatrix::zeros(n, n);
    t_inv
        .view_mut((0, 0), (n, 1))
        .copy_from(&DMatrix::from_element(n, 1, 1.0));
    t_inv.view_mut((0, 1), (n, d)).copy_from(s);
    let tkt = &t_mat * k.matrix() * t_inv;

    let scale = 1.0 + k.matrix().amax();
    let first_row = tkt.row(0).amax();
    let first_col = tkt.column(0).amax();
    if first_row.max(first_col) > 1e-12 * scale {
        return Err(CertifyError::ErrorSystemInvariant {
            name: "tkt_block_structure",
            detail: format!("first row/column residual {:.3e}", first_row.max(first_col)),
        });
    }
    let block_err = (tkt.view((1, 1), (d, d)) - &m).amax();
    if block_err > 1e-12 * scale {
        return Err(CertifyError::ErrorSystemInvariant {
            name: "tkt_block_structure",
            detail: format!("lower-right block differs from S^T K S by {block_err:.3e}"),
        });
    }

    for lambda in a.clone().complex_eigenvalues().iter() {
        let modulus = lambda.norm();
        if !(modulus > 1e-12 && modulus < 1.0 - 1e-9) {
            return Err(CertifyError::ErrorSystemInvariant {
                name: "a_schur",
                detail: format!("eigenvalue modulus {modulus}"),
            });
        }
    }

    let b_norm = linalg::operator_norm(&b);
    if (b_norm - 1.0).abs() > 1e-9 {
        return Err(CertifyError::ErrorSystemInvariant {
            name: "b_unit_norm",
            detail: format!("|B| = {b_norm}"),
        });
    }

    Ok(ErrorSystemMatrices { a, b, tkt, n })
}

/// Stepsize choice for [`compute_certificate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaChoice {
    /// Use `gamma_star / 2`.
    Auto,
    Value(f64),
}

/// The gamma-dependent tail of a certificate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IssGains {
    pub c6: f64,
    pub c13: f64,
    pub c14: f64,
    pub c15: f64,
    pub q_gamma: f64,
    pub mu: f64,
    pub rho: f64,
    pub tau: f64,
}

fn serialize_matrix_rows<S: Serializer>(m: &DMatrix<f64>, ser: S) -> Result<S::Ok, S::Error> {
    let mut seq = ser.serialize_seq(Some(m.nrows()))?;
    for i in 0..m.nrows() {
        let row: Vec<f64> = m.row(i).iter().copied().collect();
        seq.serialize_element(&row)?;
    }
    seq.end()
}

/// The complete ISS certificate for a problem/network pair at a stepsize.
///
/// All constants are explicit functions of the Lyapunov matrix `P`, the
/// Lipschitz constant `ell` and the strong-convexity constant `c0`; the
/// thresholds and the final tuple `(alpha, mu, rho, tau)` can be recomputed
/// from the stored constants.
#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub n: usize,
    pub ell: f64,
    pub c0: f64,
    #[serde(serialize_with = "serialize_matrix_rows")]
    pub p_matrix: DMatrix<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lyapunov_residual: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c7: f64,
    pub c8: f64,
    pub c9: f64,
    pub c10: f64,
    pub c11: f64,
    pub c12: f64,
    pub gamma_star0: f64,
    pub gamma_star1: f64,
    pub gamma_star: f64,
    pub gamma: f64,
    pub c6: f64,
    pub c13: f64,
    pub c14: f64,
    pub c15: f64,
    pub q_gamma: f64,
    pub alpha: f64,
    pub mu: f64,
    pub rho: f64,
    pub tau: f64,
}

impl Certificate {
    /// Evaluates the gamma-dependent constants and gains at an arbitrary
    /// positive stepsize, without the admissibility gate. Useful for scaling
    /// studies; the ISS bound is only guaranteed for `gamma < gamma_star`.
    pub fn gains_at(&self, gamma: f64) -> IssGains {
        let nf = self.n as f64;
        let c6 = 1.0 + 2.0 * self.ell / self.c0 + (2.0 / self.c0 + nf.sqrt()) / gamma;
        let c13 = self.c11 + self.c9 * gamma;
        let c14 = c6 / (self.c0 * gamma);
        let c15 = c13 / (self.c0 * gamma);
        let q_gamma = 1.0 - (self.c0 * gamma).min(1.0 / self.lambda_max);
        let blowup = nf.max(1.0 / self.lambda_min);
        IssGains {
            c6,
            c13,
            c14,
            c15,
            q_gamma,
            mu: q_gamma.sqrt(),
            rho: (c14 * blowup).sqrt(),
            tau: (c15 * blowup).sqrt(),
        }
    }
}

/// Solves the Lyapunov equation and evaluates every certificate constant,
/// the stepsize thresholds and the ISS tuple at the chosen `gamma`
/// (`Auto` picks `gamma_star / 2`). Fails if `gamma` is not strictly inside
/// `(0, gamma_star)`.
pub fn compute_certificate(
    p: &ProblemInstance,
    es: &ErrorSystemMatrices,
    gamma: GammaChoice,
) -> Result<Certificate, CertifyError> {
    let n = es.n();
    if p.n() != n {
        return Err(CertifyError::DimensionMismatch {
            expected: n,
            got: p.n(),
        });
    }
    let nf = n as f64;
    let ell = p.lipschitz_ell();
    let c0 = p.strong_convexity_c0();

    let dim = es.a.nrows();
    let q = DMatrix::identity(dim, dim) * 3.0;
    let p_matrix = linalg::solve_discrete_lyapunov(&es.a, &q)?;
    let lyapunov_residual =
        linalg::operator_norm(&(es.a.transpose() * &p_matrix * &es.a - &p_matrix + &q));
    let p_eigs = linalg::symmetric_eigenvalues(&p_matrix)?;
    let (lambda_min, lambda_max) = (p_eigs[0], p_eigs[p_eigs.len() - 1]);

    let atpb = linalg::operator_norm(&(es.a.transpose() * &p_matrix * &es.b));
    let pb = linalg::operator_norm(&(&p_matrix * &es.b));
    let btpb = linalg::operator_norm(&(es.b.transpose() * &p_matrix * &es.b));
    let atp = linalg::operator_norm(&(es.a.transpose() * &p_matrix));
    let p_norm = linalg::operator_norm(&p_matrix);

    let c1 = ell / nf.sqrt();
    let c2 = c1 * c1 / c0;
    let c3 = c0 * ell / 2.0 + 2.0 * ell * ell;
    let c4 = nf.sqrt();
    let c5 = 2.0 * ell * ell / nf;
    let c7 = c2 + c4;
    let c8 = 4.0 * atpb * atpb * ell * ell * nf / c0 + 2.0 * atpb * ell + pb * ell;
    let c9 = 4.0 * pb * pb * ell * ell * nf / c0 + pb * ell;
    let c10 = 2.0 * btpb * ell * ell;
    let c11 = 2.0 * atp * atp + p_norm;
    let c12 = 2.0 * btpb * ell * ell * nf;

    let gamma_star0 = c0 / (2.0 * c3);
    let gamma_star1 = gamma_star0
        .min(1.0 / (4.0 * c10).sqrt())
        .min(1.0 / (4.0 * c8))
        .min(c0 / (2.0 * c12));
    let gamma_star = gamma_star1
        .min(1.0 / (2.0 * c7))
        .min(1.0 / (2.0 * c5).sqrt())
        .min(1.0 / (c0 * lambda_max))
        .min(1.0 / c0);

    let gamma = match gamma {
        GammaChoice::Auto => gamma_star / 2.0,
        GammaChoice::Value(v) => v,
    };
    if !(gamma > 0.0 && gamma < gamma_star) {
        return Err(CertifyError::GammaOutOfRange { gamma, gamma_star });
    }

    let alpha = ((1.0 / nf).max(lambda_max) * nf.max(1.0 / lambda_min)).sqrt();
    let mut cert = Certificate {
        n,
        ell,
        c0,
        p_matrix,
        lambda_min,
        lambda_max,
        lyapunov_residual,
        c1,
        c2,
        c3,
        c4,
        c5,
        c7,
        c8,
        c9,
        c10,
        c11,
        c12,
        gamma_star0,
        gamma_star1,
        gamma_star,
        gamma,
        c6: 0.0,
        c13: 0.0,
        c14: 0.0,
        c15: 0.0,
        q_gamma: 0.0,
        alpha,
        mu: 0.0,
        rho: 0.0,
        tau: 0.0,
    };
    let gains = cert.gains_at(gamma);
    cert.c6 = gains.c6;
    cert.c13 = gains.c13;
    cert.c14 = gains.c14;
    cert.c15 = gains.c15;
    cert.q_gamma = gains.q_gamma;
    cert.mu = gains.mu;
    cert.rho = gains.rho;
    cert.tau = gains.tau;
    Ok(cert)
}

/// The composite Lyapunov value at a point in error coordinates:
/// `v1 = xi_avg^2`, `v2 = eta^T P eta` with `eta = (xi_disp, zeta_disp)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovValue {
    pub v1: f64,
    pub v2: f64,
    pub v: f64,
}

pub fn lyapunov_value(
    coords: &ErrorCoords,
    cert: &Certificate,
) -> Result<LyapunovValue, CertifyError> {
    let d = cert.n - 1;
    if coords.xi_disp.len() != d || coords.zeta_disp.len() != d {
        return Err(CertifyError::DimensionMismatch {
            expected: d,
            got: coords.xi_disp.len(),
        });
    }
    let mut eta = DVector::zeros(2 * d);
    eta.rows_mut(0, d).copy_from(&coords.xi_disp);
    eta.rows_mut(d, d).copy_from(&coords.zeta_disp);
    let v1 = coords.xi_avg * coords.xi_avg;
    let v2 = (&cert.p_matrix * &eta).dot(&eta);
    Ok(LyapunovValue { v1, v2, v: v1 + v2 })
}

/// The ISS bound evaluated at one recorded time.
#[derive(Debug, Clone, Copy)]
pub struct IssPoint {
    pub t: usize,
    pub distance: f64,
    pub rhs: f64,
    pub slack: f64,
}

/// Pointwise evaluation of the ISS bound along a trajectory.
#[derive(Debug, Clone)]
pub struct IssBoundCheck {
    pub points: Vec<IssPoint>,
    pub min_slack: f64,
    pub min_slack_t: usize,
    /// `min slack >= -1e-9 (1 + rhs)` at the minimizing time.
    pub holds: bool,
}

fn require_we_trajectory(
    traj: &TrajectoryRecord,
    cert: &Certificate,
    eq: &OptimalEquilibrium,
) -> Result<(), CertifyError> {
    if traj.algorithm != AlgorithmTag::WangElia {
        return Err(CertifyError::AlgorithmMismatch {
            expected: AlgorithmTag::WangElia,
            got: traj.algorithm,
        });
    }
    if traj.gamma != cert.gamma {
        return Err(CertifyError::GammaMismatch {
            traj: traj.gamma,
            cert: cert.gamma,
        });
    }
    if eq.gamma() != cert.gamma {
        return Err(CertifyError::GammaMismatch {
            traj: eq.gamma(),
            cert: cert.gamma,
        });
    }
    if traj.n != cert.n {
        return Err(CertifyError::DimensionMismatch {
            expected: cert.n,
            got: traj.n,
        });
    }
    Ok(())
}

/// Evaluates `rhs(t) = alpha mu^t dist(0) + rho sup|avg wx| + tau sup|disp w|`
/// (suprema over steps strictly before `t`) and the slack `rhs - dist` at
/// every recorded sample.
pub fn check_iss_bound(
    traj: &TrajectoryRecord,
    cert: &Certificate,
    eq: &OptimalEquilibrium,
    basis: &DispersionBasis,
) -> Result<IssBoundCheck, CertifyError> {
    require_we_trajectory(traj, cert, eq)?;
    let first = traj.samples.first().expect("non-empty trajectory");
    if first.t != 0 {
        return Err(CertifyError::TrajectoryStart(first.t));
    }
    let d0 = problem::distance_to_optimal_set(&first.x, &first.z, eq, basis)?;
    let mut points = Vec::with_capacity(traj.samples.len());
    let mut min_slack = f64::INFINITY;
    let mut min_slack_t = 0;
    let mut rhs_at_min = 0.0;
    for s in &traj.samples {
        let distance = problem::distance_to_optimal_set(&s.x, &s.z, eq, basis)?;
        let rhs = cert.alpha * cert.mu.powi(s.t as i32) * d0
            + cert.rho * s.sup_wx_avg
            + cert.tau * s.sup_disp;
        let slack = rhs - distance;
        if !(slack >= min_slack) {
            min_slack = slack;
            min_slack_t = s.t;
            rhs_at_min = rhs;
        }
        points.push(IssPoint {
            t: s.t,
            distance,
            rhs,
            slack,
        });
    }
    let holds = min_slack >= -1e-9 * (1.0 + rhs_at_min);
    Ok(IssBoundCheck {
        points,
        min_slack,
        min_slack_t,
        holds,
    })
}

/// The Lyapunov decrement inequality evaluated over one step.
#[derive(Debug, Clone, Copy)]
pub struct DeltaVPoint {
    pub t: usize,
    pub delta_v: f64,
    pub bound: f64,
    /// `delta_v - bound`; nonpositive up to roundoff when the bound holds.
    pub residual: f64,
    pub scaled_residual: f64,
}

/// Pointwise evaluation of
/// `Delta V <= -gamma c0 xi_avg^2 - |eta|^2 + c6 |avg wx|^2 + c13 |disp w|^2`.
#[derive(Debug, Clone)]
pub struct DeltaVCheck {
    pub points: Vec<DeltaVPoint>,
    pub max_residual: f64,
    pub max_scaled_residual: f64,
}

pub fn check_delta_v(
    traj: &TrajectoryRecord,
    cert: &Certificate,
    eq: &OptimalEquilibrium,
    basis: &DispersionBasis,
) -> Result<DeltaVCheck, CertifyError> {
    require_we_trajectory(traj, cert, eq)?;
    if traj.record_stride != 1 {
        return Err(CertifyError::StrideNotOne(traj.record_stride));
    }
    let nf = traj.n as f64;
    let mut points = Vec::with_capacity(traj.samples.len().saturating_sub(1));
    let mut max_residual = f64::NEG_INFINITY;
    let mut max_scaled = f64::NEG_INFINITY;
    for w in traj.samples.windows(2) {
        let now = &w[0];
        let next = &w[1];
        let coords_now = problem::error_coordinates(&now.x, &now.z, eq, basis)?;
        let coords_next = problem::error_coordinates(&next.x, &next.z, eq, basis)?;
        let v_now = lyapunov_value(&coords_now, cert)?;
        let v_next = lyapunov_value(&coords_next, cert)?;
        let delta_v = v_next.v - v_now.v;

        let wx_avg = now.wx.sum() / nf;
        let wz_avg = now.wz.sum() / nf;
        let disp_sq = (now.wx.norm_squared() - nf * wx_avg * wx_avg).max(0.0)
            + (now.wz.norm_squared() - nf * wz_avg * wz_avg).max(0.0);
        let bound = -cert.gamma * cert.c0 * coords_now.xi_avg * coords_now.xi_avg
            - coords_now.disp_norm_squared()
            + cert.c6 * wx_avg * wx_avg
            + cert.c13 * disp_sq;
        let residual = delta_v - bound;
        let scaled = residual / (1.0 + v_now.v.abs());
        max_residual = max_residual.max(residual);
        max_scaled = max_scaled.max(scaled);
        points.push(DeltaVPoint {
            t: now.t,
            delta_v,
            bound,
            residual,
            scaled_residual: scaled,
        });
    }
    Ok(DeltaVCheck {
        points,
        max_residual,
        max_scaled_residual: max_scaled,
    })
}

/// Running sum of the average auxiliary perturbation, and whether it stayed
/// below a threshold. Boundedness of this sum is equivalent to boundedness
/// of the auxiliary average along the run.
#[derive(Debug, Clone)]
pub struct IntegralAverageDiagnostic {
    /// `(t, sum of avg wz over steps before t)` at each recorded sample.
    pub series: Vec<(usize, f64)>,
    /// Largest `|sum|` over every step of the run (not only recorded ones).
    pub max_abs: f64,
    pub threshold: f64,
    pub bounded: bool,
}

pub fn integral_average_diagnostic(
    traj: &TrajectoryRecord,
    threshold: f64,
) -> IntegralAverageDiagnostic {
    let series = traj.samples.iter().map(|s| (s.t, s.cum_wz_avg)).collect();
    IntegralAverageDiagnostic {
        series,
        max_abs: traj.max_abs_cum_wz_avg,
        threshold,
        bounded: traj.max_abs_cum_wz_avg <= threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{
        rollout, AlgorithmState, NoiseKind, PerturbationSpec, RolloutOptions, UpdateMap,
    };
    use crate::linalg::build_dispersion_basis;
    use crate::network::{build_k_metropolis, Graph};
    use crate::problem::{build_equilibrium, make_quadratic_problem};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference() -> (
        ProblemInstance,
        WeightMatrixK,
        DispersionBasis,
        ErrorSystemMatrices,
    ) {
        let p = make_quadratic_problem(&[(1.0, 1.0), (1.0, 4.0)]).unwrap();
        let g = Graph::new(2, [(1, 2)]).unwrap();
        let k = build_k_metropolis(&g, 0.4).unwrap();
        let basis = build_dispersion_basis(2).unwrap();
        let es = build_error_system(&k, &basis).unwrap();
        (p, k, basis, es)
    }

    #[test]
    fn error_system_two_agents_matches_hand_values() {
        let (_, _, _, es) = reference();
        // S^T K S = 2k = 0.4 for the pair graph
        let expect = DMatrix::from_row_slice(2, 2, &[0.6, -0.4, 0.4, 1.0]);
        assert_abs_diff_eq!(es.a, expect, epsilon = 1e-14);
        assert_relative_eq!(linalg::operator_norm(&es.b), 1.0, max_relative = 1e-10);
        assert!(es.tkt.row(0).amax() <= 1e-12);
        assert!(es.tkt.column(0).amax() <= 1e-12);
        assert_relative_eq!(es.tkt[(1, 1)], 0.4, max_relative = 1e-12);
    }

    #[test]
    fn error_system_spectrum_is_strictly_inside_the_unit_disk() {
        for n in [3usize, 5, 8] {
            let g = Graph::complete(n).unwrap();
            let k = build_k_metropolis(&g, 0.6).unwrap();
            let basis = build_dispersion_basis(n).unwrap();
            let es = build_error_system(&k, &basis).unwrap();
            for lambda in es.a.clone().complex_eigenvalues().iter() {
                let m = lambda.norm();
                assert!(m > 1e-12 && m < 1.0 - 1e-9, "modulus {m} for n={n}");
            }
        }
    }

    #[test]
    fn certificate_reference_constants() {
        let (p, _, _, es) = reference();
        let cert = compute_certificate(&p, &es, GammaChoice::Value(1e-5)).unwrap();
        assert_eq!(cert.n, 2);
        assert_abs_diff_eq!(cert.c0, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cert.ell, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cert.c1, 2.0f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(cert.c2, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cert.c3, 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cert.c4, 2.0f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(cert.c5, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cert.c7, 2.0 + 2.0f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(cert.gamma_star0, 1.0 / 18.0, epsilon = 1e-15);
        // P = [[1175, 550], [550, 1475]] / 84 for this network
        assert_relative_eq!(cert.p_matrix[(0, 0)], 1175.0 / 84.0, max_relative = 1e-9);
        assert!(cert.lyapunov_residual <= 1e-8);
        assert!(cert.alpha >= 1.0);
        assert!(cert.mu >= 0.0 && cert.mu < 1.0);
        assert!(cert.gamma_star < 1.0);
        assert_relative_eq!(
            cert.mu,
            (1.0 - cert.c0 * cert.gamma).sqrt(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn certificate_thresholds_recompute_from_stored_constants() {
        let (p, _, _, es) = reference();
        let cert = compute_certificate(&p, &es, GammaChoice::Auto).unwrap();
        assert_relative_eq!(
            cert.gamma_star0,
            cert.c0 / (2.0 * cert.c3),
            max_relative = 1e-14
        );
        let g1 = cert
            .gamma_star0
            .min((4.0 * cert.c10).powf(-0.5))
            .min(1.0 / (4.0 * cert.c8))
            .min(cert.c0 / (2.0 * cert.c12));
        assert_relative_eq!(cert.gamma_star1, g1, max_relative = 1e-14);
        let gs = g1
            .min(1.0 / (2.0 * cert.c7))
            .min((2.0 * cert.c5).powf(-0.5))
            .min(1.0 / (cert.c0 * cert.lambda_max))
            .min(1.0 / cert.c0);
        assert_relative_eq!(cert.gamma_star, gs, max_relative = 1e-14);
        assert_relative_eq!(cert.gamma, cert.gamma_star / 2.0, max_relative = 1e-14);
        assert_relative_eq!(
            cert.q_gamma,
            1.0 - (cert.c0 * cert.gamma).min(1.0 / cert.lambda_max),
            max_relative = 1e-14
        );
    }

    #[test]
    fn certificate_rejects_out_of_range_gamma() {
        let (p, _, _, es) = reference();
        let cert = compute_certificate(&p, &es, GammaChoice::Auto).unwrap();
        for g in [cert.gamma_star, cert.gamma_star * 2.0, 0.0, -1.0] {
            assert!(matches!(
                compute_certificate(&p, &es, GammaChoice::Value(g)),
                Err(CertifyError::GammaOutOfRange { .. })
            ));
        }
    }

    #[test]
    fn gain_scaling_in_the_small_stepsize_limit() {
        let (p, _, _, es) = reference();
        let cert = compute_certificate(&p, &es, GammaChoice::Auto).unwrap();
        let coarse = cert.gains_at(1e-4);
        let fine = cert.gains_at(1e-5);
        let rho_ratio = fine.rho / coarse.rho;
        assert!(
            (8.0..=12.0).contains(&rho_ratio),
            "rho ratio {rho_ratio} outside [8, 12]"
        );
        let tau_ratio = fine.tau / coarse.tau;
        let sqrt10 = 10f64.sqrt();
        assert!(
            (tau_ratio - sqrt10).abs() <= 0.2 * sqrt10,
            "tau ratio {tau_ratio} not within 20% of sqrt(10)"
        );
    }

    #[test]
    fn lyapunov_value_basics_and_sandwich() {
        let (p, _, basis, es) = reference();
        let cert = compute_certificate(&p, &es, GammaChoice::Auto).unwrap();
        let zero = ErrorCoords {
            xi_avg: 0.0,
            xi_disp: DVector::zeros(1),
            zeta_avg: 0.0,
            zeta_disp: DVector::zeros(1),
        };
        let v = lyapunov_value(&zero, &cert).unwrap();
        assert_eq!((v.v1, v.v2, v.v), (0.0, 0.0, 0.0));

        let avg_only = ErrorCoords {
            xi_avg: 1.0,
            ..zero.clone()
        };
        let v = lyapunov_value(&avg_only, &cert).unwrap();
        assert_eq!((v.v1, v.v2, v.v), (1.0, 0.0, 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let coords = ErrorCoords {
                xi_avg: rng.gen_range(-3.0..3.0),
                xi_disp: DVector::from_fn(1, |_, _| rng.gen_range(-3.0..3.0)),
                zeta_avg: rng.gen_range(-3.0..3.0),
                zeta_disp: DVector::from_fn(1, |_, _| rng.gen_range(-3.0..3.0)),
            };
            let v = lyapunov_value(&coords, &cert).unwrap();
            let eta_sq = coords.disp_norm_squared();
            let lower = coords.xi_avg.powi(2) + cert.lambda_min * eta_sq;
            let upper = coords.xi_avg.powi(2) + cert.lambda_max * eta_sq;
            assert!(v.v >= lower * (1.0 - 1e-12) && v.v <= upper * (1.0 + 1e-12));
        }
        let _ = basis;
    }

    #[test]
    fn iss_bound_holds_on_a_perturbed_rollout() {
        let (p, k, basis, es) = reference();
        let cert = compute_certificate(&p, &es, GammaChoice::Auto).unwrap();
        let eq = build_equilibrium(&p, &k, &basis, cert.gamma).unwrap();
        let map = UpdateMap::WangElia { k: &k };
        let pert = PerturbationSpec::Additive {
            wx: NoiseKind::Uniform { amplitude: 0.05 },
            wz: NoiseKind::Uniform { amplitude: 0.05 },
            seed: 31,
        };
        let initial = AlgorithmState::new(
            DVector::from_vec(vec![4.0, -3.0]),
            DVector::from_vec(vec![1.0, 2.0]),
            0,
        );
        let traj = rollout(
            &map,
            &p,
            cert.gamma,
            &initial,
            &pert,
            &RolloutOptions::new(1_500),
        )
        .unwrap();
        let check = check_iss_bound(&traj, &cert, &eq, &basis).unwrap();
        assert!(
            check.holds,
            "min slack {} at t={}",
            check.min_slack, check.min_slack_t
        );
        // at t=0 the bound reduces to alpha * dist(0) >= dist(0)
        let first = &check.points[0];
        assert!(first.rhs >= first.distance * (1.0 - 1e-12));
    }

    #[test]
    fn iss_bound_rejects_mismatched_inputs() {
        let (p, k, basis, es) = reference();
        let cert = compute_certificate(&p, &es, GammaChoice::Auto).unwrap();
        let eq = build_equilibrium(&p, &k, &basis, cert.gamma).unwrap();
        let map = UpdateMap::WangElia { k: &k };
        let traj = rollout(
            &map,
            &p,
            cert.gamma * 0.5,
            &AlgorithmState::zeros(2),
            &PerturbationSpec::None,
            &RolloutOptions::new(10),
        )
        .unwrap();
        assert!(matches!(
            check_iss_bound(&traj, &cert, &eq, &basis),
            Err(CertifyError::GammaMismatch { .. })
        ));

        // per-step checks refuse subsampled trajectories
        let mut opts = RolloutOptions::new(10);
        opts.record_stride = 5;
        let strided = rollout(
            &map,
            &p,
            cert.gamma,
            &AlgorithmState::zeros(2),
            &PerturbationSpec::None,
            &opts,
        )
        .unwrap();
        assert!(matches!(
            check_delta_v(&strided, &cert, &eq, &basis),
            Err(CertifyError::StrideNotOne(5))
        ));
    }

    #[test]
    fn delta_v_vanishes_at_the_equilibrium() {
        let (p, k, basis, es) = reference();
        let cert = compute_certificate(&p, &es, GammaChoice::Auto).unwrap();
        let eq = build_equilibrium(&p, &k, &basis, cert.gamma).unwrap();
        let map = UpdateMap::WangElia { k: &k };
        let initial = AlgorithmState::new(eq.x_star().clone(), eq.z_star().clone(), 0);
        let traj = rollout(
            &map,
            &p,
            cert.gamma,
            &initial,
            &PerturbationSpec::None,
            &RolloutOptions::new(50),
        )
        .unwrap();
        let check = check_delta_v(&traj, &cert, &eq, &basis).unwrap();
        for pt in &check.points {
            assert!(pt.delta_v.abs() <= 1e-12);
            assert!(pt.residual <= 1e-12);
        }
    }

    #[test]
    fn delta_v_decreases_strictly_off_the_optimal_set() {
        let (p, k, basis, es) = reference();
        let cert = compute_certificate(&p, &es, GammaChoice::Auto).unwrap();
        let eq = build_equilibrium(&p, &k, &basis, cert.gamma).unwrap();
        let map = UpdateMap::WangElia { k: &k };
        let initial = AlgorithmState::new(
            DVector::from_vec(vec![3.0, -1.0]),
            DVector::from_vec(vec![0.5, -0.5]),
            0,
        );
        let traj = rollout(
            &map,
            &p,
            cert.gamma,
            &initial,
            &PerturbationSpec::None,
            &RolloutOptions::new(2_000),
        )
        .unwrap();
        let check = check_delta_v(&traj, &cert, &eq, &basis).unwrap();
        assert!(check.max_scaled_residual <= 1e-9);
        for (pt, w) in check.points.iter().zip(traj.samples.windows(2)) {
            let dist = problem::distance_to_optimal_set(&w[0].x, &w[0].z, &eq, &basis).unwrap();
            if dist > 1e-6 {
                assert!(pt.delta_v < 0.0, "V did not decrease at t={}", pt.t);
            }
        }
    }

    #[test]
    fn integral_average_diagnostic_flags_bias_and_accepts_alternation() {
        let (p, k, _, _) = reference();
        let map = UpdateMap::WangElia { k: &k };
        let opts = RolloutOptions::new(5_000);

        let none = rollout(
            &map,
            &p,
            0.01,
            &AlgorithmState::zeros(2),
            &PerturbationSpec::None,
            &opts,
        )
        .unwrap();
        let diag = integral_average_diagnostic(&none, 0.5);
        assert!(diag.bounded);
        assert!(diag.max_abs == 0.0);

        let bias = PerturbationSpec::Additive {
            wx: NoiseKind::Constant { value: 0.0 },
            wz: NoiseKind::Constant { value: -1e-3 },
            seed: 0,
        };
        let biased = rollout(&map, &p, 0.01, &AlgorithmState::zeros(2), &bias, &opts).unwrap();
        let diag = integral_average_diagnostic(&biased, 0.5);
        assert!(!diag.bounded);
        // the sum ramps linearly: -1e-3 * t
        let (t_last, sum_last) = *diag.series.last().unwrap();
        assert_relative_eq!(sum_last, -1e-3 * t_last as f64, max_relative = 1e-9);

        let alternating = PerturbationSpec::Additive {
            wx: NoiseKind::Constant { value: 0.0 },
            wz: NoiseKind::Alternating { amplitude: 1e-3 },
            seed: 0,
        };
        let alt = rollout(
            &map,
            &p,
            0.01,
            &AlgorithmState::zeros(2),
            &alternating,
            &opts,
        )
        .unwrap();
        let diag = integral_average_diagnostic(&alt, 0.5);
        assert!(diag.bounded);
        assert!(diag.max_abs <= 1e-3 + 1e-12);
    }

    #[test]
    fn certificate_serializes_every_constant() {
        let (p, _, _, es) = reference();
        let cert = compute_certificate(&p, &es, GammaChoice::Auto).unwrap();
        let json = serde_json::to_value(&cert).unwrap();
        for key in [
            "p_matrix",
            "lambda_min",
            "lambda_max",
            "lyapunov_residual",
            "c1",
            "c2",
            "c3",
            "c4",
            "c5",
            "c6",
            "c7",
            "c8",
            "c9",
            "c10",
            "c11",
            "c12",
            "c13",
            "c14",
            "c15",
            "gamma_star0",
            "gamma_star1",
            "gamma_star",
            "gamma",
            "q_gamma",
            "alpha",
            "mu",
            "rho",
            "tau",
        ] {
            assert!(json.get(key).is_some(), "missing key {key}");
        }
        assert!(json["p_matrix"].as_array().unwrap().len() == 2);
    }
}
