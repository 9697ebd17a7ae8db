//! Local costs, the stacked gradient map, and the optimal steady-state set.
//!
//! Each agent `i` owns a scalar cost `f_i`; the global objective is their
//! sum, assumed strongly convex with modulus `2 c0 N` in the normalization
//! used throughout (`xbar * sum_i (grad f_i(xbar + theta*) - grad f_i(theta*))
//! >= 2 c0 N xbar^2`), while each gradient is Lipschitz so that the stacked
//! map `Phi` has a global constant `ell`. For quadratics
//! `f_i = a_i (theta - b_i)^2` both constants are exact:
//! `ell = 2 max a_i`, `c0 = (sum a_i) / N`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use thiserror::Error;

use crate::linalg::{DispersionBasis, LinalgError};
use crate::network::WeightMatrixK;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("problem needs at least one cost")]
    Empty,
    #[error("curvatures must be nonnegative with positive sum")]
    NotStronglyConvex,
    #[error("gradient of cost {index} disagrees with finite differences at theta={at} (analytic {analytic}, numeric {numeric})")]
    GradientInconsistent {
        index: usize,
        at: f64,
        analytic: f64,
        numeric: f64,
    },
    #[error("declared Lipschitz constant {ell} violated: |Phi(x)-Phi(y)| = {observed} > ell |x-y| at sampled pair")]
    LipschitzViolated { ell: f64, observed: f64 },
    #[error("declared strong-convexity constant {c0} violated at xbar={at}")]
    StrongConvexityViolated { c0: f64, at: f64 },
    #[error("constant {name} must be positive, got {value}")]
    NonPositiveConstant { name: &'static str, value: f64 },
    #[error("gradient sum does not change sign on bracket [{lo}, {hi}]")]
    BracketError { lo: f64, hi: f64 },
    #[error("stepsize gamma must be positive, got {0}")]
    NonPositiveGamma(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("equilibrium residual {residual:.3e} exceeds tolerance {tolerance:.3e}")]
    EquilibriumResidual { residual: f64, tolerance: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A scalar cost with its gradient.
#[derive(Clone)]
pub enum LocalCost {
    Quadratic {
        curvature: f64,
        center: f64,
    },
    Custom {
        eval: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        grad: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    },
}

impl fmt::Debug for LocalCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LocalCost::Quadratic { curvature, center } => f
                .debug_struct("Quadratic")
                .field("curvature", curvature)
                .field("center", center)
                .finish(),
            LocalCost::Custom { .. } => f.write_str("Custom"),
        }
    }
}

impl LocalCost {
    pub fn quadratic(curvature: f64, center: f64) -> Self {
        LocalCost::Quadratic { curvature, center }
    }

    pub fn eval(&self, theta: f64) -> f64 {
        match self {
            LocalCost::Quadratic { curvature, center } => {
                curvature * (theta - center) * (theta - center)
            }
            LocalCost::Custom { eval, .. } => eval(theta),
        }
    }

    pub fn grad(&self, theta: f64) -> f64 {
        match self {
            LocalCost::Quadratic { curvature, center } => 2.0 * curvature * (theta - center),
            LocalCost::Custom { grad, .. } => grad(theta),
        }
    }
}

/// The validated problem data: costs, Lipschitz constant of the stacked
/// gradient, strong-convexity constant of the global cost, and the optimizer.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    costs: Vec<LocalCost>,
    lipschitz_ell: f64,
    strong_convexity_c0: f64,
    theta_star: f64,
}

impl ProblemInstance {
    pub fn n(&self) -> usize {
        self.costs.len()
    }

    pub fn costs(&self) -> &[LocalCost] {
        &self.costs
    }

    pub fn lipschitz_ell(&self) -> f64 {
        self.lipschitz_ell
    }

    pub fn strong_convexity_c0(&self) -> f64 {
        self.strong_convexity_c0
    }

    pub fn theta_star(&self) -> f64 {
        self.theta_star
    }

    /// Stacked gradient map `Phi(x) = (grad f_1(x_1), ..., grad f_N(x_N))`.
    pub fn phi(&self, x: &DVector<f64>) -> Result<DVector<f64>, ProblemError> {
        if x.len() != self.n() {
            return Err(ProblemError::DimensionMismatch {
                expected: self.n(),
                got: x.len(),
            });
        }
        Ok(DVector::from_fn(self.n(), |i, _| self.costs[i].grad(x[i])))
    }

    pub(crate) fn phi_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        for i in 0..self.n() {
            out[i] = self.costs[i].grad(x[i]);
        }
    }

    /// Sum of local gradients at a common point.
    pub fn gradient_sum(&self, theta: f64) -> f64 {
        self.costs.iter().map(|c| c.grad(theta)).sum()
    }
}

/// [`make_quadratic_problem`] with optional declared constants. A declared
/// Lipschitz constant must not undercut the exact one, and a declared
/// strong-convexity constant must not overshoot it; both are otherwise taken
/// as given (looser constants give a more conservative certificate).
pub fn make_quadratic_problem_with(
    params: &[(f64, f64)],
    ell_override: Option<f64>,
    c0_override: Option<f64>,
) -> Result<ProblemInstance, ProblemError> {
    let mut p = make_quadratic_problem(params)?;
    if let Some(ell) = ell_override {
        if !(ell > 0.0) {
            return Err(ProblemError::NonPositiveConstant {
                name: "ell",
                value: ell,
            });
        }
        if ell < p.lipschitz_ell * (1.0 - 1e-12) {
            return Err(ProblemError::LipschitzViolated {
                ell,
                observed: p.lipschitz_ell,
            });
        }
        p.lipschitz_ell = ell;
    }
    if let Some(c0) = c0_override {
        if !(c0 > 0.0) {
            return Err(ProblemError::NonPositiveConstant {
                name: "c0",
                value: c0,
            });
        }
        if c0 > p.strong_convexity_c0 * (1.0 + 1e-12) {
            return Err(ProblemError::StrongConvexityViolated { c0, at: 0.0 });
        }
        p.strong_convexity_c0 = c0;
    }
    Ok(p)
}

/// Builds the problem `f_i = a_i (theta - b_i)^2` from `(curvature, center)`
/// pairs. Individual curvatures may vanish; the sum must be positive.
pub fn make_quadratic_problem(params: &[(f64, f64)]) -> Result<ProblemInstance, ProblemError> {
    if params.is_empty() {
        return Err(ProblemError::Empty);
    }
    if params.iter().any(|&(a, _)| a < 0.0 || !a.is_finite()) {
        return Err(ProblemError::NotStronglyConvex);
    }
    let sum_a: f64 = params.iter().map(|&(a, _)| a).sum();
    if sum_a <= 0.0 {
        return Err(ProblemError::NotStronglyConvex);
    }
    let n = params.len() as f64;
    let theta_star = params.iter().map(|&(a, b)| a * b).sum::<f64>() / sum_a;
    let max_a = params.iter().map(|&(a, _)| a).fold(0.0, f64::max);
    let costs = params
        .iter()
        .map(|&(a, b)| LocalCost::quadratic(a, b))
        .collect();
    Ok(ProblemInstance {
        costs,
        lipschitz_ell: 2.0 * max_a,
        strong_convexity_c0: sum_a / n,
        theta_star,
    })
}

/// Number of sample points used by the statistical validation of custom
/// problems (gradient consistency, Lipschitz and strong-convexity checks).
const VALIDATION_SAMPLES: usize = 100;

/// Builds a problem from arbitrary costs with caller-supplied constants.
///
/// The constants and gradients are validated by sampling on
/// `[-range, range]`: analytic gradients against central finite differences
/// (step 1e-6, relative tolerance 1e-5), the Lipschitz bound on sampled
/// pairs, and the strong-convexity inequality on sampled offsets. The
/// optimizer is located by bisection on `[-range, range]`.
pub fn make_custom_problem(
    costs: Vec<LocalCost>,
    lipschitz_ell: f64,
    strong_convexity_c0: f64,
    range: f64,
) -> Result<ProblemInstance, ProblemError> {
    if costs.is_empty() {
        return Err(ProblemError::Empty);
    }
    if !(lipschitz_ell > 0.0) {
        return Err(ProblemError::NonPositiveConstant {
            name: "ell",
            value: lipschitz_ell,
        });
    }
    if !(strong_convexity_c0 > 0.0) {
        return Err(ProblemError::NonPositiveConstant {
            name: "c0",
            value: strong_convexity_c0,
        });
    }
    let theta_star = solve_theta_star(&costs, (-range, range))?;
    let p = ProblemInstance {
        costs,
        lipschitz_ell,
        strong_convexity_c0,
        theta_star,
    };
    validate_instance(&p, range)?;
    Ok(p)
}

fn validate_instance(p: &ProblemInstance, range: f64) -> Result<(), ProblemError> {
    let n = p.n();
    let step = 1e-6;
    for (index, cost) in p.costs.iter().enumerate() {
        for s in 0..VALIDATION_SAMPLES {
            let at = -range + 2.0 * range * (s as f64 + 0.5) / VALIDATION_SAMPLES as f64;
            let numeric = (cost.eval(at + step) - cost.eval(at - step)) / (2.0 * step);
            let analytic = cost.grad(at);
            let scale = 1.0 + analytic.abs().max(numeric.abs());
            if (analytic - numeric).abs() > 1e-5 * scale {
                return Err(ProblemError::GradientInconsistent {
                    index,
                    at,
                    analytic,
                    numeric,
                });
            }
        }
    }
    // Lipschitz bound of the stacked map on agent-wise sampled pairs.
    for s in 0..VALIDATION_SAMPLES {
        let a = -range + 2.0 * range * (s as f64) / VALIDATION_SAMPLES as f64;
        let b = a + range / VALIDATION_SAMPLES as f64;
        for cost in &p.costs {
            let observed = (cost.grad(a) - cost.grad(b)).abs();
            let bound = p.lipschitz_ell * (a - b).abs();
            if observed > bound * (1.0 + 1e-9) + 1e-12 {
                return Err(ProblemError::LipschitzViolated {
                    ell: p.lipschitz_ell,
                    observed,
                });
            }
        }
    }
    // Strong convexity of the global cost around the optimizer.
    for s in 0..VALIDATION_SAMPLES {
        let offset = -range + 2.0 * range * (s as f64 + 0.5) / VALIDATION_SAMPLES as f64;
        if offset.abs() < 1e-9 {
            continue;
        }
        let lhs = offset * (p.gradient_sum(offset + p.theta_star) - p.gradient_sum(p.theta_star));
        let rhs = 2.0 * p.strong_convexity_c0 * n as f64 * offset * offset;
        if lhs < rhs * (1.0 - 1e-9) - 1e-12 {
            return Err(ProblemError::StrongConvexityViolated {
                c0: p.strong_convexity_c0,
                at: offset,
            });
        }
    }
    Ok(())
}

/// Finds the optimizer as the root of the gradient sum: bisection to a width
/// of 1e-12, then one finite-difference Newton polish.
pub fn solve_theta_star(costs: &[LocalCost], bracket: (f64, f64)) -> Result<f64, ProblemError> {
    let grad_sum = |theta: f64| -> f64 { costs.iter().map(|c| c.grad(theta)).sum() };
    let (mut lo, mut hi) = bracket;
    if lo > hi {
        std::mem::swap(&mut lo, &mut hi);
    }
    let (glo, ghi) = (grad_sum(lo), grad_sum(hi));
    if glo == 0.0 {
        return Ok(lo);
    }
    if ghi == 0.0 {
        return Ok(hi);
    }
    if glo.signum() == ghi.signum() {
        return Err(ProblemError::BracketError { lo, hi });
    }
    let mut flo = glo;
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        let fmid = grad_sum(mid);
        if fmid == 0.0 {
            return Ok(mid);
        }
        if fmid.signum() == flo.signum() {
            lo = mid;
            flo = fmid;
        } else {
            hi = mid;
        }
    }
    let mut root = 0.5 * (lo + hi);
    let h = 1e-6;
    let slope = (grad_sum(root + h) - grad_sum(root - h)) / (2.0 * h);
    if slope.abs() > 0.0 {
        let polished = root - grad_sum(root) / slope;
        if polished.is_finite() && grad_sum(polished).abs() <= grad_sum(root).abs() {
            root = polished;
        }
    }
    Ok(root)
}

/// The distinguished optimal equilibrium: consensus at the optimizer for the
/// estimates, and the unique zero-mean auxiliary state compatible with it.
#[derive(Debug, Clone)]
pub struct OptimalEquilibrium {
    x_star: DVector<f64>,
    z_star: DVector<f64>,
    gamma: f64,
    theta_star: f64,
}

impl OptimalEquilibrium {
    pub fn x_star(&self) -> &DVector<f64> {
        &self.x_star
    }

    pub fn z_star(&self) -> &DVector<f64> {
        &self.z_star
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn theta_star(&self) -> f64 {
        self.theta_star
    }

    pub fn n(&self) -> usize {
        self.x_star.len()
    }
}

/// Constructs `x* = 1 theta*`, `z* = -gamma S (S^T K S)^{-1} S^T Phi(x*)` and
/// verifies the fixed-point residuals `|K x* + K z* + gamma Phi(x*)| <= 1e-10`
/// and `|K x*| <= 1e-12`.
pub fn build_equilibrium(
    p: &ProblemInstance,
    k: &WeightMatrixK,
    basis: &DispersionBasis,
    gamma: f64,
) -> Result<OptimalEquilibrium, ProblemError> {
    if !(gamma > 0.0) {
        return Err(ProblemError::NonPositiveGamma(gamma));
    }
    let n = p.n();
    if k.n() != n || basis.n() != n {
        return Err(ProblemError::DimensionMismatch {
            expected: n,
            got: if k.n() != n { k.n() } else { basis.n() },
        });
    }
    let x_star = DVector::from_element(n, p.theta_star());
    let phi_star = p.phi(&x_star)?;
    let s = basis.s();
    let reduced = s.tr_mul(k.matrix()) * s;
    let rhs = s.tr_mul(&phi_star);
    let sol = reduced
        .lu()
        .solve(&rhs)
        .ok_or_else(|| LinalgError::SolveFailed("S^T K S is singular".into()))?;
    let z_star = s * sol * (-gamma);

    let fixed_point = (k.matrix() * &x_star + k.matrix() * &z_star + &phi_star * gamma).norm();
    if fixed_point > 1e-10 {
        return Err(ProblemError::EquilibriumResidual {
            residual: fixed_point,
            tolerance: 1e-10,
        });
    }
    let consensus = (k.matrix() * &x_star).norm();
    if consensus > 1e-12 {
        return Err(ProblemError::EquilibriumResidual {
            residual: consensus,
            tolerance: 1e-12,
        });
    }
    let mean_z = z_star.sum() / n as f64;
    if mean_z.abs() > 1e-12 * (1.0 + z_star.amax()) {
        return Err(ProblemError::EquilibriumResidual {
            residual: mean_z.abs(),
            tolerance: 1e-12,
        });
    }
    Ok(OptimalEquilibrium {
        x_star,
        z_star,
        gamma,
        theta_star: p.theta_star(),
    })
}

/// Average-dispersion error coordinates of a state relative to the optimal
/// equilibrium: `xi = T (x - x*)`, `zeta = T (z - z*)`.
#[derive(Debug, Clone)]
pub struct ErrorCoords {
    pub xi_avg: f64,
    pub xi_disp: DVector<f64>,
    pub zeta_avg: f64,
    pub zeta_disp: DVector<f64>,
}

impl ErrorCoords {
    /// Squared norm of the dispersion stack `(xi_disp, zeta_disp)`.
    pub fn disp_norm_squared(&self) -> f64 {
        self.xi_disp.norm_squared() + self.zeta_disp.norm_squared()
    }

    /// Inverse change of variables back to `(x, z)`.
    pub fn reconstruct(
        &self,
        eq: &OptimalEquilibrium,
        basis: &DispersionBasis,
    ) -> (DVector<f64>, DVector<f64>) {
        let s = basis.s();
        let mut x = s * &self.xi_disp;
        x.add_scalar_mut(self.xi_avg + eq.theta_star());
        let mut z = s * &self.zeta_disp + eq.z_star();
        z.add_scalar_mut(self.zeta_avg);
        (x, z)
    }
}

/// Error coordinates of `(x, z)`: `xi_avg = xbar - theta*`, `xi_disp = S^T x`,
/// `zeta_avg = zbar`, `zeta_disp = S^T (z - z*)`.
pub fn error_coordinates(
    x: &DVector<f64>,
    z: &DVector<f64>,
    eq: &OptimalEquilibrium,
    basis: &DispersionBasis,
) -> Result<ErrorCoords, ProblemError> {
    let n = eq.n();
    if x.len() != n || z.len() != n || basis.n() != n {
        return Err(ProblemError::DimensionMismatch {
            expected: n,
            got: x.len(),
        });
    }
    let nf = n as f64;
    let s = basis.s();
    Ok(ErrorCoords {
        xi_avg: x.sum() / nf - eq.theta_star(),
        xi_disp: s.tr_mul(x),
        zeta_avg: z.sum() / nf,
        zeta_disp: s.tr_mul(&(z - eq.z_star())),
    })
}

/// Distance of `(x, z)` to the optimal steady-state set.
///
/// The set contains the whole line `z* + span{1}` in the auxiliary variable,
/// so the average of `z - z*` does not contribute:
/// the distance equals `|(sqrt(N) xi_avg, xi_disp, zeta_disp)|`.
pub fn distance_to_optimal_set(
    x: &DVector<f64>,
    z: &DVector<f64>,
    eq: &OptimalEquilibrium,
    basis: &DispersionBasis,
) -> Result<f64, ProblemError> {
    let coords = error_coordinates(x, z, eq, basis)?;
    Ok((eq.n() as f64 * coords.xi_avg * coords.xi_avg + coords.disp_norm_squared()).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::build_dispersion_basis;
    use crate::network::{build_k_metropolis, Graph};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference_problem() -> ProblemInstance {
        make_quadratic_problem(&[(1.0, 1.0), (1.0, 4.0)]).unwrap()
    }

    #[test]
    fn quadratic_constants_are_exact() {
        let p = reference_problem();
        assert_relative_eq!(p.theta_star(), 2.5, max_relative = 1e-15);
        assert_relative_eq!(p.lipschitz_ell(), 2.0, max_relative = 1e-15);
        assert_relative_eq!(p.strong_convexity_c0(), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn equal_centers_give_that_center() {
        let p = make_quadratic_problem(&[(1.0, -3.0), (1.0, -3.0)]).unwrap();
        assert_relative_eq!(p.theta_star(), -3.0, max_relative = 1e-15);
    }

    #[test]
    fn flat_problems_are_rejected() {
        assert!(matches!(
            make_quadratic_problem(&[(0.0, 1.0), (0.0, 2.0)]),
            Err(ProblemError::NotStronglyConvex)
        ));
    }

    #[test]
    fn degenerate_individual_costs_are_allowed() {
        let p = make_quadratic_problem(&[(0.0, 100.0), (2.0, 5.0)]).unwrap();
        assert_relative_eq!(p.theta_star(), 5.0, max_relative = 1e-15);
        assert_relative_eq!(p.strong_convexity_c0(), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn theta_star_root_finding_matches_analytic() {
        let costs: Vec<LocalCost> = vec![
            LocalCost::quadratic(1.0, 1.0),
            LocalCost::quadratic(1.0, 4.0),
        ];
        let root = solve_theta_star(&costs, (-100.0, 100.0)).unwrap();
        assert_abs_diff_eq!(root, 2.5, epsilon = 1e-11);

        let single = vec![LocalCost::quadratic(1.0, 7.0)];
        let root = solve_theta_star(&single, (-100.0, 100.0)).unwrap();
        assert_abs_diff_eq!(root, 7.0, epsilon = 1e-11);

        assert!(matches!(
            solve_theta_star(&costs, (10.0, 20.0)),
            Err(ProblemError::BracketError { .. })
        ));
    }

    #[test]
    fn custom_costs_validate_and_solve() {
        // f(t) = t^2 + cos(t) summed with a quadratic; gradients supplied.
        let costs = vec![
            LocalCost::Custom {
                eval: Arc::new(|t: f64| t * t + t.cos()),
                grad: Arc::new(|t: f64| 2.0 * t - t.sin()),
            },
            LocalCost::quadratic(1.0, 4.0),
        ];
        // sum gradient is (4t - sin t - 8); strongly convex with 2*c0*N >= 3
        let p = make_custom_problem(costs, 3.0, 0.75, 10.0).unwrap();
        assert!(p.gradient_sum(p.theta_star()).abs() <= 1e-9);

        // a wrong hand-written gradient is caught by finite differences
        let broken = vec![LocalCost::Custom {
            eval: Arc::new(|t: f64| t * t),
            grad: Arc::new(|t: f64| 3.0 * t),
        }];
        assert!(matches!(
            make_custom_problem(broken, 3.0, 0.5, 10.0),
            Err(ProblemError::GradientInconsistent { .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences_everywhere() {
        let p = reference_problem();
        for (i, cost) in p.costs().iter().enumerate() {
            for s in 0..100 {
                let at = -10.0 + 20.0 * (s as f64 + 0.5) / 100.0;
                let fd = (cost.eval(at + 1e-6) - cost.eval(at - 1e-6)) / 2e-6;
                let an = cost.grad(at);
                assert!(
                    (fd - an).abs() <= 1e-5 * (1.0 + an.abs()),
                    "cost {i} at {at}"
                );
            }
        }
    }

    #[test]
    fn strong_convexity_certificate_holds_on_samples() {
        let p = reference_problem();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let offset: f64 = rng.gen_range(-10.0..10.0);
            if offset.abs() < 1e-6 {
                continue;
            }
            let lhs =
                offset * (p.gradient_sum(offset + p.theta_star()) - p.gradient_sum(p.theta_star()));
            let rhs = 2.0 * p.strong_convexity_c0() * 2.0 * offset * offset;
            assert!(lhs >= rhs * (1.0 - 1e-12));
        }
    }

    fn reference_equilibrium(
        gamma: f64,
    ) -> (
        ProblemInstance,
        WeightMatrixK,
        DispersionBasis,
        OptimalEquilibrium,
    ) {
        let p = reference_problem();
        let g = Graph::new(2, [(1, 2)]).unwrap();
        let k = build_k_metropolis(&g, 0.4).unwrap();
        let basis = build_dispersion_basis(2).unwrap();
        let eq = build_equilibrium(&p, &k, &basis, gamma).unwrap();
        (p, k, basis, eq)
    }

    #[test]
    fn equilibrium_matches_closed_form() {
        let (p, k, _basis, eq) = reference_equilibrium(0.1);
        assert_abs_diff_eq!(*eq.x_star(), DVector::from_element(2, 2.5), epsilon = 1e-14);
        // Phi(1 * 2.5) = (3, -3); z* = -gamma (3, -3) / (2 k) = (-0.75, 0.75)
        assert_abs_diff_eq!(
            *eq.z_star(),
            DVector::from_vec(vec![-0.75, 0.75]),
            epsilon = 1e-12
        );
        let resid = (k.matrix() * eq.x_star()
            + k.matrix() * eq.z_star()
            + p.phi(eq.x_star()).unwrap() * 0.1)
            .norm();
        assert!(resid <= 1e-12);
    }

    #[test]
    fn equilibrium_of_agreeing_costs_has_zero_auxiliary() {
        let p = make_quadratic_problem(&[(1.0, 2.0), (3.0, 2.0)]).unwrap();
        let g = Graph::new(2, [(1, 2)]).unwrap();
        let k = build_k_metropolis(&g, 0.4).unwrap();
        let basis = build_dispersion_basis(2).unwrap();
        let eq = build_equilibrium(&p, &k, &basis, 0.05).unwrap();
        assert!(eq.z_star().amax() <= 1e-13);
    }

    #[test]
    fn equilibrium_rejects_nonpositive_gamma() {
        let p = reference_problem();
        let g = Graph::new(2, [(1, 2)]).unwrap();
        let k = build_k_metropolis(&g, 0.4).unwrap();
        let basis = build_dispersion_basis(2).unwrap();
        assert!(matches!(
            build_equilibrium(&p, &k, &basis, 0.0),
            Err(ProblemError::NonPositiveGamma(_))
        ));
    }

    /// Independent oracle: minimize |(x - x*, z - z* - c 1)| over c by golden
    /// section on a wide bracket.
    fn distance_oracle(x: &DVector<f64>, z: &DVector<f64>, eq: &OptimalEquilibrium) -> f64 {
        let dx = x - eq.x_star();
        let dz = z - eq.z_star();
        let value = |c: f64| -> f64 {
            let shifted = dz.map(|v| v - c);
            (dx.norm_squared() + shifted.norm_squared()).sqrt()
        };
        let (mut lo, mut hi) = (-1.0 - 2.0 * dz.amax(), 1.0 + 2.0 * dz.amax());
        let phi = (5.0f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let a = hi - phi * (hi - lo);
            let b = lo + phi * (hi - lo);
            if value(a) < value(b) {
                hi = b;
            } else {
                lo = a;
            }
            if hi - lo < 1e-12 {
                break;
            }
        }
        value(0.5 * (lo + hi))
    }

    #[test]
    fn distance_vanishes_on_the_optimal_set() {
        let (_p, _k, basis, eq) = reference_equilibrium(0.1);
        let d = distance_to_optimal_set(eq.x_star(), eq.z_star(), &eq, &basis).unwrap();
        assert!(d <= 1e-12);
        // the whole fiber z* + c 1 is in the set
        for c in [-12.5, 0.3, 1e4] {
            let shifted = eq.z_star().add_scalar(c);
            let d = distance_to_optimal_set(eq.x_star(), &shifted, &eq, &basis).unwrap();
            assert!(d <= 1e-9, "c={c} gives distance {d}");
        }
    }

    #[test]
    fn distance_matches_one_dimensional_oracle() {
        let (_p, _k, basis, eq) = reference_equilibrium(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let x = DVector::from_fn(2, |_, _| rng.gen_range(-5.0..5.0));
            let z = DVector::from_fn(2, |_, _| rng.gen_range(-5.0..5.0));
            let fast = distance_to_optimal_set(&x, &z, &eq, &basis).unwrap();
            let slow = distance_oracle(&x, &z, &eq);
            assert_abs_diff_eq!(fast, slow, epsilon = 1e-6);
        }
    }

    #[test]
    fn error_coordinates_round_trip() {
        let (_p, _k, basis, eq) = reference_equilibrium(0.1);
        let coords = error_coordinates(eq.x_star(), eq.z_star(), &eq, &basis).unwrap();
        assert!(coords.xi_avg.abs() <= 1e-13);
        assert!(coords.xi_disp.amax() <= 1e-13);
        assert!(coords.zeta_avg.abs() <= 1e-13);
        assert!(coords.zeta_disp.amax() <= 1e-13);

        let shifted = eq.z_star().add_scalar(5.0);
        let coords = error_coordinates(eq.x_star(), &shifted, &eq, &basis).unwrap();
        assert_abs_diff_eq!(coords.zeta_avg, 5.0, epsilon = 1e-12);
        assert!(coords.zeta_disp.amax() <= 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let x = DVector::from_fn(2, |_, _| rng.gen_range(-8.0..8.0));
            let z = DVector::from_fn(2, |_, _| rng.gen_range(-8.0..8.0));
            let coords = error_coordinates(&x, &z, &eq, &basis).unwrap();
            let (xb, zb) = coords.reconstruct(&eq, &basis);
            assert!((&xb - &x).amax() <= 1e-12 * (1.0 + x.amax()));
            assert!((&zb - &z).amax() <= 1e-12 * (1.0 + z.amax()));
        }
    }
}
