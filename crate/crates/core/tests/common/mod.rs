//! Shared generators and oracles for the integration suites.

use std::collections::BTreeSet;

use disopt_core::dynamics::AlgorithmState;
use disopt_core::network::Graph;
use disopt_core::problem::{make_quadratic_problem, OptimalEquilibrium, ProblemInstance};
use disopt_core::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random spanning tree plus extra edges: connected by construction.
pub fn random_connected_graph(rng: &mut ChaCha8Rng, n: usize) -> Graph {
    let mut edges = BTreeSet::new();
    for v in 2..=n {
        let parent = rng.gen_range(1..v);
        edges.insert((parent, v));
    }
    for i in 1..=n {
        for j in (i + 1)..=n {
            if rng.gen_bool(0.3) {
                edges.insert((i, j));
            }
        }
    }
    Graph::new(n, edges).expect("spanning tree keeps the graph connected")
}

/// Random quadratic costs; some agents may be flat, the sum never is.
pub fn random_quadratic_problem(rng: &mut ChaCha8Rng, n: usize) -> ProblemInstance {
    let mut params: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let a = if rng.gen_bool(0.15) {
                0.0
            } else {
                rng.gen_range(0.2..3.0)
            };
            (a, rng.gen_range(-5.0..5.0))
        })
        .collect();
    if params.iter().map(|p| p.0).sum::<f64>() <= 0.0 {
        params[0].0 = 1.0;
    }
    make_quadratic_problem(&params).expect("positive total curvature")
}

pub fn random_state(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> AlgorithmState {
    AlgorithmState::new(
        DVector::from_fn(n, |_, _| rng.gen_range(-scale..scale)),
        DVector::from_fn(n, |_, _| rng.gen_range(-scale..scale)),
        0,
    )
}

/// Independent distance oracle: golden-section minimization of
/// `|(x - x*, z - z* - c 1)|` over the scalar `c`.
pub fn distance_oracle(x: &DVector<f64>, z: &DVector<f64>, eq: &OptimalEquilibrium) -> f64 {
    let dx = x - eq.x_star();
    let dz = z - eq.z_star();
    let value = |c: f64| -> f64 {
        let shifted = dz.map(|v| v - c);
        (dx.norm_squared() + shifted.norm_squared()).sqrt()
    };
    let span = 1.0 + 2.0 * dz.amax();
    let (mut lo, mut hi) = (-span, span);
    let ratio = (5.0f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = hi - ratio * (hi - lo);
        let b = lo + ratio * (hi - lo);
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

/// Least-squares per-step decay factor of a positive series.
#[allow(clippy::neg_cmp_op_on_partial_ord)] // the guard must reject NaN
pub fn fitted_rate(points: &[(usize, f64)]) -> Option<f64> {
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
