//! Shared fixtures for the benchmark targets.

use disopt_core::network::{
    build_k_metropolis, build_stochastic_pair, Graph, StochasticPair, WeightMatrixK,
};
use disopt_core::problem::{make_quadratic_problem, ProblemInstance};

pub fn pair_setup() -> (ProblemInstance, WeightMatrixK, StochasticPair) {
    let p = make_quadratic_problem(&[(1.0, 1.0), (1.0, 4.0)]).unwrap();
    let g = Graph::new(2, [(1, 2)]).unwrap();
    let k = build_k_metropolis(&g, 0.4).unwrap();
    let rc = build_stochastic_pair(&g, 0.8).unwrap();
    (p, k, rc)
}

pub fn ring_setup(n: usize) -> (ProblemInstance, WeightMatrixK) {
    let params: Vec<(f64, f64)> = (0..n).map(|i| (1.0 + i as f64 * 0.1, i as f64)).collect();
    let p = make_quadratic_problem(&params).unwrap();
    let g = Graph::cycle(n).unwrap();
    let k = build_k_metropolis(&g, 0.5).unwrap();
    (p, k)
}
