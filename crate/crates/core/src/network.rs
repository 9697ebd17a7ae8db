//! Communication graphs and the weight matrices built on them.
//!
//! The Wang-Elia algorithm uses a symmetric matrix `K` with
//! `K = K^T`, `ker K = span{1}` and `sigma(K) c [0, 1)`; Gradient Tracking
//! uses a row-stochastic `R` and a column-stochastic `C`, both matching the
//! graph sparsity. Constructors validate every invariant and refuse matrices
//! with boundary or out-of-range spectra instead of rescaling them silently.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, DispersionBasis, LinalgError};

/// Spectral slack required below the upper bound: `lambda_max <= 1 - 1e-9`.
pub const SPECTRAL_MARGIN: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("graph must have at least 2 vertices, got {0}")]
    TooSmall(usize),
    #[error("vertex id {0} out of range 1..={1}")]
    VertexOutOfRange(usize, usize),
    #[error("self-loop at vertex {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("graph is not connected")]
    Disconnected,
    #[error("edge list line {line}: {reason}")]
    EdgeListParse { line: usize, reason: String },
    #[error("scale must lie in (0, 1], got {0}")]
    InvalidScale(f64),
    #[error("self weight must lie in (0, 1), got {0}")]
    InvalidSelfWeight(f64),
    #[error("edge ({0}, {1}) has non-positive weight {2}")]
    NonPositiveWeight(usize, usize, f64),
    #[error("weight given for non-edge ({0}, {1})")]
    ExtraWeight(usize, usize),
    #[error("missing weight for edge ({0}, {1})")]
    MissingWeight(usize, usize),
    #[error("spectrum violation: eigenvalue {eigenvalue} outside [0, 1)")]
    SpectrumViolation { eigenvalue: f64 },
    #[error("constructed matrix violates invariant: {0}")]
    InvariantViolation(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A simple, connected, undirected graph over vertices `1..=n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

fn normalize_edge(i: usize, j: usize) -> (usize, usize) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

impl Graph {
    /// Builds a graph, rejecting self-loops, duplicate edges, out-of-range
    /// ids and disconnected topologies.
    pub fn new(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, NetworkError> {
        if n < 2 {
            return Err(NetworkError::TooSmall(n));
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i == j {
                return Err(NetworkError::SelfLoop(i));
            }
            for v in [i, j] {
                if v == 0 || v > n {
                    return Err(NetworkError::VertexOutOfRange(v, n));
                }
            }
            let e = normalize_edge(i, j);
            if !set.insert(e) {
                return Err(NetworkError::DuplicateEdge(e.0, e.1));
            }
        }
        let g = Graph { n, edges: set };
        if !g.is_connected() {
            return Err(NetworkError::Disconnected);
        }
        Ok(g)
    }

    /// Parses a text edge list: one `i j [weight]` per line, 1-based vertex
    /// ids, `#` starts a comment. The vertex count is the largest id seen.
    /// Either every edge carries a weight or none does; returns the weights
    /// when present.
    #[allow(clippy::type_complexity)]
    pub fn parse_edge_list(
        text: &str,
    ) -> Result<(Self, Option<BTreeMap<(usize, usize), f64>>), NetworkError> {
        let mut edges = Vec::new();
        let mut weights = BTreeMap::new();
        let mut saw_weight = false;
        let mut saw_bare = false;
        let mut max_id = 0usize;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut parts = content.split_whitespace();
            let parse_id = |tok: Option<&str>| -> Result<usize, NetworkError> {
                tok.ok_or_else(|| NetworkError::EdgeListParse {
                    line,
                    reason: "expected `i j [weight]`".into(),
                })?
                .parse::<usize>()
                .map_err(|e| NetworkError::EdgeListParse {
                    line,
                    reason: format!("bad vertex id: {e}"),
                })
            };
            let i = parse_id(parts.next())?;
            let j = parse_id(parts.next())?;
            match parts.next() {
                Some(tok) => {
                    let w = tok
                        .parse::<f64>()
                        .map_err(|e| NetworkError::EdgeListParse {
                            line,
                            reason: format!("bad weight: {e}"),
                        })?;
                    weights.insert(normalize_edge(i, j), w);
                    saw_weight = true;
                }
                None => saw_bare = true,
            }
            if parts.next().is_some() {
                return Err(NetworkError::EdgeListParse {
                    line,
                    reason: "trailing tokens".into(),
                });
            }
            max_id = max_id.max(i).max(j);
            edges.push((i, j));
        }
        if saw_weight && saw_bare {
            return Err(NetworkError::EdgeListParse {
                line: 0,
                reason: "mix of weighted and unweighted edges".into(),
            });
        }
        let g = Graph::new(max_id, edges)?;
        Ok((g, saw_weight.then_some(weights)))
    }

    pub fn path(n: usize) -> Result<Self, NetworkError> {
        Graph::new(n, (1..n).map(|i| (i, i + 1)))
    }

    pub fn cycle(n: usize) -> Result<Self, NetworkError> {
        if n < 3 {
            return Err(NetworkError::TooSmall(n));
        }
        Graph::new(n, (1..n).map(|i| (i, i + 1)).chain([(n, 1)]))
    }

    pub fn complete(n: usize) -> Result<Self, NetworkError> {
        Graph::new(
            n,
            (1..=n).flat_map(move |i| ((i + 1)..=n).map(move |j| (i, j))),
        )
    }

    pub fn star(n: usize) -> Result<Self, NetworkError> {
        Graph::new(n, (2..=n).map(|j| (1, j)))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i != j && self.edges.contains(&normalize_edge(i, j))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.edges
            .iter()
            .filter(|&&(a, b)| a == i || b == i)
            .count()
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == i {
                    Some(b)
                } else if b == i {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return false;
        }
        let mut seen = vec![false; self.n + 1];
        let mut queue = VecDeque::from([1usize]);
        seen[1] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for w in self.neighbors(v) {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    queue.push_back(w);
                }
            }
        }
        count == self.n
    }
}

/// Symmetric consensus weight matrix with `K 1 = 0` and spectrum in `[0, 1)`.
#[derive(Debug, Clone)]
pub struct WeightMatrixK {
    k: DMatrix<f64>,
    edge_weights: BTreeMap<(usize, usize), f64>,
    n: usize,
}

impl WeightMatrixK {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    /// Positive weight of edge `(i, j)`, if it exists.
    pub fn edge_weight(&self, i: usize, j: usize) -> Option<f64> {
        self.edge_weights.get(&normalize_edge(i, j)).copied()
    }

    pub fn edge_weights(&self) -> &BTreeMap<(usize, usize), f64> {
        &self.edge_weights
    }
}

/// Assembles the consensus-matrix stencil from edge weights without any
/// validation: `K_ij = -k_ij` on edges, `K_ii = sum_j k_ij`. Useful for
/// report-style validation flows; [`build_k_custom`] is the checked path.
pub fn assemble_consensus_matrix(
    n: usize,
    weights: &BTreeMap<(usize, usize), f64>,
) -> DMatrix<f64> {
    assemble_k(n, weights)
}

/// The Metropolis weight rule `k_ij = scale / (1 + max(deg i, deg j))`.
pub fn metropolis_weights(g: &Graph, scale: f64) -> BTreeMap<(usize, usize), f64> {
    g.edges()
        .map(|(i, j)| {
            let d = g.degree(i).max(g.degree(j)) as f64;
            ((i, j), scale / (1.0 + d))
        })
        .collect()
}

fn assemble_k(n: usize, weights: &BTreeMap<(usize, usize), f64>) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(n, n);
    for (&(i, j), &w) in weights {
        let (a, b) = (i - 1, j - 1);
        k[(a, b)] = -w;
        k[(b, a)] = -w;
        k[(a, a)] += w;
        k[(b, b)] += w;
    }
    k
}

fn validate_weight_matrix(
    g: &Graph,
    weights: &BTreeMap<(usize, usize), f64>,
) -> Result<WeightMatrixK, NetworkError> {
    for (&(i, j), &w) in weights {
        if !g.has_edge(i, j) {
            return Err(NetworkError::ExtraWeight(i, j));
        }
        if !(w > 0.0) || !w.is_finite() {
            return Err(NetworkError::NonPositiveWeight(i, j, w));
        }
    }
    for (i, j) in g.edges() {
        if !weights.contains_key(&(i, j)) {
            return Err(NetworkError::MissingWeight(i, j));
        }
    }
    let n = g.n();
    let k = assemble_k(n, weights);

    let ones = nalgebra::DVector::from_element(n, 1.0);
    let kernel_resid = (&k * &ones).amax();
    if kernel_resid > 1e-12 * (1.0 + k.amax()) {
        return Err(NetworkError::InvariantViolation(format!(
            "K 1 = 0 fails with residual {kernel_resid:.3e}"
        )));
    }

    let eigs = linalg::symmetric_eigenvalues(&k)?;
    let (lo, hi) = (eigs[0], eigs[eigs.len() - 1]);
    if lo < -1e-12 || hi > 1.0 - SPECTRAL_MARGIN {
        let eigenvalue = if lo < -1e-12 { lo } else { hi };
        return Err(NetworkError::SpectrumViolation { eigenvalue });
    }

    // With connectivity and K 1 = 0, the dispersion block S^T K S must be
    // positive definite with spectrum in (0, 1).
    let basis = crate::linalg::build_dispersion_basis(n)?;
    let reduced = basis.s().tr_mul(&k) * basis.s();
    let red_eigs = linalg::symmetric_eigenvalues(&reduced)?;
    if red_eigs[0] <= 0.0 {
        return Err(NetworkError::InvariantViolation(format!(
            "S^T K S not positive definite (eigenvalue {})",
            red_eigs[0]
        )));
    }

    Ok(WeightMatrixK {
        k,
        edge_weights: weights.clone(),
        n,
    })
}

/// Metropolis weights `k_ij = scale / (1 + max(deg i, deg j))`.
///
/// The result is validated against every invariant; boundary spectra (a
/// largest eigenvalue at or above 1, which occurs for some topologies even
/// with `scale <= 1`) are rejected with [`NetworkError::SpectrumViolation`]
/// rather than rescaled. Sufficiently small scales (at most 1/2) always pass.
pub fn build_k_metropolis(g: &Graph, scale: f64) -> Result<WeightMatrixK, NetworkError> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(NetworkError::InvalidScale(scale));
    }
    validate_weight_matrix(g, &metropolis_weights(g, scale))
}

/// Assembles `K` from explicit positive edge weights and validates it.
pub fn build_k_custom(
    g: &Graph,
    weights: &BTreeMap<(usize, usize), f64>,
) -> Result<WeightMatrixK, NetworkError> {
    let normalized: BTreeMap<(usize, usize), f64> = weights
        .iter()
        .map(|(&(i, j), &w)| (normalize_edge(i, j), w))
        .collect();
    if normalized.len() != weights.len() {
        // two orientations of the same edge were supplied
        for &(i, j) in weights.keys() {
            let e = normalize_edge(i, j);
            if weights.contains_key(&e) && weights.contains_key(&(e.1, e.0)) {
                return Err(NetworkError::DuplicateEdge(e.0, e.1));
            }
        }
    }
    validate_weight_matrix(g, &normalized)
}

/// Row-stochastic `R` and column-stochastic `C` matching the graph.
#[derive(Debug, Clone)]
pub struct StochasticPair {
    r: DMatrix<f64>,
    c: DMatrix<f64>,
    n: usize,
}

impl StochasticPair {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// Wraps explicit `R` (row-stochastic) and `C` (column-stochastic)
    /// matrices after validating stochasticity, nonnegativity and sparsity.
    pub fn from_matrices(
        r: DMatrix<f64>,
        c: DMatrix<f64>,
        g: &Graph,
    ) -> Result<Self, NetworkError> {
        let n = g.n();
        for (name, m) in [("R", &r), ("C", &c)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(NetworkError::InvariantViolation(format!(
                    "{name} must be {n}x{n}"
                )));
            }
            if m.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(NetworkError::InvariantViolation(format!(
                    "{name} has negative or non-finite entries"
                )));
            }
            for i in 0..n {
                for j in 0..n {
                    if i != j && m[(i, j)] != 0.0 && !g.has_edge(i + 1, j + 1) {
                        return Err(NetworkError::InvariantViolation(format!(
                            "{name}[{},{}] nonzero off the graph",
                            i + 1,
                            j + 1
                        )));
                    }
                }
            }
        }
        for i in 0..n {
            let row_sum: f64 = r.row(i).sum();
            if (row_sum - 1.0).abs() > 1e-12 {
                return Err(NetworkError::InvariantViolation(format!(
                    "row {} of R sums to {row_sum}",
                    i + 1
                )));
            }
            let col_sum: f64 = c.column(i).sum();
            if (col_sum - 1.0).abs() > 1e-12 {
                return Err(NetworkError::InvariantViolation(format!(
                    "column {} of C sums to {col_sum}",
                    i + 1
                )));
            }
        }
        Ok(StochasticPair { r, c, n })
    }
}

/// Doubly stochastic `R = C = I - K'`, with `K'` a Metropolis matrix scaled
/// so that every diagonal entry of `R` is at least `self_weight`.
pub fn build_stochastic_pair(g: &Graph, self_weight: f64) -> Result<StochasticPair, NetworkError> {
    if !(self_weight > 0.0 && self_weight < 1.0) {
        return Err(NetworkError::InvalidSelfWeight(self_weight));
    }
    let n = g.n();
    let k_unit = assemble_k(n, &metropolis_weights(g, 1.0));
    let max_diag = (0..n).map(|i| k_unit[(i, i)]).fold(0.0, f64::max);
    debug_assert!(max_diag > 0.0, "connected graph has at least one edge");
    let scale = (1.0 - self_weight) / max_diag;
    let r = DMatrix::identity(n, n) - k_unit * scale;
    StochasticPair::from_matrices(r.clone(), r, g)
}

/// One validated condition in a [`KValidationReport`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Pass/fail report for the consensus-matrix conditions and derived facts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KValidationReport {
    pub checks: Vec<CheckResult>,
}

impl KValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Validates an arbitrary square matrix against the consensus-matrix
/// conditions on graph `g`: symmetry, kernel spanned by the ones vector,
/// spectrum in `[0, 1)`, sparsity conformance, plus the derived facts
/// `1^T K = 0` and that the dispersion block `S^T K S` is invertible and
/// Schur. All conditions are reported; none aborts the others.
pub fn validate_k(k: &DMatrix<f64>, g: &Graph) -> KValidationReport {
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        checks.push(CheckResult {
            name: name.to_string(),
            passed,
            detail,
        });
    };

    let n = g.n();
    let square = k.nrows() == n && k.ncols() == n;
    push(
        "shape",
        square,
        format!("{}x{} vs graph size {}", k.nrows(), k.ncols(), n),
    );
    if !square {
        return KValidationReport { checks };
    }

    let scale = 1.0 + k.amax();
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((k[(i, j)] - k[(j, i)]).abs());
        }
    }
    push(
        "symmetry",
        asym <= 1e-12 * scale,
        format!("max |K_ij - K_ji| = {asym:.3e}"),
    );

    let mut sparsity_ok = true;
    let mut sparsity_detail = String::from("off-diagonal pattern matches edge set");
    'outer: for i in 1..=n {
        for j in (i + 1)..=n {
            let v = k[(i - 1, j - 1)];
            if g.has_edge(i, j) {
                if !(v < 0.0) {
                    sparsity_ok = false;
                    sparsity_detail = format!("edge ({i}, {j}) has K_ij = {v} (expected < 0)");
                    break 'outer;
                }
            } else if v != 0.0 {
                sparsity_ok = false;
                sparsity_detail = format!("non-edge ({i}, {j}) has K_ij = {v}");
                break 'outer;
            }
        }
    }
    push("sparsity", sparsity_ok, sparsity_detail);

    let ones = nalgebra::DVector::from_element(n, 1.0);
    let k1 = (k * &ones).amax();
    push(
        "kernel_contains_ones",
        k1 <= 1e-12 * scale,
        format!("|K 1|_inf = {k1:.3e}"),
    );
    let tk1 = (k.tr_mul(&ones)).amax();
    push(
        "ones_left_kernel",
        tk1 <= 1e-12 * scale,
        format!("|1^T K|_inf = {tk1:.3e}"),
    );

    let sym = (k + k.transpose()) * 0.5;
    match linalg::symmetric_eigenvalues(&sym) {
        Ok(eigs) => {
            let (lo, hi) = (eigs[0], eigs[eigs.len() - 1]);
            push(
                "spectrum_lower",
                lo >= -1e-12,
                format!("smallest eigenvalue {lo:.6e}"),
            );
            push(
                "spectrum_upper",
                hi <= 1.0 - SPECTRAL_MARGIN,
                format!("largest eigenvalue {hi}"),
            );
            // kernel is exactly span{1}: second-smallest eigenvalue positive
            let lambda2 = eigs[1.min(eigs.len() - 1)];
            push(
                "kernel_dimension",
                lambda2 > 1e-12,
                format!("second-smallest eigenvalue {lambda2:.6e}"),
            );
        }
        Err(e) => push("spectrum_lower", false, format!("eigensolve failed: {e}")),
    }

    match linalg::build_dispersion_basis(n) {
        Ok(basis) => {
            let reduced = basis.s().tr_mul(&sym) * basis.s();
            match linalg::symmetric_eigenvalues(&reduced) {
                Ok(eigs) => {
                    let (lo, hi) = (eigs[0], eigs[eigs.len() - 1]);
                    push(
                        "dispersion_block_schur",
                        lo > 0.0 && hi < 1.0,
                        format!("S^T K S spectrum in [{lo:.6e}, {hi:.6e}]"),
                    );
                }
                Err(e) => push(
                    "dispersion_block_schur",
                    false,
                    format!("eigensolve failed: {e}"),
                ),
            }
        }
        Err(e) => push(
            "dispersion_block_schur",
            false,
            format!("basis construction failed: {e}"),
        ),
    }

    KValidationReport { checks }
}

/// Maps the original two-parameter form of the algorithm, with edge weights
/// `beta * a_ij` and gradient gain `alpha * beta`, onto `(K, gamma)`.
pub fn from_original_parameters(
    g: &Graph,
    alpha: f64,
    beta: f64,
    adjacency_weights: &BTreeMap<(usize, usize), f64>,
) -> Result<(WeightMatrixK, f64), NetworkError> {
    let scaled: BTreeMap<(usize, usize), f64> = adjacency_weights
        .iter()
        .map(|(&e, &a)| (e, beta * a))
        .collect();
    let k = build_k_custom(g, &scaled)?;
    Ok((k, alpha * beta))
}

pub fn basis_for(g: &Graph) -> Result<DispersionBasis, NetworkError> {
    Ok(linalg::build_dispersion_basis(g.n())?)
}
