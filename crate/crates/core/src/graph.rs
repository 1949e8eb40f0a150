//! Undirected topologies, the local-averaging matrix and its spectrum.
//!
//! The averaging matrix `A` maps every node's value to the mean over its
//! closed neighborhood. For a `k`-regular connected graph the second-largest
//! singular value of `A` yields the lower bound `(1 - s2^2)(k + 1) / n` on the
//! linear-regularity constant of the consensus constraints.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node count must be positive")]
    Empty,
    #[error("invalid degree {k} for {n} nodes: {reason}")]
    InvalidDegree {
        n: usize,
        k: usize,
        reason: &'static str,
    },
    #[error("complete graph needs at least 2 nodes, got {0}")]
    TooSmall(usize),
    #[error("edge ({0}, {1}) is out of range or a self-loop")]
    BadEdge(usize, usize),
    #[error("edge probability {0} must lie in (0, 1]")]
    BadProbability(f64),
    #[error("no connected sample after {0} attempts")]
    NotConnectedAfter(usize),
    #[error("graph is disconnected")]
    Disconnected,
    #[error("edge list parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("singular value decomposition did not converge")]
    NoConvergence,
}

/// Simple undirected graph on nodes `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    adj: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from unordered pairs. Duplicate pairs collapse; self-loops
    /// and out-of-range endpoints are rejected.
    pub fn from_edges(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut sets = vec![BTreeSet::new(); n];
        for (i, j) in edges {
            if i == j || i >= n || j >= n {
                return Err(GraphError::BadEdge(i, j));
            }
            sets[i].insert(j);
            sets[j].insert(i);
        }
        Ok(Self {
            n,
            adj: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    /// Graph with no edges.
    pub fn empty(n: usize) -> Result<Self, GraphError> {
        Self::from_edges(n, std::iter::empty())
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Sorted neighbor list of `i` (never contains `i`).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adj[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj[i].len()
    }

    /// `{i} ∪ neighbors(i)` in ascending order.
    pub fn closed_neighborhood(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.adj[i].len() + 1);
        let mut inserted = false;
        for &j in &self.adj[i] {
            if !inserted && j > i {
                out.push(i);
                inserted = true;
            }
            out.push(j);
        }
        if !inserted {
            out.push(i);
        }
        out
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i].binary_search(&j).is_ok()
    }

    /// Edges as `(i, j)` with `i < j`, lexicographically sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, nb) in self.adj.iter().enumerate() {
            out.extend(nb.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Common degree when every node has the same degree.
    pub fn regular_degree(&self) -> Option<usize> {
        let k = self.degree(0);
        self.adj.iter().all(|nb| nb.len() == k).then_some(k)
    }

    /// Serializes to the edge-list text format: `n <count>` header, then one
    /// `i j` pair per line.
    pub fn to_edge_list(&self) -> String {
        let mut s = format!("n {}\n", self.n);
        for (i, j) in self.edges() {
            s.push_str(&format!("{i} {j}\n"));
        }
        s
    }
}

impl fmt::Display for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_edge_list())
    }
}

impl FromStr for Graph {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut n = None;
        let mut edges = Vec::new();
        for (idx, raw) in s.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let parse = |tok: &str| {
                tok.parse::<usize>().map_err(|e| GraphError::Parse {
                    line: line_no,
                    msg: format!("{tok:?}: {e}"),
                })
            };
            match (n, parts.as_slice()) {
                (None, ["n", count]) => n = Some(parse(count)?),
                (None, _) => {
                    return Err(GraphError::Parse {
                        line: line_no,
                        msg: "expected header `n <count>`".into(),
                    })
                }
                (Some(_), [a, b]) => edges.push((parse(a)?, parse(b)?)),
                (Some(_), _) => {
                    return Err(GraphError::Parse {
                        line: line_no,
                        msg: "expected `i j`".into(),
                    })
                }
            }
        }
        let n = n.ok_or(GraphError::Parse {
            line: 0,
            msg: "missing header".into(),
        })?;
        Graph::from_edges(n, edges)
    }
}

/// Circulant `k`-regular graph: node `i` links to `i ± 1, …, i ± ⌊k/2⌋`, plus
/// the antipode `i + n/2` when `k` is odd.
///
/// The circulant is realizable for every admissible `(n, k)`, so `seed` never
/// changes the result; it is kept so call sites stay stable if a randomized
/// construction is ever added.
pub fn build_k_regular(n: usize, k: usize, _seed: u64) -> Result<Graph, GraphError> {
    if n == 0 {
        return Err(GraphError::Empty);
    }
    let invalid = |reason| Err(GraphError::InvalidDegree { n, k, reason });
    if k == 0 {
        return invalid("degree must be positive");
    }
    if k >= n {
        return invalid("degree must be smaller than the node count");
    }
    if (n * k) % 2 == 1 {
        return invalid("n * k must be even");
    }
    let mut edges = Vec::with_capacity(n * k / 2);
    for i in 0..n {
        for off in 1..=k / 2 {
            edges.push((i, (i + off) % n));
        }
        if k % 2 == 1 && i < n / 2 {
            edges.push((i, i + n / 2));
        }
    }
    Graph::from_edges(n, edges)
}

pub fn build_complete(n: usize) -> Result<Graph, GraphError> {
    if n < 2 {
        return Err(GraphError::TooSmall(n));
    }
    Graph::from_edges(n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))))
}

/// Erdős–Rényi `G(n, p)` conditioned on connectivity (rejection sampling).
pub fn build_random(n: usize, p: f64, seed: u64) -> Result<Graph, GraphError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(GraphError::BadProbability(p));
    }
    const ATTEMPTS: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..ATTEMPTS {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        let g = Graph::from_edges(n, edges)?;
        if is_connected(&g) {
            return Ok(g);
        }
    }
    Err(GraphError::NotConnectedAfter(ATTEMPTS))
}

/// Breadth-first reachability from node 0.
pub fn is_connected(g: &Graph) -> bool {
    let mut seen = vec![false; g.n];
    let mut queue = std::collections::VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in g.neighbors(u) {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == g.n
}

/// Row-stochastic local-averaging matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragingMatrix(DMatrix<f64>);

impl AveragingMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

/// `a[i][j] = 1 / (1 + |N_i|)` for `j` in the closed neighborhood of `i`, zero elsewhere.
pub fn averaging_matrix(g: &Graph) -> AveragingMatrix {
    let n = g.n;
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        let w = 1.0 / (1 + g.degree(i)) as f64;
        a[(i, i)] = w;
        for &j in g.neighbors(i) {
            a[(i, j)] = w;
        }
    }
    AveragingMatrix(a)
}

/// Rank-one matrix with every entry `1/n`.
pub fn mean_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_element(n, n, 1.0 / n as f64)
}

/// All singular values of `a`, descending.
pub fn singular_values(a: &AveragingMatrix) -> Result<Vec<f64>, GraphError> {
    let svd =
        a.0.clone()
            .try_svd(false, false, 1e-15, 10_000)
            .ok_or(GraphError::NoConvergence)?;
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    Ok(s)
}

/// Second-largest singular value. A 1×1 matrix has none; 0 is returned.
pub fn second_largest_singular(a: &AveragingMatrix) -> Result<f64, GraphError> {
    let s = singular_values(a)?;
    Ok(s.get(1).copied().unwrap_or(0.0).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub sigma2: f64,
    /// `(1 - sigma2^2)(k + 1) / n`; `None` when the graph is irregular.
    pub eta_lower_bound: Option<f64>,
    /// Regular degree, `None` for irregular graphs.
    pub degree_k: Option<usize>,
}

/// Spectral summary with the linear-regularity lower bound for regular graphs.
pub fn eta_lower_bound(g: &Graph) -> Result<SpectralReport, GraphError> {
    if !is_connected(g) {
        return Err(GraphError::Disconnected);
    }
    let sigma2 = second_largest_singular(&averaging_matrix(g))?;
    let degree_k = g.regular_degree();
    let eta_lower_bound = degree_k.map(|k| (1.0 - sigma2 * sigma2) * (k + 1) as f64 / g.n as f64);
    Ok(SpectralReport {
        sigma2,
        eta_lower_bound,
        degree_k,
    })
}
