//! Independent oracles for the analysis: a deterministic full-batch reference
//! solver, a probe-based estimate of the linear-regularity constant, and the
//! variance-decomposition and positive-semidefiniteness checks behind the
//! regular-graph lower bound.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::engine::{average_projection, feasibility_distance, GlobalState};
use crate::graph::{
    averaging_matrix, eta_lower_bound, is_connected, mean_matrix, Graph, GraphError,
};
use crate::loss::{LossError, LossModel, Sample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("regular graph required")]
    Irregular,
    #[error("graph is disconnected")]
    Disconnected,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("reference solver does not support the {0:?} loss")]
    Unsupported(crate::loss::LossKind),
    #[error(
        "reference solver hit the iteration cap ({iterations}) with stationarity {residual:e}"
    )]
    IterationCap { iterations: usize, residual: f64 },
    #[error("empty dataset")]
    Empty,
    #[error("state has {got} nodes, graph has {expected}")]
    Shape { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceOptimum {
    pub beta_star: Vec<f64>,
    pub objective_star: f64,
    /// Stationarity (gradient-mapping norm) reached.
    pub residual: f64,
    pub solver_tolerance: f64,
    pub iterations: usize,
}

/// Full-batch proximal gradient descent with backtracking.
#[derive(Debug, Clone)]
pub struct ReferenceSolver {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub init: Option<Vec<f64>>,
}

impl Default for ReferenceSolver {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 200_000,
            init: None,
        }
    }
}

/// Sample weights for the node-averaged empirical objective: each node's
/// share counts `1/N`, split evenly among its samples. Without a partition
/// all samples weigh the same.
fn objective_weights(ds: &Dataset) -> Vec<(&Sample, f64)> {
    if ds.partition.is_empty() {
        let w = 1.0 / ds.samples.len() as f64;
        return ds.samples.iter().map(|s| (s, w)).collect();
    }
    let n = ds.partition.len() as f64;
    ds.partition
        .iter()
        .flat_map(|share| {
            let w = 1.0 / (n * share.len() as f64);
            share.iter().map(move |&i| (&ds.samples[i], w))
        })
        .collect()
}

impl ReferenceSolver {
    pub fn solve(&self, model: &LossModel, ds: &Dataset) -> Result<ReferenceOptimum, VerifyError> {
        if ds.samples.is_empty() {
            return Err(VerifyError::Empty);
        }
        let weighted = objective_weights(ds);
        let p = model.param_len();
        let smooth = |beta: &[f64], grad: Option<&mut [f64]>| -> Result<f64, VerifyError> {
            model
                .smooth_objective(beta, &weighted, grad)
                .ok_or(VerifyError::Unsupported(model.kind()))?
                .map_err(VerifyError::from)
        };

        // Accelerated proximal gradient with gradient-based restart; the
        // stationarity test is evaluated at the extrapolated point `y`.
        let mut x = self.init.clone().unwrap_or_else(|| vec![0.0; p]);
        if x.len() != p {
            return Err(VerifyError::Shape {
                expected: p,
                got: x.len(),
            });
        }
        let mut y = x.clone();
        let mut grad = vec![0.0; p];
        let mut candidate = vec![0.0; p];
        let mut t = 1.0f64;
        let mut lipschitz = 1.0f64;
        let mut residual = f64::INFINITY;
        for it in 0..self.max_iterations {
            let f = smooth(&y, Some(&mut grad))?;
            loop {
                let step = 1.0 / lipschitz;
                for ((c, b), g) in candidate.iter_mut().zip(&y).zip(&grad) {
                    *c = b - step * g;
                }
                model.l1_prox(&mut candidate, step);
                let f_new = smooth(&candidate, None)?;
                let mut lin = 0.0;
                let mut sq = 0.0;
                for ((c, b), g) in candidate.iter().zip(&y).zip(&grad) {
                    lin += g * (c - b);
                    sq += (c - b) * (c - b);
                }
                if f_new <= f + lin + 0.5 * lipschitz * sq + 1e-15 * f.abs().max(1.0)
                    || lipschitz > 1e30
                {
                    residual = lipschitz * sq.sqrt();
                    break;
                }
                lipschitz *= 2.0;
            }
            if residual <= self.tolerance {
                return Ok(ReferenceOptimum {
                    objective_star: f + model.l1_penalty(&y),
                    beta_star: y,
                    residual,
                    solver_tolerance: self.tolerance,
                    iterations: it,
                });
            }
            let restart = y
                .iter()
                .zip(&candidate)
                .zip(&x)
                .map(|((yv, c), xv)| (yv - c) * (c - xv))
                .sum::<f64>()
                > 0.0;
            let t_next = if restart {
                1.0
            } else {
                0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt())
            };
            let momentum = if restart { 0.0 } else { (t - 1.0) / t_next };
            for ((yv, c), xv) in y.iter_mut().zip(&candidate).zip(&x) {
                *yv = c + momentum * (c - xv);
            }
            x.copy_from_slice(&candidate);
            t = t_next;
            lipschitz = (lipschitz * 0.9).max(1e-12);
        }
        Err(VerifyError::IterationCap {
            iterations: self.max_iterations,
            residual,
        })
    }
}

pub fn solve_reference(
    model: &LossModel,
    ds: &Dataset,
    tolerance: f64,
) -> Result<ReferenceOptimum, VerifyError> {
    ReferenceSolver {
        tolerance,
        ..Default::default()
    }
    .solve(model, ds)
}

/// Node-averaged empirical objective (smooth part plus L1 penalty).
pub fn empirical_objective(
    model: &LossModel,
    ds: &Dataset,
    beta: &[f64],
) -> Result<f64, VerifyError> {
    let weighted = objective_weights(ds);
    let f = model
        .smooth_objective(beta, &weighted, None)
        .ok_or(VerifyError::Unsupported(model.kind()))??;
    Ok(f + model.l1_penalty(beta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityEstimate {
    pub eta_hat: f64,
    pub samples_used: usize,
    pub lemma_bound: Option<f64>,
    pub bound_satisfied: Option<bool>,
}

/// `max_i ‖x − Π_i(x)‖² / ‖x − Π(x)‖²` for one probe, or `None` when the probe
/// is (numerically) already in consensus.
pub fn regularity_ratio(graph: &Graph, x: &GlobalState) -> Option<f64> {
    let total = feasibility_distance(x);
    if total < 1e-12 {
        return None;
    }
    let mut worst = 0.0f64;
    for m in 0..graph.node_count() {
        let mut y = x.clone();
        average_projection(&mut y, m, graph);
        let d: f64 = x
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        worst = worst.max(d);
    }
    Some(worst / total)
}

/// Running minimum of the regularity ratio over Gaussian probes.
pub fn estimate_eta(
    graph: &Graph,
    probes: usize,
    seed: u64,
) -> Result<RegularityEstimate, VerifyError> {
    if !is_connected(graph) {
        return Err(VerifyError::Disconnected);
    }
    let n = graph.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eta_hat = 1.0f64;
    let mut used = 0;
    for _ in 0..probes {
        let values: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(r) = regularity_ratio(graph, &GlobalState::from_scalars(&values)) {
            eta_hat = eta_hat.min(r);
            used += 1;
        }
    }
    Ok(RegularityEstimate {
        eta_hat,
        samples_used: used,
        lemma_bound: None,
        bound_satisfied: None,
    })
}

/// Combines the spectral lower bound with the probe estimate.
pub fn verify_lemma_bound(
    graph: &Graph,
    probes: usize,
    seed: u64,
) -> Result<RegularityEstimate, VerifyError> {
    let report = eta_lower_bound(graph).map_err(|e| match e {
        GraphError::Disconnected => VerifyError::Disconnected,
        other => other.into(),
    })?;
    let bound = report.eta_lower_bound.ok_or(VerifyError::Irregular)?;
    let mut est = estimate_eta(graph, probes, seed)?;
    est.lemma_bound = Some(bound);
    est.bound_satisfied = Some(est.eta_hat >= bound - 1e-9);
    Ok(est)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotalVariance {
    pub var_y: f64,
    pub expected_conditional_var: f64,
    pub var_conditional_mean: f64,
    pub residual: f64,
}

/// Law-of-total-variance terms for `Y` uniform over the node values and `I`
/// selecting a closed neighborhood. Exact only when every node lies in the
/// same number of closed neighborhoods, hence the regularity requirement.
pub fn total_variance_identity(
    state: &GlobalState,
    graph: &Graph,
) -> Result<TotalVariance, VerifyError> {
    graph.regular_degree().ok_or(VerifyError::Irregular)?;
    let n = graph.node_count();
    if state.n_nodes() != n {
        return Err(VerifyError::Shape {
            expected: n,
            got: state.n_nodes(),
        });
    }
    let inv_n = 1.0 / n as f64;
    let var_y = inv_n * feasibility_distance(state);

    let mean = state.mean();
    let mut within = 0.0;
    let mut between = 0.0;
    for i in 0..n {
        let hood = graph.closed_neighborhood(i);
        let mut local = vec![0.0; state.dim()];
        for &j in &hood {
            for (a, b) in local.iter_mut().zip(state.node(j)) {
                *a += b;
            }
        }
        local.iter_mut().for_each(|v| *v /= hood.len() as f64);
        let spread: f64 = hood
            .iter()
            .map(|&j| {
                state
                    .node(j)
                    .iter()
                    .zip(&local)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / hood.len() as f64;
        within += inv_n * spread;
        between += inv_n
            * local
                .iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
    }
    Ok(TotalVariance {
        var_y,
        expected_conditional_var: within,
        var_conditional_mean: between,
        residual: (var_y - within - between).abs(),
    })
}

/// `(1/N)‖(A − Ā)β‖²` computed by explicit matrix products, one column of
/// parameters at a time.
pub fn conditional_mean_variance_matrix_form(state: &GlobalState, graph: &Graph) -> f64 {
    let n = graph.node_count();
    let diff = averaging_matrix(graph).into_inner() - mean_matrix(n);
    let mut total = 0.0;
    for c in 0..state.dim() {
        let col = nalgebra::DVector::from_iterator(n, state.rows().map(|r| r[c]));
        total += (&diff * col).norm_squared();
    }
    total / n as f64
}

/// Smallest eigenvalue of `σ₂²(I−Ā)ᵀ(I−Ā) − (A−Ā)ᵀ(A−Ā)`.
pub fn psd_certificate(graph: &Graph) -> Result<f64, VerifyError> {
    let report = eta_lower_bound(graph).map_err(|e| match e {
        GraphError::Disconnected => VerifyError::Disconnected,
        other => other.into(),
    })?;
    report.degree_k.ok_or(VerifyError::Irregular)?;
    let n = graph.node_count();
    let a = averaging_matrix(graph).into_inner();
    let abar = mean_matrix(n);
    let i_minus = DMatrix::<f64>::identity(n, n) - &abar;
    let a_minus = &a - &abar;
    let s2 = report.sigma2 * report.sigma2;
    let m = i_minus.transpose() * &i_minus * s2 - a_minus.transpose() * &a_minus;
    // symmetrize against round-off before the symmetric solver
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    Ok(eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub graph: GraphSummary,
    pub sigma2: f64,
    pub lemma_bound: f64,
    pub eta_hat: f64,
    pub probes: usize,
    pub residuals: ResidualSummary,
    pub min_eigenvalue: f64,
    pub pass: PassFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub n: usize,
    pub k: usize,
    pub edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub states: usize,
    pub total_variance_max: f64,
    /// Largest `Var(E[Y|I]) − σ₂² Var(Y)`; nonpositive when the key inequality holds.
    pub contraction_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassFlags {
    pub lemma_bound: bool,
    pub total_variance: bool,
    pub psd: bool,
    pub all: bool,
}

pub const IDENTITY_TOLERANCE: f64 = 1e-10;

/// Runs every certificate on a regular connected graph.
pub fn verification_report(
    graph: &Graph,
    probes: usize,
    states: usize,
    seed: u64,
) -> Result<VerificationReport, VerifyError> {
    let k = graph.regular_degree().ok_or(VerifyError::Irregular)?;
    let est = verify_lemma_bound(graph, probes, seed)?;
    let sigma2 = eta_lower_bound(graph)?.sigma2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let n = graph.node_count();
    let mut tv_max = 0.0f64;
    let mut contraction_max = f64::NEG_INFINITY;
    for _ in 0..states {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let st = GlobalState::from_rows(rows);
        let tv = total_variance_identity(&st, graph)?;
        tv_max = tv_max.max(tv.residual);
        contraction_max = contraction_max.max(tv.var_conditional_mean - sigma2 * sigma2 * tv.var_y);
    }
    let min_eigenvalue = psd_certificate(graph)?;
    let lemma_ok = est.bound_satisfied == Some(true);
    let tv_ok = tv_max <= IDENTITY_TOLERANCE && contraction_max <= IDENTITY_TOLERANCE;
    let psd_ok = min_eigenvalue >= -IDENTITY_TOLERANCE;
    Ok(VerificationReport {
        graph: GraphSummary {
            n,
            k,
            edges: graph.edge_count(),
        },
        sigma2,
        lemma_bound: est.lemma_bound.unwrap_or(f64::NAN),
        eta_hat: est.eta_hat,
        probes: est.samples_used,
        residuals: ResidualSummary {
            states,
            total_variance_max: tv_max,
            contraction_max,
        },
        min_eigenvalue,
        pass: PassFlags {
            lemma_bound: lemma_ok,
            total_variance: tv_ok,
            psd: psd_ok,
            all: lemma_ok && tv_ok && psd_ok,
        },
    })
}
