//! Serial reference semantics of the randomized gradient/projection method.
//!
//! Each iteration selects one node uniformly at random and flips a coin: with
//! probability `p_grad` the node takes a local gradient step on a fresh
//! sample, otherwise its closed neighborhood is replaced by its mean (the
//! Euclidean projection onto that neighborhood's consensus set).

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::NodeOracle;
use crate::graph::Graph;
use crate::loss::{LossError, LossModel, Sample};
use crate::problem::Problem;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("non-finite subgradient at node {node}, iteration {k}")]
    NonFinite { node: usize, k: u64 },
    #[error("divergence guard: |beta_{node}| = {norm:e} exceeds {bound:e} at iteration {k}")]
    Diverged {
        node: usize,
        k: u64,
        norm: f64,
        bound: f64,
    },
    #[error("shape mismatch: expected {expected} parameters, got {got}")]
    Shape { expected: usize, got: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("invalid step schedule: {0}")]
    Schedule(String),
}

/// Stacked local variables, one row of `dim` parameters per node.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    n_nodes: usize,
    dim: usize,
    values: Vec<f64>,
}

impl GlobalState {
    pub fn zeros(n_nodes: usize, dim: usize) -> Self {
        Self {
            n_nodes,
            dim,
            values: vec![0.0; n_nodes * dim],
        }
    }

    /// Panics if the rows have different lengths or there are none.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let dim = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == dim), "ragged state rows");
        Self {
            n_nodes: rows.len(),
            dim,
            values: rows.concat(),
        }
    }

    /// Scalar-per-node state.
    pub fn from_scalars(values: &[f64]) -> Self {
        Self {
            n_nodes: values.len(),
            dim: 1,
            values: values.to_vec(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn node_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Node average `β̄`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for row in self.rows() {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        let inv = 1.0 / self.n_nodes as f64;
        m.iter_mut().for_each(|v| *v *= inv);
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    #[default]
    InverseK,
    InverseSqrtK,
}

/// `α_k = a`, `a / (b + k)` or `a / sqrt(b + k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    kind: ScheduleKind,
    a: f64,
    b: f64,
}

impl StepSchedule {
    pub fn new(kind: ScheduleKind, a: f64, b: f64) -> Result<Self, EngineError> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(EngineError::Schedule(format!("a = {a} must be positive")));
        }
        if kind != ScheduleKind::Constant && !(b > 0.0 && b.is_finite()) {
            return Err(EngineError::Schedule(format!("b = {b} must be positive")));
        }
        Ok(Self { kind, a, b })
    }

    pub fn constant(a: f64) -> Result<Self, EngineError> {
        Self::new(ScheduleKind::Constant, a, 1.0)
    }

    pub fn inverse_k(a: f64, b: f64) -> Result<Self, EngineError> {
        Self::new(ScheduleKind::InverseK, a, b)
    }

    pub fn inverse_sqrt_k(a: f64, b: f64) -> Result<Self, EngineError> {
        Self::new(ScheduleKind::InverseSqrtK, a, b)
    }

    #[cfg(test)]
    pub(crate) fn zero() -> Self {
        Self {
            kind: ScheduleKind::Constant,
            a: 0.0,
            b: 1.0,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn step_size(&self, k: u64) -> f64 {
        let k = k as f64;
        match self.kind {
            ScheduleKind::Constant => self.a,
            ScheduleKind::InverseK => self.a / (self.b + k),
            ScheduleKind::InverseSqrtK => self.a / (self.b + k).sqrt(),
        }
    }
}

/// `β_i ← β_i − α (1/N) g(β_i, v)`; every other node is untouched.
pub fn gradient_step(
    state: &mut GlobalState,
    node: usize,
    sample: &Sample,
    alpha: f64,
    model: &LossModel,
) -> Result<(), EngineError> {
    let mut g = vec![0.0; state.dim];
    gradient_step_with(state, node, sample, alpha, model, &mut g)
}

fn gradient_step_with(
    state: &mut GlobalState,
    node: usize,
    sample: &Sample,
    alpha: f64,
    model: &LossModel,
    scratch: &mut [f64],
) -> Result<(), EngineError> {
    if model.param_len() != state.dim {
        return Err(EngineError::Shape {
            expected: model.param_len(),
            got: state.dim,
        });
    }
    model.subgradient_into(state.node(node), sample, scratch)?;
    if scratch.iter().any(|g| !g.is_finite()) {
        return Err(EngineError::NonFinite { node, k: 0 });
    }
    let scale = alpha / state.n_nodes as f64;
    for (b, g) in state.node_mut(node).iter_mut().zip(scratch.iter()) {
        *b -= scale * g;
    }
    Ok(())
}

/// Replaces every value in `{m} ∪ N(m)` with their mean.
pub fn average_projection(state: &mut GlobalState, m: usize, graph: &Graph) {
    let hood = graph.closed_neighborhood(m);
    let dim = state.dim;
    let mut mean = vec![0.0; dim];
    for &j in &hood {
        for (a, b) in mean.iter_mut().zip(state.node(j)) {
            *a += b;
        }
    }
    let inv = 1.0 / hood.len() as f64;
    mean.iter_mut().for_each(|v| *v *= inv);
    for &j in &hood {
        state.node_mut(j).copy_from_slice(&mean);
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `d^k = Σ_i ‖β_i − β̄‖`.
pub fn consensus_distance(state: &GlobalState) -> f64 {
    let m = state.mean();
    state.rows().map(|r| sq_dist(r, &m).sqrt()).sum()
}

/// Squared distance to the consensus subspace, `Σ_i ‖β_i − β̄‖²`.
pub fn feasibility_distance(state: &GlobalState) -> f64 {
    let m = state.mean();
    state.rows().map(|r| sq_dist(r, &m)).sum()
}

/// `Σ_i ‖β_i − β*‖²`.
pub fn optimality_distance(state: &GlobalState, beta_star: &[f64]) -> Result<f64, EngineError> {
    if beta_star.len() != state.dim {
        return Err(EngineError::Shape {
            expected: state.dim,
            got: beta_star.len(),
        });
    }
    Ok(state.rows().map(|r| sq_dist(r, beta_star)).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub k: u64,
    pub d_k: f64,
    #[serde(rename = "DF")]
    pub df: f64,
    #[serde(rename = "DO")]
    pub do_: Option<f64>,
    pub objective: Option<f64>,
    pub pred_error: Option<f64>,
    pub grad_steps: u64,
    pub avg_steps: u64,
}

pub const TRACE_HEADER: &str = "k,d_k,DF,DO,objective,pred_error,grad_steps,avg_steps";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTrace {
    pub records: Vec<MetricsRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsTrace {
    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    pub fn first(&self) -> Option<&MetricsRecord> {
        self.records.first()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.k,
                r.d_k,
                r.df,
                opt(r.do_),
                opt(r.objective),
                opt(r.pred_error),
                r.grad_steps,
                r.avg_steps
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(TRACE_HEADER) {
            return Err("unexpected trace header".into());
        }
        let parse_opt = |f: &str| -> Result<Option<f64>, String> {
            if f.is_empty() {
                Ok(None)
            } else {
                f.parse().map(Some).map_err(|e| format!("{f:?}: {e}"))
            }
        };
        let mut records = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(format!("bad row {line:?}"));
            }
            let int = |s: &str| s.parse::<u64>().map_err(|e| format!("{s:?}: {e}"));
            let real = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
            records.push(MetricsRecord {
                k: int(f[0])?,
                d_k: real(f[1])?,
                df: real(f[2])?,
                do_: parse_opt(f[3])?,
                objective: parse_opt(f[4])?,
                pred_error: parse_opt(f[5])?,
                grad_steps: int(f[6])?,
                avg_steps: int(f[7])?,
            });
        }
        Ok(Self { records })
    }
}

/// Metric evaluation against an optional held-out set and reference optimum.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub model: LossModel,
    pub test_set: Vec<Sample>,
    pub beta_star: Option<Vec<f64>>,
}

impl Evaluator {
    pub fn record(
        &self,
        state: &GlobalState,
        k: u64,
        grad_steps: u64,
        avg_steps: u64,
    ) -> MetricsRecord {
        let mean = state.mean();
        let (objective, pred_error) = self.test_metrics(&mean);
        MetricsRecord {
            k,
            d_k: consensus_distance(state),
            df: feasibility_distance(state),
            do_: self
                .beta_star
                .as_ref()
                .and_then(|b| optimality_distance(state, b).ok()),
            objective,
            pred_error,
            grad_steps,
            avg_steps,
        }
    }

    /// Mean test loss and misclassification rate at `beta`.
    pub fn test_metrics(&self, beta: &[f64]) -> (Option<f64>, Option<f64>) {
        if self.test_set.is_empty() {
            return (None, None);
        }
        let n = self.test_set.len() as f64;
        let objective = self
            .test_set
            .iter()
            .map(|s| self.model.loss(beta, s))
            .sum::<Result<f64, _>>()
            .ok()
            .map(|t| t / n);
        let pred_error = self.model.is_classifier().then(|| {
            let wrong = self
                .test_set
                .iter()
                .filter(|s| self.model.predict(beta, &s.x) != self.model.true_class(s.y))
                .count();
            wrong as f64 / n
        });
        (objective, pred_error)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Gradient,
    Average,
}

/// Mutable run state shared by the serial loop and the slotted simulator.
/// Node-local randomness (samples, coin flips) lives in per-node streams so
/// that both drivers consume it identically.
pub struct Simulation {
    graph: Graph,
    model: LossModel,
    oracles: Vec<NodeOracle>,
    coins: Vec<ChaCha8Rng>,
    schedule: StepSchedule,
    p_grad: f64,
    state: GlobalState,
    evaluator: Evaluator,
    record_every: u64,
    max_norm: f64,
    budget: u64,
    k: u64,
    grad_steps: u64,
    avg_steps: u64,
    trace: MetricsTrace,
    scratch: Vec<f64>,
}

impl Simulation {
    pub fn new(problem: Problem) -> Self {
        let n = problem.graph.node_count();
        let coins = (0..n)
            .map(|i| stream_rng(problem.master_seed, Stream::Coins, i as u64))
            .collect();
        let evaluator = Evaluator {
            model: problem.model.clone(),
            test_set: problem.test_set,
            beta_star: problem.reference.map(|r| r.beta_star),
        };
        let mut sim = Self {
            scratch: vec![0.0; problem.model.param_len()],
            graph: problem.graph,
            model: problem.model,
            oracles: problem.oracles,
            coins,
            schedule: problem.schedule,
            p_grad: problem.p_grad,
            state: problem.init,
            evaluator,
            record_every: problem.record_every.max(1),
            max_norm: problem.max_norm,
            budget: problem.iterations,
            k: 0,
            grad_steps: 0,
            avg_steps: 0,
            trace: MetricsTrace::default(),
        };
        sim.record();
        sim
    }

    fn record(&mut self) {
        let r = self
            .evaluator
            .record(&self.state, self.k, self.grad_steps, self.avg_steps);
        self.trace.records.push(r);
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn state(&self) -> &GlobalState {
        &self.state
    }

    pub fn iteration(&self) -> u64 {
        self.k
    }

    pub fn grad_steps(&self) -> u64 {
        self.grad_steps
    }

    pub fn avg_steps(&self) -> u64 {
        self.avg_steps
    }

    pub fn is_done(&self) -> bool {
        self.k >= self.budget
    }

    /// Decides gradient vs. average with `node`'s coin stream.
    pub fn flip(&mut self, node: usize) -> Action {
        let r: f64 = self.coins[node].random();
        if r < self.p_grad || self.p_grad >= 1.0 {
            Action::Gradient
        } else {
            Action::Average
        }
    }

    /// Executes `action` at `node` as one effective update.
    pub fn apply(&mut self, node: usize, action: Action) -> Result<(), EngineError> {
        match action {
            Action::Gradient => {
                let sample = self.oracles[node].draw();
                let alpha = self.schedule.step_size(self.k);
                gradient_step_with(
                    &mut self.state,
                    node,
                    &sample,
                    alpha,
                    &self.model,
                    &mut self.scratch,
                )
                .map_err(|e| match e {
                    EngineError::NonFinite { node, .. } => {
                        EngineError::NonFinite { node, k: self.k }
                    }
                    other => other,
                })?;
                let norm = self
                    .state
                    .node(node)
                    .iter()
                    .map(|b| b * b)
                    .sum::<f64>()
                    .sqrt();
                if !(norm <= self.max_norm) {
                    return Err(EngineError::Diverged {
                        node,
                        k: self.k,
                        norm,
                        bound: self.max_norm,
                    });
                }
                self.grad_steps += 1;
            }
            Action::Average => {
                average_projection(&mut self.state, node, &self.graph);
                self.avg_steps += 1;
            }
        }
        self.k += 1;
        if self.k.is_multiple_of(self.record_every) {
            self.record();
        }
        Ok(())
    }

    /// One full iteration at `node`: coin flip, then the chosen update.
    pub fn act(&mut self, node: usize) -> Result<Action, EngineError> {
        let action = self.flip(node);
        self.apply(node, action)?;
        Ok(action)
    }

    /// Appends a final record if the last iteration was not recorded.
    pub fn finish(mut self) -> (MetricsTrace, GlobalState) {
        if self.trace.last().map(|r| r.k) != Some(self.k) {
            self.record();
        }
        (self.trace, self.state)
    }
}

/// Serial loop: uniform node selection from the scheduler stream.
pub fn run_problem_serial(problem: Problem) -> Result<(MetricsTrace, GlobalState), EngineError> {
    let mut selector = stream_rng(problem.master_seed, Stream::Scheduler, 0);
    let n = problem.graph.node_count();
    let mut sim = Simulation::new(problem);
    while !sim.is_done() {
        let node = selector.random_range(0..n);
        sim.act(node)?;
    }
    Ok(sim.finish())
}
