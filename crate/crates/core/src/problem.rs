//! Materializes an [`ExperimentConfig`] into graph, loss, per-node oracles,
//! held-out data, optional reference optimum and initial state.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::config::{ConfigError, DataConfig, ExperimentConfig, InitConfig, TopologyKind};
use crate::data::{
    load_delimited, partition_round_robin, sample, synth_node_distributions, DataError, Dataset,
    DelimitedOptions, NodeDistribution, NodeOracle,
};
use crate::engine::{GlobalState, StepSchedule};
use crate::graph::{
    build_complete, build_k_regular, build_random, is_connected, Graph, GraphError,
};
use crate::loss::{LossKind, LossModel, Sample};
use crate::rng::{stream_rng, Stream};
use crate::verify::{ReferenceOptimum, ReferenceSolver, VerifyError};

#[derive(Debug, Error)]
pub enum SetupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid `topology`: {0}")]
    Graph(#[from] GraphError),
    #[error("invalid `data`: {0}")]
    Data(#[from] DataError),
    #[error("reference solver: {0}")]
    Reference(#[from] VerifyError),
}

impl SetupError {
    /// True for errors caused by the configuration itself.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            SetupError::Config(_) | SetupError::Graph(_) | SetupError::Data(_)
        )
    }
}

/// Everything a run needs, independent of the execution mode.
#[derive(Debug, Clone)]
pub struct Problem {
    pub graph: Graph,
    pub model: LossModel,
    pub oracles: Vec<NodeOracle>,
    pub init: GlobalState,
    pub schedule: StepSchedule,
    pub test_set: Vec<Sample>,
    pub reference: Option<ReferenceOptimum>,
    pub p_grad: f64,
    pub iterations: u64,
    pub record_every: u64,
    pub max_norm: f64,
    pub master_seed: u64,
}

pub fn build_graph(cfg: &ExperimentConfig) -> Result<Graph, SetupError> {
    let t = &cfg.topology;
    let g = match t.kind {
        TopologyKind::Regular => build_k_regular(t.n, t.k.unwrap_or(0), t.seed)?,
        TopologyKind::Complete => build_complete(t.n)?,
        TopologyKind::Random => build_random(t.n, t.p.unwrap_or(0.0), t.seed)?,
        TopologyKind::File => {
            let path = t.path.as_ref().expect("validated");
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Invalid {
                field: "topology.path".into(),
                msg: format!("{}: {e}", path.display()),
            })?;
            text.parse()?
        }
    };
    if !is_connected(&g) {
        return Err(GraphError::Disconnected.into());
    }
    Ok(g)
}

fn node_distributions(
    cfg: &ExperimentConfig,
    n: usize,
    divergence: f64,
    noise_std: f64,
) -> Vec<NodeDistribution> {
    let mut dists =
        synth_node_distributions(n, cfg.loss.d, cfg.loss.classes, divergence, cfg.master_seed);
    for d in &mut dists {
        d.noise_std = noise_std;
    }
    dists
}

fn test_from_mixture(dists: &[NodeDistribution], count: usize, seed: u64) -> Vec<Sample> {
    let mut rng = stream_rng(seed, Stream::TestSet, 0);
    (0..count)
        .map(|_| {
            let node = rng.random_range(0..dists.len());
            sample(&dists[node], &mut rng)
        })
        .collect()
}

impl Problem {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, SetupError> {
        cfg.validate()?;
        let graph = build_graph(cfg)?;
        let n = graph.node_count();
        let model = cfg.loss.model()?;
        let seed = cfg.master_seed;
        let solver = cfg.reference.as_ref().map(|r| ReferenceSolver {
            tolerance: r.tolerance,
            ..Default::default()
        });

        let (oracles, test_set, reference) = match &cfg.data {
            DataConfig::Synthetic {
                divergence,
                noise_std,
                samples_per_node,
            } => {
                let dists = node_distributions(cfg, n, *divergence, *noise_std);
                let test_set = test_from_mixture(&dists, cfg.test_size, seed);
                match samples_per_node {
                    Some(m) => {
                        let mut samples = Vec::with_capacity(n * m);
                        let mut partition = Vec::with_capacity(n);
                        for (i, dist) in dists.iter().enumerate() {
                            let mut rng = stream_rng(seed, Stream::TrainSet, i as u64);
                            partition.push((samples.len()..samples.len() + m).collect::<Vec<_>>());
                            samples.extend((0..*m).map(|_| sample(dist, &mut rng)));
                        }
                        let train = Dataset { samples, partition };
                        let reference = solver.map(|s| s.solve(&model, &train)).transpose()?;
                        (finite_oracles(train, seed), test_set, reference)
                    }
                    None => {
                        let reference = match (&solver, &cfg.reference) {
                            (Some(s), Some(r)) => {
                                let mut pooled = Vec::with_capacity(n * r.samples_per_node);
                                let mut partition = Vec::with_capacity(n);
                                for (i, dist) in dists.iter().enumerate() {
                                    let mut rng = stream_rng(seed, Stream::Reference, i as u64);
                                    partition.push(
                                        (pooled.len()..pooled.len() + r.samples_per_node).collect(),
                                    );
                                    pooled.extend(
                                        (0..r.samples_per_node).map(|_| sample(dist, &mut rng)),
                                    );
                                }
                                Some(s.solve(
                                    &model,
                                    &Dataset {
                                        samples: pooled,
                                        partition,
                                    },
                                )?)
                            }
                            _ => None,
                        };
                        let oracles = dists
                            .into_iter()
                            .enumerate()
                            .map(|(i, dist)| NodeOracle::Synthetic {
                                dist,
                                rng: stream_rng(seed, Stream::Samples, i as u64),
                            })
                            .collect();
                        (oracles, test_set, reference)
                    }
                }
            }
            DataConfig::File {
                path,
                label_column,
                header,
                scale,
                test_fraction,
            } => {
                let opts = DelimitedOptions {
                    header: *header,
                    scale: *scale,
                };
                let mut ds =
                    load_delimited(path, cfg.loss.d, cfg.loss.classes, *label_column, &opts)?;
                ds.samples
                    .shuffle(&mut stream_rng(seed, Stream::TestSet, 1));
                let test_count = (ds.len() as f64 * test_fraction).round() as usize;
                let test = ds.split_off_tail(test_count);
                let train = partition_round_robin(ds, n)?;
                let reference = solver.map(|s| s.solve(&model, &train)).transpose()?;
                (finite_oracles(train, seed), test.samples, reference)
            }
        };

        let dim = model.param_len();
        let init = match cfg.init {
            InitConfig::Zeros => GlobalState::zeros(n, dim),
            InitConfig::Gaussian { std } => GlobalState::from_rows(
                (0..n)
                    .map(|i| {
                        let mut rng = stream_rng(seed, Stream::Init, i as u64);
                        (0..dim)
                            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    })
                    .collect(),
            ),
        };
        let a = cfg.schedule.a.unwrap_or(n as f64);
        let schedule = StepSchedule::new(cfg.schedule.kind, a, cfg.schedule.b).map_err(|e| {
            ConfigError::Invalid {
                field: "schedule".into(),
                msg: e.to_string(),
            }
        })?;

        Ok(Problem {
            graph,
            model,
            oracles,
            init,
            schedule,
            test_set,
            reference,
            p_grad: cfg.p_grad,
            iterations: cfg.iterations,
            record_every: cfg.record_every,
            max_norm: cfg.max_norm,
            master_seed: seed,
        })
    }

    /// Scalar lasso problem with Gaussian initial values, handy for exercising
    /// the averaging dynamics in isolation.
    pub fn scalar_gossip(graph: Graph, p_grad: f64, iterations: u64, seed: u64) -> Self {
        let n = graph.node_count();
        let model = LossModel::new(LossKind::Lasso, 1, 1, 0.0).expect("valid model");
        let mut dists = synth_node_distributions(n, 1, 1, 1.0, seed);
        dists.iter_mut().for_each(|d| d.noise_std = 0.1);
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let init: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Problem {
            oracles: dists
                .into_iter()
                .enumerate()
                .map(|(i, dist)| NodeOracle::Synthetic {
                    dist,
                    rng: stream_rng(seed, Stream::Samples, i as u64),
                })
                .collect(),
            graph,
            model,
            init: GlobalState::from_scalars(&init),
            schedule: StepSchedule::inverse_k(n as f64, 10.0).expect("valid schedule"),
            test_set: Vec::new(),
            reference: None,
            p_grad,
            iterations,
            record_every: 100,
            max_norm: 1e6,
            master_seed: seed,
        }
    }
}

fn finite_oracles(train: Dataset, seed: u64) -> Vec<NodeOracle> {
    let Dataset { samples, partition } = train;
    let samples = Arc::new(samples);
    partition
        .into_iter()
        .enumerate()
        .map(|(i, indices)| NodeOracle::Finite {
            samples: Arc::clone(&samples),
            indices,
            rng: stream_rng(seed, Stream::Samples, i as u64),
        })
        .collect()
}
