//! Per-node sample oracles: Gaussian class-conditional synthetic
//! distributions and delimited-file datasets partitioned across nodes.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::loss::{Label, Sample};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no samples")]
    NoSamples,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: label {label} outside [0, {classes})")]
    LabelOutOfRange {
        line: usize,
        label: i64,
        classes: usize,
    },
    #[error("cannot partition {samples} samples across {nodes} nodes")]
    TooManyNodes { samples: usize, nodes: usize },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Class-conditional Gaussian data model of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDistribution {
    pub node: usize,
    pub class_means: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub class_prior: Vec<f64>,
}

impl NodeDistribution {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidDistribution(m.to_string()));
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be positive");
        }
        if self.class_prior.len() != self.class_means.len() || self.class_prior.is_empty() {
            return bad("one prior entry per class is required");
        }
        if self.class_prior.iter().any(|&p| !(p >= 0.0)) {
            return bad("priors must be nonnegative");
        }
        if (self.class_prior.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return bad("priors must sum to 1");
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.class_means[0].len()
    }
}

/// Shared base class means (standard normal entries) plus a node-specific
/// offset scaled by `divergence`. Noise defaults to 1 and priors to uniform.
pub fn synth_node_distributions(
    n_nodes: usize,
    d: usize,
    classes: usize,
    divergence: f64,
    seed: u64,
) -> Vec<NodeDistribution> {
    let mut base_rng = stream_rng(seed, Stream::Distributions, u64::MAX);
    let base: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..d)
                .map(|_| base_rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    (0..n_nodes)
        .map(|node| {
            let mut rng = stream_rng(seed, Stream::Distributions, node as u64);
            let class_means = base
                .iter()
                .map(|mean| {
                    mean.iter()
                        .map(|&m| m + divergence * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect();
            NodeDistribution {
                node,
                class_means,
                noise_std: 1.0,
                class_prior: vec![1.0 / classes as f64; classes],
            }
        })
        .collect()
}

fn draw_class<R: Rng + ?Sized>(prior: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    prior.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws a class from the prior, then `mean + noise_std · N(0, I)`.
pub fn sample<R: Rng + ?Sized>(dist: &NodeDistribution, rng: &mut R) -> Sample {
    let c = draw_class(&dist.class_prior, rng);
    let x = dist.class_means[c]
        .iter()
        .map(|&m| m + dist.noise_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Sample::new(x, Label::Class(c))
}

/// Samples plus a node → sample-index assignment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub partition: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self {
            samples,
            partition: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples owned by `node`.
    pub fn share(&self, node: usize) -> impl Iterator<Item = &Sample> {
        self.partition[node].iter().map(|&i| &self.samples[i])
    }

    /// Moves the trailing `count` samples into a separate dataset.
    pub fn split_off_tail(&mut self, count: usize) -> Dataset {
        let at = self.samples.len().saturating_sub(count);
        self.partition.clear();
        Dataset::new(self.samples.split_off(at))
    }

    /// Fraction of the most common class label.
    pub fn majority_fraction(&self) -> f64 {
        let mut counts = std::collections::BTreeMap::new();
        for s in &self.samples {
            if let Label::Class(c) = s.y {
                *counts.entry(c).or_insert(0usize) += 1;
            }
        }
        counts.values().copied().max().unwrap_or(0) as f64 / self.samples.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DelimitedOptions {
    /// Skip the first non-empty line.
    pub header: bool,
    /// Min-max scale each feature column to [0, 1].
    pub scale: bool,
}

/// Parses comma-separated rows of `d` features plus an integer class label
/// in column `label_column`.
pub fn parse_delimited(
    text: &str,
    d: usize,
    classes: usize,
    label_column: usize,
    opts: &DelimitedOptions,
) -> Result<Dataset, DataError> {
    if label_column > d {
        return Err(DataError::Parse {
            line: 0,
            msg: format!("label column {label_column} exceeds row width {}", d + 1),
        });
    }
    let mut samples = Vec::new();
    let mut skipped_header = !opts.header;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        if !skipped_header {
            skipped_header = true;
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(DataError::Parse {
                line,
                msg: format!(
                    "expected {} fields ({d} features + label), found {}",
                    d + 1,
                    fields.len()
                ),
            });
        }
        let label_text = fields[label_column];
        let label: i64 = label_text
            .parse::<i64>()
            .or_else(|_| {
                label_text
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.fract() == 0.0)
                    .map(|v| v as i64)
                    .ok_or(())
            })
            .map_err(|_| DataError::Parse {
                line,
                msg: format!("label {label_text:?} is not an integer"),
            })?;
        if label < 0 || label as usize >= classes {
            return Err(DataError::LabelOutOfRange {
                line,
                label,
                classes,
            });
        }
        let mut x = Vec::with_capacity(d);
        for (col, f) in fields.iter().enumerate() {
            if col == label_column {
                continue;
            }
            let v: f64 = f.parse().map_err(|_| DataError::Parse {
                line,
                msg: format!("column {col}: {f:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    line,
                    msg: format!("column {col} is not finite"),
                });
            }
            x.push(v);
        }
        samples.push(Sample::new(x, Label::Class(label as usize)));
    }
    if samples.is_empty() {
        return Err(DataError::NoSamples);
    }
    if opts.scale {
        min_max_scale(&mut samples, d);
    }
    Ok(Dataset::new(samples))
}

fn min_max_scale(samples: &mut [Sample], d: usize) {
    for j in 0..d {
        let (lo, hi) = samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                (lo.min(s.x[j]), hi.max(s.x[j]))
            });
        let span = hi - lo;
        for s in samples.iter_mut() {
            s.x[j] = if span > 0.0 {
                (s.x[j] - lo) / span
            } else {
                0.0
            };
        }
    }
}

pub fn load_delimited(
    path: &Path,
    d: usize,
    classes: usize,
    label_column: usize,
    opts: &DelimitedOptions,
) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_delimited(&text, d, classes, label_column, opts)
}

/// Assigns sample `i` to node `i mod n_nodes`.
pub fn partition_round_robin(mut ds: Dataset, n_nodes: usize) -> Result<Dataset, DataError> {
    if n_nodes == 0 || n_nodes > ds.samples.len() {
        return Err(DataError::TooManyNodes {
            samples: ds.samples.len(),
            nodes: n_nodes,
        });
    }
    let mut partition = vec![Vec::new(); n_nodes];
    for i in 0..ds.samples.len() {
        partition[i % n_nodes].push(i);
    }
    ds.partition = partition;
    Ok(ds)
}

/// Source of fresh samples for one node.
#[derive(Debug, Clone)]
pub enum NodeOracle {
    /// Infinite stream from a distribution.
    Synthetic {
        dist: NodeDistribution,
        rng: ChaCha8Rng,
    },
    /// Uniform draws with replacement from a fixed share.
    Finite {
        samples: Arc<Vec<Sample>>,
        indices: Vec<usize>,
        rng: ChaCha8Rng,
    },
}

impl NodeOracle {
    pub fn draw(&mut self) -> Sample {
        match self {
            NodeOracle::Synthetic { dist, rng } => sample(dist, rng),
            NodeOracle::Finite {
                samples,
                indices,
                rng,
            } => {
                let i = indices[rng.random_range(0..indices.len())];
                samples[i].clone()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_divergence_gives_identical_nodes() {
        let d = synth_node_distributions(2, 2, 2, 0.0, 7);
        assert_eq!(d[0].class_means, d[1].class_means);
    }

    #[test]
    fn positive_divergence_gives_distinct_nodes() {
        let d = synth_node_distributions(30, 50, 10, 1.0, 1);
        assert_eq!(d.len(), 30);
        for i in 0..30 {
            d[i].validate().unwrap();
            for j in i + 1..30 {
                assert_ne!(d[i].class_means, d[j].class_means);
            }
        }
    }

    #[test]
    fn single_node_single_class() {
        let d = synth_node_distributions(1, 1, 1, 5.0, 0);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].class_prior, vec![1.0]);
    }

    #[test]
    fn degenerate_noise_returns_mean() {
        let mut dist = synth_node_distributions(1, 3, 1, 0.0, 3).remove(0);
        dist.noise_std = 1e-9;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = sample(&dist, &mut rng);
        for (a, b) in s.x.iter().zip(&dist.class_means[0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let dist = synth_node_distributions(1, 4, 3, 0.0, 3).remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = sample(&dist, &mut rng);
        let b = sample(&dist, &mut rng);
        assert_ne!(a, b);
        let mut replay = ChaCha8Rng::seed_from_u64(11);
        assert_eq!(sample(&dist, &mut replay), a);
        assert_eq!(sample(&dist, &mut replay), b);
    }

    #[test]
    fn class_frequencies_follow_prior() {
        let mut dist = synth_node_distributions(1, 1, 2, 0.0, 3).remove(0);
        dist.class_prior = vec![0.3, 0.7];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ones = (0..10_000)
            .filter(|_| sample(&dist, &mut rng).y == Label::Class(1))
            .count();
        assert!((ones as f64 / 1e4 - 0.7).abs() <= 0.02);
    }

    #[test]
    fn delimited_parsing() {
        let ds = parse_delimited(
            "1,2,0\n3,4,1\n5,6,2\n",
            2,
            3,
            2,
            &DelimitedOptions::default(),
        )
        .unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.samples[1], Sample::new(vec![3.0, 4.0], Label::Class(1)));

        let ds = parse_delimited(
            "label,a,b\n1,10,20\n0,30,40\n",
            2,
            2,
            0,
            &DelimitedOptions {
                header: true,
                scale: true,
            },
        )
        .unwrap();
        assert_eq!(ds.samples[0].x, vec![0.0, 0.0]);
        assert_eq!(ds.samples[1].x, vec![1.0, 1.0]);
        assert_eq!(ds.samples[0].y, Label::Class(1));
    }

    #[test]
    fn delimited_errors() {
        let o = DelimitedOptions::default();
        assert!(matches!(
            parse_delimited("", 2, 2, 2, &o),
            Err(DataError::NoSamples)
        ));
        let err = parse_delimited("1,2,0\n1,0\n", 2, 2, 2, &o).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }));
        assert!(err.to_string().contains("line 2"));
        assert!(matches!(
            parse_delimited("1,2,5\n", 2, 3, 2, &o),
            Err(DataError::LabelOutOfRange { line: 1, .. })
        ));
        assert!(matches!(
            parse_delimited("1,x,0\n", 2, 3, 2, &o),
            Err(DataError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn round_robin_partition() {
        let mk = |n: usize| {
            Dataset::new(
                (0..n)
                    .map(|i| Sample::new(vec![i as f64], Label::Class(0)))
                    .collect(),
            )
        };
        let ds = partition_round_robin(mk(10), 3).unwrap();
        let sizes: Vec<usize> = ds.partition.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        assert_eq!(ds.partition[1], vec![1, 4, 7]);
        let ds = partition_round_robin(mk(4), 4).unwrap();
        assert!(ds.partition.iter().all(|p| p.len() == 1));
        assert!(matches!(
            partition_round_robin(mk(2), 3),
            Err(DataError::TooManyNodes { .. })
        ));
    }

    #[test]
    fn finite_oracle_draws_from_share() {
        let samples: Vec<Sample> = (0..6)
            .map(|i| Sample::new(vec![i as f64], Label::Class(0)))
            .collect();
        let mut o = NodeOracle::Finite {
            samples: Arc::new(samples),
            indices: vec![1, 3],
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        for _ in 0..50 {
            let x = o.draw().x[0];
            assert!(x == 1.0 || x == 3.0);
        }
    }
}
