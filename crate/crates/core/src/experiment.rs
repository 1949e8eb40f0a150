//! Experiment harness: single runs with on-disk artifacts, multi-seed sweeps
//! and graph verification reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::async_sim::{default_p_fire, run_async, AsyncError, CommStats, EventLog};
use crate::config::{set_path, ConfigError, ExperimentConfig, Mode, PFire};
use crate::engine::{run_problem_serial, EngineError, MetricsRecord, MetricsTrace};
use crate::problem::{Problem, SetupError};

pub const THREADS_ENV: &str = "GOSSIPGRAD_THREADS";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Setup(#[from] SetupError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Setup(SetupError::Config(e))
    }
}

impl From<AsyncError> for RunError {
    fn from(e: AsyncError) -> Self {
        match e {
            AsyncError::Engine(e) => RunError::Engine(e),
            other => ConfigError::Invalid {
                field: "p_fire".into(),
                msg: other.to_string(),
            }
            .into(),
        }
    }
}

impl RunError {
    /// Process exit code: 2 for configuration problems, 3 for a divergence
    /// abort, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Setup(e) if e.is_config_error() => 2,
            RunError::Engine(EngineError::Diverged { .. } | EngineError::NonFinite { .. }) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: MetricsTrace,
    pub events: Option<EventLog>,
    pub comm_stats: Option<CommStats>,
    pub slots: Option<u64>,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub seed: u64,
    #[serde(rename = "final")]
    pub final_record: MetricsRecord,
    pub comm_stats: Option<CommStats>,
    pub slots: Option<u64>,
    pub wall_time_secs: f64,
    pub config: ExperimentConfig,
}

fn p_fire_vector(cfg: &ExperimentConfig, n: usize) -> Vec<f64> {
    match &cfg.p_fire {
        None => vec![default_p_fire(n); n],
        Some(PFire::Uniform(p)) => vec![*p; n],
        Some(PFire::PerNode(ps)) => ps.clone(),
    }
}

/// Builds the problem and runs it in the configured mode (no disk I/O).
pub fn execute(cfg: &ExperimentConfig) -> Result<RunResult, RunError> {
    let start = Instant::now();
    let problem = Problem::from_config(cfg)?;
    let n = problem.graph.node_count();
    let result = match cfg.mode {
        Mode::Serial => {
            let (trace, _) = run_problem_serial(problem)?;
            RunResult {
                trace,
                events: None,
                comm_stats: None,
                slots: None,
                wall_time_secs: 0.0,
            }
        }
        Mode::Async => {
            let out = run_async(problem, &p_fire_vector(cfg, n))?;
            RunResult {
                trace: out.trace,
                events: Some(out.log),
                comm_stats: Some(out.stats),
                slots: Some(out.slots),
                wall_time_secs: 0.0,
            }
        }
    };
    Ok(RunResult {
        wall_time_secs: start.elapsed().as_secs_f64(),
        ..result
    })
}

/// Writes `contents` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), RunError> {
    let io = |source| RunError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn summary(cfg: &ExperimentConfig, result: &RunResult) -> Summary {
    Summary {
        mode: cfg.mode,
        seed: cfg.master_seed,
        final_record: result
            .trace
            .last()
            .cloned()
            .expect("trace has a k = 0 record"),
        comm_stats: result.comm_stats,
        slots: result.slots,
        wall_time_secs: result.wall_time_secs,
        config: cfg.clone(),
    }
}

/// Writes `trace.csv`, `events.csv` (async) and `summary.json` into `dir`.
pub fn write_artifacts(
    cfg: &ExperimentConfig,
    result: &RunResult,
    dir: &Path,
) -> Result<Summary, RunError> {
    write_atomic(&dir.join("trace.csv"), &result.trace.to_csv())?;
    if let Some(log) = &result.events {
        write_atomic(&dir.join("events.csv"), &log.to_csv())?;
    }
    let s = summary(cfg, result);
    write_atomic(
        &dir.join("summary.json"),
        &serde_json::to_string_pretty(&s).expect("summary serializes"),
    )?;
    Ok(s)
}

/// `run` verb: execute and persist into `cfg.output_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<Summary, RunError> {
    let result = execute(cfg)?;
    write_artifacts(cfg, &result, &cfg.output_dir)
}

/// One sweep axis: each point assigns a value to every listed field.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub fields: Vec<String>,
    pub points: Vec<Vec<toml::Value>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub seeds: Vec<u64>,
    pub axes: Vec<SweepAxis>,
}

fn sweep_invalid(field: impl Into<String>, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        msg: msg.into(),
    }
}

impl SweepSpec {
    /// Parses the `[sweep]` table:
    ///
    /// ```toml
    /// [sweep]
    /// seeds = [1, 2, 3]
    /// [[sweep.axes]]
    /// field = "topology.k"
    /// values = [4, 15]
    /// [[sweep.axes]]
    /// fields = ["topology.n", "iterations"]
    /// values = [[10, 10000], [20, 20000]]
    /// ```
    pub fn from_table(table: &toml::Table) -> Result<Self, ConfigError> {
        let seeds = match table.get("seeds") {
            None => vec![0],
            Some(toml::Value::Array(vals)) => vals
                .iter()
                .map(|v| {
                    v.as_integer()
                        .filter(|&i| i >= 0)
                        .map(|i| i as u64)
                        .ok_or_else(|| {
                            sweep_invalid("sweep.seeds", "seeds must be nonnegative integers")
                        })
                })
                .collect::<Result<Vec<_>, _>>()?,
            Some(_) => return Err(sweep_invalid("sweep.seeds", "must be an array")),
        };
        if seeds.is_empty() {
            return Err(sweep_invalid(
                "sweep.seeds",
                "at least one seed is required",
            ));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(sweep_invalid(
                "sweep.seeds",
                format!("duplicate seed {dup}"),
            ));
        }
        let mut axes = Vec::new();
        let raw_axes = match table.get("axes") {
            None => Vec::new(),
            Some(toml::Value::Array(a)) => a.clone(),
            Some(_) => return Err(sweep_invalid("sweep.axes", "must be an array of tables")),
        };
        for (i, raw) in raw_axes.iter().enumerate() {
            let name = format!("sweep.axes[{i}]");
            let t = raw
                .as_table()
                .ok_or_else(|| sweep_invalid(&name, "must be a table"))?;
            let values = t
                .get("values")
                .and_then(|v| v.as_array())
                .ok_or_else(|| sweep_invalid(format!("{name}.values"), "array required"))?;
            if values.is_empty() {
                return Err(sweep_invalid(
                    format!("{name}.values"),
                    "axis has no values",
                ));
            }
            let axis = match (
                t.get("field").and_then(|v| v.as_str()),
                t.get("fields").and_then(|v| v.as_array()),
            ) {
                (Some(f), None) => SweepAxis {
                    fields: vec![f.to_string()],
                    points: values.iter().map(|v| vec![v.clone()]).collect(),
                },
                (None, Some(fs)) => {
                    let fields: Vec<String> = fs
                        .iter()
                        .filter_map(|f| f.as_str().map(String::from))
                        .collect();
                    if fields.len() != fs.len() || fields.is_empty() {
                        return Err(sweep_invalid(
                            format!("{name}.fields"),
                            "must be a nonempty list of strings",
                        ));
                    }
                    let points = values
                        .iter()
                        .map(|v| match v.as_array() {
                            Some(p) if p.len() == fields.len() => Ok(p.clone()),
                            _ => Err(sweep_invalid(
                                format!("{name}.values"),
                                format!("each point needs {} values", fields.len()),
                            )),
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    SweepAxis { fields, points }
                }
                _ => {
                    return Err(sweep_invalid(
                        &name,
                        "exactly one of `field` or `fields` is required",
                    ))
                }
            };
            axes.push(axis);
        }
        Ok(Self { seeds, axes })
    }

    /// Cartesian product of the axes; each entry lists `(field, value)`.
    pub fn points(&self) -> Vec<Vec<(String, toml::Value)>> {
        let mut out: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
        for axis in &self.axes {
            let mut next = Vec::with_capacity(out.len() * axis.points.len());
            for prefix in &out {
                for point in &axis.points {
                    let mut p = prefix.clone();
                    p.extend(axis.fields.iter().cloned().zip(point.iter().cloned()));
                    next.push(p);
                }
            }
            out = next;
        }
        out
    }

    pub fn field_names(&self) -> Vec<String> {
        self.axes
            .iter()
            .flat_map(|a| a.fields.iter().cloned())
            .collect()
    }
}

/// Splits a template file into the experiment table and its `[sweep]` spec.
pub fn split_template(mut table: toml::Table) -> Result<(toml::Table, SweepSpec), ConfigError> {
    let spec = match table.remove("sweep") {
        Some(toml::Value::Table(t)) => SweepSpec::from_table(&t)?,
        Some(_) => return Err(sweep_invalid("sweep", "must be a table")),
        None => SweepSpec {
            seeds: vec![0],
            axes: Vec::new(),
        },
    };
    Ok((table, spec))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub point: usize,
    pub values: Vec<(String, toml::Value)>,
    pub seed: u64,
    pub last: MetricsRecord,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub cells: Vec<SweepCell>,
    pub csv: String,
}

fn render(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn mean_std(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.iter().filter_map(|x| *x).collect();
    if v.len() != values.len() || v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (Some(mean), Some(var.sqrt()))
}

fn cell_dir(base: &Path, point: usize, seed: u64) -> PathBuf {
    base.join(format!("cell_p{point}_s{seed}"))
}

/// Threads for independent sweep cells, capped by `GOSSIPGRAD_THREADS`.
pub fn sweep_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Runs every `(point, seed)` cell of the sweep and writes `sweep.csv` plus
/// per-cell artifacts under `output_dir`.
pub fn sweep(
    template: &toml::Table,
    spec: &SweepSpec,
    output_dir: &Path,
) -> Result<SweepOutcome, RunError> {
    let points = spec.points();
    let mut jobs = Vec::new();
    for (pi, values) in points.iter().enumerate() {
        for &seed in &spec.seeds {
            let mut table = template.clone();
            for (field, value) in values {
                set_path(&mut table, field, value.clone())?;
            }
            set_path(&mut table, "master_seed", toml::Value::Integer(seed as i64))?;
            set_path(
                &mut table,
                "output_dir",
                toml::Value::String(cell_dir(output_dir, pi, seed).display().to_string()),
            )?;
            let cfg = ExperimentConfig::from_table(table)?;
            jobs.push((pi, values.clone(), seed, cfg));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep_threads())
        .build()
        .expect("thread pool");
    let cells: Vec<SweepCell> = pool.install(|| {
        jobs.into_par_iter()
            .map(|(point, values, seed, cfg)| {
                let s = run(&cfg)?;
                Ok(SweepCell {
                    point,
                    values,
                    seed,
                    last: s.final_record,
                })
            })
            .collect::<Result<Vec<_>, RunError>>()
    })?;

    let fields = spec.field_names();
    let mut csv = String::from("row,point");
    for f in &fields {
        let _ = write!(csv, ",{f}");
    }
    csv.push_str(
        ",seed,d_k,DF,DO,objective,pred_error,d_k_std,DF_std,DO_std,objective_std,pred_error_std\n",
    );
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let point_cols = |values: &[(String, toml::Value)]| {
        values
            .iter()
            .map(|(_, v)| render(v))
            .collect::<Vec<_>>()
            .join(",")
    };
    for c in &cells {
        let r = &c.last;
        let _ = write!(csv, "cell,{}", c.point);
        if !fields.is_empty() {
            let _ = write!(csv, ",{}", point_cols(&c.values));
        }
        let _ = writeln!(
            csv,
            ",{},{},{},{},{},{},,,,,",
            c.seed,
            r.d_k,
            r.df,
            fmt(r.do_),
            fmt(r.objective),
            fmt(r.pred_error)
        );
    }
    for (pi, values) in points.iter().enumerate() {
        let group: Vec<&MetricsRecord> = cells
            .iter()
            .filter(|c| c.point == pi)
            .map(|c| &c.last)
            .collect();
        let stat = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| {
            mean_std(&group.iter().map(|r| f(r)).collect::<Vec<_>>())
        };
        let cols = [
            stat(&|r| Some(r.d_k)),
            stat(&|r| Some(r.df)),
            stat(&|r| r.do_),
            stat(&|r| r.objective),
            stat(&|r| r.pred_error),
        ];
        let _ = write!(csv, "mean,{pi}");
        if !fields.is_empty() {
            let _ = write!(csv, ",{}", point_cols(values));
        }
        csv.push(',');
        for (m, _) in &cols {
            let _ = write!(csv, ",{}", fmt(*m));
        }
        for (_, s) in &cols {
            let _ = write!(csv, ",{}", fmt(*s));
        }
        csv.push('\n');
    }
    write_atomic(&output_dir.join("sweep.csv"), &csv)?;
    Ok(SweepOutcome { cells, csv })
}
