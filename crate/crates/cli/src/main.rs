//! `gossipgrad` command-line harness: `run`, `verify` and `sweep`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gossipgrad::config::{
    apply_override, read_table, set_path, ConfigError, ExperimentConfig, Mode,
};
use gossipgrad::experiment::{self, split_template, write_atomic, RunError};
use gossipgrad::graph::{build_complete, build_k_regular, build_random, Graph, GraphError};
use gossipgrad::problem::build_graph;
use gossipgrad::verify::{verification_report, VerifyError};

#[derive(Parser)]
#[command(
    name = "gossipgrad",
    version,
    about = "Decentralized stochastic gradient descent over graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write trace.csv, summary.json (and events.csv in async mode).
    Run(RunArgs),
    /// Check the spectral certificates of a regular graph and write verify.json.
    Verify(VerifyArgs),
    /// Run a config template over its `[sweep]` axes and seeds and write sweep.csv.
    Sweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dotted override, e.g. `schedule.a=2.0`; repeatable.
    #[arg(long = "set", value_name = "DOTTED=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TopologyArg {
    Regular,
    Complete,
    Random,
    File,
}

#[derive(Args)]
struct VerifyArgs {
    /// Take the topology from an experiment config instead of the graph flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "DOTTED=VALUE")]
    set: Vec<String>,
    #[arg(long, value_enum, default_value = "regular")]
    topology: TopologyArg,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    /// Edge-list file for `--topology file`.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    probes: usize,
    #[arg(long, default_value_t = 50)]
    states: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: ConfigError| e.to_string())
}

fn overrides(args: &RunArgs) -> Vec<String> {
    let mut all = args.set.clone();
    if let Some(dir) = &args.output_dir {
        all.push(format!(
            "output_dir={}",
            toml::Value::String(dir.display().to_string())
        ));
    }
    if let Some(seed) = args.seed {
        all.push(format!("master_seed={seed}"));
    }
    if let Some(mode) = args.mode {
        let m = match mode {
            Mode::Serial => "serial",
            Mode::Async => "async",
        };
        all.push(format!("mode=\"{m}\""));
    }
    all
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn run_error(e: RunError) -> ExitCode {
    fail(e.exit_code() as u8, e)
}

fn cmd_run(args: RunArgs) -> ExitCode {
    // A sweep template runs its base point; the `[sweep]` table is ignored.
    let loaded = (|| {
        let mut table = read_table(&args.config)?;
        table.remove("sweep");
        for o in overrides(&args) {
            apply_override(&mut table, &o)?;
        }
        ExperimentConfig::from_table(table)
    })();
    let cfg = match loaded {
        Ok(c) => c,
        Err(e) => return fail(2, e),
    };
    match experiment::run(&cfg) {
        Ok(s) => {
            println!(
                "{}",
                serde_json::to_string(&s.final_record).expect("record serializes")
            );
            ExitCode::SUCCESS
        }
        Err(e) => run_error(e),
    }
}

fn cmd_sweep(args: RunArgs) -> ExitCode {
    let prepared = (|| {
        let mut table = read_table(&args.config)?;
        for o in overrides(&args) {
            apply_override(&mut table, &o)?;
        }
        let (template, mut spec) = split_template(table)?;
        if let Some(seed) = args.seed {
            spec.seeds = vec![seed];
        }
        // Validate the template on its own before fanning out.
        let base = ExperimentConfig::from_table(template.clone())?;
        Ok::<_, ConfigError>((template, spec, base.output_dir))
    })();
    let (template, spec, out) = match prepared {
        Ok(p) => p,
        Err(e) => return fail(2, e),
    };
    match experiment::sweep(&template, &spec, &out) {
        Ok(o) => {
            print!("{}", o.csv);
            ExitCode::SUCCESS
        }
        Err(e) => run_error(e),
    }
}

fn verify_graph(args: &VerifyArgs) -> Result<Graph, String> {
    if let Some(path) = &args.config {
        let mut table = read_table(path).map_err(|e| e.to_string())?;
        for o in &args.set {
            apply_override(&mut table, o).map_err(|e| e.to_string())?;
        }
        // Only the topology matters here; fill any other required field.
        if !table.contains_key("iterations") {
            set_path(&mut table, "iterations", toml::Value::Integer(1))
                .map_err(|e| e.to_string())?;
        }
        let cfg = ExperimentConfig::from_table(table).map_err(|e| e.to_string())?;
        return build_graph(&cfg).map_err(|e| e.to_string());
    }
    let need = |v: Option<usize>, name: &str| v.ok_or_else(|| format!("`--{name}` is required"));
    let g = match args.topology {
        TopologyArg::Regular => build_k_regular(need(args.n, "n")?, need(args.k, "k")?, args.seed),
        TopologyArg::Complete => build_complete(need(args.n, "n")?),
        TopologyArg::Random => build_random(
            need(args.n, "n")?,
            args.p.ok_or("`--p` is required")?,
            args.seed,
        ),
        TopologyArg::File => {
            let path = args
                .graph
                .as_ref()
                .ok_or("`--graph` is required for --topology file")?;
            let text =
                std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            text.parse::<Graph>()
        }
    };
    g.map_err(|e: GraphError| e.to_string())
}

fn cmd_verify(args: VerifyArgs) -> ExitCode {
    let graph = match verify_graph(&args) {
        Ok(g) => g,
        Err(e) => return fail(2, e),
    };
    let report = match verification_report(&graph, args.probes, args.states, args.seed) {
        Ok(r) => r,
        Err(e @ (VerifyError::Irregular | VerifyError::Disconnected | VerifyError::Graph(_))) => {
            return fail(2, e)
        }
        Err(e) => return fail(1, e),
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    let dir = args
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("."));
    if let Err(e) = write_atomic(&dir.join("verify.json"), &json) {
        return fail(1, e);
    }
    println!("{json}");
    if report.pass.all {
        ExitCode::SUCCESS
    } else {
        fail(4, "verification certificate failed")
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(a) => cmd_run(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}
