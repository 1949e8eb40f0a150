//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::path::Path;
use std::time::Instant;

use gossipgrad::async_sim::{default_p_fire, run_async};
use gossipgrad::config::ExperimentConfig;
use gossipgrad::data::{load_delimited, DelimitedOptions};
use gossipgrad::engine::{average_projection, run_problem_serial, GlobalState};
use gossipgrad::experiment::{execute, run, split_template, sweep};
use gossipgrad::graph::{
    averaging_matrix, build_complete, build_k_regular, eta_lower_bound, is_connected,
    second_largest_singular, Graph,
};
use gossipgrad::problem::Problem;
use gossipgrad::verify::{psd_certificate, total_variance_identity, verify_lemma_bound};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Connected circulant k-regular graphs with n <= 8 and k in {2, 4, n-1}.
fn small_regular_graphs() -> Vec<Graph> {
    let mut out = Vec::new();
    for n in 2..=8usize {
        let mut ks: Vec<usize> = vec![2, 4, n - 1];
        ks.sort_unstable();
        ks.dedup();
        for k in ks {
            if k == 0 || k >= n || (k * n) % 2 == 1 {
                continue;
            }
            let g = build_k_regular(n, k, 0).expect("valid circulant");
            if is_connected(&g) {
                out.push(g);
            }
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let mut worst = f64::INFINITY;
    let mut count = 0;
    for (i, g) in small_regular_graphs().iter().enumerate() {
        let est = verify_lemma_bound(g, 10_000, i as u64).map_err(|e| e.to_string())?;
        let bound = est.lemma_bound.expect("regular");
        worst = worst.min(est.eta_hat - bound);
        count += 1;
        if est.bound_satisfied != Some(true) {
            return Err(format!(
                "n={} k={:?}: eta_hat {} < bound {bound}",
                g.node_count(),
                g.regular_degree(),
                est.eta_hat
            ));
        }
    }
    check(
        count > 0,
        format!("{count} graphs, min(eta_hat - bound) = {worst:.3e}"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut max_residual = 0.0f64;
    let mut min_eig = f64::INFINITY;
    for g in small_regular_graphs() {
        min_eig = min_eig.min(psd_certificate(&g).map_err(|e| e.to_string())?);
        for _ in 0..50 {
            let rows = (0..g.node_count())
                .map(|_| (0..3).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            let tv = total_variance_identity(&GlobalState::from_rows(rows), &g)
                .map_err(|e| e.to_string())?;
            max_residual = max_residual.max(tv.residual.abs());
        }
    }
    check(
        max_residual <= 1e-10 && min_eig >= -1e-10,
        format!(
            "max identity residual {max_residual:.2e}, min certificate eigenvalue {min_eig:.2e}"
        ),
    )
}

fn criterion_3() -> Outcome {
    let triangle = build_complete(3).unwrap();
    let square = build_k_regular(4, 2, 0).unwrap();
    let s_tri = second_largest_singular(&averaging_matrix(&triangle)).map_err(|e| e.to_string())?;
    let s_sq = second_largest_singular(&averaging_matrix(&square)).map_err(|e| e.to_string())?;
    let bounds: Vec<f64> = (2..=10)
        .map(|n| {
            eta_lower_bound(&build_complete(n).unwrap())
                .unwrap()
                .eta_lower_bound
                .unwrap()
        })
        .collect();
    let bound_err = bounds.iter().map(|b| (b - 1.0).abs()).fold(0.0, f64::max);
    check(
        s_tri.abs() <= 1e-9 && (s_sq - 1.0 / 3.0).abs() <= 1e-9 && bound_err <= 1e-9,
        format!("triangle sigma2 {s_tri:.1e}, 4-cycle sigma2 {s_sq:.12}, complete bound error {bound_err:.1e}"),
    )
}

/// Euclidean projection onto {x : x_j equal for j in hood} by solving the
/// KKT system of `min ||y - x||^2` subject to `y_j - y_h0 = 0`.
fn kkt_projection(x: &[f64], hood: &[usize]) -> Vec<f64> {
    let n = x.len();
    let m = hood.len() - 1;
    let mut kkt = DMatrix::<f64>::zeros(n + m, n + m);
    let mut rhs = DVector::<f64>::zeros(n + m);
    for i in 0..n {
        kkt[(i, i)] = 2.0;
        rhs[i] = 2.0 * x[i];
    }
    for (r, &j) in hood[1..].iter().enumerate() {
        let row = n + r;
        kkt[(row, j)] = 1.0;
        kkt[(row, hood[0])] = -1.0;
        kkt[(j, row)] = 1.0;
        kkt[(hood[0], row)] = -1.0;
    }
    let sol = kkt.lu().solve(&rhs).expect("nonsingular KKT system");
    sol.iter().take(n).copied().collect()
}

fn criterion_4() -> Outcome {
    let graphs = [
        build_k_regular(4, 2, 0).unwrap(),
        build_complete(4).unwrap(),
        Graph::from_edges(4, [(0, 1), (1, 2), (2, 3)]).unwrap(),
        Graph::from_edges(4, [(0, 1), (0, 2), (0, 3)]).unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for t in 0..100 {
        let g = &graphs[t % graphs.len()];
        let m = rng.random_range(0..4);
        let x: Vec<f64> = (0..4)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0)
            .collect();
        let mut state = GlobalState::from_scalars(&x);
        average_projection(&mut state, m, g);
        let oracle = kkt_projection(&x, &g.closed_neighborhood(m));
        for (a, b) in state.as_slice().iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    check(
        worst <= 1e-9,
        format!("max deviation from KKT projection {worst:.2e} over 100 states"),
    )
}

const CONSENSUS: &str = r#"
iterations = 10000
record_every = 500
p_grad = 0.5
[topology]
kind = "regular"
n = 30
k = 4
[loss]
kind = "multinomial"
d = 50
classes = 10
[init]
kind = "gaussian"
std = 1.0
"#;

fn consensus_config(k: usize, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(CONSENSUS).unwrap();
    cfg.topology.k = Some(k);
    cfg.master_seed = seed;
    cfg
}

fn decay(trace: &gossipgrad::MetricsTrace) -> f64 {
    trace.first().unwrap().d_k / trace.last().unwrap().d_k
}

fn criterion_5() -> Outcome {
    let mut wins = 0;
    let mut min_decay = f64::INFINITY;
    for seed in 0..10 {
        let t4 = execute(&consensus_config(4, seed))
            .map_err(|e| e.to_string())?
            .trace;
        let t15 = execute(&consensus_config(15, seed))
            .map_err(|e| e.to_string())?
            .trace;
        if t15.last().unwrap().d_k < t4.last().unwrap().d_k {
            wins += 1;
        }
        min_decay = min_decay.min(decay(&t4)).min(decay(&t15));
    }
    check(
        wins >= 9 && min_decay >= 100.0,
        format!(
            "15-regular below 4-regular in {wins}/10 seeds, min d_k decay factor {min_decay:.0}"
        ),
    )
}

const LASSO: &str = r#"
iterations = 40000
record_every = 1000
p_grad = 0.5
[topology]
kind = "regular"
n = 10
k = 4
[loss]
kind = "lasso"
lambda = 0.01
d = 5
classes = 3
[data]
kind = "synthetic"
divergence = 1.0
noise_std = 1.0
samples_per_node = 200
[schedule]
kind = "inverse_k"
a = 200.0
b = 100.0
[reference]
tolerance = 1e-9
"#;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_6() -> Outcome {
    let mut ratios = Vec::new();
    for seed in 0..5 {
        let mut cfg = ExperimentConfig::from_toml_str(LASSO).unwrap();
        cfg.master_seed = seed;
        let trace = execute(&cfg).map_err(|e| e.to_string())?.trace;
        let first = trace.first().unwrap().do_.ok_or("DO missing")?;
        let last = trace.last().unwrap();
        if last.k != 40_000 {
            return Err(format!("trace ends at k = {}", last.k));
        }
        ratios.push(last.do_.ok_or("DO missing")? / first);
    }
    let med = median(ratios.clone());
    check(
        med <= 0.1,
        format!("median DO(40k)/DO(0) = {med:.2e} over 5 seeds"),
    )
}

const PREDICTION: &str = r#"
iterations = 40000
record_every = 1000
p_grad = 0.5
[topology]
kind = "regular"
n = 30
k = 10
[loss]
kind = "multinomial"
d = 50
classes = 10
[data]
kind = "synthetic"
divergence = 1.0
noise_std = 3.0
[schedule]
kind = "inverse_k"
a = 900.0
b = 300.0
"#;

fn criterion_7() -> Outcome {
    let mut worst = 0.0f64;
    for k in [2, 10] {
        let mut cfg = ExperimentConfig::from_toml_str(PREDICTION).unwrap();
        cfg.topology.k = Some(k);
        let trace = execute(&cfg).map_err(|e| e.to_string())?.trace;
        worst = worst.max(
            trace
                .last()
                .unwrap()
                .pred_error
                .ok_or("no prediction error")?,
        );
    }
    check(
        worst <= 0.5,
        format!("worst prediction error at 40k over 2- and 10-regular: {worst:.3}"),
    )
}

const SCALING: &str = r#"
iterations = 10000
record_every = 5000
p_grad = 0.5
[topology]
kind = "regular"
n = 10
k = 4
[loss]
kind = "multinomial"
d = 50
classes = 10
[data]
kind = "synthetic"
divergence = 0.5
noise_std = 5.0
samples_per_node = 500
[schedule]
kind = "inverse_k"
a = 100.0
b = 100.0
[sweep]
seeds = [0, 1, 2]
[[sweep.axes]]
fields = ["topology.n", "iterations", "schedule.a"]
values = [[10, 10000, 100.0], [20, 20000, 400.0], [30, 30000, 900.0]]
"#;

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (template, spec) = split_template(SCALING.parse().unwrap()).map_err(|e| e.to_string())?;
    let out = sweep(&template, &spec, dir.path()).map_err(|e| e.to_string())?;
    let means: Vec<f64> = (0..3)
        .map(|p| {
            let errs: Vec<f64> = out
                .cells
                .iter()
                .filter(|c| c.point == p)
                .map(|c| c.last.pred_error.unwrap())
                .collect();
            errs.iter().sum::<f64>() / errs.len() as f64
        })
        .collect();
    let inversions = means.windows(2).filter(|w| w[1] > w[0]).count();
    check(
        inversions <= 1,
        format!(
            "mean error for n = 10, 20, 30: {:.4}, {:.4}, {:.4} ({inversions} inversions)",
            means[0], means[1], means[2]
        ),
    )
}

fn single_node_config(dir: &Path) -> ExperimentConfig {
    let path = dir.join("single.txt");
    std::fs::write(&path, "n 1\n").unwrap();
    let mut cfg = ExperimentConfig::from_toml_str(CONSENSUS).unwrap();
    cfg.topology.kind = gossipgrad::config::TopologyKind::File;
    cfg.topology.path = Some(path);
    cfg.topology.k = None;
    cfg.iterations = 2000;
    cfg.record_every = 50;
    cfg.master_seed = 9;
    cfg
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = single_node_config(dir.path());
    let (serial, _) =
        run_problem_serial(Problem::from_config(&cfg).unwrap()).map_err(|e| e.to_string())?;
    let single = run_async(Problem::from_config(&cfg).unwrap(), &[default_p_fire(1)])
        .map_err(|e| e.to_string())?;
    if serial.to_csv() != single.trace.to_csv() {
        return Err("single-node async trace differs from serial".into());
    }

    let cfg = consensus_config(4, 0);
    let problem = Problem::from_config(&cfg).unwrap();
    let graph = problem.graph.clone();
    let out = run_async(problem, &vec![default_p_fire(30); 30]).map_err(|e| e.to_string())?;
    out.log.check_safety(&graph)?;
    let avg = out.trace.last().unwrap().avg_steps;
    let factor = decay(&out.trace);
    check(
        out.stats.data_messages == 2 * 4 * avg && factor >= 100.0,
        format!(
            "single-node traces identical; 30-node async safe, decay {factor:.0}x, data messages {} = 2*4*{avg}",
            out.stats.data_messages
        ),
    )
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut pairs = 0;
    for (name, mut cfg) in [
        ("consensus", consensus_config(4, 3)),
        (
            "async",
            ExperimentConfig {
                mode: gossipgrad::config::Mode::Async,
                ..consensus_config(15, 3)
            },
        ),
        ("lasso", ExperimentConfig::from_toml_str(LASSO).unwrap()),
    ] {
        let mut files = Vec::new();
        for rep in 0..2 {
            cfg.output_dir = dir.path().join(format!("{name}_{rep}"));
            run(&cfg).map_err(|e| e.to_string())?;
            files.push(std::fs::read(cfg.output_dir.join("trace.csv")).unwrap());
        }
        if files[0] != files[1] {
            return Err(format!("{name}: trace.csv differs between identical runs"));
        }
        pairs += 1;
    }
    let a = std::fs::read(dir.path().join("async_0/events.csv")).unwrap();
    let b = std::fs::read(dir.path().join("async_1/events.csv")).unwrap();
    check(
        a == b,
        format!("{pairs} repeated runs byte-identical (traces and event log)"),
    )
}

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/blobs_1k.csv");

fn fixture_check() -> Outcome {
    let text = format!(
        r#"
iterations = 20000
record_every = 1000
[topology]
kind = "regular"
n = 10
k = 4
[loss]
kind = "multinomial"
d = 8
classes = 3
[data]
kind = "file"
path = "{FIXTURE}"
label_column = 8
header = true
scale = true
[schedule]
kind = "inverse_k"
a = 10000.0
b = 100.0
"#
    );
    let cfg = ExperimentConfig::from_toml_str(&text).map_err(|e| e.to_string())?;
    let problem = Problem::from_config(&cfg).map_err(|e| e.to_string())?;
    let test = gossipgrad::data::Dataset::new(problem.test_set.clone());
    let baseline = 1.0 - test.majority_fraction();
    let all = load_delimited(
        Path::new(FIXTURE),
        8,
        3,
        8,
        &DelimitedOptions {
            header: true,
            scale: true,
        },
    )
    .map_err(|e| e.to_string())?;
    let (trace, _) = run_problem_serial(problem).map_err(|e| e.to_string())?;
    let err = trace.last().unwrap().pred_error.unwrap();
    check(
        all.len() == 1000 && err < baseline,
        format!(
            "{} rows, error {err:.3} vs majority-class baseline {baseline:.3} after 20k",
            all.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("1 lemma bound on small circulants", criterion_1),
        ("2 variance identity and PSD certificate", criterion_2),
        ("3 spectral golden values", criterion_3),
        ("4 projection matches KKT oracle", criterion_4),
        ("5 consensus 15-regular vs 4-regular", criterion_5),
        ("6 optimality distance decay", criterion_6),
        ("7 prediction error at 40k", criterion_7),
        ("8 scaling trend in n", criterion_8),
        ("9 async/serial equivalence and safety", criterion_9),
        ("10 determinism", criterion_10),
        ("fixture delimited data beats majority class", fixture_check),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let result = f();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail}) [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
