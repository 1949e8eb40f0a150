use gossipgrad::async_sim::run_async;
use gossipgrad::data::{Dataset, NodeOracle};
use gossipgrad::engine::{
    average_projection, consensus_distance, feasibility_distance, gradient_step,
    run_problem_serial, GlobalState, MetricsTrace, StepSchedule,
};
use gossipgrad::graph::{build_k_regular, build_random, Graph};
use gossipgrad::loss::{Label, LossKind, LossModel, Sample};
use gossipgrad::problem::Problem;
use gossipgrad::verify::empirical_objective;
use proptest::prelude::*;

fn graph_strategy() -> impl Strategy<Value = Graph> {
    (3usize..10, 0.3f64..0.9, any::<u64>()).prop_map(|(n, p, s)| build_random(n, p, s).unwrap())
}

fn state_for(n: usize, dim: usize, flat: &[f64]) -> GlobalState {
    GlobalState::from_rows(
        (0..n)
            .map(|i| flat[i * dim..(i + 1) * dim].to_vec())
            .collect(),
    )
}

proptest! {
    #[test]
    fn projection_contracts_and_is_idempotent(
        g in graph_strategy(),
        flat in proptest::collection::vec(-5.0f64..5.0, 30),
        m_raw in 0usize..100,
    ) {
        let n = g.node_count();
        let m = m_raw % n;
        let before = state_for(n, 3, &flat);
        let mut after = before.clone();
        average_projection(&mut after, m, &g);
        prop_assert!(feasibility_distance(&after) <= feasibility_distance(&before) + 1e-12);

        let hood = g.closed_neighborhood(m);
        let mut mean = vec![0.0; 3];
        for &j in &hood {
            for (a, b) in mean.iter_mut().zip(before.node(j)) {
                *a += b / hood.len() as f64;
            }
        }
        for i in 0..n {
            if hood.contains(&i) {
                for (a, b) in after.node(i).iter().zip(&mean) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            } else {
                prop_assert_eq!(after.node(i), before.node(i));
            }
        }
        let mut twice = after.clone();
        average_projection(&mut twice, m, &g);
        for (a, b) in twice.as_slice().iter().zip(after.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradient_step_touches_one_node(
        flat in proptest::collection::vec(-2.0f64..2.0, 5 * 3),
        node in 0usize..5,
        x in proptest::collection::vec(-2.0f64..2.0, 2),
        alpha in 0.01f64..1.0,
    ) {
        let model = LossModel::new(LossKind::Lasso, 2, 1, 0.0).unwrap().with_bias(true);
        let before = state_for(5, 3, &flat);
        let mut after = before.clone();
        gradient_step(&mut after, node, &Sample::new(x, Label::Value(1.0)), alpha, &model).unwrap();
        for i in (0..5).filter(|&i| i != node) {
            prop_assert_eq!(after.node(i), before.node(i));
        }
    }

    #[test]
    fn regular_projection_preserves_node_sum(flat in proptest::collection::vec(-5.0f64..5.0, 8), m in 0usize..8) {
        let g = build_k_regular(8, 4, 0).unwrap();
        let mut s = GlobalState::from_scalars(&flat);
        let before: f64 = flat.iter().sum();
        average_projection(&mut s, m, &g);
        prop_assert!((s.as_slice().iter().sum::<f64>() - before).abs() <= 1e-12);
    }
}

#[test]
fn pure_gossip_reaches_consensus_and_keeps_mean() {
    let g = build_k_regular(10, 2, 0).unwrap();
    let problem = Problem::scalar_gossip(g, 0.0, 5000, 3);
    let initial_mean = problem.init.mean()[0];
    let (trace, state) = run_problem_serial(problem).unwrap();
    let last = trace.last().unwrap();
    assert_eq!(last.grad_steps, 0);
    assert!(
        last.d_k < 1e-6 * trace.first().unwrap().d_k.max(1.0),
        "{}",
        last.d_k
    );
    assert!((state.mean()[0] - initial_mean).abs() < 1e-9);
}

#[test]
fn single_node_sgd_decreases_objective() {
    let samples: Vec<Sample> = (0..200)
        .map(|i| {
            let x = (i as f64) / 100.0 - 1.0;
            Sample::new(vec![x], Label::Value(2.0 * x + 0.5))
        })
        .collect();
    let ds = Dataset::new(samples.clone());
    let model = LossModel::new(LossKind::Lasso, 1, 1, 0.0)
        .unwrap()
        .with_bias(true);
    let mut problem = Problem::scalar_gossip(Graph::empty(1).unwrap(), 1.0, 3000, 1);
    problem.model = model.clone();
    problem.init = GlobalState::zeros(1, 2);
    problem.schedule = StepSchedule::inverse_k(10.0, 10.0).unwrap();
    problem.oracles = vec![NodeOracle::Finite {
        samples: std::sync::Arc::new(samples),
        indices: (0..200).collect(),
        rng: gossipgrad::rng::stream_rng(1, gossipgrad::rng::Stream::Samples, 0),
    }];
    let before = empirical_objective(&model, &ds, &[0.0, 0.0]).unwrap();
    let (_, state) = run_problem_serial(problem).unwrap();
    let after = empirical_objective(&model, &ds, state.node(0)).unwrap();
    assert!(after < 0.1 * before, "{before} -> {after}");
}

fn avg_fraction(p_grad: f64, seed: u64) -> f64 {
    let g = build_k_regular(12, 4, 0).unwrap();
    let problem = Problem::scalar_gossip(g, p_grad, 2000, seed);
    let out = run_async(problem, &[1.0 / 12.0; 12]).unwrap();
    let last = out.trace.last().unwrap();
    assert_eq!(last.k, last.grad_steps + last.avg_steps);
    last.avg_steps as f64 / last.k as f64
}

#[test]
fn lower_p_grad_means_more_averaging() {
    let low: f64 = (0..10).map(|s| avg_fraction(0.2, s)).sum::<f64>() / 10.0;
    let high: f64 = (0..10).map(|s| avg_fraction(0.8, s)).sum::<f64>() / 10.0;
    assert!(low > high, "{low} vs {high}");
}

#[test]
fn serial_replay_is_deterministic() {
    let g = build_k_regular(9, 4, 0).unwrap();
    let a = run_problem_serial(Problem::scalar_gossip(g.clone(), 0.5, 3000, 8))
        .unwrap()
        .0;
    let b = run_problem_serial(Problem::scalar_gossip(g, 0.5, 3000, 8))
        .unwrap()
        .0;
    assert_eq!(a, b);
    assert_eq!(MetricsTrace::from_csv(&a.to_csv()).unwrap(), a);
}

#[test]
fn consensus_distance_of_consensus_state_is_zero() {
    let s = GlobalState::from_rows(vec![vec![1.5, -2.0]; 6]);
    assert_eq!(consensus_distance(&s), 0.0);
    assert_eq!(feasibility_distance(&s), 0.0);
}
