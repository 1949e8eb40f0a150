use gossipgrad::graph::{
    averaging_matrix, build_k_regular, build_random, eta_lower_bound, is_connected,
    singular_values, Graph,
};
use proptest::prelude::*;

fn regular_case() -> impl Strategy<Value = (usize, usize)> {
    (3usize..=16)
        .prop_flat_map(|n| (Just(n), 2usize..n))
        .prop_filter("n*k even", |(n, k)| (n * k) % 2 == 0)
}

proptest! {
    #[test]
    fn circulant_degree_symmetry_and_loops((n, k) in regular_case()) {
        let g = build_k_regular(n, k, 0).unwrap();
        prop_assert_eq!(g.regular_degree(), Some(k));
        prop_assert_eq!(g.edge_count(), n * k / 2);
        prop_assert!(is_connected(&g));
        for i in 0..n {
            prop_assert!(!g.has_edge(i, i));
            for &j in g.neighbors(i) {
                prop_assert!(g.has_edge(j, i));
            }
        }
    }

    #[test]
    fn averaging_matrix_is_stochastic_and_symmetric((n, k) in regular_case()) {
        let g = build_k_regular(n, k, 0).unwrap();
        let a = averaging_matrix(&g);
        let m = a.matrix();
        for i in 0..n {
            let row: f64 = m.row(i).iter().sum();
            prop_assert!((row - 1.0).abs() <= 1e-12);
            for j in 0..n {
                prop_assert_eq!(m[(i, j)], m[(j, i)]);
            }
        }
    }

    #[test]
    fn singular_values_in_unit_interval((n, k) in regular_case().prop_filter("n <= 10", |(n, _)| *n <= 10)) {
        let g = build_k_regular(n, k, 0).unwrap();
        let a = averaging_matrix(&g);
        let sv = singular_values(&a).unwrap();
        prop_assert!((sv[0] - 1.0).abs() <= 1e-9);
        prop_assert!(sv.iter().all(|s| (-1e-12..=1.0 + 1e-9).contains(s)));
        // the all-ones vector is a fixed point
        let ones = nalgebra::DVector::from_element(n, 1.0);
        let image = a.matrix() * &ones;
        prop_assert!((image - ones).amax() <= 1e-12);
    }

    #[test]
    fn lemma_bound_in_unit_interval((n, k) in regular_case()) {
        let g = build_k_regular(n, k, 0).unwrap();
        let b = eta_lower_bound(&g).unwrap().eta_lower_bound.unwrap();
        prop_assert!(b > 0.0 && b <= 1.0 + 1e-9, "bound {b}");
    }

    #[test]
    fn edge_list_round_trip((n, k) in regular_case()) {
        let g = build_k_regular(n, k, 0).unwrap();
        let parsed: Graph = g.to_edge_list().parse().unwrap();
        prop_assert_eq!(parsed, g);
    }

    #[test]
    fn random_graphs_are_connected_and_seeded(n in 2usize..20, p in 0.3f64..1.0, seed in any::<u64>()) {
        let g = build_random(n, p, seed).unwrap();
        prop_assert!(is_connected(&g));
        prop_assert_eq!(build_random(n, p, seed).unwrap(), g);
    }
}

#[test]
fn bound_is_monotone_in_degree_on_twelve_nodes() {
    let bounds: Vec<f64> = [2, 4, 6, 10]
        .iter()
        .map(|&k| {
            eta_lower_bound(&build_k_regular(12, k, 0).unwrap())
                .unwrap()
                .eta_lower_bound
                .unwrap()
        })
        .collect();
    assert!(
        bounds.windows(2).all(|w| w[1] >= w[0] - 1e-12),
        "{bounds:?}"
    );
}

#[test]
fn irregular_graph_has_no_bound() {
    let star = Graph::from_edges(4, [(0, 1), (0, 2), (0, 3)]).unwrap();
    let report = eta_lower_bound(&star).unwrap();
    assert_eq!(report.eta_lower_bound, None);
    assert!(report.sigma2 > 0.0 && report.sigma2 < 1.0);
}
