use proptest::prelude::*;
use transactive::topology::{complete, metropolis_weights, nearest_k_ring, spectral_gap, star, Topology, WeightMatrix};

/// Random connected graph: a random spanning tree plus extra edges.
fn connected_graph() -> impl Strategy<Value = Topology> {
    (2usize..14).prop_flat_map(|n| {
        let parents: Vec<_> = (1..n).map(|i| 0..i).collect();
        let extra = proptest::collection::vec((0..n, 0..n), 0..2 * n);
        (Just(n), parents, extra).prop_map(|(n, parents, extra)| {
            let mut edges: Vec<(usize, usize)> = parents.iter().enumerate().map(|(i, &p)| (i + 1, p)).collect();
            edges.extend(extra.into_iter().filter(|(a, b)| a != b));
            Topology::from_edges(n, &edges).unwrap()
        })
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn spread(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metropolis_weights_are_doubly_stochastic(g in connected_graph()) {
        let w = metropolis_weights(&g).unwrap();
        w.validate(&g).unwrap();
        for i in 0..g.n {
            prop_assert!(w.w[i][i] > 0.0);
            for j in 0..g.n {
                prop_assert_eq!(w.w[i][j] > 0.0 || i == j, g.adjacency[i][j] || i == j);
            }
        }
    }

    #[test]
    fn mixing_preserves_the_average(
        g in connected_graph(),
        seed in proptest::collection::vec(-100.0f64..100.0, 14),
    ) {
        let w = metropolis_weights(&g).unwrap();
        let v = &seed[..g.n];
        let once = w.apply(v);
        prop_assert!((mean(&once) - mean(v)).abs() <= 1e-12 * (1.0 + mean(v).abs()) * g.n as f64);
    }

    #[test]
    fn repeated_mixing_contracts_towards_the_mean(
        g in connected_graph(),
        seed in proptest::collection::vec(-100.0f64..100.0, 14),
    ) {
        let w = metropolis_weights(&g).unwrap();
        let gap = spectral_gap(&w);
        prop_assert!(gap > 0.0 && gap <= 1.0 + 1e-12);
        let mut v = seed[..g.n].to_vec();
        let (m0, s0) = (mean(&v), spread(&v));
        for k in 1..=200 {
            v = w.apply(&v);
            let bound = (1.0 - gap).powi(k) * s0 + 1e-9;
            prop_assert!(spread(&v) <= bound, "round {} spread {} bound {}", k, spread(&v), bound);
        }
        prop_assert!((mean(&v) - m0).abs() <= 1e-9);
    }
}

/// Power iteration on the deflated matrix, independent of the eigen solver.
fn second_modulus(w: &WeightMatrix) -> f64 {
    let n = w.n();
    let mut v: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
    let mut norm = 0.0;
    for _ in 0..20000 {
        let m = mean(&v);
        v.iter_mut().for_each(|x| *x -= m);
        let next = w.apply(&v);
        let n1 = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        norm = n1 / n0;
        v = next.iter().map(|x| x / n1).collect();
    }
    norm
}

#[test]
fn spectral_gap_matches_power_iteration() {
    for g in [complete(6).unwrap(), star(7, 2).unwrap(), nearest_k_ring(9, 2).unwrap(), nearest_k_ring(10, 4).unwrap()] {
        let w = metropolis_weights(&g).unwrap();
        let oracle = 1.0 - second_modulus(&w);
        assert!((spectral_gap(&w) - oracle).abs() < 1e-6, "gap {} oracle {}", spectral_gap(&w), oracle);
    }
}

#[test]
fn denser_graphs_mix_faster() {
    let n = 10;
    let gap = |g: Topology| spectral_gap(&metropolis_weights(&g).unwrap());
    let (c, r4, r2) = (gap(complete(n).unwrap()), gap(nearest_k_ring(n, 4).unwrap()), gap(nearest_k_ring(n, 2).unwrap()));
    assert!((c - 1.0).abs() < 1e-12);
    assert!(c > r4 && r4 > r2 && r2 > 0.0);
}
