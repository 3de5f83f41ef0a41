//! Straight-loop re-derivations of the traverse layer and the graph
//! structure, checked against the segment-based implementation.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use traverse_core::engine::{Tape, Tensor};
use traverse_core::layers::{traverse_layer, LayerOptions, TraverseLayerParams};
use traverse_core::stgraph::{SpatialGraph, TraverseGraph, UNREACHABLE};

mod common;

use common::*;

#[test]
fn layer_matches_dense_loops() {
    for seed in 0..100u64 {
        let c = random_case(seed, 5);
        let slope = [0.2, 0.0, 0.5][seed as usize % 3];
        let opts = LayerOptions {
            slope,
            ..LayerOptions::default()
        };
        let got = run_layer(&c.hidden, &c.graph, c.window, &c.params, &opts);
        let want = flatten(&dense_layer(&c.hidden, &c.graph, c.window, &c.params, slope));
        let err = max_diff(&got, &want);
        assert!(err < 1e-9, "seed {seed}: differs by {err}");
    }
}

#[test]
fn edgeless_graph_is_temporal_attention() {
    for seed in 1000..1050u64 {
        let c = random_case(seed, 4);
        let n = c.graph.n_nodes();
        let got = run_layer(&c.hidden, &SpatialGraph::edgeless(n), c.window, &c.params, &LayerOptions::default());
        let want = temporal_reference(&c.hidden, c.window, &c.params, 0.2);
        assert!(max_diff(&got, &want) < 1e-9, "seed {seed}");
    }
}

#[test]
fn zero_window_is_spatial_attention() {
    for seed in 2000..2050u64 {
        let c = random_case(seed, 5);
        let got = run_layer(&c.hidden, &c.graph, 0, &c.params, &LayerOptions::default());
        let want = spatial_reference(&c.hidden, &c.graph, &c.params, 0.2);
        assert!(max_diff(&got, &want) < 1e-9, "seed {seed}");
    }
}

#[test]
fn relabelling_nodes_permutes_the_output() {
    for case in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + case);
        let (n, steps, d) = (rng.random_range(2..=5), rng.random_range(1..=5), rng.random_range(1..=3));
        let window = rng.random_range(0..=steps);
        let g = random_graph(n, &mut rng);
        let h = random_hidden(n, steps, d, &mut rng);
        let p = TraverseLayerParams::init(d, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut hp = vec![Vec::new(); n];
        for (old, &new) in perm.iter().enumerate() {
            hp[new] = h[old].clone();
        }
        let opts = LayerOptions::default();
        let out = run_layer(&h, &g, window, &p, &opts);
        let out_p = run_layer(&hp, &g.permuted(&perm).unwrap(), window, &p, &opts);
        for (old, &new) in perm.iter().enumerate() {
            for t in 0..steps {
                for c in 0..d {
                    let a = out.at(&[old * steps + t, c]);
                    let b = out_p.at(&[new * steps + t, c]);
                    assert!((a - b).abs() < 1e-12, "case {case}");
                }
            }
        }
    }
}

#[test]
fn attention_weights_are_convex() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = random_graph(5, &mut rng);
    let h = random_hidden(5, 6, 3, &mut rng);
    let p = TraverseLayerParams::init(3, &mut rng);
    let tg = TraverseGraph::build(&g, 6, 3).unwrap();
    let mut tape = Tape::new();
    let hv = tape.leaf(flatten(&h));
    let vars = p.bind(&mut tape);
    let opts = LayerOptions {
        record: true,
        ..LayerOptions::default()
    };
    let rec = traverse_layer(&mut tape, hv, &tg.batched(1), &vars, &opts).unwrap().record.unwrap();
    for (w, idx) in [
        (&rec.self_weights, tg.self_relation()),
        (&rec.neighbor_weights, tg.neighbor_relation()),
        (&rec.outer_weights, tg.outer_relation()),
    ] {
        for s in 0..idx.num_segments() {
            let seg = &w[idx.range(s)];
            assert!(seg.iter().all(|&a| a >= 0.0));
            assert!((seg.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (r, k, c) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        let a = Tensor::uniform(&[r, k], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[k, c], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let out = tape.matmul(va, vb).unwrap();
        for i in 0..r {
            for j in 0..c {
                let want: f64 = (0..k).map(|m| a.at(&[i, m]) * b.at(&[m, j])).sum();
                assert!((tape.value(out).at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn time_convolution_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let (series, steps, d, d_out) = (
            rng.random_range(1..4),
            rng.random_range(1..6),
            rng.random_range(1..4),
            rng.random_range(1..4),
        );
        let x = Tensor::uniform(&[series * steps, d], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform(&[d_out, d, steps], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (vx, vk) = (tape.leaf(x.clone()), tape.leaf(k.clone()));
        let out = tape.conv_time(vx, vk, steps).unwrap();
        for s in 0..series {
            for o in 0..d_out {
                let mut want = 0.0;
                for t in 0..steps {
                    for c in 0..d {
                        want += k.at(&[o, c, t]) * x.at(&[s * steps + t, c]);
                    }
                }
                assert!((tape.value(out).at(&[s, o]) - want).abs() < 1e-12);
            }
        }
    }
}

fn arb_graph() -> impl Strategy<Value = SpatialGraph> {
    (1usize..8).prop_flat_map(|n| {
        proptest::collection::vec((0..n, 0..n), 0..20)
            .prop_map(move |pairs| SpatialGraph::from_edge_list(n, &pairs, false).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn edge_count_follows_the_law(g in arb_graph(), steps in 1usize..10, window in 0usize..10) {
        let tg = TraverseGraph::build(&g, steps, window).unwrap();
        let mut want = 0;
        for v in 0..g.n_nodes() {
            for t in 0..steps {
                want += (g.neighbors(v).len() + 1) * (window.min(t) + 1);
            }
        }
        prop_assert_eq!(tg.edge_count(), want);
    }

    #[test]
    fn hop_distance_matches_floyd_warshall(g in arb_graph()) {
        let n = g.n_nodes();
        let inf = usize::MAX / 4;
        let mut dist = vec![vec![inf; n]; n];
        for (i, row) in dist.iter_mut().enumerate() {
            row[i] = 0;
        }
        for &(u, v) in g.edges() {
            dist[u][v] = 1;
            dist[v][u] = 1;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if dist[i][k] + dist[k][j] < dist[i][j] {
                        dist[i][j] = dist[i][k] + dist[k][j];
                    }
                }
            }
        }
        for v in 0..n {
            let hops = g.hop_distance(v);
            for u in 0..n {
                let want = if dist[v][u] >= inf { UNREACHABLE } else { dist[v][u] };
                prop_assert_eq!(hops[u], want);
            }
        }
    }
}
