//! Dense straight-loop form of the traverse layer, shared by the oracle
//! tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use traverse_core::engine::{Tape, Tensor};
use traverse_core::layers::{traverse_layer, AttentionParams, LayerOptions, TraverseLayerParams};
use traverse_core::stgraph::{SpatialGraph, TraverseGraph};

pub type Row = Vec<f64>;

pub fn row_times(x: &[f64], w: &Tensor) -> Row {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    (0..c).map(|j| (0..r).map(|i| x[i] * w.at(&[i, j])).sum()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn score(att: &AttentionParams, query: &[f64], key: &[f64], slope: f64) -> f64 {
    let d = query.len();
    let g = att.gamma.data();
    let s = dot(&row_times(query, &att.query), &g[..d]) + dot(&row_times(key, &att.key), &g[d..]);
    if s > 0.0 {
        s
    } else {
        slope * s
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn weighted(weights: &[f64], rows: &[Row]) -> Row {
    let mut out = vec![0.0; rows[0].len()];
    for (w, r) in weights.iter().zip(rows) {
        for (o, x) in out.iter_mut().zip(r) {
            *o += w * x;
        }
    }
    out
}

/// The layer written out vertex by vertex. `h[v][t]` is a row of width d.
pub fn dense_layer(h: &[Vec<Row>], g: &SpatialGraph, window: usize, p: &TraverseLayerParams, slope: f64) -> Vec<Vec<Row>> {
    let n = h.len();
    let steps = h[0].len();
    let mut out = vec![vec![Vec::new(); steps]; n];
    for v in 0..n {
        for t in 0..steps {
            let lags: Vec<usize> = (0..=window.min(t)).collect();
            let history = |u: usize, att: &AttentionParams, w: &Tensor| -> Row {
                let scores: Vec<f64> = lags.iter().map(|&m| score(att, &h[v][t], &h[u][t - m], slope)).collect();
                let rows: Vec<Row> = lags.iter().map(|&m| row_times(&h[u][t - m], w)).collect();
                weighted(&softmax(&scores), &rows)
            };
            let c_self = history(v, &p.att_c, &p.w_c);
            let mut candidates = vec![c_self.clone()];
            for u in 0..n {
                if u != v && g.has_edge(u, v) {
                    candidates.push(history(u, &p.att_e, &p.w_e));
                }
            }
            let scores: Vec<f64> = candidates.iter().map(|c| score(&p.att_r, &c_self, c, slope)).collect();
            let mixed = weighted(&softmax(&scores), &candidates);
            out[v][t] = row_times(&mixed, &p.w_s);
        }
    }
    out
}

pub fn random_graph(n: usize, rng: &mut ChaCha8Rng) -> SpatialGraph {
    let density = rng.random::<f64>();
    let mut pairs = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u != v && rng.random::<f64>() < density {
                pairs.push((u, v));
            }
        }
    }
    SpatialGraph::from_edge_list(n, &pairs, false).unwrap()
}

pub fn random_hidden(n: usize, steps: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Row>> {
    (0..n)
        .map(|_| (0..steps).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect())
        .collect()
}

pub fn flatten(h: &[Vec<Row>]) -> Tensor {
    let d = h[0][0].len();
    let data: Vec<f64> = h.iter().flatten().flatten().copied().collect();
    Tensor::new(&[data.len() / d, d], data).unwrap()
}

pub fn run_layer(h: &[Vec<Row>], g: &SpatialGraph, window: usize, p: &TraverseLayerParams, opts: &LayerOptions) -> Tensor {
    let tg = TraverseGraph::build(g, h[0].len(), window).unwrap();
    let mut tape = Tape::new();
    let hv = tape.leaf(flatten(h));
    let vars = p.bind(&mut tape);
    let out = traverse_layer(&mut tape, hv, &tg.batched(1), &vars, opts).unwrap();
    tape.value(out.hidden).clone()
}

pub fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b)
}


/// `out(v,t) = Σ_m α_c(h[v,t], h[v,t−m]) · h[v,t−m] W_c W_s`, the layer on a graph without edges.
pub fn temporal_reference(h: &[Vec<Row>], window: usize, p: &TraverseLayerParams, slope: f64) -> Tensor {
    let d = h[0][0].len();
    let mut want = Vec::new();
    for hv in h {
        for t in 0..hv.len() {
            let lags: Vec<usize> = (0..=window.min(t)).collect();
            let scores: Vec<f64> = lags.iter().map(|&m| score(&p.att_c, &hv[t], &hv[t - m], slope)).collect();
            let a = softmax(&scores);
            let mut acc = vec![0.0; d];
            for (w, &m) in a.iter().zip(&lags) {
                let r = row_times(&row_times(&hv[t - m], &p.w_c), &p.w_s);
                for (o, x) in acc.iter_mut().zip(r) {
                    *o += w * x;
                }
            }
            want.push(acc);
        }
    }
    flatten(&[want])
}

/// `out(v,t) = Σ_{u ∈ N(v) ∪ {v}} α_r(k_v, k_u) k_u W_s` with `k_v = h[v,t] W_c`
/// and `k_u = h[u,t] W_e`, the layer with a zero-length window.
pub fn spatial_reference(h: &[Vec<Row>], g: &SpatialGraph, p: &TraverseLayerParams, slope: f64) -> Tensor {
    let mut want = Vec::new();
    for v in 0..h.len() {
        for t in 0..h[v].len() {
            let q = row_times(&h[v][t], &p.w_c);
            let mut keys = vec![q.clone()];
            keys.extend(g.neighbors(v).iter().map(|&u| row_times(&h[u][t], &p.w_e)));
            let a = softmax(&keys.iter().map(|k| score(&p.att_r, &q, k, slope)).collect::<Vec<_>>());
            want.push(row_times(&weighted(&a, &keys), &p.w_s));
        }
    }
    flatten(&[want])
}

/// A random layer problem on at most `max_nodes` nodes.
pub struct Case {
    pub graph: SpatialGraph,
    pub hidden: Vec<Vec<Row>>,
    pub params: TraverseLayerParams,
    pub window: usize,
}

pub fn random_case(seed: u64, max_nodes: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_nodes);
    let steps = rng.random_range(1..=6);
    let window = rng.random_range(0..=steps);
    let d = rng.random_range(1..=4);
    let graph = random_graph(n, &mut rng);
    let hidden = random_hidden(n, steps, d, &mut rng);
    let params = TraverseLayerParams::init(d, &mut rng);
    Case {
        graph,
        hidden,
        params,
        window,
    }
}
