//! Message traverse layer and the projection layers around it.
//!
//! Hidden states are stored as a matrix with one row per `(batch, node, step)`
//! vertex and one column per channel. Weights act on row vectors, so a
//! projection is `h · W`.
//!
//! For a target vertex `(v, t)` the layer computes
//!
//! ```text
//! c_self(v,t)   = Σ_m α_c(h[v,t], h[v,t−m]) · h[v,t−m] W_c
//! c_nbr(u→v,t)  = Σ_m α_e(h[v,t], h[u,t−m]) · h[u,t−m] W_e
//! out(v,t)      = Σ_{u ∈ N(v) ∪ {v}} α_r(c_self, c_(u→v)) · c_(u→v) W_s
//! ```
//!
//! with `c_(v→v) = c_self` and every α a softmax over its segment of
//! `leaky_relu(γ_qᵀ Θ_q z_query + γ_kᵀ Θ_k z_key)`.

use std::sync::Arc;

use rand::Rng;

use crate::engine::{segment_softmax, uniform_weights, SegmentIndex, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::stgraph::{BatchedRelations, TraverseGraph};

pub const DEFAULT_SLOPE: f64 = 0.2;

/// Parameters of one attention family: query map, key map and the scoring
/// vector `γ = [γ_q; γ_k]` of length `2d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: Tensor,
    pub key: Tensor,
    pub gamma: Tensor,
}

impl AttentionParams {
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        AttentionParams {
            query: Tensor::glorot(&[d, d], d, d, rng),
            key: Tensor::glorot(&[d, d], d, d, rng),
            gamma: Tensor::glorot(&[2 * d, 1], 2 * d, 1, rng),
        }
    }

    fn dim(&self) -> usize {
        self.query.shape()[0]
    }

    /// Scalar score contribution `γ_qᵀ Θ_q` and `γ_kᵀ Θ_k` as length-d vectors.
    fn projections(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let g = self.gamma.data();
        let proj = |m: &Tensor, gam: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|i| (0..d).map(|j| m.data()[i * d + j] * gam[j]).sum())
                .collect()
        };
        (proj(&self.query, &g[..d]), proj(&self.key, &g[d..]))
    }
}

/// Attention weights of one query over a set of keys (rows of `keys`).
pub fn attention(query: &[f64], keys: &Tensor, params: &AttentionParams, slope: f64) -> Result<Vec<f64>> {
    let d = params.dim();
    if query.len() != d || keys.cols() != d || keys.shape().len() != 2 {
        return Err(Error::dim("attention", &[query.len()], keys.shape()));
    }
    let (qp, kp) = params.projections();
    let qs: f64 = query.iter().zip(&qp).map(|(a, b)| a * b).sum();
    let scores: Vec<f64> = keys
        .data()
        .chunks(d)
        .map(|k| {
            let s = qs + k.iter().zip(&kp).map(|(a, b)| a * b).sum::<f64>();
            if s > 0.0 {
                s
            } else {
                slope * s
            }
        })
        .collect();
    let index = SegmentIndex::from_segments([(0, 0..scores.len())]);
    segment_softmax(&scores, &index)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraverseLayerParams {
    pub w_s: Tensor,
    pub w_c: Tensor,
    pub w_e: Tensor,
    /// Outer attention over `N(v) ∪ {v}`.
    pub att_r: AttentionParams,
    /// Attention over a node's own history.
    pub att_c: AttentionParams,
    /// Attention over a neighbor's history, queried by the target's state.
    pub att_e: AttentionParams,
}

impl TraverseLayerParams {
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        TraverseLayerParams {
            w_s: Tensor::glorot(&[d, d], d, d, rng),
            w_c: Tensor::glorot(&[d, d], d, d, rng),
            w_e: Tensor::glorot(&[d, d], d, d, rng),
            att_r: AttentionParams::init(d, rng),
            att_c: AttentionParams::init(d, rng),
            att_e: AttentionParams::init(d, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_s.shape()[0]
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("w_s".to_string(), &self.w_s),
            ("w_c".to_string(), &self.w_c),
            ("w_e".to_string(), &self.w_e),
        ];
        for (name, a) in [("r", &self.att_r), ("c", &self.att_c), ("e", &self.att_e)] {
            out.push((format!("theta_{name}1"), &a.query));
            out.push((format!("theta_{name}2"), &a.key));
            out.push((format!("gamma_{name}"), &a.gamma));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w_s, &mut self.w_c, &mut self.w_e];
        for a in [&mut self.att_r, &mut self.att_c, &mut self.att_e] {
            out.push(&mut a.query);
            out.push(&mut a.key);
            out.push(&mut a.gamma);
        }
        out
    }

    /// Records the parameters as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> TraverseLayerVars {
        let mut vars = self.tensors().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect::<Vec<_>>().into_iter();
        TraverseLayerVars::from_iter(&mut vars, self.dim())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: Var,
    pub key: Var,
    pub gamma: Var,
}

/// Tape handles of one layer's parameters, in [`TraverseLayerParams::tensors`] order.
#[derive(Clone, Copy, Debug)]
pub struct TraverseLayerVars {
    pub w_s: Var,
    pub w_c: Var,
    pub w_e: Var,
    pub att_r: AttentionVars,
    pub att_c: AttentionVars,
    pub att_e: AttentionVars,
    pub dim: usize,
}

impl TraverseLayerVars {
    pub fn from_iter(vars: &mut impl Iterator<Item = Var>, dim: usize) -> Self {
        let mut next = || vars.next().expect("layer parameter count");
        let (w_s, w_c, w_e) = (next(), next(), next());
        let mut att = || AttentionVars {
            query: next(),
            key: next(),
            gamma: next(),
        };
        let (att_r, att_c, att_e) = (att(), att(), att());
        TraverseLayerVars {
            w_s,
            w_c,
            w_e,
            att_r,
            att_c,
            att_e,
            dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionMode {
    #[default]
    Learned,
    /// Every source in a segment gets weight `1/|S|`.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerOptions {
    pub slope: f64,
    pub attention: AttentionMode,
    pub record: bool,
}

impl Default for LayerOptions {
    fn default() -> Self {
        LayerOptions {
            slope: DEFAULT_SLOPE,
            attention: AttentionMode::Learned,
            record: false,
        }
    }
}

/// Attention weights captured from one layer application, aligned with the
/// sources of the batched relations.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub batch: usize,
    pub self_weights: Vec<f64>,
    pub neighbor_weights: Vec<f64>,
    pub outer_weights: Vec<f64>,
}

impl AttentionRecord {
    /// Neighbor attention of edge `u → v` for one batch element as a matrix
    /// with rows = lag `0..=Q` and columns = target step. Lags beyond the
    /// available history are 0.
    pub fn neighbor_heatmap(&self, tg: &TraverseGraph, u: usize, v: usize, sample: usize) -> Result<Vec<Vec<f64>>> {
        let segs = tg.pair_segments(u, v);
        if segs.is_empty() {
            return Err(Error::Contract(format!("{u} -> {v} is not an edge of the traverse graph")));
        }
        if sample >= self.batch {
            return Err(Error::Contract(format!("sample {sample} outside batch of {}", self.batch)));
        }
        let per_sample = tg.neighbor_relation().num_sources();
        let mut grid = vec![vec![0.0; tg.steps()]; tg.window() + 1];
        for (t, seg) in segs {
            let r = tg.neighbor_relation().range(seg);
            for (m, i) in r.enumerate() {
                grid[m][t] = self.neighbor_weights[sample * per_sample + i];
            }
        }
        Ok(grid)
    }
}

pub struct LayerOutput {
    pub hidden: Var,
    pub record: Option<AttentionRecord>,
}

fn family_weights(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    att: &AttentionVars,
    index: &Arc<SegmentIndex>,
    opts: &LayerOptions,
    dim: usize,
) -> Result<Var> {
    if opts.attention == AttentionMode::Uniform {
        index.require_non_empty()?;
        let n = index.num_sources();
        return Ok(tape.constant(Tensor::new(&[n], uniform_weights(index))?));
    }
    let gq = tape.slice_rows(att.gamma, 0, dim)?;
    let gk = tape.slice_rows(att.gamma, dim, dim)?;
    let qproj = tape.matmul(att.query, gq)?;
    let kproj = tape.matmul(att.key, gk)?;
    let qs = tape.matmul(queries, qproj)?;
    let ks = tape.matmul(keys, kproj)?;
    let logits = tape.edge_scores(qs, ks, index.clone())?;
    let act = tape.leaky_relu(logits, opts.slope);
    tape.segment_softmax(act, index.clone())
}

/// One message traverse layer over a batch of hidden states `h`
/// (`batch · N · p` rows, `d` columns).
pub fn traverse_layer(
    tape: &mut Tape,
    h: Var,
    rel: &BatchedRelations,
    params: &TraverseLayerVars,
    opts: &LayerOptions,
) -> Result<LayerOutput> {
    let d = params.dim;
    let hv = tape.value(h);
    if hv.cols() != d || hv.shape().len() != 2 {
        return Err(Error::Config(format!(
            "traverse layer of width {d} applied to hidden states of shape {:?}",
            hv.shape()
        )));
    }
    if hv.rows() != rel.self_relation.num_segments() {
        return Err(Error::Config(format!(
            "hidden states have {} rows but the traverse graph expects {}",
            hv.rows(),
            rel.self_relation.num_segments()
        )));
    }
    let wc_h = tape.matmul(h, params.w_c)?;
    let we_h = tape.matmul(h, params.w_e)?;

    let alpha_c = family_weights(tape, h, h, &params.att_c, &rel.self_relation, opts, d)?;
    let c_self = tape.segment_weighted_sum(alpha_c, wc_h, rel.self_relation.clone())?;

    let alpha_e = family_weights(tape, h, h, &params.att_e, &rel.neighbor_relation, opts, d)?;
    let c_nbr = tape.segment_weighted_sum(alpha_e, we_h, rel.neighbor_relation.clone())?;

    let candidates = tape.concat_rows(c_self, c_nbr)?;
    let alpha_r = family_weights(tape, c_self, candidates, &params.att_r, &rel.outer_relation, opts, d)?;
    let mixed = tape.segment_weighted_sum(alpha_r, candidates, rel.outer_relation.clone())?;
    let hidden = tape.matmul(mixed, params.w_s)?;

    let record = opts.record.then(|| AttentionRecord {
        batch: rel.batch,
        self_weights: tape.value(alpha_c).data().to_vec(),
        neighbor_weights: tape.value(alpha_e).data().to_vec(),
        outer_weights: tape.value(alpha_r).data().to_vec(),
    });
    Ok(LayerOutput { hidden, record })
}

/// Shared affine projection `D → d` applied at every `(node, step)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl PreprocessParams {
    pub fn init<R: Rng>(input_dim: usize, d: usize, rng: &mut R) -> Self {
        PreprocessParams {
            weight: Tensor::glorot(&[input_dim, d], input_dim, d, rng),
            bias: Tensor::zeros(&[d]),
        }
    }
}

pub fn preprocess(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let projected = tape.matmul(x, weight)?;
    tape.add_row(projected, bias)
}

/// `1 × p` convolution over time followed by a per-node affine map `d → q`.
#[derive(Clone, Debug, PartialEq)]
pub struct PostprocessParams {
    pub kernel: Tensor,
    pub conv_bias: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl PostprocessParams {
    pub fn init<R: Rng>(d: usize, steps: usize, horizon: usize, rng: &mut R) -> Self {
        PostprocessParams {
            kernel: Tensor::glorot(&[d, d, steps], d * steps, d * steps, rng),
            conv_bias: Tensor::zeros(&[d]),
            weight: Tensor::glorot(&[d, horizon], d, horizon, rng),
            bias: Tensor::zeros(&[horizon]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PostprocessVars {
    pub kernel: Var,
    pub conv_bias: Var,
    pub weight: Var,
    pub bias: Var,
}

/// Maps hidden rows `(series, step)` to `[series, q]` predictions.
pub fn postprocess(tape: &mut Tape, h: Var, params: &PostprocessVars, steps: usize) -> Result<Var> {
    let ks = tape.value(params.kernel).shape().to_vec();
    if ks.len() != 3 || ks[2] != steps {
        return Err(Error::Config(format!(
            "convolution kernel {ks:?} does not span the {steps}-step input"
        )));
    }
    let squeezed = tape.conv_time(h, params.kernel, steps)?;
    let squeezed = tape.add_row(squeezed, params.conv_bias)?;
    let projected = tape.matmul(squeezed, params.weight)?;
    tape.add_row(projected, params.bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stgraph::SpatialGraph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_key_gets_full_weight() {
        let p = AttentionParams::init(3, &mut rng(1));
        let keys = Tensor::new(&[1, 3], vec![0.3, -1.0, 2.0]).unwrap();
        assert_eq!(attention(&[1.0, 2.0, 3.0], &keys, &p, 0.2).unwrap(), vec![1.0]);
    }

    #[test]
    fn identical_keys_are_uniform() {
        let p = AttentionParams::init(2, &mut rng(2));
        let keys = Tensor::new(&[3, 2], vec![0.5, -0.5, 0.5, -0.5, 0.5, -0.5]).unwrap();
        for w in attention(&[1.0, 0.0], &keys, &p, 0.2).unwrap() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn scalar_attention_by_hand() {
        // d = 1: score = leaky(γq θq z_q + γk θk z_k)
        let p = AttentionParams {
            query: Tensor::new(&[1, 1], vec![2.0]).unwrap(),
            key: Tensor::new(&[1, 1], vec![-1.0]).unwrap(),
            gamma: Tensor::new(&[2, 1], vec![0.5, 1.5]).unwrap(),
        };
        let keys = Tensor::new(&[3, 1], vec![1.0, -2.0, 0.2]).unwrap();
        let w = attention(&[0.4], &keys, &p, 0.2).unwrap();
        // query part 0.4; key parts -1.5, 3.0, -0.3 -> logits -0.22, 3.4, 0.1
        let logits: [f64; 3] = [0.2 * (0.4 - 1.5), 3.4, 0.1];
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (wi, l) in w.iter().zip(logits) {
            assert!((wi - l.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let g = SpatialGraph::edgeless(1);
        let tg = TraverseGraph::build(&g, 2, 1).unwrap();
        let params = TraverseLayerParams::init(3, &mut rng(3));
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let h = tape.constant(Tensor::zeros(&[2, 4]));
        let err = traverse_layer(&mut tape, h, &tg.batched(1), &vars, &LayerOptions::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn recorded_weights_are_normalised() {
        let g = SpatialGraph::from_edge_list(3, &[(0, 1), (1, 2), (2, 0)], true).unwrap();
        let tg = TraverseGraph::build(&g, 4, 2).unwrap();
        let params = TraverseLayerParams::init(4, &mut rng(4));
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let h = tape.constant(Tensor::uniform(&[2 * 12, 4], -1.0, 1.0, &mut rng(5)));
        let rel = tg.batched(2);
        let opts = LayerOptions {
            record: true,
            ..LayerOptions::default()
        };
        let out = traverse_layer(&mut tape, h, &rel, &vars, &opts).unwrap();
        let rec = out.record.unwrap();
        for (w, idx) in [
            (&rec.self_weights, &rel.self_relation),
            (&rec.neighbor_weights, &rel.neighbor_relation),
            (&rec.outer_weights, &rel.outer_relation),
        ] {
            for seg in 0..idx.num_segments() {
                let s: f64 = w[idx.range(seg)].iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
        let map = rec.neighbor_heatmap(&tg, 0, 1, 1).unwrap();
        assert_eq!(map.len(), 3);
        assert_eq!(map[2][1], 0.0);
        assert!(rec.neighbor_heatmap(&tg, 0, 0, 0).is_err());
    }

    #[test]
    fn uniform_mode_weights() {
        let g = SpatialGraph::from_edge_list(2, &[(0, 1)], true).unwrap();
        let tg = TraverseGraph::build(&g, 3, 2).unwrap();
        let params = TraverseLayerParams::init(2, &mut rng(6));
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let h = tape.constant(Tensor::uniform(&[6, 2], -1.0, 1.0, &mut rng(7)));
        let opts = LayerOptions {
            attention: AttentionMode::Uniform,
            record: true,
            ..LayerOptions::default()
        };
        let rel = tg.batched(1);
        let rec = traverse_layer(&mut tape, h, &rel, &vars, &opts).unwrap().record.unwrap();
        for seg in 0..rel.self_relation.num_segments() {
            let r = rel.self_relation.range(seg);
            let n = r.len() as f64;
            for i in r {
                assert_eq!(rec.self_weights[i], 1.0 / n);
            }
        }
    }

    #[test]
    fn preprocess_identity_adds_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.constant(Tensor::eye(2));
        let b = tape.constant(Tensor::new(&[2], vec![0.5, -0.5]).unwrap());
        let y = preprocess(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 1.5, 3.5, 3.5]);
    }

    #[test]
    fn preprocess_zero_input_is_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let w = tape.constant(Tensor::glorot(&[2, 4], 2, 4, &mut rng(8)));
        let b = tape.constant(Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = preprocess(&mut tape, x, w, b).unwrap();
        for row in tape.value(y).data().chunks(4) {
            assert_eq!(row, &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    fn post_vars(tape: &mut Tape, p: &PostprocessParams) -> PostprocessVars {
        PostprocessVars {
            kernel: tape.constant(p.kernel.clone()),
            conv_bias: tape.constant(p.conv_bias.clone()),
            weight: tape.constant(p.weight.clone()),
            bias: tape.constant(p.bias.clone()),
        }
    }

    #[test]
    fn postprocess_identity_passes_hidden() {
        let mut kernel = Tensor::zeros(&[2, 2, 1]);
        kernel.set(&[0, 0, 0], 1.0);
        kernel.set(&[1, 1, 0], 1.0);
        let p = PostprocessParams {
            kernel,
            conv_bias: Tensor::zeros(&[2]),
            weight: Tensor::eye(2),
            bias: Tensor::zeros(&[2]),
        };
        let mut tape = Tape::new();
        let vars = post_vars(&mut tape, &p);
        let h = tape.constant(Tensor::new(&[3, 2], vec![1.0, -2.0, 0.5, 4.0, 3.0, 3.0]).unwrap());
        let y = postprocess(&mut tape, h, &vars, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 0.5, 4.0, 3.0, 3.0]);
    }

    #[test]
    fn postprocess_zero_hidden_composes_biases() {
        let mut p = PostprocessParams::init(3, 2, 2, &mut rng(9));
        p.conv_bias = Tensor::new(&[3], vec![1.0, -1.0, 2.0]).unwrap();
        p.bias = Tensor::new(&[2], vec![0.25, 0.5]).unwrap();
        let mut tape = Tape::new();
        let vars = post_vars(&mut tape, &p);
        let h = tape.constant(Tensor::zeros(&[4, 3]));
        let y = postprocess(&mut tape, h, &vars, 2).unwrap();
        for row in tape.value(y).data().chunks(2) {
            for j in 0..2 {
                let want: f64 = (0..3).map(|c| p.conv_bias.data()[c] * p.weight.at(&[c, j])).sum::<f64>() + p.bias.data()[j];
                assert!((row[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn postprocess_kernel_mismatch_is_config_error() {
        let p = PostprocessParams::init(2, 3, 2, &mut rng(10));
        let mut tape = Tape::new();
        let vars = post_vars(&mut tape, &p);
        let h = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(postprocess(&mut tape, h, &vars, 2), Err(Error::Config(_))));
    }
}
