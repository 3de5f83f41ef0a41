//! Central finite-difference checks of the tape's analytic gradients.
//!
//! Every check builds a scalar objective `Σ w ⊙ f(inputs)` with fixed random
//! weights `w`, differentiates it on the tape and compares selected input
//! coordinates against `(L(x + h) − L(x − h)) / 2h` evaluated by re-running
//! the forward computation only.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{RowLayout, SegmentIndex, Tape, Tensor, Var};
use crate::error::Result;
use crate::layers::{traverse_layer, LayerOptions, TraverseLayerParams};
use crate::model::{forward, Mode, ModelConfig, ModelGraphs, ModelParams};
use crate::stgraph::{SpatialGraph, TraverseGraph};

pub const STEP: f64 = 1e-5;
/// Gradient magnitude below which errors are measured absolutely.
pub const FLOOR: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Compares analytic and numeric gradients of `objective` with respect to
/// every tensor in `inputs`, sampling at most `per_tensor` coordinates each.
pub fn check<F>(name: &str, inputs: &[Tensor], per_tensor: usize, rng: &mut ChaCha8Rng, objective: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = objective(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = objective(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut coords = 0;
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut idx: Vec<usize> = (0..inputs[k].len()).collect();
        idx.shuffle(rng);
        idx.truncate(per_tensor);
        for i in idx {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + STEP;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - STEP;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
            coords += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: worst,
        coords,
    })
}

fn weighted_sum(tape: &mut Tape, out: Var, weights: &Arc<Vec<f64>>) -> Result<Var> {
    let masked = tape.mask(out, weights.clone())?;
    Ok(tape.sum(masked))
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, rng)
}

fn rand_weights(n: usize, rng: &mut ChaCha8Rng) -> Arc<Vec<f64>> {
    Arc::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn ragged_index(rng: &mut ChaCha8Rng, segments: usize, sources: usize) -> SegmentIndex {
    SegmentIndex::from_segments((0..segments).map(|s| {
        let n = rng.random_range(1..5);
        let srcs: Vec<usize> = (0..n).map(|_| rng.random_range(0..sources)).collect();
        (s, srcs)
    }))
}

/// Per-operation checks on random inputs in `[-2, 2]`.
pub fn operation_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let r = &mut rng;

    let w = rand_weights(6, r);
    let ins = [rand_tensor(&[3, 4], r), rand_tensor(&[4, 2], r)];
    out.push(check("matmul", &ins, 16, r, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, &w)
    })?);

    let w = rand_weights(12, r);
    let ins = [rand_tensor(&[4, 3], r), rand_tensor(&[3], r), rand_tensor(&[4, 3], r)];
    out.push(check("add_row/add/mul", &ins, 16, r, |t, v| {
        let a = t.add_row(v[0], v[1])?;
        let b = t.add(a, v[2])?;
        let c = t.mul(b, v[2])?;
        let c = t.scale(c, 0.7);
        weighted_sum(t, c, &w)
    })?);

    // Keep inputs away from the kink so both finite-difference probes stay on one side.
    let mut x = rand_tensor(&[10], r);
    x.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 1e-2 {
            *v += 0.1
        }
    });
    let w = rand_weights(10, r);
    out.push(check("leaky_relu", &[x], 10, r, |t, v| {
        let y = t.leaky_relu(v[0], 0.2);
        weighted_sum(t, y, &w)
    })?);

    let idx = Arc::new(ragged_index(r, 5, 7));
    let n = idx.num_sources();
    let w = rand_weights(n, r);
    let ins = [rand_tensor(&[n], r)];
    out.push(check("segment_softmax", &ins, n, r, |t, v| {
        let y = t.segment_softmax(v[0], idx.clone())?;
        weighted_sum(t, y, &w)
    })?);

    let w = rand_weights(n, r);
    let ins = [rand_tensor(&[5, 1], r), rand_tensor(&[7, 1], r)];
    out.push(check("edge_scores", &ins, 8, r, |t, v| {
        let y = t.edge_scores(v[0], v[1], idx.clone())?;
        weighted_sum(t, y, &w)
    })?);

    let w = rand_weights(5 * 3, r);
    let ins = [rand_tensor(&[n], r), rand_tensor(&[7, 3], r)];
    out.push(check("segment_weighted_sum", &ins, 16, r, |t, v| {
        let y = t.segment_weighted_sum(v[0], v[1], idx.clone())?;
        weighted_sum(t, y, &w)
    })?);

    let w = rand_weights(6, r);
    let ins = [rand_tensor(&[4, 2], r), rand_tensor(&[2, 2], r)];
    out.push(check("slice/concat", &ins, 8, r, |t, v| {
        let s = t.slice_rows(v[0], 1, 2)?;
        let s = t.reshape(s, &[2, 2])?;
        let c = t.concat_rows(s, v[1])?;
        let c = t.slice_rows(c, 1, 3)?;
        weighted_sum(t, c, &w)
    })?);

    let layout = RowLayout {
        batch: 2,
        nodes: 3,
        steps: 4,
    };
    let d = 2;
    let w = rand_weights(layout.rows() * d, r);
    let ins = [
        rand_tensor(&[layout.rows(), d], r),
        rand_tensor(&[3, d], r),
        rand_tensor(&[3, d], r),
    ];
    out.push(check("batch_norm(train)", &ins, 24, r, |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], layout, 1e-5, None)?;
        weighted_sum(t, y, &w)
    })?);
    let mean: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..6).map(|_| r.random_range(0.1..2.0)).collect();
    out.push(check("batch_norm(eval)", &ins, 24, r, |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], layout, 1e-5, Some((&mean, &var)))?;
        weighted_sum(t, y, &w)
    })?);

    let w = rand_weights(3 * 2, r);
    let ins = [rand_tensor(&[3 * 4, 3], r), rand_tensor(&[2, 3, 4], r)];
    out.push(check("conv_time", &ins, 24, r, |t, v| {
        let y = t.conv_time(v[0], v[1], 4)?;
        weighted_sum(t, y, &w)
    })?);

    // Targets offset from predictions so no residual sits near the tie.
    let pred = rand_tensor(&[8], r);
    let target: Vec<f64> = pred
        .data()
        .iter()
        .map(|p| p + if r.random::<bool>() { 0.5 } else { -0.5 } * r.random_range(0.2..2.0))
        .collect();
    let target = Arc::new(target);
    out.push(check("mae_loss", &[pred], 8, r, |t, v| t.mae_loss(v[0], target.clone()))?);

    Ok(out)
}

/// Gradient check of one traverse layer with respect to its input and all parameters.
pub fn layer_check(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = SpatialGraph::from_edge_list(4, &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)], false)?;
    let (steps, window, d, batch) = (5, 2, 3, 2);
    let tg = TraverseGraph::build(&g, steps, window)?;
    let rel = tg.batched(batch);
    let params = TraverseLayerParams::init(d, &mut rng);
    let mut inputs = vec![rand_tensor(&[batch * tg.vertex_rows(), d], &mut rng)];
    inputs.extend(params.tensors().into_iter().map(|(_, t)| t.clone()));
    let w = rand_weights(batch * tg.vertex_rows() * d, &mut rng);
    let opts = LayerOptions::default();
    check("traverse_layer", &inputs, 12, &mut rng, |t, v| {
        let mut it = v[1..].iter().copied();
        let vars = crate::layers::TraverseLayerVars::from_iter(&mut it, d);
        let out = traverse_layer(t, v[0], &rel, &vars, &opts)?;
        weighted_sum(t, out.hidden, &w)
    })
}

/// End-to-end check through the full network in training mode (batch
/// statistics, no dropout) for the given configuration.
pub fn model_check(cfg: &ModelConfig, graph: &SpatialGraph, batch: usize, per_tensor: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        dropout: 0.0,
        seed,
        ..cfg.clone()
    };
    let params = ModelParams::init(&cfg)?;
    let graphs = ModelGraphs::build(graph, &cfg)?;
    let x = rand_tensor(&[batch, cfg.n_nodes, cfg.steps, cfg.input_dim], &mut rng);
    let w = rand_weights(batch * cfg.n_nodes * cfg.horizon, &mut rng);
    let inputs: Vec<Tensor> = params.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let template = params.clone();

    let objective = |values: &[Tensor]| -> Result<(Tape, Var, Vec<Var>)> {
        let mut p = template.clone();
        for (dst, src) in p.tensors_mut().into_iter().zip(values) {
            *dst = src.clone();
        }
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let mut pass = forward(&p, &cfg, &x, &graphs, Mode::Train { rng: &mut dummy }, false)?;
        let loss = weighted_sum(&mut pass.tape, pass.prediction, &w)?;
        Ok((pass.tape, loss, pass.params))
    };

    let (mut tape, loss, vars) = objective(&inputs)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    let mut work = inputs.clone();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut idx: Vec<usize> = (0..inputs[k].len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(per_tensor);
        for i in idx {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + STEP;
            let (t, l, _) = objective(&work)?;
            let plus = t.value(l).data()[0];
            work[k].data_mut()[i] = orig - STEP;
            let (t, l, _) = objective(&work)?;
            let minus = t.value(l).data()[0];
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error(analytic.data()[i], numeric);
            if err > worst {
                worst = err;
            }
            coords += 1;
        }
    }
    Ok(CheckResult {
        name: format!("model(K={}, d={}, N={}, p={}, Q={})", cfg.n_layers, cfg.hidden, cfg.n_nodes, cfg.steps, cfg.window),
        max_rel_error: worst,
        coords,
    })
}

/// The reference end-to-end configuration for gradient checking.
pub fn reference_model() -> (ModelConfig, SpatialGraph) {
    let cfg = ModelConfig {
        n_nodes: 4,
        input_dim: 2,
        n_layers: 2,
        hidden: 8,
        window: 3,
        steps: 6,
        horizon: 3,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let g = SpatialGraph::from_edge_list(4, &[(0, 1), (1, 2), (2, 3), (3, 0)], true).expect("valid graph");
    (cfg, g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-7) - 1e-2).abs() < 1e-12);
    }

    #[test]
    fn operations_pass_one_seed() {
        for r in operation_checks(3).unwrap() {
            assert!(r.passed(), "{} {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn layer_passes_one_seed() {
        let r = layer_check(4).unwrap();
        assert!(r.passed(), "{}", r.max_rel_error);
    }
}
