//! Full forecasting network: preprocess, a stack of traverse layers with
//! residual adds and node-wise batch norm, and the convolutional head.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{BatchStats, RowLayout, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{
    postprocess, preprocess, traverse_layer, AttentionMode, AttentionRecord, LayerOptions, PostprocessParams,
    PostprocessVars, PreprocessParams, TraverseLayerParams, TraverseLayerVars, DEFAULT_SLOPE,
};
use crate::stgraph::{SpatialGraph, TraverseGraph};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Hash)]
pub enum Ablation {
    #[default]
    Default,
    NoSpatial,
    NoStTraversing,
    NoAttention,
    NoResidual,
    NoNorm,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NoSpatial,
        Ablation::NoStTraversing,
        Ablation::NoAttention,
        Ablation::NoResidual,
        Ablation::NoNorm,
        Ablation::Default,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Default => "default",
            Ablation::NoSpatial => "no_spatial",
            Ablation::NoStTraversing => "no_st_traversing",
            Ablation::NoAttention => "no_attention",
            Ablation::NoResidual => "no_residual",
            Ablation::NoNorm => "no_norm",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_nodes: usize,
    pub input_dim: usize,
    pub n_layers: usize,
    pub hidden: usize,
    pub window: usize,
    pub steps: usize,
    pub horizon: usize,
    pub dropout: f64,
    pub slope: f64,
    pub ablation: Ablation,
    /// Normalise the layer output before the residual add instead of after.
    pub norm_before_residual: bool,
    /// Order of the split stages under `no_st_traversing`.
    pub spatial_first: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_nodes: 1,
            input_dim: 1,
            n_layers: 3,
            hidden: 64,
            window: 12,
            steps: 12,
            horizon: 12,
            dropout: 0.1,
            slope: DEFAULT_SLOPE,
            ablation: Ablation::Default,
            norm_before_residual: false,
            spatial_first: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.n_nodes >= 1, "n_nodes must be at least 1"),
            (self.input_dim >= 1, "input_dim must be at least 1"),
            (self.n_layers >= 1, "n_layers must be at least 1"),
            (self.hidden >= 1, "hidden must be at least 1"),
            (self.steps >= 1, "steps must be at least 1"),
            (self.horizon >= 1, "horizon must be at least 1"),
            ((0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1)"),
            (self.slope.is_finite(), "slope must be finite"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }

    pub fn pipeline(&self) -> Pipeline {
        apply_ablation(self)
    }
}

/// What each ablation does to the forward pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pipeline {
    pub neighbors: bool,
    pub split_stages: bool,
    pub attention: AttentionMode,
    pub residual: bool,
    pub norm: bool,
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let layer = if self.split_stages {
            "temporal-attention -> spatial-attention"
        } else if self.neighbors {
            "traverse"
        } else {
            "traverse(no neighbors)"
        };
        write!(f, "preprocess -> K x [{layer}")?;
        if self.attention == AttentionMode::Uniform {
            write!(f, " (uniform weights)")?;
        }
        if self.residual {
            write!(f, " -> +residual")?;
        }
        if self.norm {
            write!(f, " -> node batch-norm")?;
        }
        write!(f, " -> dropout] -> postprocess")
    }
}

pub fn apply_ablation(cfg: &ModelConfig) -> Pipeline {
    let a = cfg.ablation;
    Pipeline {
        neighbors: a != Ablation::NoSpatial,
        split_stages: a == Ablation::NoStTraversing,
        attention: if a == Ablation::NoAttention {
            AttentionMode::Uniform
        } else {
            AttentionMode::Learned
        },
        residual: a != Ablation::NoResidual,
        norm: a != Ablation::NoNorm,
    }
}

/// Traverse graphs the configured pipeline runs on.
#[derive(Debug)]
pub struct ModelGraphs {
    /// Main graph; the temporal stage when stages are split.
    pub main: TraverseGraph,
    /// Concurrent-only graph for the spatial stage of `no_st_traversing`.
    pub spatial: Option<TraverseGraph>,
}

impl ModelGraphs {
    pub fn build(g: &SpatialGraph, cfg: &ModelConfig) -> Result<Self> {
        if g.n_nodes() != cfg.n_nodes {
            return Err(Error::Config(format!(
                "graph has {} nodes, model expects {}",
                g.n_nodes(),
                cfg.n_nodes
            )));
        }
        let pipe = cfg.pipeline();
        let edgeless = SpatialGraph::edgeless(g.n_nodes());
        let main_graph = if pipe.neighbors && !pipe.split_stages { g } else { &edgeless };
        let main = TraverseGraph::build(main_graph, cfg.steps, cfg.window)?;
        let spatial = if pipe.split_stages {
            Some(TraverseGraph::build(g, cfg.steps, 0)?)
        } else {
            None
        };
        Ok(ModelGraphs { main, spatial })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gain: Tensor,
    pub bias: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl NormParams {
    fn new(n_nodes: usize, d: usize) -> Self {
        NormParams {
            gain: Tensor::ones(&[n_nodes, d]),
            bias: Tensor::zeros(&[n_nodes, d]),
            running_mean: vec![0.0; n_nodes * d],
            running_var: vec![1.0; n_nodes * d],
        }
    }

    /// Folds batch statistics into the running estimates; the variance uses
    /// the unbiased batch estimate.
    pub fn update(&mut self, stats: &BatchStats, momentum: f64) {
        let n = stats.count as f64;
        let unbias = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - momentum) * *r + momentum * v * unbias;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerBlock {
    pub traverse: TraverseLayerParams,
    /// Second stage under `no_st_traversing`.
    pub spatial: Option<TraverseLayerParams>,
    pub norm: Option<NormParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub pre: PreprocessParams,
    pub layers: Vec<LayerBlock>,
    pub post: PostprocessParams,
}

impl ModelParams {
    /// Seeded initialisation: Glorot-uniform weights, zero biases, unit norm gains.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let pipe = cfg.pipeline();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.hidden;
        let pre = PreprocessParams::init(cfg.input_dim, d, &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|_| {
                let traverse = TraverseLayerParams::init(d, &mut rng);
                let spatial = pipe.split_stages.then(|| TraverseLayerParams::init(d, &mut rng));
                LayerBlock {
                    traverse,
                    spatial,
                    norm: pipe.norm.then(|| NormParams::new(cfg.n_nodes, d)),
                }
            })
            .collect();
        let post = PostprocessParams::init(d, cfg.steps, cfg.horizon, &mut rng);
        Ok(ModelParams { pre, layers, post })
    }

    /// Trainable tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("pre.weight".to_string(), &self.pre.weight),
            ("pre.bias".to_string(), &self.pre.bias),
        ];
        for (i, block) in self.layers.iter().enumerate() {
            out.extend(block.traverse.tensors().into_iter().map(|(n, t)| (format!("layer{i}.{n}"), t)));
            if let Some(sp) = &block.spatial {
                out.extend(sp.tensors().into_iter().map(|(n, t)| (format!("layer{i}.spatial.{n}"), t)));
            }
            if let Some(norm) = &block.norm {
                out.push((format!("layer{i}.norm.gain"), &norm.gain));
                out.push((format!("layer{i}.norm.bias"), &norm.bias));
            }
        }
        out.extend([
            ("post.kernel".to_string(), &self.post.kernel),
            ("post.conv_bias".to_string(), &self.post.conv_bias),
            ("post.weight".to_string(), &self.post.weight),
            ("post.bias".to_string(), &self.post.bias),
        ]);
        out
    }

    /// Mutable trainable tensors, same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.pre.weight, &mut self.pre.bias];
        for block in &mut self.layers {
            out.extend(block.traverse.tensors_mut());
            if let Some(sp) = &mut block.spatial {
                out.extend(sp.tensors_mut());
            }
            if let Some(norm) = &mut block.norm {
                out.push(&mut norm.gain);
                out.push(&mut norm.bias);
            }
        }
        out.extend([
            &mut self.post.kernel,
            &mut self.post.conv_bias,
            &mut self.post.weight,
            &mut self.post.bias,
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Order-sensitive checksum over trainable tensors and norm statistics.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0;
        let mut mix = |x: u64| h = h.rotate_left(7) ^ x.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        for (_, t) in self.tensors() {
            mix(t.checksum());
        }
        for block in &self.layers {
            if let Some(n) = &block.norm {
                n.running_mean.iter().chain(&n.running_var).for_each(|v| mix(v.to_bits()));
            }
        }
        h
    }

    pub fn update_norm_stats(&mut self, stats: &[Option<BatchStats>]) {
        for (block, s) in self.layers.iter_mut().zip(stats) {
            if let (Some(norm), Some(s)) = (&mut block.norm, s) {
                norm.update(s, NORM_MOMENTUM);
            }
        }
    }
}

/// Closed-form trainable parameter count for a configuration.
pub fn expected_parameter_count(cfg: &ModelConfig) -> usize {
    let pipe = cfg.pipeline();
    let d = cfg.hidden;
    let layer = 9 * d * d + 6 * d;
    let per_block = layer * if pipe.split_stages { 2 } else { 1 } + if pipe.norm { 2 * cfg.n_nodes * d } else { 0 };
    let pre = cfg.input_dim * d + d;
    let post = d * d * cfg.steps + d + d * cfg.horizon + cfg.horizon;
    pre + cfg.n_layers * per_block + post
}

pub enum Mode<'a> {
    /// Batch statistics and dropout; dropout masks are drawn from `rng`.
    Train { rng: &'a mut ChaCha8Rng },
    Eval,
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Result of one forward evaluation, still attached to its tape.
pub struct ForwardPass {
    pub tape: Tape,
    /// `[B, N, q]` predictions.
    pub prediction: Var,
    /// Leaf handles, aligned with [`ModelParams::tensors`].
    pub params: Vec<Var>,
    /// Per-layer attention of the main traverse stage, when requested.
    pub records: Vec<AttentionRecord>,
    pub norm_stats: Vec<Option<BatchStats>>,
}

fn dropout(tape: &mut Tape, h: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Train { rng } if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let n = tape.value(h).len();
            let mask: Vec<f64> = (0..n)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect();
            tape.mask(h, Arc::new(mask))
        }
        _ => Ok(h),
    }
}

/// Runs the network on `x` of shape `[B, N, p, D]`.
pub fn forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    x: &Tensor,
    graphs: &ModelGraphs,
    mut mode: Mode<'_>,
    record: bool,
) -> Result<ForwardPass> {
    let pipe = cfg.pipeline();
    let xs = x.shape();
    if xs.len() != 4 || xs[1] != cfg.n_nodes || xs[2] != cfg.steps || xs[3] != cfg.input_dim {
        return Err(Error::Config(format!(
            "input of shape {xs:?} does not match [B, {}, {}, {}]",
            cfg.n_nodes, cfg.steps, cfg.input_dim
        )));
    }
    let tg = &graphs.main;
    if tg.steps() != cfg.steps || tg.window() != cfg.window || tg.n_nodes() != cfg.n_nodes {
        return Err(Error::Config(format!(
            "traverse graph (N={}, p={}, Q={}) does not match the model (N={}, p={}, Q={})",
            tg.n_nodes(),
            tg.steps(),
            tg.window(),
            cfg.n_nodes,
            cfg.steps,
            cfg.window
        )));
    }
    if pipe.split_stages != graphs.spatial.is_some() || params.layers.len() != cfg.n_layers {
        return Err(Error::Config("graphs or parameters were built for a different ablation".into()));
    }
    let batch = xs[0];
    let layout = RowLayout {
        batch,
        nodes: cfg.n_nodes,
        steps: cfg.steps,
    };
    let rel = tg.batched(batch);
    let spatial_rel = graphs.spatial.as_ref().map(|g| g.batched(batch));

    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.tensors().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let mut it = leaves.iter().copied();
    let pre_w = it.next().unwrap();
    let pre_b = it.next().unwrap();
    struct BlockVars {
        traverse: TraverseLayerVars,
        spatial: Option<TraverseLayerVars>,
        norm: Option<(Var, Var)>,
    }
    let d = cfg.hidden;
    let blocks: Vec<BlockVars> = params
        .layers
        .iter()
        .map(|b| BlockVars {
            traverse: TraverseLayerVars::from_iter(&mut it, d),
            spatial: b.spatial.as_ref().map(|_| TraverseLayerVars::from_iter(&mut it, d)),
            norm: b.norm.as_ref().map(|_| (it.next().unwrap(), it.next().unwrap())),
        })
        .collect();
    let post = PostprocessVars {
        kernel: it.next().unwrap(),
        conv_bias: it.next().unwrap(),
        weight: it.next().unwrap(),
        bias: it.next().unwrap(),
    };

    let x_rows = tape.constant(x.clone().reshape(&[layout.rows(), cfg.input_dim])?);
    let mut h = preprocess(&mut tape, x_rows, pre_w, pre_b)?;
    if pipe.residual && cfg.input_dim == d {
        h = tape.add(h, x_rows)?;
    }
    h = dropout(&mut tape, h, cfg.dropout, &mut mode)?;

    let opts = LayerOptions {
        slope: cfg.slope,
        attention: pipe.attention,
        record,
    };
    let train = mode.is_train();
    let mut records = Vec::new();
    let mut norm_stats = Vec::new();
    for (block, vars) in params.layers.iter().zip(&blocks) {
        let mut out = match (&vars.spatial, &spatial_rel) {
            (Some(sp), Some(srel)) => {
                let (first, second) = if cfg.spatial_first {
                    ((sp, srel), (&vars.traverse, &rel))
                } else {
                    ((&vars.traverse, &rel), (sp, srel))
                };
                let a = traverse_layer(&mut tape, h, first.1, first.0, &opts)?;
                let b = traverse_layer(&mut tape, a.hidden, second.1, second.0, &opts)?;
                records.extend(if cfg.spatial_first { b.record } else { a.record });
                b.hidden
            }
            _ => {
                let o = traverse_layer(&mut tape, h, &rel, &vars.traverse, &opts)?;
                records.extend(o.record);
                o.hidden
            }
        };
        let mut stats = None;
        let normalise = |tape: &mut Tape, v: Var, stats: &mut Option<BatchStats>| -> Result<Var> {
            match (&block.norm, vars.norm) {
                (Some(np), Some((g, b))) => {
                    let frozen = (!train).then(|| (&np.running_mean[..], &np.running_var[..]));
                    let (y, s) = tape.batch_norm(v, g, b, layout, NORM_EPS, frozen)?;
                    *stats = s;
                    Ok(y)
                }
                _ => Ok(v),
            }
        };
        if cfg.norm_before_residual {
            out = normalise(&mut tape, out, &mut stats)?;
            if pipe.residual {
                out = tape.add(out, h)?;
            }
        } else {
            if pipe.residual {
                out = tape.add(out, h)?;
            }
            out = normalise(&mut tape, out, &mut stats)?;
        }
        norm_stats.push(stats);
        h = dropout(&mut tape, out, cfg.dropout, &mut mode)?;
    }

    let pred = postprocess(&mut tape, h, &post, cfg.steps)?;
    let prediction = tape.reshape(pred, &[batch, cfg.n_nodes, cfg.horizon])?;
    Ok(ForwardPass {
        tape,
        prediction,
        params: leaves,
        records,
        norm_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(ablation: Ablation) -> ModelConfig {
        ModelConfig {
            n_nodes: 3,
            input_dim: 2,
            n_layers: 2,
            hidden: 4,
            window: 2,
            steps: 4,
            horizon: 3,
            dropout: 0.0,
            ablation,
            seed: 11,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn defaults_match_reference_settings() {
        let c = ModelConfig::default();
        assert_eq!((c.n_layers, c.hidden, c.window, c.steps, c.horizon), (3, 64, 12, 12, 12));
        assert_eq!(c.dropout, 0.1);
    }

    #[test]
    fn same_seed_same_params() {
        let a = ModelParams::init(&small(Ablation::Default)).unwrap();
        let b = ModelParams::init(&small(Ablation::Default)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let mut other = small(Ablation::Default);
        other.seed = 12;
        assert_ne!(a.checksum(), ModelParams::init(&other).unwrap().checksum());
    }

    #[test]
    fn hand_tallied_parameter_count() {
        // K=1, d=4, D=1, p=2, q=2, N=3:
        // pre 4+4, layer 9*16+6*4 = 168, norm 2*3*4 = 24, conv 4*4*2+4 = 36, head 4*2+2 = 10
        let cfg = ModelConfig {
            n_nodes: 3,
            input_dim: 1,
            n_layers: 1,
            hidden: 4,
            steps: 2,
            horizon: 2,
            window: 1,
            ..ModelConfig::default()
        };
        let p = ModelParams::init(&cfg).unwrap();
        assert_eq!(p.parameter_count(), 8 + 168 + 24 + 36 + 10);
        assert_eq!(expected_parameter_count(&cfg), p.parameter_count());
        for ab in Ablation::ALL {
            let c = ModelConfig { ablation: ab, ..cfg.clone() };
            assert_eq!(ModelParams::init(&c).unwrap().parameter_count(), expected_parameter_count(&c), "{ab}");
        }
    }

    #[test]
    fn tensor_lists_align() {
        let mut p = ModelParams::init(&small(Ablation::NoStTraversing)).unwrap();
        let shapes: Vec<Vec<usize>> = p.tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let shapes_mut: Vec<Vec<usize>> = p.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, shapes_mut);
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("bogus".parse::<Ablation>().is_err());
    }

    #[test]
    fn pipeline_flags() {
        let p = apply_ablation(&small(Ablation::NoAttention));
        assert_eq!(p.attention, AttentionMode::Uniform);
        assert!(p.residual && p.norm && p.neighbors);
        let p = apply_ablation(&small(Ablation::NoSpatial));
        assert!(!p.neighbors);
        assert!(!apply_ablation(&small(Ablation::NoResidual)).residual);
        assert!(!apply_ablation(&small(Ablation::NoNorm)).norm);
        assert!(apply_ablation(&small(Ablation::NoStTraversing)).split_stages);
        assert!(p.to_string().contains("no neighbors"));
    }

    #[test]
    fn mismatched_graph_rejected() {
        let cfg = small(Ablation::Default);
        let g = SpatialGraph::edgeless(3);
        let params = ModelParams::init(&cfg).unwrap();
        let other = ModelConfig { window: 3, ..cfg.clone() };
        let graphs = ModelGraphs::build(&g, &other).unwrap();
        let x = Tensor::zeros(&[1, 3, 4, 2]);
        assert!(matches!(
            forward(&params, &cfg, &x, &graphs, Mode::Eval, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn output_shape_and_eval_determinism() {
        let cfg = small(Ablation::Default);
        let g = SpatialGraph::from_edge_list(3, &[(0, 1), (1, 2)], true).unwrap();
        let graphs = ModelGraphs::build(&g, &cfg).unwrap();
        let params = ModelParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[2, 3, 4, 2], -1.0, 1.0, &mut rng);
        let a = forward(&params, &cfg, &x, &graphs, Mode::Eval, false).unwrap();
        let b = forward(&params, &cfg, &x, &graphs, Mode::Eval, false).unwrap();
        assert_eq!(a.tape.value(a.prediction).shape(), &[2, 3, 3]);
        assert_eq!(a.tape.value(a.prediction), b.tape.value(b.prediction));
    }
}
