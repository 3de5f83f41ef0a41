//! Standardization, windowing, metrics, the training loop and sweeps.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::RawDataset;
use crate::engine::{adam_step, AdamConfig, AdamState, Tensor};
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelGraphs, ModelParams, Mode};
use crate::stgraph::SpatialGraph;

/// Smallest standard deviation used when standardizing.
pub const STD_FLOOR: f64 = 1e-8;
/// Targets with `|y|` at or below this are left out of MAPE.
pub const DEFAULT_MAPE_THRESHOLD: f64 = 1e-3;
const EVAL_CHUNK: usize = 64;

/// Per-feature mean and population standard deviation of the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Statistics over all nodes and the first `train_len` steps of `[N, D, T]`.
    pub fn fit(raw: &Tensor, train_len: usize) -> Result<Self> {
        let (n, d, t) = dims3(raw)?;
        if n == 0 || train_len == 0 || train_len > t {
            return Err(Error::ingest(0, "cannot standardize: training portion is empty"));
        }
        let count = (n * train_len) as f64;
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for f in 0..d {
            let cells = || (0..n).flat_map(move |v| &raw.data()[(v * d + f) * t..][..train_len]);
            let mu = cells().sum::<f64>() / count;
            let var = cells().map(|x| (x - mu) * (x - mu)).sum::<f64>() / count;
            mean[f] = mu;
            std[f] = var.sqrt().max(STD_FLOOR);
        }
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, raw: &Tensor) -> Result<Tensor> {
        self.map(raw, |x, m, s| (x - m) / s)
    }

    pub fn invert(&self, standardized: &Tensor) -> Result<Tensor> {
        self.map(standardized, |x, m, s| x * s + m)
    }

    pub fn invert_value(&self, feature: usize, x: f64) -> f64 {
        x * self.std[feature] + self.mean[feature]
    }

    fn map(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let (_, d, t) = dims3(x)?;
        if d != self.mean.len() {
            return Err(Error::dim("standardize", x.shape(), &[self.mean.len()]));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let feat = (i / t) % d;
                f(v, self.mean[feat], self.std[feat])
            })
            .collect();
        Tensor::new(x.shape(), data)
    }
}

fn dims3(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, d, t] => Ok((n, d, t)),
        _ => Err(Error::Config(format!("series must be [N, D, T], got {:?}", x.shape()))),
    }
}

/// Standardizes with statistics taken from the first `train_len` steps.
pub fn standardize(raw: &Tensor, train_len: usize) -> Result<(Tensor, Standardizer)> {
    let stats = Standardizer::fit(raw, train_len)?;
    Ok((stats.apply(raw)?, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRatios {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 6,
            val: 2,
            test: 2,
        }
    }
}

impl FromStr for SplitRatios {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<u32> = s
            .split(':')
            .map(|p| p.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("split ratios `{s}` must look like 6:2:2")))?;
        match parts[..] {
            [train, val, test] if train > 0 && val > 0 && test > 0 => Ok(SplitRatios { train, val, test }),
            _ => Err(Error::Config(format!("split ratios `{s}` need three positive parts"))),
        }
    }
}

impl fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.train, self.val, self.test)
    }
}

/// Contiguous step ranges of the three splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Train and validation lengths are rounded down; test takes the rest.
pub fn split_ranges(len: usize, ratios: SplitRatios) -> Splits {
    let total = (ratios.train + ratios.val + ratios.test) as usize;
    let train = len * ratios.train as usize / total;
    let val = len * ratios.val as usize / total;
    Splits {
        train: 0..train,
        val: train..train + val,
        test: train + val..len,
    }
}

/// Start indices of all windows inside `range`: inputs cover
/// `start..start+p`, targets `start+p..start+p+q`.
pub fn make_windows(range: Range<usize>, p: usize, q: usize) -> Result<Vec<usize>> {
    let len = range.end.saturating_sub(range.start);
    if len < p + q {
        return Err(Error::Config(format!(
            "split of {len} steps is shorter than input length {p} plus horizon {q}"
        )));
    }
    Ok((range.start..=range.end - p - q).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Standardized series with its windows.
#[derive(Clone, Debug)]
pub struct SeriesDataset {
    pub raw: Tensor,
    pub standardized: Tensor,
    pub stats: Standardizer,
    pub target_feature: usize,
    pub steps: usize,
    pub horizon: usize,
    pub splits: Splits,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SeriesDataset {
    pub fn new(raw: &RawDataset, steps: usize, horizon: usize, ratios: SplitRatios, target_feature: usize) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::ingest(0, "series is empty"));
        }
        if target_feature >= raw.n_features() {
            return Err(Error::Config(format!(
                "target feature {target_feature} outside the {} available",
                raw.n_features()
            )));
        }
        let splits = split_ranges(raw.len(), ratios);
        let (standardized, stats) = standardize(&raw.values, splits.train.len())?;
        Ok(SeriesDataset {
            raw: raw.values.clone(),
            standardized,
            stats,
            target_feature,
            steps,
            horizon,
            train: make_windows(splits.train.clone(), steps, horizon)?,
            val: make_windows(splits.val.clone(), steps, horizon)?,
            test: make_windows(splits.test.clone(), steps, horizon)?,
            splits,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn n_features(&self) -> usize {
        self.raw.shape()[1]
    }

    pub fn starts(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Standardized inputs `[B, N, p, D]` for the given window starts.
    pub fn inputs(&self, starts: &[usize]) -> Tensor {
        let (n, d, t) = (self.n_nodes(), self.n_features(), self.raw.shape()[2]);
        let p = self.steps;
        let src = self.standardized.data();
        let mut out = Vec::with_capacity(starts.len() * n * p * d);
        for &s in starts {
            for v in 0..n {
                for step in 0..p {
                    for f in 0..d {
                        out.push(src[(v * d + f) * t + s + step]);
                    }
                }
            }
        }
        Tensor::new(&[starts.len(), n, p, d], out).expect("window shape")
    }

    /// Targets `[B, N, q]` of the forecast feature, standardized or raw.
    pub fn targets(&self, starts: &[usize], standardized: bool) -> Vec<f64> {
        let (n, d, t) = (self.n_nodes(), self.n_features(), self.raw.shape()[2]);
        let src = if standardized { &self.standardized } else { &self.raw }.data();
        let f = self.target_feature;
        let mut out = Vec::with_capacity(starts.len() * n * self.horizon);
        for &s in starts {
            for v in 0..n {
                let base = (v * d + f) * t + s + self.steps;
                out.extend_from_slice(&src[base..base + self.horizon]);
            }
        }
        out
    }

    /// Scale of the forecast feature; multiplies standardized errors into raw units.
    pub fn target_scale(&self) -> f64 {
        self.stats.std[self.target_feature]
    }
}

/// Error summary of one horizon step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
}

/// MAE, RMSE and MAPE (percent) pooled over all horizon steps, plus the
/// per-step breakdown. `mape` is `None` when every target was masked.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
    pub per_step: Vec<StepMetrics>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "mae,rmse,mape";

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.mae, self.rmse, fmt_mape(self.mape))
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mape = match self.mape {
            Some(m) => format!("{m:.2}%"),
            None => "undefined".into(),
        };
        write!(f, "MAE {:.4}  RMSE {:.4}  MAPE {mape}", self.mae, self.rmse)
    }
}

pub fn fmt_mape(m: Option<f64>) -> String {
    m.map_or_else(|| "undefined".into(), |v| v.to_string())
}

#[derive(Default)]
struct Accum {
    abs: f64,
    sq: f64,
    count: usize,
    pct: f64,
    pct_count: usize,
}

impl Accum {
    fn push(&mut self, p: f64, y: f64, threshold: f64) {
        let e = p - y;
        self.abs += e.abs();
        self.sq += e * e;
        self.count += 1;
        if y.abs() > threshold {
            self.pct += e.abs() / y.abs();
            self.pct_count += 1;
        }
    }

    fn finish(&self) -> StepMetrics {
        let n = self.count.max(1) as f64;
        StepMetrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: (self.pct_count > 0).then(|| 100.0 * self.pct / self.pct_count as f64),
        }
    }
}

/// Metrics of `pred` against `target` laid out as `[.., q]`, in raw units.
pub fn metrics(pred: &[f64], target: &[f64], horizon: usize, mape_threshold: f64) -> Result<MetricReport> {
    if pred.len() != target.len() {
        return Err(Error::dim("metrics", &[pred.len()], &[target.len()]));
    }
    if horizon == 0 || !pred.len().is_multiple_of(horizon) {
        return Err(Error::dim("metrics", &[pred.len()], &[horizon]));
    }
    let mut pooled = Accum::default();
    let mut steps: Vec<Accum> = (0..horizon).map(|_| Accum::default()).collect();
    for (i, (&p, &y)) in pred.iter().zip(target).enumerate() {
        pooled.push(p, y, mape_threshold);
        steps[i % horizon].push(p, y, mape_threshold);
    }
    let total = pooled.finish();
    Ok(MetricReport {
        mae: total.mae,
        rmse: total.rmse,
        mape: total.mape,
        per_step: steps.iter().map(Accum::finish).collect(),
    })
}

/// Mean absolute error of two equal-length slices.
pub fn mae_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim("mae_loss", &[pred.len()], &[target.len()]));
    }
    let n = pred.len().max(1) as f64;
    Ok(pred.iter().zip(target).map(|(p, y)| (p - y).abs()).sum::<f64>() / n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub ratios: SplitRatios,
    /// Seeds batch order and dropout masks.
    pub seed: u64,
    pub target_feature: usize,
    pub mape_threshold: f64,
    /// Record wall-clock seconds per epoch; off keeps logs reproducible.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 32,
            ratios: SplitRatios::default(),
            seed: 0,
            target_feature: 0,
            mape_threshold: DEFAULT_MAPE_THRESHOLD,
            timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.mape_threshold >= 0.0) {
            return Err(Error::Config("lr, weight decay and MAPE threshold must be non-negative".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss of the epoch in raw units.
    pub train_mae: f64,
    pub val: MetricReport,
    pub seconds: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_mae,val_mae,val_rmse,val_mape,seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.train_mae,
            self.val.mae,
            self.val.rmse,
            fmt_mape(self.val.mape),
            self.seconds
        )
    }
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation MAE.
    pub best: ModelParams,
    pub best_epoch: usize,
    /// Optimizer state right after the best epoch.
    pub best_adam: AdamState,
    pub epochs: Vec<EpochRecord>,
    pub val: MetricReport,
    pub test: MetricReport,
}

/// Forecasts of `params` on one split, in raw units, as `[B, N, q]` rows.
pub fn predict(params: &ModelParams, cfg: &ModelConfig, graphs: &ModelGraphs, data: &SeriesDataset, split: Split) -> Result<Vec<f64>> {
    let starts = data.starts(split);
    let mut out = Vec::with_capacity(starts.len() * data.n_nodes() * data.horizon);
    for chunk in starts.chunks(EVAL_CHUNK) {
        let x = data.inputs(chunk);
        let fp = forward(params, cfg, &x, graphs, Mode::Eval, false)?;
        out.extend(
            fp.tape
                .value(fp.prediction)
                .data()
                .iter()
                .map(|&v| data.stats.invert_value(data.target_feature, v)),
        );
    }
    Ok(out)
}

pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    graphs: &ModelGraphs,
    data: &SeriesDataset,
    split: Split,
    mape_threshold: f64,
) -> Result<MetricReport> {
    let pred = predict(params, cfg, graphs, data, split)?;
    metrics(&pred, &data.targets(data.starts(split), false), data.horizon, mape_threshold)
}

/// Mini-batch Adam on MAE with best-validation checkpointing. `on_epoch`
/// sees every epoch record as it is produced.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &SeriesDataset,
    graphs: &ModelGraphs,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if data.steps != model_cfg.steps || data.horizon != model_cfg.horizon || data.n_nodes() != model_cfg.n_nodes {
        return Err(Error::Config("dataset windows do not match the model configuration".into()));
    }
    let mut params = ModelParams::init(model_cfg)?;
    let mut adam = AdamState::new(params.tensors().into_iter().map(|(_, t)| t));
    let adam_cfg = train_cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut order = data.train.clone();
    let scale = data.target_scale();

    let mut best: Option<(f64, usize, ModelParams, AdamState, MetricReport)> = None;
    let mut records = Vec::with_capacity(train_cfg.epochs);
    for epoch in 1..=train_cfg.epochs {
        let clock = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let x = data.inputs(chunk);
            let y = Arc::new(data.targets(chunk, true));
            let mut fp = forward(&params, model_cfg, &x, graphs, Mode::Train { rng: &mut rng }, false)?;
            let loss = fp.tape.mae_loss(fp.prediction, y)?;
            let lv = fp.tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Numerical {
                    epoch,
                    batch: bi + 1,
                    message: format!("training loss is {lv}"),
                });
            }
            loss_sum += lv * chunk.len() as f64;
            let grads = fp.tape.backward(loss)?;
            let g: Vec<Tensor> = fp.params.iter().map(|&v| grads.get(v)).collect();
            params.update_norm_stats(&fp.norm_stats);
            adam_step(&mut params.tensors_mut(), &g, &mut adam, &adam_cfg)?;
            if !params.all_finite() {
                return Err(Error::Numerical {
                    epoch,
                    batch: bi + 1,
                    message: "parameters became non-finite after the update".into(),
                });
            }
        }
        let val = evaluate(&params, model_cfg, graphs, data, Split::Val, train_cfg.mape_threshold)?;
        if !val.mae.is_finite() {
            return Err(Error::Numerical {
                epoch,
                batch: 0,
                message: format!("validation MAE is {}", val.mae),
            });
        }
        let record = EpochRecord {
            epoch,
            train_mae: loss_sum / order.len() as f64 * scale,
            val: val.clone(),
            seconds: if train_cfg.timing { clock.elapsed().as_secs_f64() } else { 0.0 },
        };
        on_epoch(&record)?;
        records.push(record);
        if best.as_ref().is_none_or(|b| val.mae < b.0) {
            best = Some((val.mae, epoch, params.clone(), adam.clone(), val));
        }
    }
    let (_, best_epoch, best_params, best_adam, val) = match best {
        Some(b) => b,
        None => {
            let val = evaluate(&params, model_cfg, graphs, data, Split::Val, train_cfg.mape_threshold)?;
            (val.mae, 0, params, adam, val)
        }
    };
    let test = evaluate(&best_params, model_cfg, graphs, data, Split::Test, train_cfg.mape_threshold)?;
    Ok(TrainOutcome {
        best: best_params,
        best_epoch,
        best_adam,
        epochs: records,
        val,
        test,
    })
}

/// Repeats the last observed value of the forecast feature over the horizon.
pub fn naive_last_value(data: &SeriesDataset, split: Split, mape_threshold: f64) -> Result<MetricReport> {
    let starts = data.starts(split);
    let (n, d, t) = (data.n_nodes(), data.n_features(), data.raw.shape()[2]);
    let f = data.target_feature;
    let mut pred = Vec::with_capacity(starts.len() * n * data.horizon);
    for &s in starts {
        for v in 0..n {
            let last = data.raw.data()[(v * d + f) * t + s + data.steps - 1];
            pred.extend(std::iter::repeat_n(last, data.horizon));
        }
    }
    metrics(&pred, &data.targets(starts, false), data.horizon, mape_threshold)
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// `mean ± std` with two decimals.
pub fn fmt_mean_std(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.2} ± {s:.2}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Layers,
    Hidden,
    Window,
    Dropout,
    Lr,
    WeightDecay,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Layers => "layers",
            SweepAxis::Hidden => "hidden",
            SweepAxis::Window => "window",
            SweepAxis::Dropout => "dropout",
            SweepAxis::Lr => "lr",
            SweepAxis::WeightDecay => "weight_decay",
        }
    }

    /// Copies of the configs with this axis set to `value`.
    pub fn apply(self, value: f64, model: &ModelConfig, train: &TrainConfig) -> Result<(ModelConfig, TrainConfig)> {
        let (mut m, mut t) = (model.clone(), train.clone());
        let count = || -> Result<usize> {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!("{} needs whole numbers, got {value}", self.name())))
            }
        };
        match self {
            SweepAxis::Layers => m.n_layers = count()?,
            SweepAxis::Hidden => m.hidden = count()?,
            SweepAxis::Window => m.window = count()?,
            SweepAxis::Dropout => m.dropout = value,
            SweepAxis::Lr => t.lr = value,
            SweepAxis::WeightDecay => t.weight_decay = value,
        }
        m.validate()?;
        t.validate()?;
        Ok((m, t))
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use SweepAxis::*;
        [Layers, Hidden, Window, Dropout, Lr, WeightDecay]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep axis `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    /// Best validation MAE of each repeat, in seed order.
    pub runs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub argmin: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},mean_val_mae,std_val_mae,argmin\n", self.axis.name());
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.value, r.mean, r.std, u8::from(r.argmin)));
        }
        out
    }
}

/// Seeds used for repeat `r` of a run with base seed `seed`.
pub fn repeat_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_add(r as u64)
}

/// Trains `repeats` models per axis value and tabulates best validation MAE.
pub fn sweep(
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &SeriesDataset,
    graph: &SpatialGraph,
    axis: SweepAxis,
    values: &[f64],
    repeats: usize,
) -> Result<SweepTable> {
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let (m, t) = axis.apply(value, model, train_cfg)?;
        let graphs = ModelGraphs::build(graph, &m)?;
        let mut runs = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let seed = repeat_seed(train_cfg.seed, r);
            let m = ModelConfig { seed, ..m.clone() };
            let t = TrainConfig { seed, ..t.clone() };
            runs.push(train(&m, &t, data, &graphs, |_| Ok(()))?.val.mae);
        }
        let (mean, std) = mean_std(&runs);
        rows.push(SweepRow {
            value,
            runs,
            mean,
            std,
            argmin: false,
        });
    }
    if let Some(best) = rows
        .iter_mut()
        .min_by(|a, b| a.mean.partial_cmp(&b.mean).unwrap_or(std::cmp::Ordering::Equal))
    {
        best.argmin = true;
    }
    Ok(SweepTable { axis, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_feature_standardizes_to_zero() {
        let raw = Tensor::new(&[1, 1, 3], vec![2.0; 3]).unwrap();
        let (z, s) = standardize(&raw, 3).unwrap();
        assert_eq!(s.std[0], STD_FLOOR);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_population_std() {
        let raw = Tensor::new(&[1, 1, 2], vec![0.0, 2.0]).unwrap();
        let (z, s) = standardize(&raw, 2).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (1.0, 1.0));
        assert_eq!(z.data(), &[-1.0, 1.0]);
        assert!(s.invert(&z).unwrap().max_abs_diff(&raw) < 1e-12);
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(0..30, 12, 12).unwrap().len(), 7);
        assert_eq!(make_windows(0..24, 12, 12).unwrap(), vec![0]);
        assert!(matches!(make_windows(0..23, 12, 12), Err(Error::Config(_))));
        assert_eq!(make_windows(40..70, 12, 12).unwrap()[0], 40);
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("6:2:2".parse::<SplitRatios>().unwrap(), SplitRatios::default());
        assert!("6:0:2".parse::<SplitRatios>().is_err());
        assert!("6:2".parse::<SplitRatios>().is_err());
        let s = split_ranges(100, SplitRatios::default());
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 20, 20));
    }

    #[test]
    fn hand_metrics() {
        let r = metrics(&[1.0, 2.0], &[1.0, 4.0], 2, 0.0).unwrap();
        assert_eq!(r.mae, 1.0);
        assert!((r.rmse - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.mape, Some(25.0));
        let perfect = metrics(&[3.0, 4.0], &[3.0, 4.0], 1, 0.0).unwrap();
        assert_eq!((perfect.mae, perfect.rmse, perfect.mape), (0.0, 0.0, Some(0.0)));
    }

    #[test]
    fn zero_target_only_leaves_mape() {
        let r = metrics(&[1.0, 3.0], &[0.0, 2.0], 1, 0.0).unwrap();
        assert_eq!(r.mae, 1.0);
        assert_eq!(r.mape, Some(50.0));
        let all_masked = metrics(&[1.0], &[0.0], 1, 0.0).unwrap();
        assert_eq!(all_masked.mape, None);
        assert_eq!(all_masked.csv_row(), "1,1,undefined");
    }

    #[test]
    fn loss_examples() {
        assert_eq!(mae_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae_loss(&[1.0, 2.0], &[1.0, 4.0]).unwrap(), 1.0);
        assert!(mae_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sample_std_and_format() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(fmt_mean_std(&[15.6, 15.76]), "15.68 ± 0.11");
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn sweep_axis_names() {
        for a in ["layers", "hidden", "window", "dropout", "lr", "weight_decay"] {
            assert_eq!(a.parse::<SweepAxis>().unwrap().name(), a);
        }
        let (m, _) = SweepAxis::Window
            .apply(4.0, &ModelConfig::default(), &TrainConfig::default())
            .unwrap();
        assert_eq!(m.window, 4);
        assert!(SweepAxis::Layers
            .apply(1.5, &ModelConfig::default(), &TrainConfig::default())
            .is_err());
    }
}
