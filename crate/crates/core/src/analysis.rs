//! Cross-correlation lag analysis and case-study extraction.
//!
//! For series `x` and `y` of length `L`, the coefficient at lag `k` relates
//! `y[t]` to `x[t−k]` over the overlap `t = k..L`:
//!
//! ```text
//! C(k) = (S_xy/L − S_x·S_y/L²) / (√(S_xx/L − (S_x/L)²) · √(S_yy/L − (S_y/L)²))
//! ```
//!
//! The literal form divides overlap sums by the full length `L`, which pulls
//! long-lag values toward zero. [`XCorrNorm::Overlap`] divides by `L − k`
//! instead, giving the ordinary Pearson correlation of the overlap.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::RawDataset;
use crate::error::{Error, Result};
use crate::layers::AttentionRecord;
use crate::model::{forward, ModelConfig, ModelGraphs, ModelParams, Mode};
use crate::stgraph::{SpatialGraph, UNREACHABLE};
use crate::training::{SeriesDataset, Split};

/// Default largest lag: one twelve-step input window.
pub const DEFAULT_MAX_LAG: usize = 12;
/// Pairs further apart than this many hops count as far.
pub const FAR_HOPS: usize = 9;
/// Upper bound on sampled far pairs.
pub const MAX_FAR_PAIRS: usize = 1000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum XCorrNorm {
    #[default]
    Literal,
    Overlap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct XCorrCurve {
    /// `(source node, target node, feature)` when taken from a dataset.
    pub pair: Option<(usize, usize, usize)>,
    /// Coefficient per lag `0..=k_max`.
    pub coefficients: Vec<f64>,
    /// Lags whose overlap was constant in either series; their coefficient is 0.
    pub degenerate: Vec<bool>,
}

impl XCorrCurve {
    /// Lag of the largest coefficient; ties go to the smaller lag.
    pub fn peak_lag(&self) -> usize {
        let mut best = 0;
        for (k, &c) in self.coefficients.iter().enumerate() {
            if c > self.coefficients[best] {
                best = k;
            }
        }
        best
    }

    pub fn to_csv(&self) -> String {
        lag_value_csv(&self.coefficients)
    }
}

/// CSV `lag,value` with one row per lag.
pub fn lag_value_csv(values: &[f64]) -> String {
    let mut out = String::from("lag,value\n");
    for (k, v) in values.iter().enumerate() {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

/// Correlation of `y` with `x` shifted back by each lag `0..=k_max`.
pub fn cross_correlation(x: &[f64], y: &[f64], k_max: usize, norm: XCorrNorm) -> Result<XCorrCurve> {
    let len = x.len();
    if y.len() != len {
        return Err(Error::Contract(format!("series lengths differ: {} vs {}", len, y.len())));
    }
    if len <= k_max + 2 {
        return Err(Error::Contract(format!(
            "series of length {len} is too short for lags up to {k_max}"
        )));
    }
    let mut coefficients = Vec::with_capacity(k_max + 1);
    let mut degenerate = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let xs = &x[..len - k];
        let ys = &y[k..];
        if is_constant(xs) || is_constant(ys) {
            coefficients.push(0.0);
            degenerate.push(true);
            continue;
        }
        let denom = match norm {
            XCorrNorm::Literal => len,
            XCorrNorm::Overlap => len - k,
        } as f64;
        let (mut sx, mut sy, mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&a, &b) in xs.iter().zip(ys) {
            sx += a;
            sy += b;
            sxy += a * b;
            sxx += a * a;
            syy += b * b;
        }
        let cov = sxy / denom - sx * sy / (denom * denom);
        let vx = sxx / denom - (sx / denom).powi(2);
        let vy = syy / denom - (sy / denom).powi(2);
        let scale = (vx.max(0.0) * vy.max(0.0)).sqrt();
        if scale <= f64::MIN_POSITIVE {
            coefficients.push(0.0);
            degenerate.push(true);
        } else {
            coefficients.push((cov / scale).clamp(-1.0, 1.0));
            degenerate.push(false);
        }
    }
    Ok(XCorrCurve {
        pair: None,
        coefficients,
        degenerate,
    })
}

fn is_constant(s: &[f64]) -> bool {
    s.iter().all(|&v| v == s[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairSource {
    /// Every directed edge `u → v` of the graph.
    Connected,
    /// Pairs more than [`FAR_HOPS`] hops apart, sampled with the run seed.
    Far,
}

/// Peak-lag histogram over a set of node pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct LagHistogram {
    pub pairs: Vec<(usize, usize)>,
    /// Share of pairs peaking at each lag; all zero when there were no pairs.
    pub proportions: Vec<f64>,
    /// Mean coefficient per lag over the pairs.
    pub mean_curve: Vec<f64>,
}

impl LagHistogram {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Lag with the largest share; ties go to the smaller lag.
    pub fn mode(&self) -> Option<usize> {
        if self.is_empty() {
            return None;
        }
        let mut best = 0;
        for (k, &p) in self.proportions.iter().enumerate() {
            if p > self.proportions[best] {
                best = k;
            }
        }
        Some(best)
    }
}

/// Node pairs `(source, target)` of the requested kind.
pub fn select_pairs(graph: &SpatialGraph, source: PairSource, seed: u64) -> Vec<(usize, usize)> {
    match source {
        PairSource::Connected => graph.edges().to_vec(),
        PairSource::Far => {
            let n = graph.n_nodes();
            let dist: Vec<Vec<usize>> = (0..n).map(|v| graph.hop_distance(v)).collect();
            let far = (0..n).flat_map(|u| (0..n).map(move |v| (u, v))).filter(|&(u, v)| {
                let d = dist[u][v];
                d != UNREACHABLE && d > FAR_HOPS
            });
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let picked: BTreeSet<(usize, usize)> = far.choose_multiple(&mut rng, MAX_FAR_PAIRS).into_iter().collect();
            picked.into_iter().collect()
        }
    }
}

/// Peak-lag distribution of `feature` over the selected pairs.
pub fn peak_lag_distribution(
    graph: &SpatialGraph,
    series: &RawDataset,
    feature: usize,
    k_max: usize,
    source: PairSource,
    norm: XCorrNorm,
    seed: u64,
) -> Result<LagHistogram> {
    if graph.n_nodes() != series.n_nodes() {
        return Err(Error::Contract(format!(
            "graph has {} nodes, series has {}",
            graph.n_nodes(),
            series.n_nodes()
        )));
    }
    if feature >= series.n_features() {
        return Err(Error::Contract(format!("feature {feature} not in series")));
    }
    let pairs = select_pairs(graph, source, seed);
    let mut counts = vec![0usize; k_max + 1];
    let mut sums = vec![0.0; k_max + 1];
    for &(u, v) in &pairs {
        let curve = cross_correlation(series.series(u, feature), series.series(v, feature), k_max, norm)?;
        counts[curve.peak_lag()] += 1;
        for (s, c) in sums.iter_mut().zip(&curve.coefficients) {
            *s += c;
        }
    }
    let total = pairs.len().max(1) as f64;
    Ok(LagHistogram {
        proportions: counts.iter().map(|&c| c as f64 / total).collect(),
        mean_curve: sums.iter().map(|s| s / total).collect(),
        pairs,
    })
}

/// Lag × target-step matrix as whitespace-separated text.
pub fn heatmap_text(grid: &[Vec<f64>]) -> String {
    let mut out = String::from("rows=source_lags cols=target_steps\n");
    for row in grid {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Mean of the heatmap cells over target steps whose window is complete
/// (`t ≥ Q`), one value per lag.
pub fn lag_profile(grid: &[Vec<f64>]) -> Vec<f64> {
    let window = grid.len().saturating_sub(1);
    grid.iter()
        .map(|row| {
            let cells = &row[window.min(row.len())..];
            if cells.is_empty() {
                0.0
            } else {
                cells.iter().sum::<f64>() / cells.len() as f64
            }
        })
        .collect()
}

/// Index of the largest value; ties go to the smaller index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Artifacts of one case study on edge `u → v`.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseStudy {
    pub source: usize,
    pub target: usize,
    /// Layer-1 neighbor attention of the chosen window.
    pub heatmap: Vec<Vec<f64>>,
    /// Layer-1 neighbor attention averaged over all windows of the split.
    pub mean_heatmap: Vec<Vec<f64>>,
    pub xcorr: XCorrCurve,
    /// Raw forecast-feature values of both nodes over the chosen input window.
    pub aligned: Vec<(f64, f64)>,
}

impl CaseStudy {
    pub fn aligned_csv(&self) -> String {
        let mut out = format!("step,node{},node{}\n", self.source, self.target);
        for (t, (a, b)) in self.aligned.iter().enumerate() {
            let _ = writeln!(out, "{t},{a},{b}");
        }
        out
    }
}

/// Layer-1 neighbor attention records of a trained model over one split.
pub fn attention_records(
    params: &ModelParams,
    cfg: &ModelConfig,
    graphs: &ModelGraphs,
    data: &SeriesDataset,
    split: Split,
) -> Result<Vec<(Vec<usize>, AttentionRecord)>> {
    let mut out = Vec::new();
    for chunk in data.starts(split).chunks(64) {
        let x = data.inputs(chunk);
        let fp = forward(params, cfg, &x, graphs, Mode::Eval, true)?;
        let rec = fp
            .records
            .into_iter()
            .next()
            .ok_or_else(|| Error::State("forward pass recorded no attention".into()))?;
        out.push((chunk.to_vec(), rec));
    }
    Ok(out)
}

/// Heatmap of edge `u → v` for window `sample` of `split`, its average over
/// the split, the full-series cross-correlation and the aligned window.
#[allow(clippy::too_many_arguments)]
pub fn case_study(
    params: &ModelParams,
    cfg: &ModelConfig,
    graphs: &ModelGraphs,
    data: &SeriesDataset,
    pair: (usize, usize),
    split: Split,
    sample: usize,
    k_max: usize,
) -> Result<CaseStudy> {
    let (u, v) = pair;
    let tg = &graphs.main;
    if tg.pair_segments(u, v).is_empty() {
        return Err(Error::Contract(format!("{u} -> {v} is not an edge of the model graph")));
    }
    let n_windows = data.starts(split).len();
    if sample >= n_windows {
        return Err(Error::Contract(format!("window {sample} outside the {n_windows} available")));
    }
    let records = attention_records(params, cfg, graphs, data, split)?;
    let rows = cfg.window + 1;
    let mut mean = vec![vec![0.0; cfg.steps]; rows];
    let mut heatmap = None;
    let mut seen = 0;
    for (starts, rec) in &records {
        for b in 0..starts.len() {
            let grid = rec.neighbor_heatmap(tg, u, v, b)?;
            for (m, row) in grid.iter().enumerate() {
                for (t, w) in row.iter().enumerate() {
                    mean[m][t] += w;
                }
            }
            if seen == sample {
                heatmap = Some(grid);
            }
            seen += 1;
        }
    }
    mean.iter_mut().flatten().for_each(|w| *w /= seen as f64);

    let f = data.target_feature;
    let t = data.raw.shape()[2];
    let d = data.n_features();
    let series = |node: usize| &data.raw.data()[(node * d + f) * t..][..t];
    let mut xcorr = cross_correlation(series(u), series(v), k_max, XCorrNorm::Literal)?;
    xcorr.pair = Some((u, v, f));
    let start = data.starts(split)[sample];
    let aligned = (start..start + data.steps).map(|s| (series(u)[s], series(v)[s])).collect();
    Ok(CaseStudy {
        source: u,
        target: v,
        heatmap: heatmap.expect("sample index checked"),
        mean_heatmap: mean,
        xcorr,
        aligned,
    })
}
