//! Series ingestion from CSV and the lag-coupled synthetic generator.
//!
//! Two series encodings are accepted:
//!
//! * long: header `time,node,feature,value`, one observation per row, time
//!   steps ordered by first appearance;
//! * wide: header `time,n0_f0,n0_f1,...,n1_f0,...`, one row per time step.
//!
//! Values are held as an `[N, D, T]` tensor.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::Config;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::stgraph::SpatialGraph;

#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub times: Vec<String>,
    pub feature_names: Vec<String>,
    /// `[N, D, T]`.
    pub values: Tensor,
    /// Minutes between consecutive steps, when known.
    pub interval_minutes: Option<f64>,
}

impl RawDataset {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::Config(format!("series must be [N, D, T], got {:?}", values.shape())));
        }
        let (d, t) = (values.shape()[1], values.shape()[2]);
        Ok(RawDataset {
            times: (0..t).map(|i| i.to_string()).collect(),
            feature_names: (0..d).map(|f| format!("f{f}")).collect(),
            values,
            interval_minutes: None,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_features(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values of one node and feature over time.
    pub fn series(&self, node: usize, feature: usize) -> &[f64] {
        let t = self.len();
        let start = (node * self.n_features() + feature) * t;
        &self.values.data()[start..start + t]
    }

    /// Wide CSV text. Loading it back gives the same array, and saving that
    /// again gives the same bytes.
    pub fn to_wide_csv(&self) -> String {
        let (n, d, t) = (self.n_nodes(), self.n_features(), self.len());
        let mut out = String::from("time");
        for v in 0..n {
            for f in 0..d {
                out.push_str(&format!(",n{v}_f{f}"));
            }
        }
        out.push('\n');
        for s in 0..t {
            out.push_str(&self.times[s]);
            for v in 0..n {
                for f in 0..d {
                    out.push(',');
                    out.push_str(&self.series(v, f)[s].to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

/// What to do with empty or NaN cells.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MissingPolicy {
    #[default]
    Strict,
    /// Repeat the previous observation of the same node and feature.
    ForwardFill,
}

impl FromStr for MissingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(MissingPolicy::Strict),
            "forward_fill" | "forward-fill" => Ok(MissingPolicy::ForwardFill),
            _ => Err(Error::Config(format!("unknown missing-value policy `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IngestReport {
    pub format: &'static str,
    pub n_nodes: usize,
    pub n_features: usize,
    pub steps: usize,
    pub filled: usize,
    pub n_edges: Option<usize>,
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} series: {} nodes, {} features, {} steps, {} cells forward-filled",
            self.format, self.n_nodes, self.n_features, self.steps, self.filled
        )?;
        if let Some(e) = self.n_edges {
            write!(f, ", {e} directed edges")?;
        }
        Ok(())
    }
}

/// Parses a series CSV in either encoding.
pub fn parse_series(text: &str, policy: MissingPolicy) -> Result<(RawDataset, IngestReport)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::ingest(1, "empty series file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols == ["time", "node", "feature", "value"] {
        parse_long(lines, policy)
    } else if cols.first() == Some(&"time") && cols.len() > 1 {
        parse_wide(&cols[1..], lines, policy)
    } else {
        Err(Error::ingest(
            1,
            "header must be `time,node,feature,value` or `time,n<node>_f<feature>,...`",
        ))
    }
}

fn parse_cell(cell: &str, line: usize, what: &str) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        Ok(_) => Err(Error::ingest(line, format!("non-finite value `{cell}` in {what}"))),
        Err(_) => Err(Error::ingest(line, format!("non-numeric value `{cell}` in {what}"))),
    }
}

/// Resolves missing cells in `[N, D, T]` order; `lines` holds the source line of
/// each empty cell.
fn resolve_missing(
    values: &mut [Option<f64>],
    lines: &[usize],
    names: impl Fn(usize) -> String,
    steps: usize,
    policy: MissingPolicy,
) -> Result<(Vec<f64>, usize)> {
    let mut filled = 0;
    let mut out = Vec::with_capacity(values.len());
    for (series, chunk) in values.chunks_mut(steps).enumerate() {
        let mut last = None;
        for (t, cell) in chunk.iter_mut().enumerate() {
            let i = series * steps + t;
            match (*cell, policy, last) {
                (Some(v), _, _) => last = Some(v),
                (None, MissingPolicy::ForwardFill, Some(prev)) => {
                    *cell = Some(prev);
                    filled += 1;
                }
                (None, MissingPolicy::ForwardFill, None) => {
                    return Err(Error::ingest(
                        lines[i],
                        format!("missing value for {} with nothing to fill from", names(series)),
                    ))
                }
                (None, MissingPolicy::Strict, _) => {
                    return Err(Error::ingest(lines[i], format!("missing value for {} at step {t}", names(series))))
                }
            }
            out.push(cell.expect("resolved"));
        }
    }
    Ok((out, filled))
}

fn parse_wide<'a>(
    cols: &[&str],
    lines: impl Iterator<Item = (usize, &'a str)>,
    policy: MissingPolicy,
) -> Result<(RawDataset, IngestReport)> {
    let mut ids = Vec::with_capacity(cols.len());
    for c in cols {
        let parsed = c
            .strip_prefix('n')
            .and_then(|r| r.split_once("_f"))
            .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)));
        ids.push(parsed.ok_or_else(|| Error::ingest(1, format!("column `{c}` is not of the form n<node>_f<feature>")))?);
    }
    let n = ids.iter().map(|&(v, _)| v + 1).max().unwrap_or(0);
    let d = ids.iter().map(|&(_, f)| f + 1).max().unwrap_or(0);
    if ids.len() != n * d {
        return Err(Error::ingest(1, format!("expected {} columns for {n} nodes and {d} features", n * d)));
    }
    let mut expected = Vec::with_capacity(n * d);
    for v in 0..n {
        for f in 0..d {
            expected.push((v, f));
        }
    }
    if ids != expected {
        return Err(Error::ingest(1, "columns must be ordered by node, then feature"));
    }

    let mut times = Vec::new();
    let mut rows: Vec<(usize, Vec<Option<f64>>)> = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols.len() + 1 {
            return Err(Error::ingest(
                lineno,
                format!("ragged row: {} cells, header has {}", cells.len(), cols.len() + 1),
            ));
        }
        times.push(cells[0].trim().to_string());
        let vals = cells[1..]
            .iter()
            .zip(cols)
            .map(|(c, name)| parse_cell(c, lineno, &format!("column {name}")))
            .collect::<Result<Vec<_>>>()?;
        rows.push((lineno, vals));
    }
    let t = rows.len();
    let mut values = vec![None; n * d * t];
    let mut line_of = vec![0; n * d * t];
    for (s, (lineno, vals)) in rows.iter().enumerate() {
        for (c, &v) in vals.iter().enumerate() {
            values[c * t + s] = v;
            line_of[c * t + s] = *lineno;
        }
    }
    let (data, filled) = resolve_missing(&mut values, &line_of, |s| cols[s].to_string(), t, policy)?;
    finish("wide", times, n, d, data, filled)
}

fn parse_long<'a>(
    lines: impl Iterator<Item = (usize, &'a str)>,
    policy: MissingPolicy,
) -> Result<(RawDataset, IngestReport)> {
    let mut times: Vec<String> = Vec::new();
    let mut time_index: HashMap<String, usize> = HashMap::new();
    let mut cells: HashMap<(usize, usize, usize), (usize, Option<f64>)> = HashMap::new();
    let (mut n, mut d) = (0, 0);
    for (i, line) in lines {
        let lineno = i + 1;
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::ingest(lineno, format!("ragged row: {} cells, expected 4", parts.len())));
        }
        let node: usize = parts[1]
            .parse()
            .map_err(|_| Error::ingest(lineno, format!("unknown node id `{}`", parts[1])))?;
        let feature: usize = parts[2]
            .parse()
            .map_err(|_| Error::ingest(lineno, format!("unknown feature id `{}`", parts[2])))?;
        let value = parse_cell(parts[3], lineno, "column value")?;
        let next = times.len();
        let t = *time_index.entry(parts[0].to_string()).or_insert_with(|| {
            times.push(parts[0].to_string());
            next
        });
        if cells.insert((node, feature, t), (lineno, value)).is_some() {
            return Err(Error::ingest(
                lineno,
                format!("duplicate observation for node {node}, feature {feature}, time {}", parts[0]),
            ));
        }
        n = n.max(node + 1);
        d = d.max(feature + 1);
    }
    let t = times.len();
    let mut values = vec![None; n * d * t];
    let mut line_of = vec![0; n * d * t];
    for v in 0..n {
        for f in 0..d {
            for s in 0..t {
                let i = (v * d + f) * t + s;
                match cells.get(&(v, f, s)) {
                    Some(&(lineno, val)) => {
                        values[i] = val;
                        line_of[i] = lineno;
                    }
                    None => {
                        return Err(Error::ingest(
                            0,
                            format!("no observation for node {v}, feature {f}, time {}", times[s]),
                        ))
                    }
                }
            }
        }
    }
    let names = |s: usize| format!("node {} feature {}", s / d.max(1), s % d.max(1));
    let (data, filled) = resolve_missing(&mut values, &line_of, names, t, policy)?;
    finish("long", times, n, d, data, filled)
}

fn finish(
    format: &'static str,
    times: Vec<String>,
    n: usize,
    d: usize,
    data: Vec<f64>,
    filled: usize,
) -> Result<(RawDataset, IngestReport)> {
    let steps = times.len();
    if steps == 0 || n == 0 {
        return Err(Error::ingest(1, "series file has no observations"));
    }
    let mut ds = RawDataset::new(Tensor::new(&[n, d, steps], data)?)?;
    ds.times = times;
    let report = IngestReport {
        format,
        n_nodes: n,
        n_features: d,
        steps,
        filled,
        n_edges: None,
    };
    Ok((ds, report))
}

/// Loads a series CSV and its edge list.
pub fn load_csv(
    series_path: &std::path::Path,
    edges_path: &std::path::Path,
    policy: MissingPolicy,
    symmetrize: bool,
) -> Result<(RawDataset, SpatialGraph, IngestReport)> {
    let (ds, mut report) = parse_series(&std::fs::read_to_string(series_path)?, policy)?;
    let graph = SpatialGraph::parse_edge_list(&std::fs::read_to_string(edges_path)?, ds.n_nodes(), symmetrize)?;
    report.n_edges = Some(graph.edges().len());
    Ok((ds, graph, report))
}

/// One directed coupling `u → v`: `x_v(t)` receives `weight · x_u(t − lag)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coupling {
    pub from: usize,
    pub to: usize,
    pub lag: usize,
    pub weight: f64,
}

/// Parameters of the synthetic generator
/// `x_v(t) = a·x_v(t−1) + Σ_u w_uv·x_u(t−k_uv) + s·sin(2πt/P + φ_v) + ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_nodes: usize,
    pub couplings: Vec<Coupling>,
    pub persistence: f64,
    pub period: f64,
    pub amplitude: f64,
    pub noise: f64,
    pub length: usize,
    /// Window size `Q`; the first `5·Q` generated steps are discarded.
    pub window: usize,
    /// Constant added to every value after generation.
    pub offset: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_nodes: 6,
            couplings: Vec::new(),
            persistence: 0.0,
            period: 24.0,
            amplitude: 0.0,
            noise: 0.0,
            length: 1000,
            window: 12,
            offset: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Reads `key = value` pairs; edges are `edges = u v lag weight; ...`.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = SynthSpec::default();
        let spec = SynthSpec {
            n_nodes: cfg.value_or("nodes", d.n_nodes)?,
            couplings: match cfg.get("edges") {
                Some(text) => parse_couplings(text)?,
                None => Vec::new(),
            },
            persistence: cfg.value_or("persistence", d.persistence)?,
            period: cfg.value_or("period", d.period)?,
            amplitude: cfg.value_or("amplitude", d.amplitude)?,
            noise: cfg.value_or("noise", d.noise)?,
            length: cfg.value_or("length", d.length)?,
            window: cfg.value_or("window", d.window)?,
            offset: cfg.value_or("offset", d.offset)?,
            seed: cfg.value_or("seed", d.seed)?,
        };
        let known = [
            "nodes",
            "edges",
            "persistence",
            "period",
            "amplitude",
            "noise",
            "length",
            "window",
            "offset",
            "seed",
        ];
        if let Some((k, _)) = cfg.entries().iter().find(|(k, _)| !known.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown generator key `{k}`")));
        }
        Ok(spec)
    }

    pub fn to_config(&self) -> Config {
        let mut c = Config::new();
        c.set("nodes", self.n_nodes.to_string());
        let edges: Vec<String> = self
            .couplings
            .iter()
            .map(|e| format!("{} {} {} {}", e.from, e.to, e.lag, e.weight))
            .collect();
        c.set("edges", edges.join("; "));
        c.set("persistence", self.persistence.to_string());
        c.set("period", self.period.to_string());
        c.set("amplitude", self.amplitude.to_string());
        c.set("noise", self.noise.to_string());
        c.set("length", self.length.to_string());
        c.set("window", self.window.to_string());
        c.set("offset", self.offset.to_string());
        c.set("seed", self.seed.to_string());
        c
    }

    /// Bounded-trajectory guard: `|a| + Σ_u |w_uv| < 1` for every node.
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 || self.length == 0 {
            return Err(Error::Config("generator needs at least one node and one step".into()));
        }
        if !(self.period > 0.0) || self.noise < 0.0 || !self.amplitude.is_finite() || !self.offset.is_finite() {
            return Err(Error::Config("period must be positive, noise non-negative".into()));
        }
        let mut load = vec![self.persistence.abs(); self.n_nodes];
        for e in &self.couplings {
            if e.from >= self.n_nodes || e.to >= self.n_nodes || e.from == e.to {
                return Err(Error::Config(format!(
                    "coupling {} -> {} is not between distinct nodes of 0..{}",
                    e.from, e.to, self.n_nodes
                )));
            }
            if e.lag > self.window {
                return Err(Error::Config(format!(
                    "coupling {} -> {} has lag {} beyond window {}",
                    e.from, e.to, e.lag, self.window
                )));
            }
            load[e.to] += e.weight.abs();
        }
        if let Some((v, l)) = load.iter().enumerate().find(|(_, &l)| !(l < 1.0)) {
            return Err(Error::Config(format!(
                "node {v}: persistence plus coupling magnitudes is {l}, must stay below 1"
            )));
        }
        self.lag_zero_order().map(|_| ())
    }

    /// Node order in which lag-0 couplings can be evaluated.
    fn lag_zero_order(&self) -> Result<Vec<usize>> {
        let n = self.n_nodes;
        let mut indegree = vec![0; n];
        for e in self.couplings.iter().filter(|e| e.lag == 0) {
            indegree[e.to] += 1;
        }
        let mut ready: Vec<usize> = (0..n).filter(|&v| indegree[v] == 0).rev().collect();
        let mut order = Vec::with_capacity(n);
        while let Some(u) = ready.pop() {
            order.push(u);
            for e in self.couplings.iter().filter(|e| e.lag == 0 && e.from == u) {
                indegree[e.to] -= 1;
                if indegree[e.to] == 0 {
                    ready.push(e.to);
                }
            }
        }
        if order.len() != n {
            return Err(Error::Config("lag-0 couplings form a cycle".into()));
        }
        Ok(order)
    }

    /// Graph of the couplings, optionally symmetrized.
    pub fn graph(&self, symmetrize: bool) -> Result<SpatialGraph> {
        let pairs: Vec<_> = self.couplings.iter().map(|e| (e.from, e.to)).collect();
        SpatialGraph::from_edge_list(self.n_nodes, &pairs, symmetrize)
    }

    /// Ground-truth lag table as CSV `u,v,lag,weight`.
    pub fn lag_table_csv(&self) -> String {
        let mut out = String::from("u,v,lag,weight\n");
        for e in &self.couplings {
            out.push_str(&format!("{},{},{},{}\n", e.from, e.to, e.lag, e.weight));
        }
        out
    }
}

fn parse_couplings(text: &str) -> Result<Vec<Coupling>> {
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let parts: Vec<&str> = item.split_whitespace().collect();
            let bad = || Error::Config(format!("edge `{item}` must be `u v lag weight`"));
            if parts.len() != 4 {
                return Err(bad());
            }
            Ok(Coupling {
                from: parts[0].parse().map_err(|_| bad())?,
                to: parts[1].parse().map_err(|_| bad())?,
                lag: parts[2].parse().map_err(|_| bad())?,
                weight: parts[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Runs the generator; returns a single-feature dataset.
pub fn generate(spec: &SynthSpec) -> Result<RawDataset> {
    spec.validate()?;
    let order = spec.lag_zero_order()?;
    let n = spec.n_nodes;
    let warmup = 5 * spec.window;
    let total = warmup + spec.length;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phases: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut incoming: Vec<Vec<&Coupling>> = vec![Vec::new(); n];
    for e in &spec.couplings {
        incoming[e.to].push(e);
    }
    // x[t * n + v]
    let mut x = vec![0.0; total * n];
    for t in 0..total {
        let noise: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        for &v in &order {
            let mut val = if t > 0 { spec.persistence * x[(t - 1) * n + v] } else { 0.0 };
            for e in &incoming[v] {
                if t >= e.lag {
                    val += e.weight * x[(t - e.lag) * n + e.from];
                }
            }
            if spec.amplitude != 0.0 {
                val += spec.amplitude * (2.0 * PI * t as f64 / spec.period + phases[v]).sin();
            }
            val += spec.noise * noise[v];
            x[t * n + v] = val;
        }
    }
    let mut values = vec![0.0; n * spec.length];
    for v in 0..n {
        for t in 0..spec.length {
            values[v * spec.length + t] = x[(warmup + t) * n + v] + spec.offset;
        }
    }
    RawDataset::new(Tensor::new(&[n, 1, spec.length], values)?)
}
