//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every operation appends one node holding its output value, the handles of
//! its inputs and whatever it saved for the backward rule. Nodes are only ever
//! appended, so the tape is always in topological order and a single reverse
//! sweep visits each use of a value exactly once.

use std::sync::Arc;

use super::segment::{segment_softmax, SegmentIndex};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row layout `(batch, node, step)` used by the node-wise batch norm and the
/// time convolution. Row index is `(b * nodes + n) * steps + t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowLayout {
    pub batch: usize,
    pub nodes: usize,
    pub steps: usize,
}

impl RowLayout {
    pub fn rows(&self) -> usize {
        self.batch * self.nodes * self.steps
    }

    pub fn node_of(&self, row: usize) -> usize {
        (row / self.steps) % self.nodes
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Mask(Var, Arc<Vec<f64>>),
    Reshape(Var),
    SliceRows(Var, usize),
    ConcatRows(Var, Var),
    EdgeScores {
        query: Var,
        key: Var,
        index: Arc<SegmentIndex>,
    },
    SegmentSoftmax(Var, Arc<SegmentIndex>),
    SegmentWeightedSum {
        weights: Var,
        values: Var,
        index: Arc<SegmentIndex>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        layout: RowLayout,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    ConvTime {
        x: Var,
        kernel: Var,
        steps: usize,
    },
    MaeLoss(Var, Arc<Vec<f64>>),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Statistics of one node-wise batch norm evaluated on batch data, reported
/// back so the caller can fold them into its running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded operations so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    /// Records a trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let n = av.cols();
        if bv.len() != n {
            return Err(Error::dim("add_row", av.shape(), bv.shape()));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * s).collect();
        let value = Tensor::new(av.shape(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect();
        let value = Tensor::new(av.shape(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    /// Elementwise product with a constant mask (dropout, fixed weightings).
    pub fn mask(&mut self, a: Var, mask: Arc<Vec<f64>>) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return Err(Error::dim("mask", av.shape(), &[mask.len()]));
        }
        let data = av.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Mask(a, mask), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Rows `start .. start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let cols = av.cols();
        if av.shape().len() != 2 || start + len > av.rows() {
            return Err(Error::dim("slice_rows", av.shape(), &[start, len]));
        }
        let data = av.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(&[len, cols], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(Error::dim("concat_rows", av.shape(), bv.shape()));
        }
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let value = Tensor::new(&[av.rows() + bv.rows(), av.cols()], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::ConcatRows(a, b), rg))
    }

    /// Per-source logit `query[q(seg)] + key[src]` from per-row scalar scores.
    pub fn edge_scores(&mut self, query: Var, key: Var, index: Arc<SegmentIndex>) -> Result<Var> {
        let (qv, kv) = (self.value(query), self.value(key));
        if qv.len() < index.query_extent() || kv.len() < index.source_extent() {
            return Err(Error::dim("edge_scores", qv.shape(), kv.shape()));
        }
        let (q, k) = (qv.data(), kv.data());
        let mut out = Vec::with_capacity(index.num_sources());
        for seg in 0..index.num_segments() {
            let qs = q[index.queries()[seg]];
            out.extend(index.segment_sources(seg).iter().map(|&s| qs + k[s]));
        }
        let value = Tensor::new(&[out.len()], out)?;
        let rg = self.rg(&[query, key]);
        Ok(self.push(value, Op::EdgeScores { query, key, index }, rg))
    }

    pub fn segment_softmax(&mut self, scores: Var, index: Arc<SegmentIndex>) -> Result<Var> {
        let w = segment_softmax(self.value(scores).data(), &index)?;
        let value = Tensor::new(&[w.len()], w)?;
        let rg = self.rg(&[scores]);
        Ok(self.push(value, Op::SegmentSoftmax(scores, index), rg))
    }

    /// `out[seg] = Σ_{i ∈ seg} weights[i] · values[src_i]`.
    pub fn segment_weighted_sum(
        &mut self,
        weights: Var,
        values: Var,
        index: Arc<SegmentIndex>,
    ) -> Result<Var> {
        let (wv, vv) = (self.value(weights), self.value(values));
        if wv.len() != index.num_sources() || vv.rows() < index.source_extent() {
            return Err(Error::dim("segment_weighted_sum", wv.shape(), vv.shape()));
        }
        let d = vv.cols();
        let (w, vals) = (wv.data(), vv.data());
        let mut out = vec![0.0; index.num_segments() * d];
        for seg in 0..index.num_segments() {
            let dst = &mut out[seg * d..(seg + 1) * d];
            for i in index.range(seg) {
                let src = &vals[index.sources()[i] * d..][..d];
                axpy(w[i], src, dst);
            }
        }
        let value = Tensor::new(&[index.num_segments(), d], out)?;
        let rg = self.rg(&[weights, values]);
        Ok(self.push(
            value,
            Op::SegmentWeightedSum {
                weights,
                values,
                index,
            },
            rg,
        ))
    }

    /// Node-wise batch norm over rows laid out as `layout`.
    ///
    /// With `frozen = None` the statistics come from the batch and are
    /// returned; otherwise the supplied `(mean, var)` are used verbatim.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        layout: RowLayout,
        eps: f64,
        frozen: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let d = xv.cols();
        let groups = layout.nodes * d;
        if xv.rows() != layout.rows() {
            return Err(Error::dim("batch_norm", xv.shape(), &[layout.rows(), d]));
        }
        for p in [gain, bias] {
            if self.value(p).len() != groups {
                return Err(Error::dim("batch_norm", &[layout.nodes, d], self.value(p).shape()));
            }
        }
        let count = layout.batch * layout.steps;
        let xd = xv.data();
        let (mean, var, stats) = match frozen {
            Some((m, v)) => {
                if m.len() != groups || v.len() != groups {
                    return Err(Error::dim("batch_norm", &[groups], &[m.len(), v.len()]));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                if count < 2 {
                    return Err(Error::Contract(format!(
                        "batch norm needs at least 2 values per group in training, got {count}"
                    )));
                }
                let mut mean = vec![0.0; groups];
                let mut sq = vec![0.0; groups];
                for (r, row) in xd.chunks(d).enumerate() {
                    let g0 = layout.node_of(r) * d;
                    for (c, &val) in row.iter().enumerate() {
                        mean[g0 + c] += val;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for (r, row) in xd.chunks(d).enumerate() {
                    let g0 = layout.node_of(r) * d;
                    for (c, &val) in row.iter().enumerate() {
                        let dev = val - mean[g0 + c];
                        sq[g0 + c] += dev * dev;
                    }
                }
                let var: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for r in 0..layout.rows() {
            let g0 = layout.node_of(r) * d;
            for c in 0..d {
                let i = r * d + c;
                let g = g0 + c;
                let h = (xd[i] - mean[g]) * inv_std[g];
                xhat[i] = h;
                out[i] = h * gd[g] + bd[g];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        let batch_stats = stats.is_some();
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gain,
                bias,
                layout,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Full-width convolution along time: rows of `x` are `(series, step)`
    /// pairs with `steps` consecutive rows per series; `kernel` is
    /// `[out_channels, in_channels, steps]`. Output is `[series, out_channels]`.
    pub fn conv_time(&mut self, x: Var, kernel: Var, steps: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let d = xv.cols();
        let ks = kv.shape();
        if ks.len() != 3 || ks[1] != d || ks[2] != steps || steps == 0 || xv.rows() % steps != 0 {
            return Err(Error::dim("conv_time", xv.shape(), ks));
        }
        let d_out = ks[0];
        let series = xv.rows() / steps;
        let (xd, kd) = (xv.data(), kv.data());
        let mut out = vec![0.0; series * d_out];
        for s in 0..series {
            let block = &xd[s * steps * d..(s + 1) * steps * d];
            for o in 0..d_out {
                let kern = &kd[o * d * steps..(o + 1) * d * steps];
                let mut acc = 0.0;
                for c in 0..d {
                    for t in 0..steps {
                        acc += kern[c * steps + t] * block[t * d + c];
                    }
                }
                out[s * d_out + o] = acc;
            }
        }
        let value = Tensor::new(&[series, d_out], out)?;
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(value, Op::ConvTime { x, kernel, steps }, rg))
    }

    /// Mean absolute error against a constant target; the subgradient at a tie is 0.
    pub fn mae_loss(&mut self, pred: Var, target: Arc<Vec<f64>>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(Error::dim("mae_loss", pv.shape(), &[target.len()]));
        }
        let n = pv.len().max(1) as f64;
        let loss = pv.data().iter().zip(target.iter()).map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::MaeLoss(pred, target), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Propagates gradients from a scalar `loss` back to every trainable leaf.
    ///
    /// A tape can be differentiated once; call [`Tape::reset`] before reuse.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            } else {
                self.backprop(id, &g, &mut grads);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let trainable = self
            .nodes
            .iter()
            .map(|n| n.requires_grad && matches!(n.op, Op::Leaf))
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            trainable,
        })
    }

    fn backprop(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.requires_grad(*a) {
                    let ga = self.slot(*a, grads);
                    let bd = bv.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            ga[i * k + kk] += dot(grow, &bd[kk * n..(kk + 1) * n]);
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let gb = self.slot(*b, grads);
                    let ad = av.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            axpy(ad[i * k + kk], grow, &mut gb[kk * n..(kk + 1) * n]);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.requires_grad(*v) {
                        axpy(1.0, g, self.slot(*v, grads));
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.requires_grad(*a) {
                    axpy(1.0, g, self.slot(*a, grads));
                }
                if self.requires_grad(*bias) {
                    let gb = self.slot(*bias, grads);
                    let n = gb.len();
                    for row in g.chunks(n) {
                        axpy(1.0, row, gb);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let ga = self.slot(*a, grads);
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if self.requires_grad(*b) {
                    let gb = self.slot(*b, grads);
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Scale(a, s) => axpy(*s, g, self.slot(*a, grads)),
            Op::LeakyRelu(a, slope) => {
                let ad = self.value(*a).data();
                let ga = self.slot(*a, grads);
                for i in 0..g.len() {
                    ga[i] += if ad[i] > 0.0 { g[i] } else { slope * g[i] };
                }
            }
            Op::Mask(a, mask) => {
                let ga = self.slot(*a, grads);
                for i in 0..g.len() {
                    ga[i] += g[i] * mask[i];
                }
            }
            Op::Reshape(a) => axpy(1.0, g, self.slot(*a, grads)),
            Op::SliceRows(a, start) => {
                let cols = self.value(*a).cols();
                let ga = self.slot(*a, grads);
                axpy(1.0, g, &mut ga[start * cols..start * cols + g.len()]);
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                if self.requires_grad(*a) {
                    axpy(1.0, &g[..split], self.slot(*a, grads));
                }
                if self.requires_grad(*b) {
                    axpy(1.0, &g[split..], self.slot(*b, grads));
                }
            }
            Op::EdgeScores { query, key, index } => {
                if self.requires_grad(*query) {
                    let gq = self.slot(*query, grads);
                    for seg in 0..index.num_segments() {
                        let s: f64 = g[index.range(seg)].iter().sum();
                        gq[index.queries()[seg]] += s;
                    }
                }
                if self.requires_grad(*key) {
                    let gk = self.slot(*key, grads);
                    for (i, &src) in index.sources().iter().enumerate() {
                        gk[src] += g[i];
                    }
                }
            }
            Op::SegmentSoftmax(scores, index) => {
                let w = node.value.data();
                let gs = self.slot(*scores, grads);
                for seg in 0..index.num_segments() {
                    let r = index.range(seg);
                    let inner: f64 = r.clone().map(|i| g[i] * w[i]).sum();
                    for i in r {
                        gs[i] += w[i] * (g[i] - inner);
                    }
                }
            }
            Op::SegmentWeightedSum {
                weights,
                values,
                index,
            } => {
                let vv = self.value(*values);
                let d = vv.cols();
                let vals = vv.data();
                if self.requires_grad(*weights) {
                    let gw = self.slot(*weights, grads);
                    for seg in 0..index.num_segments() {
                        let gout = &g[seg * d..(seg + 1) * d];
                        for i in index.range(seg) {
                            gw[i] += dot(gout, &vals[index.sources()[i] * d..][..d]);
                        }
                    }
                }
                if self.requires_grad(*values) {
                    let w = self.value(*weights).data();
                    let gv = self.slot(*values, grads);
                    for seg in 0..index.num_segments() {
                        let gout = &g[seg * d..(seg + 1) * d];
                        for i in index.range(seg) {
                            let src = index.sources()[i];
                            axpy(w[i], gout, &mut gv[src * d..(src + 1) * d]);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                layout,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let d = node.value.cols();
                let groups = layout.nodes * d;
                let gd = self.value(*gain).data();
                let mut sum_g = vec![0.0; groups];
                let mut sum_gx = vec![0.0; groups];
                for r in 0..layout.rows() {
                    let g0 = layout.node_of(r) * d;
                    for c in 0..d {
                        let i = r * d + c;
                        sum_g[g0 + c] += g[i];
                        sum_gx[g0 + c] += g[i] * xhat[i];
                    }
                }
                if self.requires_grad(*gain) {
                    axpy(1.0, &sum_gx, self.slot(*gain, grads));
                }
                if self.requires_grad(*bias) {
                    axpy(1.0, &sum_g, self.slot(*bias, grads));
                }
                if self.requires_grad(*x) {
                    let gx = self.slot(*x, grads);
                    let m = (layout.batch * layout.steps) as f64;
                    for r in 0..layout.rows() {
                        let g0 = layout.node_of(r) * d;
                        for c in 0..d {
                            let i = r * d + c;
                            let k = g0 + c;
                            let scale = gd[k] * inv_std[k];
                            gx[i] += if *batch_stats {
                                scale * (g[i] - sum_g[k] / m - xhat[i] * sum_gx[k] / m)
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
            }
            Op::ConvTime { x, kernel, steps } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let d = xv.cols();
                let d_out = kv.shape()[0];
                let series = xv.rows() / steps;
                let (xd, kd) = (xv.data(), kv.data());
                if self.requires_grad(*x) {
                    let gx = self.slot(*x, grads);
                    for s in 0..series {
                        let block = &mut gx[s * steps * d..(s + 1) * steps * d];
                        for o in 0..d_out {
                            let go = g[s * d_out + o];
                            let kern = &kd[o * d * steps..(o + 1) * d * steps];
                            for c in 0..d {
                                for t in 0..*steps {
                                    block[t * d + c] += go * kern[c * steps + t];
                                }
                            }
                        }
                    }
                }
                if self.requires_grad(*kernel) {
                    let gk = self.slot(*kernel, grads);
                    for s in 0..series {
                        let block = &xd[s * steps * d..(s + 1) * steps * d];
                        for o in 0..d_out {
                            let go = g[s * d_out + o];
                            let kern = &mut gk[o * d * steps..(o + 1) * d * steps];
                            for c in 0..d {
                                for t in 0..*steps {
                                    kern[c * steps + t] += go * block[t * d + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::MaeLoss(pred, target) => {
                let pd = self.value(*pred).data();
                let n = pd.len().max(1) as f64;
                let gp = self.slot(*pred, grads);
                for i in 0..pd.len() {
                    let diff = pd[i] - target[i];
                    let sign = if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    gp[i] += g[0] * sign / n;
                }
            }
            Op::Sum(a) => {
                let ga = self.slot(*a, grads);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
    }

    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> &'g mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    trainable: Vec<bool>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.trainable[v.0]
    }
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik != 0.0 {
                axpy(aik, &b[kk * n..(kk + 1) * n], orow);
            }
        }
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
