//! Ragged segment layout shared by the sparse attention kernels.
//!
//! A segment groups the flat list of sources that feed one target. Each
//! segment also names a query row, the row whose state scores the sources.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentIndex {
    offsets: Vec<usize>,
    sources: Vec<usize>,
    queries: Vec<usize>,
}

impl SegmentIndex {
    /// Builds an index from per-segment `(query_row, sources)` lists.
    pub fn from_segments<I, S>(segments: I) -> Self
    where
        I: IntoIterator<Item = (usize, S)>,
        S: IntoIterator<Item = usize>,
    {
        let mut offsets = vec![0];
        let mut sources = Vec::new();
        let mut queries = Vec::new();
        for (query, srcs) in segments {
            queries.push(query);
            sources.extend(srcs);
            offsets.push(sources.len());
        }
        SegmentIndex {
            offsets,
            sources,
            queries,
        }
    }

    pub fn from_parts(offsets: Vec<usize>, sources: Vec<usize>, queries: Vec<usize>) -> Result<Self> {
        let idx = SegmentIndex {
            offsets,
            sources,
            queries,
        };
        idx.validate()?;
        Ok(idx)
    }

    pub fn validate(&self) -> Result<()> {
        if self.offsets.first() != Some(&0) {
            return Err(Error::Structure("offsets must start at 0".into()));
        }
        if self.offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Structure("offsets must be non-decreasing".into()));
        }
        if *self.offsets.last().unwrap() != self.sources.len() {
            return Err(Error::Structure("last offset must equal source count".into()));
        }
        if self.queries.len() + 1 != self.offsets.len() {
            return Err(Error::Structure("one query row per segment required".into()));
        }
        Ok(())
    }

    /// Fails if any segment is empty.
    pub fn require_non_empty(&self) -> Result<()> {
        match self.offsets.windows(2).position(|w| w[0] == w[1]) {
            Some(seg) => Err(Error::Structure(format!("segment {seg} is empty"))),
            None => Ok(()),
        }
    }

    pub fn num_segments(&self) -> usize {
        self.queries.len()
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn queries(&self) -> &[usize] {
        &self.queries
    }

    pub fn range(&self, seg: usize) -> std::ops::Range<usize> {
        self.offsets[seg]..self.offsets[seg + 1]
    }

    pub fn segment_sources(&self, seg: usize) -> &[usize] {
        &self.sources[self.range(seg)]
    }

    /// Largest source row referenced, plus one.
    pub fn source_extent(&self) -> usize {
        self.sources.iter().max().map_or(0, |m| m + 1)
    }

    pub fn query_extent(&self) -> usize {
        self.queries.iter().max().map_or(0, |m| m + 1)
    }

    /// Tiles the index `copies` times, shifting query rows by `query_stride`
    /// and source rows by `source_stride` per copy.
    pub fn tiled(&self, copies: usize, query_stride: usize, source_stride: usize) -> Self {
        let n = self.sources.len();
        let mut offsets = Vec::with_capacity(copies * self.queries.len() + 1);
        offsets.push(0);
        let mut sources = Vec::with_capacity(copies * n);
        let mut queries = Vec::with_capacity(copies * self.queries.len());
        for c in 0..copies {
            let base = c * n;
            offsets.extend(self.offsets[1..].iter().map(|o| o + base));
            sources.extend(self.sources.iter().map(|s| s + c * source_stride));
            queries.extend(self.queries.iter().map(|q| q + c * query_stride));
        }
        SegmentIndex {
            offsets,
            sources,
            queries,
        }
    }
}

/// Max-stabilised softmax within each segment.
pub fn segment_softmax(scores: &[f64], index: &SegmentIndex) -> Result<Vec<f64>> {
    if scores.len() != index.num_sources() {
        return Err(Error::dim("segment_softmax", &[scores.len()], &[index.num_sources()]));
    }
    index.require_non_empty()?;
    let mut out = vec![0.0; scores.len()];
    for seg in 0..index.num_segments() {
        let r = index.range(seg);
        let max = scores[r.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for i in r.clone() {
            let e = (scores[i] - max).exp();
            out[i] = e;
            total += e;
        }
        for w in &mut out[r] {
            *w /= total;
        }
    }
    Ok(out)
}

/// Equal weights `1/|S|` per segment.
pub fn uniform_weights(index: &SegmentIndex) -> Vec<f64> {
    let mut out = vec![0.0; index.num_sources()];
    for seg in 0..index.num_segments() {
        let r = index.range(seg);
        let w = 1.0 / r.len() as f64;
        out[r].fill(w);
    }
    out
}
