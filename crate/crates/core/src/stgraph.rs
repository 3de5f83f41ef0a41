//! Sensor graphs and their unrolled `(node, step)` traverse graphs.
//!
//! An edge `u → v` means `u ∈ N(v)`: `v` receives messages from `u`.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use crate::engine::SegmentIndex;
use crate::error::{Error, Result};

/// Hop distance for nodes that cannot be reached.
pub const UNREACHABLE: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialGraph {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    in_neighbors: Vec<Vec<usize>>,
}

impl SpatialGraph {
    /// Builds a graph from `(u, v)` pairs. Duplicates and self loops are
    /// dropped; `symmetrize` adds every reverse edge.
    pub fn from_edge_list(n_nodes: usize, pairs: &[(usize, usize)], symmetrize: bool) -> Result<Self> {
        let numbered: Vec<_> = pairs.iter().enumerate().map(|(i, &(u, v))| (i + 1, u, v)).collect();
        Self::from_numbered(n_nodes, &numbered, symmetrize)
    }

    fn from_numbered(n_nodes: usize, pairs: &[(usize, usize, usize)], symmetrize: bool) -> Result<Self> {
        let mut in_neighbors = vec![Vec::new(); n_nodes];
        for &(line, u, v) in pairs {
            if u >= n_nodes || v >= n_nodes {
                return Err(Error::ingest(
                    line,
                    format!("edge ({u}, {v}) references a node outside 0..{n_nodes}"),
                ));
            }
            if u == v {
                continue;
            }
            in_neighbors[v].push(u);
            if symmetrize {
                in_neighbors[u].push(v);
            }
        }
        for list in &mut in_neighbors {
            list.sort_unstable();
            list.dedup();
        }
        let edges = in_neighbors
            .iter()
            .enumerate()
            .flat_map(|(v, us)| us.iter().map(move |&u| (u, v)))
            .collect();
        Ok(SpatialGraph {
            n_nodes,
            edges,
            in_neighbors,
        })
    }

    /// Parses a plain-text edge list: one `u v` pair per line, `#` comments.
    pub fn parse_edge_list(text: &str, n_nodes: usize, symmetrize: bool) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(Error::ingest(i + 1, format!("expected `u v`, got `{line}`")));
            }
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::ingest(i + 1, format!("`{s}` is not a node id")))
            };
            pairs.push((i + 1, parse(fields[0])?, parse(fields[1])?));
        }
        Self::from_numbered(n_nodes, &pairs, symmetrize)
    }

    pub fn edgeless(n_nodes: usize) -> Self {
        SpatialGraph {
            n_nodes,
            edges: Vec::new(),
            in_neighbors: vec![Vec::new(); n_nodes],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Directed edges `(u, v)`, sorted by `v` then `u`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.in_neighbors[v]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        v < self.n_nodes && self.in_neighbors[v].binary_search(&u).is_ok()
    }

    /// Graph whose nodes are relabelled by `perm[old] = new`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let pairs: Vec<_> = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        Self::from_edge_list(self.n_nodes, &pairs, false)
    }

    /// Breadth-first hop counts from `v`, ignoring edge direction.
    pub fn hop_distance(&self, v: usize) -> Vec<usize> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut dist = vec![UNREACHABLE; self.n_nodes];
        let mut queue = VecDeque::from([v]);
        dist[v] = 0;
        while let Some(x) = queue.pop_front() {
            for &y in &adj[x] {
                if dist[y] == UNREACHABLE {
                    dist[y] = dist[x] + 1;
                    queue.push_back(y);
                }
            }
        }
        dist
    }

    pub fn to_edge_list_text(&self) -> String {
        self.edges.iter().map(|(u, v)| format!("{u} {v}\n")).collect()
    }
}

/// Unrolled graph over `(node, step)` vertices of one input window.
///
/// Vertex `(v, t)` lives at row `v * steps + t`. Three relations are kept:
///
/// * `self_relation`: one segment per vertex, sources `(v, t − m)` for
///   `m = 0 ..= min(Q, t)`.
/// * `neighbor_relation`: one segment per `(u → v, t)`, query row `(v, t)`,
///   sources `(u, t − m)` over the same window. Segments are ordered by `v`,
///   then `t`, then `u`.
/// * `outer_relation`: one segment per vertex over the candidate rows
///   `[self contexts; neighbor contexts]`, ordered by source node id with the
///   vertex itself at its own id.
#[derive(Debug)]
pub struct TraverseGraph {
    n_nodes: usize,
    steps: usize,
    window: usize,
    self_relation: SegmentIndex,
    neighbor_relation: SegmentIndex,
    outer_relation: SegmentIndex,
    neighbor_pairs: Vec<(usize, usize, usize)>,
    batched: Mutex<HashMap<usize, Arc<BatchedRelations>>>,
}

/// Relations tiled over a batch of windows.
#[derive(Debug)]
pub struct BatchedRelations {
    pub batch: usize,
    pub self_relation: Arc<SegmentIndex>,
    pub neighbor_relation: Arc<SegmentIndex>,
    pub outer_relation: Arc<SegmentIndex>,
}

impl TraverseGraph {
    pub fn build(g: &SpatialGraph, steps: usize, window: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("input length must be at least 1".into()));
        }
        let n = g.n_nodes();
        let row = |v: usize, t: usize| v * steps + t;
        let lags = |t: usize| 0..=window.min(t);

        let self_relation = SegmentIndex::from_segments(
            (0..n).flat_map(|v| (0..steps).map(move |t| (row(v, t), lags(t).map(move |m| row(v, t - m))))),
        );

        let mut neighbor_pairs = Vec::new();
        let mut nbr_segments = Vec::new();
        for v in 0..n {
            for t in 0..steps {
                for &u in g.neighbors(v) {
                    neighbor_pairs.push((u, v, t));
                    nbr_segments.push((row(v, t), lags(t).map(|m| row(u, t - m)).collect::<Vec<_>>()));
                }
            }
        }
        let neighbor_relation = SegmentIndex::from_segments(nbr_segments);

        let vertex_rows = n * steps;
        let mut outer = Vec::with_capacity(vertex_rows);
        let mut seg = 0;
        for v in 0..n {
            for t in 0..steps {
                let nbrs = g.neighbors(v);
                let mut sources = Vec::with_capacity(nbrs.len() + 1);
                let mut self_placed = false;
                for (j, &u) in nbrs.iter().enumerate() {
                    if !self_placed && v < u {
                        sources.push(row(v, t));
                        self_placed = true;
                    }
                    sources.push(vertex_rows + seg + j);
                }
                if !self_placed {
                    sources.push(row(v, t));
                }
                seg += nbrs.len();
                outer.push((row(v, t), sources));
            }
        }
        let outer_relation = SegmentIndex::from_segments(outer);

        Ok(TraverseGraph {
            n_nodes: n,
            steps,
            window,
            self_relation,
            neighbor_relation,
            outer_relation,
            neighbor_pairs,
            batched: Mutex::new(HashMap::new()),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn vertex_rows(&self) -> usize {
        self.n_nodes * self.steps
    }

    pub fn self_relation(&self) -> &SegmentIndex {
        &self.self_relation
    }

    pub fn neighbor_relation(&self) -> &SegmentIndex {
        &self.neighbor_relation
    }

    pub fn outer_relation(&self) -> &SegmentIndex {
        &self.outer_relation
    }

    /// `(u, v, t)` for each neighbor segment, in segment order.
    pub fn neighbor_pairs(&self) -> &[(usize, usize, usize)] {
        &self.neighbor_pairs
    }

    /// Neighbor segment ids of edge `u → v`, one per target step.
    pub fn pair_segments(&self, u: usize, v: usize) -> Vec<(usize, usize)> {
        self.neighbor_pairs
            .iter()
            .enumerate()
            .filter(|(_, &(a, b, _))| a == u && b == v)
            .map(|(seg, &(_, _, t))| (t, seg))
            .collect()
    }

    /// Total number of traverse edges: sources over the self and neighbor relations.
    pub fn edge_count(&self) -> usize {
        self.self_relation.num_sources() + self.neighbor_relation.num_sources()
    }

    /// Relations tiled for `batch` windows, cached per batch size.
    pub fn batched(&self, batch: usize) -> Arc<BatchedRelations> {
        let mut cache = self.batched.lock().expect("relation cache poisoned");
        cache
            .entry(batch)
            .or_insert_with(|| Arc::new(self.tile(batch)))
            .clone()
    }

    fn tile(&self, batch: usize) -> BatchedRelations {
        let vr = self.vertex_rows();
        let pairs = self.neighbor_relation.num_segments();
        let self_relation = self.self_relation.tiled(batch, vr, vr);
        let neighbor_relation = self.neighbor_relation.tiled(batch, vr, vr);
        // Candidate rows are [all self contexts (batch * vr); all neighbor contexts].
        let mut segments = Vec::with_capacity(batch * vr);
        for b in 0..batch {
            for seg in 0..vr {
                let sources: Vec<usize> = self
                    .outer_relation
                    .segment_sources(seg)
                    .iter()
                    .map(|&s| {
                        if s < vr {
                            b * vr + s
                        } else {
                            batch * vr + b * pairs + (s - vr)
                        }
                    })
                    .collect();
                segments.push((b * vr + self.outer_relation.queries()[seg], sources));
            }
        }
        BatchedRelations {
            batch,
            self_relation: Arc::new(self_relation),
            neighbor_relation: Arc::new(neighbor_relation),
            outer_relation: Arc::new(SegmentIndex::from_segments(segments)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directed_single_edge() {
        let g = SpatialGraph::from_edge_list(2, &[(0, 1)], false).unwrap();
        assert_eq!(g.neighbors(1), &[0]);
        assert!(g.neighbors(0).is_empty());
    }

    #[test]
    fn symmetrized_single_edge() {
        let g = SpatialGraph::from_edge_list(2, &[(0, 1)], true).unwrap();
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0]);
    }

    #[test]
    fn duplicates_collapse() {
        let g = SpatialGraph::from_edge_list(3, &[(0, 1), (0, 1), (2, 1)], false).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (2, 1)]);
    }

    #[test]
    fn out_of_range_reports_line() {
        let err = SpatialGraph::parse_edge_list("# header\n0 1\n1 7\n", 3, false).unwrap_err();
        assert!(matches!(err, Error::Ingest { line: 3, .. }), "{err}");
    }

    #[test]
    fn parses_comments_and_blank_lines() {
        let g = SpatialGraph::parse_edge_list("0 1 # road A\n\n  2 1\n", 3, false).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (2, 1)]);
    }

    #[test]
    fn path_graph_distances() {
        let g = SpatialGraph::from_edge_list(4, &[(0, 1), (1, 2), (2, 3)], false).unwrap();
        let d = g.hop_distance(0);
        assert_eq!(d, vec![0, 1, 2, 3]);
        let lone = SpatialGraph::from_edge_list(3, &[(0, 1)], false).unwrap();
        assert_eq!(lone.hop_distance(0)[2], UNREACHABLE);
    }

    #[test]
    fn single_node_self_counts() {
        let tg = TraverseGraph::build(&SpatialGraph::edgeless(1), 3, 1).unwrap();
        let counts: Vec<usize> = (0..3).map(|s| tg.self_relation().range(s).len()).collect();
        assert_eq!(counts, vec![1, 2, 2]);
        assert_eq!(tg.edge_count(), 5);
    }

    #[test]
    fn zero_window_sees_only_concurrent_neighbor() {
        let g = SpatialGraph::from_edge_list(2, &[(0, 1)], false).unwrap();
        let tg = TraverseGraph::build(&g, 2, 0).unwrap();
        for (seg, &(u, v, t)) in tg.neighbor_pairs().iter().enumerate() {
            assert_eq!((u, v), (0, 1));
            assert_eq!(tg.neighbor_relation().segment_sources(seg), &[t]);
            assert_eq!(tg.neighbor_relation().queries()[seg], 2 + t);
        }
        assert_eq!(tg.neighbor_pairs().len(), 2);
    }

    #[test]
    fn self_sources_are_lag_ordered() {
        let tg = TraverseGraph::build(&SpatialGraph::edgeless(2), 4, 2).unwrap();
        // vertex (1, 3) sits at row 7 and sees rows 7, 6, 5
        assert_eq!(tg.self_relation().segment_sources(7), &[7, 6, 5]);
    }

    #[test]
    fn outer_places_self_by_id() {
        let g = SpatialGraph::from_edge_list(3, &[(0, 1), (2, 1)], false).unwrap();
        let tg = TraverseGraph::build(&g, 1, 0).unwrap();
        // node 1 at t = 0 is row 1; neighbor contexts start after 3 vertex rows
        assert_eq!(tg.outer_relation().segment_sources(1), &[3, 1, 4]);
        assert_eq!(tg.outer_relation().segment_sources(0), &[0]);
    }

    #[test]
    fn batched_outer_points_into_tiled_candidates() {
        let g = SpatialGraph::from_edge_list(2, &[(0, 1)], true).unwrap();
        let tg = TraverseGraph::build(&g, 2, 1).unwrap();
        let rel = tg.batched(3);
        let vr = tg.vertex_rows();
        let pairs = tg.neighbor_relation().num_segments();
        assert_eq!(rel.outer_relation.num_segments(), 3 * vr);
        let extent = rel.outer_relation.source_extent();
        assert!(extent <= 3 * vr + 3 * pairs);
        // second copy, row 0: node 0 at t = 0 sees itself then neighbor pair seg 0
        let srcs = rel.outer_relation.segment_sources(vr);
        assert_eq!(srcs, &[vr, 3 * vr + pairs]);
        assert!(Arc::ptr_eq(&rel, &tg.batched(3)));
    }
}
