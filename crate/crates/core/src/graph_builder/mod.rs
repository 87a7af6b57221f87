//! Cell-graph construction.
//!
//! A core is cut into subsamples by placing window centers on a grid over
//! its bounding box and taking the `n_target` cells nearest to each center.
//! Each subsample becomes a radius graph with reciprocal-distance edge
//! weights. Subsample centroids then form the nodes of a coarser core-level
//! graph built with the same weighting at a larger radius.

mod dump;
pub mod spatial;

pub use dump::{decode_graphs, encode_graphs, read_graphs, write_graphs, DumpError, TaggedGraph, GRAPH_DUMP_VERSION};

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cell_table::Core;
use spatial::GridIndex;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("core `{0}` has no cells")]
    EmptyCore(String),
    #[error("expected {expected} feature rows, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid graph config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Subsample,
    CoreLevel,
}

/// Node features, coordinates and a symmetric weighted edge list.
///
/// Both directions of every undirected edge are stored; `edge_weights[i]`
/// belongs to `edges[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub node_features: Array2<f64>,
    pub coords_um: Vec<[f64; 2]>,
    pub edges: Vec<[usize; 2]>,
    pub edge_weights: Vec<f64>,
    pub provenance: Provenance,
    pub centroid_um: [f64; 2],
    pub stage_fused: bool,
}

impl Graph {
    pub fn new(node_features: Array2<f64>, coords_um: Vec<[f64; 2]>, edges: Vec<[usize; 2]>, edge_weights: Vec<f64>, provenance: Provenance) -> Self {
        let centroid_um = centroid(&coords_um);
        Self {
            node_features,
            coords_um,
            edges,
            edge_weights,
            provenance,
            centroid_um,
            stage_fused: false,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.node_features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.ncols()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Checks index bounds, self-loops, weight positivity and symmetry.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.n_nodes();
        if self.coords_um.len() != n {
            return Err(format!("{} coordinates for {} nodes", self.coords_um.len(), n));
        }
        if self.edge_weights.len() != self.edges.len() {
            return Err("edge weight count differs from edge count".into());
        }
        let mut seen = std::collections::HashMap::with_capacity(self.edges.len());
        for (&[u, v], &w) in self.edges.iter().zip(&self.edge_weights) {
            if u >= n || v >= n {
                return Err(format!("edge ({u}, {v}) out of range for {n} nodes"));
            }
            if u == v {
                return Err(format!("self-loop at node {u}"));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(format!("edge ({u}, {v}) has invalid weight {w}"));
            }
            if seen.insert((u, v), w).is_some() {
                return Err(format!("duplicate edge ({u}, {v})"));
            }
        }
        for (&(u, v), &w) in &seen {
            match seen.get(&(v, u)) {
                Some(&back) if back == w => {}
                _ => return Err(format!("edge ({u}, {v}) lacks a matching reverse edge")),
            }
        }
        if self.node_features.iter().any(|x| !x.is_finite()) {
            return Err("non-finite node feature".into());
        }
        Ok(())
    }
}

fn centroid(coords: &[[f64; 2]]) -> [f64; 2] {
    if coords.is_empty() {
        return [0.0, 0.0];
    }
    let n = coords.len() as f64;
    let (sx, sy) = coords.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    [sx / n, sy / n]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphBuildConfig {
    pub n_target: usize,
    pub subsample_radius_um: f64,
    pub core_radius_um: f64,
    pub overlaps: Vec<f64>,
    pub min_distance_um: f64,
}

impl Default for GraphBuildConfig {
    fn default() -> Self {
        Self {
            n_target: 1000,
            subsample_radius_um: 20.0,
            core_radius_um: 330.0,
            overlaps: vec![0.0, 0.25, 0.5, 0.75],
            min_distance_um: 0.1,
        }
    }
}

impl GraphBuildConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.n_target == 0 {
            return Err(GraphError::InvalidConfig("n_target must be positive".into()));
        }
        for (name, v) in [
            ("subsample_radius_um", self.subsample_radius_um),
            ("core_radius_um", self.core_radius_um),
            ("min_distance_um", self.min_distance_um),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GraphError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.overlaps.is_empty() {
            return Err(GraphError::InvalidConfig("at least one overlap is required".into()));
        }
        if self.overlaps.iter().any(|o| !(0.0..1.0).contains(o)) {
            return Err(GraphError::InvalidConfig("overlaps must lie in [0, 1)".into()));
        }
        if self.overlaps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GraphError::InvalidConfig("overlaps must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Subsample graphs of one core at one overlap setting.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsampleSet {
    pub core_id: String,
    pub overlap_fraction: f64,
    pub graphs: Vec<Graph>,
    /// Cell indices (into the core) of each graph's nodes, ascending.
    pub members: Vec<Vec<usize>>,
}

fn bounding_box(coords: &[[f64; 2]]) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in coords {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

/// Window edge length giving `n_target` expected cells at the core's mean
/// density: `sqrt(n_target / density)` with density over the bounding box.
/// Degenerate boxes fall back to the larger of the box diagonal and 1 µm.
pub fn estimate_window_size(core: &Core, n_target: usize) -> Result<f64, GraphError> {
    if core.cells.is_empty() {
        return Err(GraphError::EmptyCore(core.core_id.clone()));
    }
    Ok(window_size_for(&core.coords(), n_target))
}

fn window_size_for(coords: &[[f64; 2]], n_target: usize) -> f64 {
    let (lo, hi) = bounding_box(coords);
    let (w, h) = (hi[0] - lo[0], hi[1] - lo[1]);
    let area = w * h;
    if area > 0.0 {
        let density = coords.len() as f64 / area;
        (n_target as f64 / density).sqrt()
    } else {
        (w * w + h * h).sqrt().max(1.0)
    }
}

/// Centers of the stride-sized tiles covering `[lo, hi]`.
fn grid_positions(lo: f64, hi: f64, window: f64, stride: f64) -> Vec<f64> {
    let extent = hi - lo;
    if extent <= window {
        return vec![lo + extent / 2.0];
    }
    let steps = (extent / stride).ceil() as usize;
    (0..steps).map(|i| lo + (i as f64 + 0.5) * stride).collect()
}

/// Window centers for one overlap, row-major over the bounding box.
pub fn window_centers(coords: &[[f64; 2]], window: f64, overlap: f64) -> Vec<[f64; 2]> {
    let (lo, hi) = bounding_box(coords);
    let stride = (window * (1.0 - overlap)).max(f64::MIN_POSITIVE);
    let xs = grid_positions(lo[0], hi[0], window, stride);
    let ys = grid_positions(lo[1], hi[1], window, stride);
    ys.iter().flat_map(|&y| xs.iter().map(move |&x| [x, y])).collect()
}

/// Indices of the `n` cells nearest to `center`, ordered by (distance,
/// index) for selection and returned sorted by index.
fn nearest_cells(coords: &[[f64; 2]], center: [f64; 2], n: usize) -> Vec<usize> {
    let mut by_dist: Vec<(f64, usize)> = coords
        .iter()
        .enumerate()
        .map(|(i, p)| ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if n < by_dist.len() {
        by_dist.select_nth_unstable_by(n - 1, cmp);
        by_dist.truncate(n);
    }
    let mut idx: Vec<usize> = by_dist.into_iter().map(|(_, i)| i).collect();
    idx.sort_unstable();
    idx
}

/// Builds a subsample graph over the given cell indices.
pub fn subsample_graph(coords: &[[f64; 2]], features: &[Vec<f64>], members: &[usize], config: &GraphBuildConfig) -> Graph {
    let sub_coords: Vec<[f64; 2]> = members.iter().map(|&i| coords[i]).collect();
    let d = features.first().map_or(0, Vec::len);
    let feats = Array2::from_shape_fn((members.len(), d), |(r, c)| features[members[r]][c]);
    let (edges, weights) = radius_edges(&sub_coords, config.subsample_radius_um, config.min_distance_um);
    Graph::new(feats, sub_coords, edges, weights, Provenance::Subsample)
}

/// Sliding-window subsamples of one core at one overlap. Node features are
/// the given per-cell rows (see [`Core::node_feature_rows`]).
pub fn make_subsamples_with_features(core: &Core, features: &[Vec<f64>], config: &GraphBuildConfig, overlap: f64) -> Result<SubsampleSet, GraphError> {
    if core.cells.is_empty() {
        return Err(GraphError::EmptyCore(core.core_id.clone()));
    }
    if features.len() != core.cells.len() {
        return Err(GraphError::DimensionMismatch {
            expected: core.cells.len(),
            got: features.len(),
        });
    }
    let coords = core.coords();
    let window = window_size_for(&coords, config.n_target);
    let n = config.n_target.min(coords.len());
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut members = Vec::new();
    for center in window_centers(&coords, window, overlap) {
        let idx = nearest_cells(&coords, center, n);
        if seen.insert(idx.clone()) {
            members.push(idx);
        }
    }
    let graphs = members.iter().map(|m| subsample_graph(&coords, features, m, config)).collect();
    Ok(SubsampleSet {
        core_id: core.core_id.clone(),
        overlap_fraction: overlap,
        graphs,
        members,
    })
}

/// Sliding-window subsamples using the core's own cell features.
pub fn make_subsamples(core: &Core, config: &GraphBuildConfig, overlap: f64) -> Result<Vec<Graph>, GraphError> {
    let features = core.node_feature_rows(false);
    Ok(make_subsamples_with_features(core, &features, config, overlap)?.graphs)
}

/// Symmetric radius graph: every ordered pair `(u, v)`, `u ≠ v`, with
/// `dist ≤ radius`, weighted `1 / max(dist, min_distance)`. Edges are
/// ordered by source then target.
pub fn radius_edges(coords: &[[f64; 2]], radius: f64, min_distance: f64) -> (Vec<[usize; 2]>, Vec<f64>) {
    let index = GridIndex::new(coords, radius);
    let mut edges = Vec::new();
    let mut weights = Vec::new();
    for (u, p) in coords.iter().enumerate() {
        for (v, d2) in index.within(p, radius, Some(u)) {
            edges.push([u, v]);
            weights.push(1.0 / d2.sqrt().max(min_distance));
        }
    }
    (edges, weights)
}

/// Core-level graph over subsample centroids carrying `node_features`.
pub fn build_core_graph(subsamples: &[Graph], node_features: Array2<f64>, config: &GraphBuildConfig) -> Result<Graph, GraphError> {
    if node_features.nrows() != subsamples.len() {
        return Err(GraphError::DimensionMismatch {
            expected: subsamples.len(),
            got: node_features.nrows(),
        });
    }
    let coords: Vec<[f64; 2]> = subsamples.iter().map(|g| g.centroid_um).collect();
    let (edges, weights) = radius_edges(&coords, config.core_radius_um, config.min_distance_um);
    Ok(Graph::new(node_features, coords, edges, weights, Provenance::CoreLevel))
}

/// Directed k-nearest-neighbour edges `u → v` (ties to the lower index),
/// `k` capped at `n − 1`.
pub fn knn_directed(coords: &[[f64; 2]], k: usize) -> Vec<[usize; 2]> {
    if coords.len() < 2 || k == 0 {
        return Vec::new();
    }
    let (lo, hi) = bounding_box(coords);
    let (w, h) = (hi[0] - lo[0], hi[1] - lo[1]);
    let per_point = (k as f64 + 1.0) / coords.len() as f64;
    // Bucket edge so that a bucket holds about k + 1 points; the linear
    // term covers collinear layouts whose box has no area.
    let cell = (w * h * per_point).sqrt().max(w.max(h) * per_point).max(1e-9);
    let index = GridIndex::new(coords, cell);
    let mut out = Vec::with_capacity(coords.len() * k);
    for (u, p) in coords.iter().enumerate() {
        for (v, _) in index.nearest(p, k, Some(u)) {
            out.push([u, v]);
        }
    }
    out
}

/// Symmetrized k-NN edge set, sorted and deduplicated.
pub fn knn_edges(coords: &[[f64; 2]], k: usize) -> Vec<[usize; 2]> {
    let mut edges: Vec<[usize; 2]> = knn_directed(coords, k).into_iter().flat_map(|[u, v]| [[u, v], [v, u]]).collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell_table::Cell;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn uniform_core(n: usize, side: f64, seed: u64) -> Core {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Core {
            core_id: format!("c{seed}"),
            patient_id: "p".into(),
            cells: (0..n)
                .map(|i| Cell {
                    cell_id: i.to_string(),
                    x_um: rng.random_range(0.0..side),
                    y_um: rng.random_range(0.0..side),
                    features: vec![i as f64 % 3.0, 1.0],
                    tissue_category: None,
                })
                .collect(),
        }
    }

    fn brute_radius(coords: &[[f64; 2]], r: f64, min_d: f64) -> (Vec<[usize; 2]>, Vec<f64>) {
        let mut e = Vec::new();
        let mut w = Vec::new();
        for u in 0..coords.len() {
            for v in 0..coords.len() {
                if u == v {
                    continue;
                }
                let d2 = (coords[u][0] - coords[v][0]).powi(2) + (coords[u][1] - coords[v][1]).powi(2);
                if d2 <= r * r {
                    e.push([u, v]);
                    w.push(1.0 / d2.sqrt().max(min_d));
                }
            }
        }
        (e, w)
    }

    #[test]
    fn window_size_from_density() {
        let core = uniform_core(10_000, 1000.0, 1);
        let w = estimate_window_size(&core, 1000).unwrap();
        // The bounding box of 10k uniform points is within ~0.5% of the
        // sampling square.
        assert!((w - 1000.0f64.sqrt() * 10.0).abs() < 2.0, "w = {w}");
    }

    #[test]
    fn window_size_degenerate_box() {
        let mut core = uniform_core(5, 10.0, 2);
        for c in &mut core.cells {
            c.x_um = 3.0;
            c.y_um = 3.0;
        }
        assert_eq!(estimate_window_size(&core, 1000).unwrap(), 1.0);
        // Collinear: zero area, diagonal fallback.
        for (i, c) in core.cells.iter_mut().enumerate() {
            c.x_um = i as f64 * 10.0;
        }
        assert_eq!(estimate_window_size(&core, 1000).unwrap(), 40.0);
    }

    #[test]
    fn undersized_core_yields_single_graph() {
        let core = uniform_core(800, 300.0, 3);
        let graphs = make_subsamples(&core, &GraphBuildConfig::default(), 0.5).unwrap();
        assert_eq!(graphs.len(), 1);
        assert_eq!(graphs[0].n_nodes(), 800);
    }

    #[test]
    fn large_core_subsamples_have_exactly_target_nodes() {
        let core = uniform_core(4000, 630.0, 4);
        let cfg = GraphBuildConfig::default();
        for &ov in &cfg.overlaps {
            let graphs = make_subsamples(&core, &cfg, ov).unwrap();
            assert!(graphs.len() > 1);
            for g in &graphs {
                assert_eq!(g.n_nodes(), 1000);
                g.validate().unwrap();
            }
        }
    }

    #[test]
    fn higher_overlap_places_at_least_as_many_windows() {
        let core = uniform_core(3000, 500.0, 5);
        let coords = core.coords();
        let w = estimate_window_size(&core, 1000).unwrap();
        assert!(window_centers(&coords, w, 0.5).len() >= window_centers(&coords, w, 0.0).len());
        assert!(window_centers(&coords, w, 0.75).len() >= window_centers(&coords, w, 0.5).len());
    }

    #[test]
    fn every_cell_is_covered_by_default_overlaps() {
        for seed in 0..5 {
            let core = uniform_core(2500, 400.0 + 50.0 * seed as f64, 10 + seed);
            let cfg = GraphBuildConfig::default();
            let features = core.node_feature_rows(false);
            let mut covered = vec![false; core.cells.len()];
            for &ov in &cfg.overlaps {
                for m in make_subsamples_with_features(&core, &features, &cfg, ov).unwrap().members {
                    for i in m {
                        covered[i] = true;
                    }
                }
            }
            let missing = covered.iter().filter(|c| !**c).count();
            assert_eq!(missing, 0, "seed {seed}");
        }
    }

    #[test]
    fn empty_core_is_an_error() {
        let core = Core {
            core_id: "e".into(),
            patient_id: "p".into(),
            cells: vec![],
        };
        assert!(matches!(make_subsamples(&core, &GraphBuildConfig::default(), 0.0), Err(GraphError::EmptyCore(_))));
        assert!(estimate_window_size(&core, 10).is_err());
    }

    #[test]
    fn radius_edges_collinear_example() {
        let (e, w) = radius_edges(&[[0.0, 0.0], [15.0, 0.0], [40.0, 0.0]], 20.0, 0.1);
        assert_eq!(e, vec![[0, 1], [1, 0]]);
        assert_eq!(w, vec![1.0 / 15.0, 1.0 / 15.0]);
    }

    #[test]
    fn coincident_points_use_clamped_distance() {
        let (e, w) = radius_edges(&[[5.0, 5.0], [5.0, 5.0]], 20.0, 0.1);
        assert_eq!(e.len(), 2);
        assert!(w.iter().all(|&x| (x - 10.0).abs() < 1e-12));
    }

    #[test]
    fn radius_edges_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for n in [0, 1, 2, 50, 200, 500] {
            let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-100.0..200.0), rng.random_range(0.0..150.0)]).collect();
            assert_eq!(radius_edges(&coords, 20.0, 0.1), brute_radius(&coords, 20.0, 0.1));
        }
    }

    #[test]
    fn core_graph_from_centroids() {
        let cfg = GraphBuildConfig::default();
        let mk = |x: f64| Graph::new(Array2::zeros((1, 2)), vec![[x, 0.0]], vec![], vec![], Provenance::Subsample);
        let one = build_core_graph(&[mk(0.0)], Array2::zeros((1, 4)), &cfg).unwrap();
        assert_eq!((one.n_nodes(), one.n_edges()), (1, 0));
        let near = build_core_graph(&[mk(0.0), mk(300.0)], Array2::zeros((2, 4)), &cfg).unwrap();
        assert_eq!(near.edges, vec![[0, 1], [1, 0]]);
        assert!((near.edge_weights[0] - 1.0 / 300.0).abs() < 1e-15);
        assert_eq!(near.provenance, Provenance::CoreLevel);
        let far = build_core_graph(&[mk(0.0), mk(400.0)], Array2::zeros((2, 4)), &cfg).unwrap();
        assert_eq!(far.n_edges(), 0);
        assert!(matches!(
            build_core_graph(&[mk(0.0)], Array2::zeros((2, 4)), &cfg),
            Err(GraphError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn knn_examples() {
        assert_eq!(knn_directed(&[[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]], 1), vec![[0, 1], [1, 0], [2, 1]]);
        assert_eq!(knn_edges(&[[0.0, 0.0], [1.0, 1.0]], 3), vec![[0, 1], [1, 0]]);
        let square = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let d = knn_directed(&square, 1);
        // Two equidistant neighbours each; the lower index wins.
        assert_eq!(d, vec![[0, 1], [1, 0], [2, 0], [3, 1]]);
        assert!(knn_edges(&square, 1).len() <= 8);
    }

    #[test]
    fn config_validation() {
        let mut cfg = GraphBuildConfig::default();
        cfg.validate().unwrap();
        cfg.overlaps = vec![0.5, 0.25];
        assert!(cfg.validate().is_err());
        cfg.overlaps = vec![0.0, 1.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn construction_is_deterministic() {
        let core = uniform_core(1500, 300.0, 8);
        let cfg = GraphBuildConfig::default();
        assert_eq!(make_subsamples(&core, &cfg, 0.25).unwrap(), make_subsamples(&core, &cfg, 0.25).unwrap());
    }
}
