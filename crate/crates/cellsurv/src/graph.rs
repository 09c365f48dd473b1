//! Cellular-graph data model: cells, graphs, patients, cohorts, and the
//! pruned KNN construction.
//!
//! A stained image becomes one graph: one node per segmented cell, each node
//! connected to its K nearest neighbors by pixel distance (undirected union),
//! with edges longer than a biological interaction cutoff removed afterwards.
//! Node features are the precomputed cell embedding extended by a type flag
//! (+1 positive / -1 negative) and the cell position relative to the image
//! extent (top-left origin, divided by width/height).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_KNN_K: usize = 5;
pub const DEFAULT_MAX_EDGE_LEN: f64 = 60.0;

/// Staining biomarker identifier (e.g. "Ki67", "CD8").
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModalityId(pub String);

impl std::fmt::Display for ModalityId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellType {
    Positive,
    Negative,
}

impl CellType {
    /// Parse a cell-type token; "positive"/"pos" and "negative"/"neg" are
    /// accepted case-insensitively.
    pub fn parse(token: &str) -> Result<Self> {
        match token.to_ascii_lowercase().as_str() {
            "positive" | "pos" => Ok(CellType::Positive),
            "negative" | "neg" => Ok(CellType::Negative),
            other => Err(Error::Data(format!("unknown cell_type token '{other}'"))),
        }
    }

    /// Scalar encoding used in node features.
    pub fn flag(self) -> f64 {
        match self {
            CellType::Positive => 1.0,
            CellType::Negative => -1.0,
        }
    }
}

/// One segmented cell: pixel location, biomarker response, and a precomputed
/// feature embedding of width `d_in`.
#[derive(Debug, Clone)]
pub struct CellRecord {
    pub x: f64,
    pub y: f64,
    pub cell_type: CellType,
    pub features: Vec<f64>,
}

/// Survival status at last follow-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    Observed,
    Censored,
}

impl Event {
    pub fn is_observed(self) -> bool {
        matches!(self, Event::Observed)
    }
}

/// Symmetric neighbor lists over `n` nodes, built from an undirected edge set.
#[derive(Debug, Clone)]
pub struct Adjacency {
    neighbors: Vec<Vec<u32>>,
    n_edges: usize,
}

impl Adjacency {
    pub fn from_edges(n: usize, edges: &[(u32, u32)]) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u as usize >= n || v as usize >= n {
                return Err(Error::Contract(format!(
                    "edge ({u},{v}) out of range for {n} nodes"
                )));
            }
            if u == v {
                return Err(Error::Contract(format!("self-loop on node {u}")));
            }
            neighbors[u as usize].push(v);
            neighbors[v as usize].push(u);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Adjacency {
            neighbors,
            n_edges: edges.len(),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    /// Undirected edge count.
    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    pub fn neighbors(&self, k: usize) -> &[u32] {
        &self.neighbors[k]
    }
}

/// Restrict an undirected edge list to kept nodes (ascending, deduplicated),
/// remapping endpoints to compacted indices.
pub fn induced_edges(edges: &[(u32, u32)], kept: &[usize]) -> Vec<(u32, u32)> {
    let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
    for (new, &old) in kept.iter().enumerate() {
        remap.insert(old as u32, new as u32);
    }
    let mut out = Vec::new();
    for &(u, v) in edges {
        if let (Some(&nu), Some(&nv)) = (remap.get(&u), remap.get(&v)) {
            out.push(if nu < nv { (nu, nv) } else { (nv, nu) });
        }
    }
    out.sort_unstable();
    out
}

/// One stained image as a graph: per-cell features, relative positions in
/// [0,1]^2, and the pruned KNN edge set.
#[derive(Debug, Clone, PartialEq)]
pub struct CellularGraph {
    pub image_id: String,
    pub modality: ModalityId,
    /// c x d_node matrix, d_node = d_in + 3.
    pub node_features: Tensor,
    /// c x 2 relative coordinates.
    pub positions: Tensor,
    /// Undirected edges, canonical (u < v), sorted.
    pub edges: Vec<(u32, u32)>,
    /// (width, height) in pixels.
    pub image_extent: (f64, f64),
}

impl CellularGraph {
    pub fn n_nodes(&self) -> usize {
        self.node_features.rows()
    }

    pub fn adjacency(&self) -> Result<Adjacency> {
        Adjacency::from_edges(self.n_nodes(), &self.edges)
    }

    /// Check structural invariants: canonical deduplicated edges, endpoints in
    /// range, no self-loops, edge pixel lengths within `max_edge_len`.
    pub fn validate(&self, max_edge_len: f64) -> Result<()> {
        let c = self.n_nodes() as u32;
        let mut seen = BTreeSet::new();
        for &(u, v) in &self.edges {
            if u >= v {
                return Err(Error::Data(format!(
                    "graph {}: edge ({u},{v}) not canonical",
                    self.image_id
                )));
            }
            if v >= c {
                return Err(Error::Data(format!(
                    "graph {}: edge endpoint {v} out of range",
                    self.image_id
                )));
            }
            if !seen.insert((u, v)) {
                return Err(Error::Data(format!(
                    "graph {}: duplicate edge ({u},{v})",
                    self.image_id
                )));
            }
            let (w, h) = self.image_extent;
            let dx = (self.positions.get(u as usize, 0) - self.positions.get(v as usize, 0)) * w;
            let dy = (self.positions.get(u as usize, 1) - self.positions.get(v as usize, 1)) * h;
            if (dx * dx + dy * dy).sqrt() > max_edge_len * (1.0 + 1e-9) {
                return Err(Error::Data(format!(
                    "graph {}: edge ({u},{v}) longer than {max_edge_len}px",
                    self.image_id
                )));
            }
        }
        Ok(())
    }
}

/// One patient: outcome plus per-modality graph instances.
#[derive(Debug, Clone)]
pub struct PatientRecord {
    pub patient_id: String,
    pub survival_time_years: f64,
    pub event: Event,
    pub graphs: BTreeMap<ModalityId, Vec<CellularGraph>>,
}

/// The full dataset: patients plus the ordered modality registry.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
    pub modalities: Vec<ModalityId>,
    pub d_in: usize,
}

impl Cohort {
    /// Node feature width (embedding + type flag + 2 coordinates).
    pub fn d_node(&self) -> usize {
        self.d_in + 3
    }

    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn censored_fraction(&self) -> f64 {
        let c = self
            .patients
            .iter()
            .filter(|p| p.event == Event::Censored)
            .count();
        c as f64 / self.patients.len().max(1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Data("cohort has no modalities".into()));
        }
        let mut ids = BTreeSet::new();
        for p in &self.patients {
            if !ids.insert(&p.patient_id) {
                return Err(Error::Data(format!(
                    "duplicate patient_id '{}'",
                    p.patient_id
                )));
            }
            if !(p.survival_time_years > 0.0) {
                return Err(Error::Data(format!(
                    "patient '{}': non-positive survival time {}",
                    p.patient_id, p.survival_time_years
                )));
            }
            for m in &self.modalities {
                match p.graphs.get(m) {
                    Some(gs) if !gs.is_empty() => {}
                    _ => {
                        return Err(Error::Data(format!(
                            "patient '{}' has no graph for modality '{m}'",
                            p.patient_id
                        )))
                    }
                }
            }
            for gs in p.graphs.values() {
                for g in gs {
                    if g.node_features.cols() != self.d_node() {
                        return Err(Error::Data(format!(
                            "graph '{}': feature width {} does not match d_in {} + 3",
                            g.image_id,
                            g.node_features.cols(),
                            self.d_in
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Build the pruned KNN graph for one image.
///
/// Each node is linked to its `min(k, c-1)` nearest neighbors by Euclidean
/// pixel distance (ties broken by lower cell index), the directed selection is
/// symmetrized by union, and edges longer than `max_edge_len` pixels are then
/// removed.
pub fn build_knn_graph(
    cells: &[CellRecord],
    k: usize,
    max_edge_len: f64,
    extent: (f64, f64),
    image_id: &str,
    modality: &ModalityId,
) -> Result<CellularGraph> {
    if cells.is_empty() {
        return Err(Error::Degenerate(format!(
            "image '{image_id}': cannot build a graph from zero cells"
        )));
    }
    let (w, h) = extent;
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::Data(format!(
            "image '{image_id}': non-positive extent {w}x{h}"
        )));
    }
    let d_in = cells[0].features.len();
    if let Some((i, c)) = cells
        .iter()
        .enumerate()
        .find(|(_, c)| c.features.len() != d_in)
    {
        return Err(Error::Data(format!(
            "image '{image_id}': cell {i} has {} features, expected {d_in}",
            c.features.len()
        )));
    }

    let c = cells.len();
    let k_eff = k.min(c - 1);
    let mut undirected: BTreeSet<(u32, u32)> = BTreeSet::new();
    if k_eff > 0 {
        let points: Vec<(f64, f64)> = cells.iter().map(|cell| (cell.x, cell.y)).collect();
        let grid = PointGrid::build(&points, extent);
        for i in 0..c {
            for j in grid.k_nearest(i, k_eff) {
                let (a, b) = if (i as u32) < j { (i as u32, j) } else { (j, i as u32) };
                undirected.insert((a, b));
            }
        }
    }

    let max_sq = max_edge_len * max_edge_len;
    let edges: Vec<(u32, u32)> = undirected
        .into_iter()
        .filter(|&(u, v)| {
            let du = &cells[u as usize];
            let dv = &cells[v as usize];
            let dx = du.x - dv.x;
            let dy = du.y - dv.y;
            dx * dx + dy * dy <= max_sq
        })
        .collect();

    let mut feat = Vec::with_capacity(c * (d_in + 3));
    let mut pos = Vec::with_capacity(c * 2);
    for cell in cells {
        feat.extend_from_slice(&cell.features);
        feat.push(cell.cell_type.flag());
        feat.push(cell.x / w);
        feat.push(cell.y / h);
        pos.push(cell.x / w);
        pos.push(cell.y / h);
    }

    Ok(CellularGraph {
        image_id: image_id.to_string(),
        modality: modality.clone(),
        node_features: Tensor::new(c, d_in + 3, feat)?,
        positions: Tensor::new(c, 2, pos)?,
        edges,
        image_extent: extent,
    })
}

/// Uniform bucket grid for exact k-nearest-neighbor queries: rings of buckets
/// are scanned outwards until the current k-th best distance proves no closer
/// point remains.
struct PointGrid<'a> {
    points: &'a [(f64, f64)],
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<u32>>,
}

impl<'a> PointGrid<'a> {
    fn build(points: &'a [(f64, f64)], extent: (f64, f64)) -> Self {
        let n = points.len().max(1);
        let area = (extent.0 * extent.1).max(f64::MIN_POSITIVE);
        // ~2 points per bucket on average
        let cell = (2.0 * area / n as f64).sqrt().max(1e-9);
        let nx = (extent.0 / cell).ceil().max(1.0) as usize;
        let ny = (extent.1 / cell).ceil().max(1.0) as usize;
        let mut buckets = vec![Vec::new(); nx * ny];
        for (i, &(x, y)) in points.iter().enumerate() {
            let (bx, by) = Self::bucket_of(x, y, cell, nx, ny);
            buckets[by * nx + bx].push(i as u32);
        }
        PointGrid {
            points,
            cell,
            nx,
            ny,
            buckets,
        }
    }

    fn bucket_of(x: f64, y: f64, cell: f64, nx: usize, ny: usize) -> (usize, usize) {
        let bx = ((x / cell) as usize).min(nx - 1);
        let by = ((y / cell) as usize).min(ny - 1);
        (bx, by)
    }

    /// Exact k nearest neighbors of point `i` (excluding itself), ties broken
    /// by lower point index.
    fn k_nearest(&self, i: usize, k: usize) -> Vec<u32> {
        let (px, py) = self.points[i];
        let (bx, by) = Self::bucket_of(px, py, self.cell, self.nx, self.ny);
        // (squared distance, index), kept sorted ascending, at most k entries
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        let mut ring = 0usize;
        loop {
            let mut any_bucket = false;
            for (cx, cy) in ring_buckets(bx, by, ring, self.nx, self.ny) {
                any_bucket = true;
                for &j in &self.buckets[cy * self.nx + cx] {
                    if j as usize == i {
                        continue;
                    }
                    let (qx, qy) = self.points[j as usize];
                    let d2 = (px - qx) * (px - qx) + (py - qy) * (py - qy);
                    let entry = (d2, j);
                    if best.len() == k {
                        let worst = *best.last().unwrap();
                        if (entry.0, entry.1) >= (worst.0, worst.1) {
                            continue;
                        }
                        best.pop();
                    }
                    let pos = best.partition_point(|e| (e.0, e.1) < (entry.0, entry.1));
                    best.insert(pos, entry);
                }
            }
            // Any point in an unscanned bucket is at least ring*cell away.
            let safe = (ring as f64) * self.cell;
            if best.len() == k && best.last().unwrap().0 <= safe * safe {
                break;
            }
            if !any_bucket && ring > self.nx + self.ny {
                break;
            }
            ring += 1;
        }
        best.into_iter().map(|(_, j)| j).collect()
    }
}

/// Buckets at Chebyshev distance exactly `ring` from (bx, by), clipped to the
/// grid.
fn ring_buckets(
    bx: usize,
    by: usize,
    ring: usize,
    nx: usize,
    ny: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let r = ring as isize;
    let (bx, by) = (bx as isize, by as isize);
    let (nx, ny) = (nx as isize, ny as isize);
    let mut cells = Vec::new();
    if ring == 0 {
        cells.push((bx, by));
    } else {
        for dx in -r..=r {
            cells.push((bx + dx, by - r));
            cells.push((bx + dx, by + r));
        }
        for dy in (-r + 1)..=(r - 1) {
            cells.push((bx - r, by + dy));
            cells.push((bx + r, by + dy));
        }
    }
    cells
        .into_iter()
        .filter(move |&(x, y)| x >= 0 && y >= 0 && x < nx && y < ny)
        .map(|(x, y)| (x as usize, y as usize))
}
