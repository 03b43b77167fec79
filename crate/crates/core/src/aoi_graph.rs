//! Routing graph over visitable hex cells plus the base and terminal nodes.
//!
//! Cells are nodes `0..n`, the base is `n` and the terminal is `n + 1`. The
//! terminal duplicates the base position and adjacency.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{AoiPolygon, HexFrame, Point, Tessellation, HEX_DIRECTIONS};

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("no visitable cells")]
    Empty,
    #[error("cell subgraph is disconnected ({components} components)")]
    Disconnected { components: usize },
    #[error("base node has no feasible connection")]
    IsolatedBase,
    #[error("invalid graph: {0}")]
    Invalid(String),
}

/// Per-node policy input `[x, y, w, m]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatures {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub m: f64,
}

impl NodeFeatures {
    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.m]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axial {
    pub q: i32,
    pub r: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AoiGraph {
    /// Axial coordinates of the cell nodes.
    cells: Vec<Axial>,
    /// Physical positions (NM) of every node, base and terminal included.
    positions: Vec<Point>,
    adjacency: Vec<Vec<usize>>,
    hexscore: Vec<f64>,
    cell_spacing: f64,
    features: Vec<NodeFeatures>,
}

impl AoiGraph {
    /// Assembles a graph from raw parts, checking every structural invariant.
    pub fn from_parts(
        cells: Vec<Axial>,
        positions: Vec<Point>,
        adjacency: Vec<Vec<usize>>,
        hexscore: Vec<f64>,
        cell_spacing: f64,
    ) -> Result<Self, GraphError> {
        let n = cells.len();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        if positions.len() != n + 2 || adjacency.len() != n + 2 || hexscore.len() != n {
            return Err(GraphError::Invalid("node count mismatch".into()));
        }
        if hexscore.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(GraphError::Invalid("hexscore must be finite and non-negative".into()));
        }
        if !(cell_spacing.is_finite() && cell_spacing > 0.0) {
            return Err(GraphError::Invalid("cell spacing must be positive".into()));
        }
        let mut adjacency = adjacency;
        for (i, nb) in adjacency.iter_mut().enumerate() {
            nb.sort_unstable();
            nb.dedup();
            if nb.iter().any(|&j| j >= n + 2 || j == i) {
                return Err(GraphError::Invalid(format!("bad neighbour list at node {i}")));
            }
        }
        for i in 0..n + 2 {
            for &j in &adjacency[i] {
                if adjacency[j].binary_search(&i).is_err() {
                    return Err(GraphError::Invalid(format!("edge {i}-{j} not symmetric")));
                }
            }
        }
        if adjacency[n].contains(&(n + 1)) {
            return Err(GraphError::Invalid("base and terminal must not be adjacent".into()));
        }
        let cell_degree = |i: usize| adjacency[i].iter().filter(|&&j| j < n).count();
        if (0..n).any(|i| cell_degree(i) > 6) {
            return Err(GraphError::Invalid("cell degree exceeds 6".into()));
        }
        if adjacency[n].is_empty() {
            return Err(GraphError::IsolatedBase);
        }
        let components = count_cell_components(n, &adjacency);
        if components != 1 {
            return Err(GraphError::Disconnected { components });
        }
        let features = compute_features(&positions, &hexscore, n);
        Ok(Self {
            cells,
            positions,
            adjacency,
            hexscore,
            cell_spacing,
            features,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.cells.len() + 2
    }

    pub fn base(&self) -> usize {
        self.cells.len()
    }

    pub fn terminal(&self) -> usize {
        self.cells.len() + 1
    }

    pub fn is_cell(&self, node: usize) -> bool {
        node < self.cells.len()
    }

    pub fn cells(&self) -> &[Axial] {
        &self.cells
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn are_adjacent(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    pub fn position(&self, node: usize) -> Point {
        self.positions[node]
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn hexscore(&self, node: usize) -> f64 {
        self.hexscore.get(node).copied().unwrap_or(0.0)
    }

    pub fn hexscores(&self) -> &[f64] {
        &self.hexscore
    }

    /// Physical distance between edge-sharing cell centroids (`√3·rh`).
    pub fn cell_spacing(&self) -> f64 {
        self.cell_spacing
    }

    pub fn features(&self) -> &[NodeFeatures] {
        &self.features
    }

    /// Euclidean travel cost between two nodes in NM.
    pub fn travel_cost(&self, a: usize, b: usize) -> f64 {
        self.positions[a].dist(self.positions[b])
    }

    /// Cells adjacent to the terminal node.
    pub fn terminal_neighbors(&self) -> &[usize] {
        &self.adjacency[self.terminal()]
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, nb) in self.adjacency.iter().enumerate() {
            for &j in nb {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// A copy with positions mapped through `f` (features recomputed).
    pub fn map_positions(&self, f: impl Fn(Point) -> Point) -> AoiGraph {
        let positions: Vec<Point> = self.positions.iter().map(|&p| f(p)).collect();
        let features = compute_features(&positions, &self.hexscore, self.cells.len());
        AoiGraph {
            positions,
            features,
            ..self.clone()
        }
    }

    /// Replaces the hexscore field.
    pub fn with_hexscore(&self, hexscore: Vec<f64>) -> Result<AoiGraph, GraphError> {
        AoiGraph::from_parts(
            self.cells.clone(),
            self.positions.clone(),
            self.adjacency.clone(),
            hexscore,
            self.cell_spacing,
        )
    }
}

fn count_cell_components(n: usize, adjacency: &[Vec<usize>]) -> usize {
    let mut seen = vec![false; n];
    let mut comps = 0;
    for s in 0..n {
        if seen[s] {
            continue;
        }
        comps += 1;
        seen[s] = true;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &v in &adjacency[u] {
                if v < n && !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
    }
    comps
}

/// Base-centred coordinates scaled so the farthest node has radius 1.
fn compute_features(positions: &[Point], hexscore: &[f64], n: usize) -> Vec<NodeFeatures> {
    let base = positions[n];
    let rel: Vec<Point> = positions.iter().map(|p| p.sub(base)).collect();
    let extent = rel.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let inv = if extent > 0.0 { 1.0 / extent } else { 0.0 };
    rel.iter()
        .enumerate()
        .map(|(i, p)| NodeFeatures {
            x: p.x * inv,
            y: p.y * inv,
            w: if i < n { hexscore[i] } else { 0.0 },
            m: if i >= n { 1.0 } else { 0.0 },
        })
        .collect()
}

/// Builds the routing graph from the visitable cells of a tessellation.
///
/// Cell pairs are joined when hex-adjacent and the centroid segment clears
/// every hole. The base connects to outer-ring cells (cells with a lattice
/// neighbour outside the AOI outline) that have a hole-free line of sight.
pub fn build_graph(
    tess: &Tessellation,
    poly: &AoiPolygon,
    base_point: Point,
) -> Result<AoiGraph, GraphError> {
    let visitable: Vec<_> = tess.visitable().copied().collect();
    if visitable.is_empty() {
        return Err(GraphError::Empty);
    }
    let mut order: Vec<usize> = (0..visitable.len()).collect();
    order.sort_by_key(|&i| (visitable[i].r, visitable[i].q));
    let cells: Vec<_> = order.iter().map(|&i| visitable[i]).collect();
    let n = cells.len();
    let index: std::collections::HashMap<(i32, i32), usize> =
        cells.iter().enumerate().map(|(i, c)| ((c.q, c.r), i)).collect();

    let mut adjacency = vec![Vec::new(); n + 2];
    for (i, c) in cells.iter().enumerate() {
        for (dq, dr) in HEX_DIRECTIONS {
            if let Some(&j) = index.get(&(c.q + dq, c.r + dr)) {
                if j > i && !poly.segment_hits_hole(c.centroid, cells[j].centroid) {
                    adjacency[i].push(j);
                    adjacency[j].push(i);
                }
            }
        }
    }
    let (base, terminal) = (n, n + 1);
    for (i, c) in cells.iter().enumerate() {
        if is_outer_ring(&tess.frame, poly, c.q, c.r) && !poly.segment_hits_hole(base_point, c.centroid) {
            adjacency[base].push(i);
            adjacency[terminal].push(i);
            adjacency[i].push(base);
            adjacency[i].push(terminal);
        }
    }
    let mut positions: Vec<Point> = cells.iter().map(|c| c.centroid).collect();
    positions.push(base_point);
    positions.push(base_point);
    AoiGraph::from_parts(
        cells.iter().map(|c| Axial { q: c.q, r: c.r }).collect(),
        positions,
        adjacency,
        vec![0.0; n],
        tess.spec.cell_spacing(),
    )
}

/// A cell is on the outer ring when one of its six lattice neighbours falls
/// outside the AOI outline (holes do not count).
pub fn is_outer_ring(frame: &HexFrame, poly: &AoiPolygon, q: i32, r: i32) -> bool {
    use crate::geometry::{point_in_ring, Containment};
    HEX_DIRECTIONS
        .iter()
        .any(|&(dq, dr)| point_in_ring(frame.center(q + dq, r + dr), &poly.outer) != Containment::Inside)
}

pub mod fixtures {
    //! Small hand-built graphs for tests and examples.
    use super::*;

    /// Builds a graph on explicit axial cells. Every listed cell in
    /// `base_cells` is wired to base/terminal, which sit far to the south.
    pub fn axial_graph(cells: &[(i32, i32)], base_cells: &[(i32, i32)]) -> AoiGraph {
        let rh = 5.0;
        let frame = HexFrame {
            obb: crate::geometry::Obb {
                center: Point::new(0.0, 0.0),
                angle: 0.0,
                half_extents: (100.0, 100.0),
            },
            circumradius: rh,
        };
        let n = cells.len();
        let mut adjacency = vec![Vec::new(); n + 2];
        for i in 0..n {
            for j in (i + 1)..n {
                if crate::geometry::hex_distance(cells[i], cells[j]) == 1 {
                    adjacency[i].push(j);
                    adjacency[j].push(i);
                }
            }
        }
        for (i, c) in cells.iter().enumerate() {
            if base_cells.contains(c) {
                for b in [n, n + 1] {
                    adjacency[i].push(b);
                    adjacency[b].push(i);
                }
            }
        }
        let mut positions: Vec<Point> = cells.iter().map(|&(q, r)| frame.center(q, r)).collect();
        positions.push(Point::new(0.0, -150.0));
        positions.push(Point::new(0.0, -150.0));
        AoiGraph::from_parts(
            cells.iter().map(|&(q, r)| Axial { q, r }).collect(),
            positions,
            adjacency,
            vec![0.0; n],
            3f64.sqrt() * rh,
        )
        .unwrap()
    }

    /// Centre plus its six neighbours; the three southern petals touch base.
    pub fn flower() -> AoiGraph {
        let mut cells = vec![(0, 0)];
        cells.extend(HEX_DIRECTIONS);
        axial_graph(&cells, &[(1, -1), (0, -1), (-1, 0)])
    }

    /// Straight row of `len` cells; base touches both ends.
    pub fn corridor(len: i32) -> AoiGraph {
        let cells: Vec<(i32, i32)> = (0..len).map(|q| (q, 0)).collect();
        axial_graph(&cells, &[(0, 0), (len - 1, 0)])
    }

    /// Row of `len` cells with base touching only the first cell.
    pub fn corridor_one_end(len: i32) -> AoiGraph {
        let cells: Vec<(i32, i32)> = (0..len).map(|q| (q, 0)).collect();
        axial_graph(&cells, &[(0, 0)])
    }

    /// `rows × cols` block of axial rows offset so each row sits flush above
    /// the previous one (an offset-coordinate rectangle).
    pub fn block(rows: i32, cols: i32) -> AoiGraph {
        let mut cells = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                cells.push((c - r / 2, r));
            }
        }
        let n_rows = rows;
        let outer: Vec<(i32, i32)> = cells
            .iter()
            .copied()
            .filter(|&(q, r)| {
                let col = q + r / 2;
                r == 0 || r == n_rows - 1 || col == 0 || col == cols - 1
            })
            .collect();
        axial_graph(&cells, &outer)
    }
}
