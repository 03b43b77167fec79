//! Classical coverage baselines and the exhaustive DFS oracle.
//!
//! Every method produces a [`Route`] from base to terminal. Revisit-allowed
//! methods plan an ordered list of waypoint cells and join them with
//! hop-minimal transit that may cross already-visited cells.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aoi_graph::AoiGraph;
use crate::dataset::{audit_hamiltonian, AuditOutcome};
use crate::environment::{heading_change, STRAIGHT_TOL};
use crate::geometry::HEX_DIRECTIONS;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RouteError {
    #[error("node {to} is unreachable from {from}")]
    Unreachable { from: usize, to: usize },
    #[error("search budget exhausted after {0} expansions")]
    Budget(u64),
    #[error("invalid route: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub nodes: Vec<usize>,
    pub revisits: usize,
    pub complete: bool,
    pub hamiltonian: bool,
}

impl Route {
    /// Builds a route from a node sequence, deriving the counters.
    pub fn from_nodes(graph: &AoiGraph, nodes: Vec<usize>) -> Route {
        let n = graph.num_cells();
        let mut seen = vec![false; n];
        let mut covered = 0;
        let mut revisits = 0;
        for &v in &nodes {
            if v < n {
                if seen[v] {
                    revisits += 1;
                } else {
                    seen[v] = true;
                    covered += 1;
                }
            }
        }
        let complete = covered == n && nodes.last() == Some(&graph.terminal());
        Route {
            nodes,
            revisits,
            complete,
            hamiltonian: complete && revisits == 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }
}

/// Checks adjacency, endpoints and every counter of a route.
pub fn validate_route(graph: &AoiGraph, route: &Route) -> Result<(), RouteError> {
    let nodes = &route.nodes;
    if nodes.first() != Some(&graph.base()) {
        return Err(RouteError::Invalid("route must start at base".into()));
    }
    for (k, w) in nodes.windows(2).enumerate() {
        if !graph.are_adjacent(w[0], w[1]) {
            return Err(RouteError::Invalid(format!("step {k}: {} and {} not adjacent", w[0], w[1])));
        }
    }
    let interior = &nodes[1..nodes.len().saturating_sub(1).max(1)];
    if interior.iter().any(|&v| !graph.is_cell(v)) {
        return Err(RouteError::Invalid("base or terminal inside route".into()));
    }
    let derived = Route::from_nodes(graph, nodes.clone());
    if derived.revisits != route.revisits {
        return Err(RouteError::Invalid(format!(
            "revisit count {} but route has {}",
            route.revisits, derived.revisits
        )));
    }
    if derived.complete != route.complete || derived.hamiltonian != route.hamiltonian {
        return Err(RouteError::Invalid("completion flags disagree with node sequence".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Warnsdorff,
    DfsBacktrack,
    SweepBoustrophedon,
    SweepSegmentSnake,
    BoundarySpiralOutward,
    BoundarySpiralInward,
    SweepSegmentInterleave,
    SweepBoundaryPeel,
    MortonZorder,
    SweepRowInterleave,
    StcTreeCoverage,
    StcLike,
    SweepRowOneway,
}

impl Method {
    pub const ALL: [Method; 13] = [
        Method::Warnsdorff,
        Method::DfsBacktrack,
        Method::SweepBoustrophedon,
        Method::SweepSegmentSnake,
        Method::BoundarySpiralOutward,
        Method::BoundarySpiralInward,
        Method::SweepSegmentInterleave,
        Method::SweepBoundaryPeel,
        Method::MortonZorder,
        Method::SweepRowInterleave,
        Method::StcTreeCoverage,
        Method::StcLike,
        Method::SweepRowOneway,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Warnsdorff => "warnsdorff",
            Method::DfsBacktrack => "dfs_backtrack",
            Method::SweepBoustrophedon => "sweep_boustrophedon",
            Method::SweepSegmentSnake => "sweep_segment_snake",
            Method::BoundarySpiralOutward => "boundary_spiral_outward",
            Method::BoundarySpiralInward => "boundary_spiral_inward",
            Method::SweepSegmentInterleave => "sweep_segment_interleave",
            Method::SweepBoundaryPeel => "sweep_boundary_peel",
            Method::MortonZorder => "morton_zorder",
            Method::SweepRowInterleave => "sweep_row_interleave",
            Method::StcTreeCoverage => "stc_tree_coverage",
            Method::StcLike => "stc_like",
            Method::SweepRowOneway => "sweep_row_oneway",
        }
    }

    pub fn allows_revisits(self) -> bool {
        self != Method::Warnsdorff
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

/// Runs one baseline on an audited graph.
pub fn run(method: Method, graph: &AoiGraph) -> Route {
    match method {
        Method::Warnsdorff => warnsdorff(graph),
        Method::DfsBacktrack => dfs_backtrack(graph),
        Method::SweepBoustrophedon => row_sweep(graph, RowOrder::Sequential, true),
        Method::SweepRowOneway => row_sweep(graph, RowOrder::Sequential, false),
        Method::SweepRowInterleave => row_sweep(graph, RowOrder::Interleaved, true),
        Method::SweepSegmentSnake => segment_sweep(graph, RowOrder::Sequential),
        Method::SweepSegmentInterleave => segment_sweep(graph, RowOrder::Interleaved),
        Method::BoundarySpiralInward => spiral(graph, true),
        Method::BoundarySpiralOutward => spiral(graph, false),
        Method::SweepBoundaryPeel => peel(graph),
        Method::MortonZorder => morton(graph),
        Method::StcTreeCoverage => stc(graph, pair_mst(graph)),
        Method::StcLike => stc(graph, bfs_tree(graph)),
    }
}

/// Hop-minimal path; base and terminal are never used as intermediate nodes
/// and `blocked` nodes are avoided. Ties go to the lowest node index.
pub fn shortest_path(
    graph: &AoiGraph,
    from: usize,
    to: usize,
    blocked: Option<&[bool]>,
) -> Result<Vec<usize>, RouteError> {
    if from == to {
        return Ok(vec![from]);
    }
    let mut prev = vec![usize::MAX; graph.num_nodes()];
    prev[from] = from;
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        if u != from && !graph.is_cell(u) {
            continue;
        }
        for &v in graph.neighbors(u) {
            if prev[v] != usize::MAX || blocked.is_some_and(|b| b[v] && v != to) {
                continue;
            }
            prev[v] = u;
            if v == to {
                let mut path = vec![to];
                let mut x = to;
                while x != from {
                    x = prev[x];
                    path.push(x);
                }
                path.reverse();
                return Ok(path);
            }
            queue.push_back(v);
        }
    }
    Err(RouteError::Unreachable { from, to })
}

/// Hop distances from `from` to every node, cells only as intermediates.
fn hop_distances(graph: &AoiGraph, from: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; graph.num_nodes()];
    dist[from] = 0;
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        if u != from && !graph.is_cell(u) {
            continue;
        }
        for &v in graph.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Incrementally assembles a revisit-allowed route.
struct Walker<'g> {
    g: &'g AoiGraph,
    visited: Vec<bool>,
    left: usize,
    nodes: Vec<usize>,
    revisits: usize,
}

impl<'g> Walker<'g> {
    fn new(g: &'g AoiGraph) -> Self {
        Self {
            g,
            visited: vec![false; g.num_cells()],
            left: g.num_cells(),
            nodes: vec![g.base()],
            revisits: 0,
        }
    }

    fn current(&self) -> usize {
        *self.nodes.last().unwrap()
    }

    fn push(&mut self, v: usize) {
        if v < self.visited.len() {
            if self.visited[v] {
                self.revisits += 1;
            } else {
                self.visited[v] = true;
                self.left -= 1;
            }
        }
        self.nodes.push(v);
    }

    /// Moves to `target` unless already covered.
    fn visit(&mut self, target: usize) {
        if self.visited[target] {
            return;
        }
        let path = shortest_path(self.g, self.current(), target, None)
            .expect("cell subgraph is connected and base-reachable");
        for &v in &path[1..] {
            self.push(v);
        }
    }

    fn finish(mut self) -> Route {
        if self.current() != self.g.terminal() {
            let path = shortest_path(self.g, self.current(), self.g.terminal(), None)
                .expect("terminal reachable from every cell");
            for &v in &path[1..] {
                self.push(v);
            }
        }
        debug_assert_eq!(self.left, 0);
        Route::from_nodes(self.g, self.nodes)
    }
}

fn route_from_waypoints(graph: &AoiGraph, order: &[usize]) -> Route {
    let mut w = Walker::new(graph);
    for &c in order {
        w.visit(c);
    }
    w.finish()
}

/// Greedy move to the unvisited neighbour with the fewest onward moves.
pub fn warnsdorff(graph: &AoiGraph) -> Route {
    let n = graph.num_cells();
    let mut visited = vec![false; n];
    let mut nodes = vec![graph.base()];
    let onward = |c: usize, visited: &[bool]| {
        graph.neighbors(c).iter().filter(|&&j| j < n && !visited[j]).count()
    };
    loop {
        let cur = *nodes.last().unwrap();
        let next = graph
            .neighbors(cur)
            .iter()
            .copied()
            .filter(|&j| j < n && !visited[j])
            .min_by_key(|&j| (onward(j, &visited), j));
        match next {
            Some(j) => {
                visited[j] = true;
                nodes.push(j);
            }
            None => break,
        }
    }
    let cur = *nodes.last().unwrap();
    if nodes.len() == n + 1 && graph.are_adjacent(cur, graph.terminal()) {
        nodes.push(graph.terminal());
    }
    Route::from_nodes(graph, nodes)
}

/// Depth-first coverage: fewest onward moves first, then a straight
/// continuation, then the lowest index. At a dead end it transits along a
/// shortest path to the nearest unvisited cell.
pub fn dfs_backtrack(graph: &AoiGraph) -> Route {
    let n = graph.num_cells();
    let mut w = Walker::new(graph);
    while w.left > 0 {
        let cur = w.current();
        let heading = (w.nodes.len() >= 2).then(|| {
            let prev = w.nodes[w.nodes.len() - 2];
            graph.position(cur).sub(graph.position(prev))
        });
        let pick = graph
            .neighbors(cur)
            .iter()
            .copied()
            .filter(|&j| j < n && !w.visited[j])
            .map(|j| {
                let straight = heading.is_none_or(|h| {
                    heading_change(h, graph.position(j).sub(graph.position(cur))) <= STRAIGHT_TOL
                });
                let onward = graph.neighbors(j).iter().filter(|&&k| k < n && !w.visited[k]).count();
                (onward, !straight, j)
            })
            .min();
        match pick {
            Some((_, _, j)) => w.push(j),
            None => {
                let dist = hop_distances(graph, cur);
                let target = (0..n)
                    .filter(|&c| !w.visited[c])
                    .min_by_key(|&c| (dist[c], c))
                    .expect("unvisited cell exists");
                w.visit(target);
            }
        }
    }
    w.finish()
}

/// Frame-aligned rows: cells grouped by axial r, each row sorted by q.
fn rows(graph: &AoiGraph) -> Vec<Vec<usize>> {
    let mut by_r: std::collections::BTreeMap<i32, Vec<usize>> = Default::default();
    for (i, a) in graph.cells().iter().enumerate() {
        by_r.entry(a.r).or_default().push(i);
    }
    by_r.into_values()
        .map(|mut row| {
            row.sort_by_key(|&i| graph.cells()[i].q);
            row
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowOrder {
    Sequential,
    /// 1, 1+⌈R/2⌉, 2, 2+⌈R/2⌉, …
    Interleaved,
}

fn row_sequence(count: usize, order: RowOrder) -> Vec<usize> {
    match order {
        RowOrder::Sequential => (0..count).collect(),
        RowOrder::Interleaved => {
            let half = count.div_ceil(2);
            let mut out = Vec::with_capacity(count);
            for i in 0..half {
                out.push(i);
                if i + half < count {
                    out.push(i + half);
                }
            }
            out
        }
    }
}

fn sweep_waypoints(rows: &[Vec<usize>], order: RowOrder, reverse_rows: bool, first_forward: bool, alternate: bool) -> Vec<usize> {
    let mut seq = row_sequence(rows.len(), order);
    if reverse_rows {
        seq.iter_mut().for_each(|i| *i = rows.len() - 1 - *i);
    }
    let mut out = Vec::new();
    for (k, &ri) in seq.iter().enumerate() {
        let forward = if alternate { first_forward == (k % 2 == 0) } else { first_forward };
        if forward {
            out.extend(rows[ri].iter().copied());
        } else {
            out.extend(rows[ri].iter().rev().copied());
        }
    }
    out
}

/// Row sweep starting on the lowest row, first row in increasing q.
fn row_sweep(graph: &AoiGraph, order: RowOrder, alternate: bool) -> Route {
    route_from_waypoints(graph, &sweep_waypoints(&rows(graph), order, false, true, alternate))
}

/// Empty lattice positions enclosed by cells (obstacle holes), found by
/// flooding the bounding box from outside.
fn enclosed_gaps(graph: &AoiGraph) -> std::collections::HashSet<(i32, i32)> {
    use std::collections::HashSet;
    let occupied: HashSet<(i32, i32)> = graph.cells().iter().map(|a| (a.q, a.r)).collect();
    let (mut q0, mut q1, mut r0, mut r1) = (i32::MAX, i32::MIN, i32::MAX, i32::MIN);
    for &(q, r) in &occupied {
        q0 = q0.min(q);
        q1 = q1.max(q);
        r0 = r0.min(r);
        r1 = r1.max(r);
    }
    let (q0, q1, r0, r1) = (q0 - 1, q1 + 1, r0 - 1, r1 + 1);
    let inside_box = |q: i32, r: i32| (q0..=q1).contains(&q) && (r0..=r1).contains(&r);
    let mut outside = HashSet::from([(q0, r0)]);
    let mut stack = vec![(q0, r0)];
    while let Some((q, r)) = stack.pop() {
        for (dq, dr) in HEX_DIRECTIONS {
            let p = (q + dq, r + dr);
            if inside_box(p.0, p.1) && !occupied.contains(&p) && outside.insert(p) {
                stack.push(p);
            }
        }
    }
    let mut gaps = HashSet::new();
    for q in q0..=q1 {
        for r in r0..=r1 {
            if !occupied.contains(&(q, r)) && !outside.contains(&(q, r)) {
                gaps.insert((q, r));
            }
        }
    }
    gaps
}

/// Monotone slab decomposition of the AOI outline. Row runs bridge obstacle
/// gaps; runs chain into a segment while consecutive rows connect one-to-one.
fn segments(graph: &AoiGraph) -> Vec<Vec<Vec<usize>>> {
    let gaps = enclosed_gaps(graph);
    let cells = graph.cells();
    let bridged = |a: usize, b: usize| {
        let (ca, cb) = (cells[a], cells[b]);
        ((ca.q + 1)..cb.q).all(|q| gaps.contains(&(q, ca.r)))
    };
    let mut runs_per_row: Vec<Vec<Vec<usize>>> = Vec::new();
    for row in rows(graph) {
        let mut runs: Vec<Vec<usize>> = Vec::new();
        for c in row {
            match runs.last_mut() {
                Some(run) if bridged(*run.last().unwrap(), c) => run.push(c),
                _ => runs.push(vec![c]),
            }
        }
        runs_per_row.push(runs);
    }
    let span = |run: &[usize]| (cells[run[0]].q, cells[*run.last().unwrap()].q);
    // Runs in rows r and r+1 touch when their lattice spans share an edge.
    let touches = |a: &[usize], b: &[usize]| {
        let (a0, a1) = span(a);
        let (b0, b1) = span(b);
        b0 <= a1 && a0 - 1 <= b1
    };
    let mut segs: Vec<Vec<Vec<usize>>> = Vec::new();
    // Segment index owning each run of the previous row.
    let mut prev_owner: Vec<usize> = Vec::new();
    let mut prev_runs: Vec<Vec<usize>> = Vec::new();
    for runs in runs_per_row {
        let mut owner = Vec::with_capacity(runs.len());
        for run in &runs {
            let ups: Vec<usize> = (0..prev_runs.len()).filter(|&k| touches(&prev_runs[k], run)).collect();
            let extend = ups.len() == 1 && runs.iter().filter(|other| touches(&prev_runs[ups[0]], other)).count() == 1;
            if extend {
                let s = prev_owner[ups[0]];
                segs[s].push(run.clone());
                owner.push(s);
            } else {
                segs.push(vec![run.clone()]);
                owner.push(segs.len() - 1);
            }
        }
        prev_owner = owner;
        prev_runs = runs;
    }
    segs
}

fn segment_sweep(graph: &AoiGraph, order: RowOrder) -> Route {
    let segs = segments(graph);
    let mut w = Walker::new(graph);
    let mut done = vec![false; segs.len()];
    for _ in 0..segs.len() {
        let dist = hop_distances(graph, w.current());
        let (s, _) = segs
            .iter()
            .enumerate()
            .filter(|(k, _)| !done[*k])
            .map(|(k, seg)| (k, seg.iter().flatten().map(|&c| dist[c]).min().unwrap()))
            .min_by_key(|&(k, d)| (d, k))
            .unwrap();
        done[s] = true;
        let variants: Vec<Vec<usize>> = [(false, true), (false, false), (true, true), (true, false)]
            .into_iter()
            .map(|(rev, fwd)| sweep_waypoints(&segs[s], order, rev, fwd, true))
            .collect();
        let way = variants
            .into_iter()
            .min_by_key(|v| dist[v[0]])
            .unwrap();
        for c in way {
            w.visit(c);
        }
    }
    w.finish()
}

/// Ring depth: hop distance from the base-adjacent outer ring.
fn ring_depth(graph: &AoiGraph) -> Vec<usize> {
    let d = hop_distances(graph, graph.base());
    (0..graph.num_cells()).map(|c| d[c] - 1).collect()
}

fn cells_centroid(graph: &AoiGraph) -> crate::geometry::Point {
    let n = graph.num_cells();
    let s = (0..n).fold(crate::geometry::Point::new(0.0, 0.0), |acc, c| acc.add(graph.position(c)));
    s.scale(1.0 / n as f64)
}

fn spiral(graph: &AoiGraph, inward: bool) -> Route {
    let depth = ring_depth(graph);
    let max_depth = depth.iter().copied().max().unwrap_or(0);
    let centre = cells_centroid(graph);
    let angle = |p: crate::geometry::Point| {
        let v = p.sub(centre);
        v.y.atan2(v.x).rem_euclid(std::f64::consts::TAU)
    };
    let mut w = Walker::new(graph);
    let levels: Vec<usize> = if inward { (0..=max_depth).collect() } else { (0..=max_depth).rev().collect() };
    for k in levels {
        let mut ring: Vec<usize> = (0..graph.num_cells()).filter(|&c| depth[c] == k).collect();
        ring.sort_by(|&a, &b| angle(graph.position(a)).total_cmp(&angle(graph.position(b))).then(a.cmp(&b)));
        let here = angle(graph.position(w.current()));
        let start = ring
            .iter()
            .enumerate()
            .min_by(|(_, &a), (_, &b)| {
                let da = (angle(graph.position(a)) - here).rem_euclid(std::f64::consts::TAU);
                let db = (angle(graph.position(b)) - here).rem_euclid(std::f64::consts::TAU);
                da.total_cmp(&db)
            })
            .map(|(i, _)| i)
            .unwrap();
        ring.rotate_left(start);
        for c in ring {
            w.visit(c);
        }
    }
    w.finish()
}

/// Repeatedly strips the outer layer of the uncovered region, walking each
/// layer nearest-first.
fn peel(graph: &AoiGraph) -> Route {
    let n = graph.num_cells();
    let index: std::collections::HashMap<(i32, i32), usize> =
        graph.cells().iter().enumerate().map(|(i, a)| ((a.q, a.r), i)).collect();
    let mut w = Walker::new(graph);
    while w.left > 0 {
        let layer: Vec<usize> = (0..n)
            .filter(|&c| !w.visited[c])
            .filter(|&c| {
                let a = graph.cells()[c];
                HEX_DIRECTIONS.iter().any(|&(dq, dr)| match index.get(&(a.q + dq, a.r + dr)) {
                    Some(&j) => w.visited[j] || !graph.are_adjacent(c, j),
                    None => true,
                })
            })
            .collect();
        let mut pending = layer;
        while !pending.is_empty() {
            pending.retain(|&c| !w.visited[c]);
            if pending.is_empty() {
                break;
            }
            let dist = hop_distances(graph, w.current());
            let &next = pending.iter().min_by_key(|&&c| (dist[c], c)).unwrap();
            w.visit(next);
        }
    }
    w.finish()
}

fn frame_xy(a: crate::aoi_graph::Axial) -> (f64, f64) {
    (3f64.sqrt() * (a.q as f64 + a.r as f64 / 2.0), 1.5 * a.r as f64)
}

fn interleave_bits(x: u32, y: u32) -> u64 {
    let spread = |v: u32| {
        let mut v = v as u64 & 0xFFFF_FFFF;
        v = (v | (v << 16)) & 0x0000_FFFF_0000_FFFF;
        v = (v | (v << 8)) & 0x00FF_00FF_00FF_00FF;
        v = (v | (v << 4)) & 0x0F0F_0F0F_0F0F_0F0F;
        v = (v | (v << 2)) & 0x3333_3333_3333_3333;
        (v | (v << 1)) & 0x5555_5555_5555_5555
    };
    spread(x) | (spread(y) << 1)
}

/// Z-order of frame centroids quantised to a 2¹⁶ grid.
fn morton(graph: &AoiGraph) -> Route {
    let xy: Vec<(f64, f64)> = graph.cells().iter().map(|&a| frame_xy(a)).collect();
    let (min_x, max_x) = xy.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let (min_y, max_y) = xy.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let q = |v: f64, lo: f64, hi: f64| {
        if hi > lo {
            (((v - lo) / (hi - lo)) * 65535.0).round() as u32
        } else {
            0
        }
    };
    let mut order: Vec<usize> = (0..xy.len()).collect();
    order.sort_by_key(|&i| (interleave_bits(q(xy[i].0, min_x, max_x), q(xy[i].1, min_y, max_y)), i));
    route_from_waypoints(graph, &order)
}

/// Spanning tree as child lists plus a base-adjacent root.
struct Tree {
    root: usize,
    children: Vec<Vec<usize>>,
}

fn stc_root(graph: &AoiGraph) -> usize {
    graph.neighbors(graph.base())[0]
}

/// Minimum spanning tree that prefers edges joining row-paired cells.
fn pair_mst(graph: &AoiGraph) -> Tree {
    let n = graph.num_cells();
    let cells = graph.cells();
    // Pair cells two by two along each row.
    let mut group = vec![0usize; n];
    let mut next = 0;
    for row in rows(graph) {
        let mut k = 0;
        while k < row.len() {
            group[row[k]] = next;
            if k + 1 < row.len() && graph.are_adjacent(row[k], row[k + 1]) {
                group[row[k + 1]] = next;
                k += 1;
            }
            next += 1;
            k += 1;
        }
    }
    let mut edges: Vec<(u8, usize, usize)> = Vec::new();
    for a in 0..n {
        for &b in graph.neighbors(a) {
            if b < n && a < b {
                let same_row = cells[a].r == cells[b].r;
                let w = if group[a] == group[b] { 0 } else if same_row { 2 } else { 1 };
                edges.push((w, a, b));
            }
        }
    }
    edges.sort_unstable();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut y = x;
        while p[y] != r {
            let nx = p[y];
            p[y] = r;
            y = nx;
        }
        r
    }
    let mut adj = vec![Vec::new(); n];
    for (_, a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    orient(adj, stc_root(graph))
}

fn bfs_tree(graph: &AoiGraph) -> Tree {
    let n = graph.num_cells();
    let root = stc_root(graph);
    let mut adj = vec![Vec::new(); n];
    let mut seen = vec![false; n];
    seen[root] = true;
    let mut queue = VecDeque::from([root]);
    while let Some(u) = queue.pop_front() {
        for &v in graph.neighbors(u) {
            if v < n && !seen[v] {
                seen[v] = true;
                adj[u].push(v);
                adj[v].push(u);
                queue.push_back(v);
            }
        }
    }
    orient(adj, root)
}

fn orient(mut adj: Vec<Vec<usize>>, root: usize) -> Tree {
    let n = adj.len();
    let mut children = vec![Vec::new(); n];
    let mut seen = vec![false; n];
    seen[root] = true;
    let mut stack = vec![root];
    while let Some(u) = stack.pop() {
        adj[u].sort_unstable();
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                children[u].push(v);
                stack.push(v);
            }
        }
    }
    Tree { root, children }
}

/// Circumnavigates the tree: parent first, each child subtree in turn, back
/// to the parent after every subtree, then out from the root.
fn stc(graph: &AoiGraph, tree: Tree) -> Route {
    let mut nodes = vec![graph.base(), tree.root];
    let mut stack: Vec<(usize, usize)> = vec![(tree.root, 0)];
    while let Some((u, k)) = stack.pop() {
        if k < tree.children[u].len() {
            let v = tree.children[u][k];
            stack.push((u, k + 1));
            stack.push((v, 0));
            nodes.push(v);
        } else if let Some(&(p, _)) = stack.last() {
            nodes.push(p);
        }
    }
    nodes.push(graph.terminal());
    Route::from_nodes(graph, nodes)
}

/// First Hamiltonian route found by the audit engine.
pub fn exact_dfs(graph: &AoiGraph, budget: u64) -> Result<Route, RouteError> {
    let rep = audit_hamiltonian(graph, budget);
    match rep.outcome {
        AuditOutcome::Hamiltonian(w) => {
            let mut nodes = Vec::with_capacity(w.len() + 2);
            nodes.push(graph.base());
            nodes.extend(w);
            nodes.push(graph.terminal());
            Ok(Route::from_nodes(graph, nodes))
        }
        AuditOutcome::NotHamiltonian => Err(RouteError::Invalid("graph admits no Hamiltonian route".into())),
        AuditOutcome::BudgetExhausted => Err(RouteError::Budget(rep.expansions)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aoi_graph::fixtures::*;
    use proptest::prelude::*;

    fn turns(graph: &AoiGraph, r: &Route) -> Vec<f64> {
        r.nodes
            .windows(3)
            .map(|w| {
                let a = graph.position(w[1]).sub(graph.position(w[0]));
                let b = graph.position(w[2]).sub(graph.position(w[1]));
                heading_change(a, b)
            })
            .collect()
    }

    #[test]
    fn boustrophedon_on_three_by_three_block() {
        let g = block(3, 3);
        let r = run(Method::SweepBoustrophedon, &g);
        validate_route(&g, &r).unwrap();
        assert!(r.hamiltonian);
        assert_eq!(r.nodes.len(), 11);
        // Interior cells: straight along a row, a pair of turns at each row change.
        let t: Vec<bool> = turns(&g, &r)[1..8].iter().map(|&x| x > 1e-9).collect();
        assert_eq!(t, [false, true, true, false, true, true, false]);
    }

    #[test]
    fn warnsdorff_on_one_ended_corridor() {
        let g = corridor_one_end(6);
        let r = warnsdorff(&g);
        assert!(!r.hamiltonian, "terminal sits at the entry end only");
        let g = corridor(6);
        let r = warnsdorff(&g);
        assert!(r.hamiltonian);
        assert_eq!(r.nodes, [6, 0, 1, 2, 3, 4, 5, 7]);
    }

    #[test]
    fn warnsdorff_failure_keeps_zero_revisits() {
        let g = corridor_one_end(4);
        let r = warnsdorff(&g);
        validate_route(&g, &r).unwrap();
        assert!(!r.complete);
        assert_eq!(r.revisits, 0);
    }

    #[test]
    fn shortest_path_examples() {
        let g = corridor(5);
        assert_eq!(shortest_path(&g, 0, 4, None).unwrap(), [0, 1, 2, 3, 4]);
        assert_eq!(shortest_path(&g, 2, 2, None).unwrap(), [2]);
        let mut blocked = vec![false; g.num_nodes()];
        blocked[2] = true;
        assert_eq!(
            shortest_path(&g, 0, 4, Some(&blocked)),
            Err(RouteError::Unreachable { from: 0, to: 4 })
        );
    }

    fn dijkstra_unit(g: &AoiGraph, s: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; g.num_nodes()];
        let mut done = vec![false; g.num_nodes()];
        dist[s] = 0;
        for _ in 0..g.num_nodes() {
            let u = (0..g.num_nodes()).filter(|&v| !done[v] && dist[v] < usize::MAX).min_by_key(|&v| dist[v]);
            let Some(u) = u else { break };
            done[u] = true;
            if u != s && !g.is_cell(u) {
                continue;
            }
            for &v in g.neighbors(u) {
                dist[v] = dist[v].min(dist[u] + 1);
            }
        }
        dist
    }

    #[test]
    fn shortest_path_matches_dijkstra() {
        let g = block(5, 6);
        for s in 0..g.num_cells() {
            let d = dijkstra_unit(&g, s);
            for t in 0..g.num_nodes() {
                let p = shortest_path(&g, s, t, None).unwrap();
                assert_eq!(p.len() - 1, d[t]);
                assert!(p.windows(2).all(|w| g.are_adjacent(w[0], w[1])));
            }
        }
    }

    #[test]
    fn interleave_order() {
        assert_eq!(row_sequence(12, RowOrder::Interleaved), [0, 6, 1, 7, 2, 8, 3, 9, 4, 10, 5, 11]);
        assert_eq!(row_sequence(5, RowOrder::Interleaved), [0, 3, 1, 4, 2]);
    }

    #[test]
    fn stc_variants_match_step_counts() {
        for g in [block(4, 5), block(6, 6), flower()] {
            let a = run(Method::StcTreeCoverage, &g);
            let b = run(Method::StcLike, &g);
            assert_eq!(a.steps(), b.steps());
            assert_eq!(a.steps(), 2 * g.num_cells());
            assert_eq!(a.revisits, g.num_cells() - 1);
        }
    }

    #[test]
    fn morton_bits() {
        assert_eq!(interleave_bits(0b11, 0b00), 0b0101);
        assert_eq!(interleave_bits(0b00, 0b11), 0b1010);
        assert_eq!(interleave_bits(0xFFFF, 0xFFFF), 0xFFFF_FFFF);
    }

    #[test]
    fn exact_dfs_examples() {
        let g = corridor(3);
        let r = exact_dfs(&g, 100).unwrap();
        assert!(r.nodes == [3, 0, 1, 2, 4] || r.nodes == [3, 2, 1, 0, 4]);
        let g = flower();
        let r = exact_dfs(&g, 10_000).unwrap();
        validate_route(&g, &r).unwrap();
        assert!(r.hamiltonian);
    }

    #[test]
    fn validator_catches_bad_counts() {
        let g = corridor(3);
        let mut r = run(Method::SweepBoustrophedon, &g);
        r.revisits += 1;
        assert!(validate_route(&g, &r).is_err());
        let bad = Route { nodes: vec![3, 2, 0, 4], revisits: 0, complete: false, hamiltonian: false };
        assert!(validate_route(&g, &bad).is_err());
    }

    #[test]
    fn all_methods_valid_and_deterministic_on_fixtures() {
        for g in [block(3, 3), block(5, 7), flower(), corridor(5)] {
            for m in Method::ALL {
                let r = run(m, &g);
                validate_route(&g, &r).unwrap_or_else(|e| panic!("{m}: {e}"));
                assert_eq!(r, run(m, &g));
                if m.allows_revisits() {
                    assert!(r.complete, "{m}");
                } else {
                    assert_eq!(r.revisits, 0);
                }
            }
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn routes_valid_on_random_blocks(rows in 2i32..7, cols in 2i32..8) {
            let g = block(rows, cols);
            for m in Method::ALL {
                let r = run(m, &g);
                prop_assert!(validate_route(&g, &r).is_ok());
                prop_assert!(!r.hamiltonian || r.revisits == 0);
            }
        }
    }
}
