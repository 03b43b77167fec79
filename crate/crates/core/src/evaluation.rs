//! Route metrics, common-solved-subset aggregation, latency medians and SVG
//! renderings.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aoi_graph::AoiGraph;
use crate::environment::heading_change;
use crate::geometry::{AoiPolygon, Point};
use crate::heuristics::{validate_route, Route, RouteError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error("reference method '{0}' has no rows")]
    MissingReference(String),
    #[error("method '{method}' covers a different instance set than '{other}'")]
    Mismatch { method: String, other: String },
    #[error("duplicate row for method '{method}' on instance '{instance}'")]
    Duplicate { method: String, instance: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One scored route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub instance_id: String,
    pub hamiltonian: bool,
    pub complete: bool,
    pub revisits: usize,
    /// Path length in units of the cell spacing.
    pub distance_norm: f64,
    /// Path length in units of cell spacing times |V|.
    pub distance_per_cell: f64,
    pub turns: usize,
    pub steps: usize,
    pub wall_ms: Option<f64>,
}

/// Non-zero heading changes at interior junctions of a node sequence.
pub fn count_turns(graph: &AoiGraph, nodes: &[usize]) -> usize {
    let mut turns = 0;
    let mut prev: Option<Point> = None;
    for w in nodes.windows(2) {
        let mv = graph.position(w[1]).sub(graph.position(w[0]));
        if mv.norm() == 0.0 {
            continue;
        }
        if let Some(p) = prev {
            if heading_change(p, mv) > 0.0 {
                turns += 1;
            }
        }
        prev = Some(mv);
    }
    turns
}

pub fn path_length(graph: &AoiGraph, nodes: &[usize]) -> f64 {
    nodes.windows(2).map(|w| graph.travel_cost(w[0], w[1])).sum()
}

pub fn score_route(
    method: &str,
    instance_id: &str,
    graph: &AoiGraph,
    route: &Route,
    wall_ms: Option<f64>,
) -> Result<MetricsRow, RouteError> {
    validate_route(graph, route)?;
    let len = path_length(graph, &route.nodes) / graph.cell_spacing();
    Ok(MetricsRow {
        method: method.to_string(),
        instance_id: instance_id.to_string(),
        hamiltonian: route.hamiltonian,
        complete: route.complete,
        revisits: route.revisits,
        distance_norm: len,
        distance_per_cell: len / graph.num_cells() as f64,
        turns: count_turns(graph, &route.nodes),
        steps: route.steps(),
        wall_ms,
    })
}

/// Mean and population standard deviation; `None` when empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Stat> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        Some(Stat { mean, std })
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub instances: usize,
    pub hsr: f64,
    pub ccr: f64,
    pub revisits: Stat,
    pub steps: f64,
    /// Size of the common solved subset with the reference.
    pub common: usize,
    pub distance_norm: Option<Stat>,
    pub distance_per_cell: Option<Stat>,
    pub turns: Option<Stat>,
    pub median_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub reference: String,
    pub methods: Vec<MethodSummary>,
}

/// Per-method aggregates. Coverage rates use every instance; distance and
/// turns use only instances that both the method and the reference cover.
pub fn aggregate(rows: &[MetricsRow], reference: &str) -> Result<EvalReport, EvalError> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_method: HashMap<&str, Vec<&MetricsRow>> = HashMap::new();
    for r in rows {
        let e = by_method.entry(&r.method).or_insert_with(|| {
            order.push(&r.method);
            Vec::new()
        });
        e.push(r);
    }
    let ref_rows = by_method.get(reference).ok_or_else(|| EvalError::MissingReference(reference.to_string()))?;
    let ids = |rs: &[&MetricsRow]| -> Result<BTreeSet<String>, EvalError> {
        let mut s = BTreeSet::new();
        for r in rs {
            if !s.insert(r.instance_id.clone()) {
                return Err(EvalError::Duplicate { method: r.method.clone(), instance: r.instance_id.clone() });
            }
        }
        Ok(s)
    };
    let ref_ids = ids(ref_rows)?;
    let ref_solved: BTreeSet<&str> = ref_rows.iter().filter(|r| r.complete).map(|r| r.instance_id.as_str()).collect();
    let mut methods = Vec::new();
    for m in order {
        let rs = &by_method[m];
        if ids(rs)? != ref_ids {
            return Err(EvalError::Mismatch { method: m.to_string(), other: reference.to_string() });
        }
        let n = rs.len() as f64;
        let common: Vec<&&MetricsRow> = rs.iter().filter(|r| r.complete && ref_solved.contains(r.instance_id.as_str())).collect();
        let walls: Vec<f64> = rs.iter().filter_map(|r| r.wall_ms).collect();
        methods.push(MethodSummary {
            method: m.to_string(),
            instances: rs.len(),
            hsr: rs.iter().filter(|r| r.hamiltonian).count() as f64 / n,
            ccr: rs.iter().filter(|r| r.complete).count() as f64 / n,
            revisits: Stat::of(rs.iter().map(|r| r.revisits as f64)).expect("non-empty"),
            steps: rs.iter().map(|r| r.steps as f64).sum::<f64>() / n,
            common: common.len(),
            distance_norm: Stat::of(common.iter().map(|r| r.distance_norm)),
            distance_per_cell: Stat::of(common.iter().map(|r| r.distance_per_cell)),
            turns: Stat::of(common.iter().map(|r| r.turns as f64)),
            median_ms: median(&walls),
        });
    }
    Ok(EvalReport { reference: reference.to_string(), methods })
}

fn fmt_stat(s: Option<Stat>, prec: usize) -> String {
    match s {
        Some(s) => format!("{:.p$} ± {:.p$}", s.mean, s.std, p = prec),
        None => "-".into(),
    }
}

/// Fixed-width text table: coverage, path quality on the common subset,
/// and latency.
pub fn format_report(report: &EvalReport) -> String {
    let mut out = String::new();
    writeln!(out, "reference: {}", report.reference).unwrap();
    writeln!(
        out,
        "{:<28} {:>5} {:>7} {:>7} {:>15} {:>8} {:>17} {:>17} {:>15} {:>7} {:>10}",
        "method", "n", "HSR%", "CCR%", "revisits", "n_common", "dist/spacing", "dist/(spacing·V)", "turns", "steps", "median_ms"
    )
    .unwrap();
    for m in &report.methods {
        writeln!(
            out,
            "{:<28} {:>5} {:>7.1} {:>7.1} {:>15} {:>8} {:>17} {:>17} {:>15} {:>7.1} {:>10}",
            m.method,
            m.instances,
            100.0 * m.hsr,
            100.0 * m.ccr,
            fmt_stat(Some(m.revisits), 1),
            m.common,
            fmt_stat(m.distance_norm, 2),
            fmt_stat(m.distance_per_cell, 3),
            fmt_stat(m.turns, 1),
            m.steps,
            m.median_ms.map_or("-".into(), |v| format!("{v:.3}")),
        )
        .unwrap();
    }
    out
}

pub fn write_rows<W: std::io::Write>(w: W, rows: &[MetricsRow]) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_rows<R: std::io::Read>(r: R) -> Result<Vec<MetricsRow>, EvalError> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<Result<Vec<MetricsRow>, _>>()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Latency {
    pub median_ms: f64,
    pub samples_ms: Vec<f64>,
}

/// Batch-1 wall time per instance after one warm-up call; the median is
/// taken over the corpus.
pub fn measure_latency<T, R>(items: &[T], mut solver: impl FnMut(&T) -> R) -> Latency {
    if let Some(first) = items.first() {
        std::hint::black_box(solver(first));
    }
    let samples_ms: Vec<f64> = items
        .iter()
        .map(|it| {
            let t = Instant::now();
            std::hint::black_box(solver(it));
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    Latency { median_ms: median(&samples_ms).unwrap_or(0.0), samples_ms }
}

const COLOURS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const PX_PER_SPACING: f64 = 40.0;

/// Draws hex cells, obstacles, the base and each route as a polyline.
pub fn render_paths(graph: &AoiGraph, polygon: Option<&AoiPolygon>, routes: &[(&str, &Route)]) -> String {
    let n = graph.num_cells();
    let r_hex = graph.cell_spacing() / 3f64.sqrt();
    let s = PX_PER_SPACING / graph.cell_spacing();
    let edge_angle = graph
        .edges()
        .into_iter()
        .find(|&(i, j)| i < n && j < n)
        .map_or(0.0, |(i, j)| {
            let d = graph.position(j).sub(graph.position(i));
            d.y.atan2(d.x)
        });
    let corners = |c: Point| -> Vec<Point> {
        (0..6)
            .map(|k| {
                let a = edge_angle + std::f64::consts::FRAC_PI_6 + k as f64 * std::f64::consts::FRAC_PI_3;
                Point::new(c.x + r_hex * a.cos(), c.y + r_hex * a.sin())
            })
            .collect()
    };
    let mut pts: Vec<Point> = (0..n).flat_map(|i| corners(graph.position(i))).collect();
    pts.push(graph.position(graph.base()));
    if let Some(p) = polygon {
        pts.extend(p.outer.iter().copied());
    }
    let xmin = pts.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let xmax = pts.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let ymin = pts.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let ymax = pts.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let margin = 20.0;
    let w = (xmax - xmin) * s + 2.0 * margin;
    let h = (ymax - ymin) * s + 2.0 * margin;
    let px = |p: Point| ((p.x - xmin) * s + margin, (ymax - p.y) * s + margin);
    let fmt_pts = |ps: &[Point]| {
        ps.iter()
            .map(|&p| {
                let (x, y) = px(p);
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.2} {h:.2}">"#
    )
    .unwrap();
    writeln!(out, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##).unwrap();
    if let Some(p) = polygon {
        writeln!(out, r##"<polygon class="aoi" points="{}" fill="none" stroke="#555555" stroke-width="1"/>"##, fmt_pts(&p.outer)).unwrap();
    }
    for i in 0..n {
        writeln!(out, r##"<polygon class="cell" points="{}" fill="#e8f0fa" stroke="#8aa4c0" stroke-width="1"/>"##, fmt_pts(&corners(graph.position(i)))).unwrap();
    }
    if let Some(p) = polygon {
        for hole in &p.holes {
            writeln!(out, r##"<polygon class="obstacle" points="{}" fill="#404040" stroke="none"/>"##, fmt_pts(hole)).unwrap();
        }
    }
    for (k, (name, route)) in routes.iter().enumerate() {
        let c = COLOURS[k % COLOURS.len()];
        let ps: Vec<Point> = route.nodes.iter().map(|&v| graph.position(v)).collect();
        writeln!(out, r#"<polyline class="route" data-method="{name}" points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, fmt_pts(&ps)).unwrap();
        writeln!(out, r#"<text x="{margin:.0}" y="{:.0}" font-family="sans-serif" font-size="12" fill="{c}">{name}</text>"#, margin + 14.0 * (k as f64 + 0.5)).unwrap();
    }
    let (bx, by) = px(graph.position(graph.base()));
    writeln!(out, r##"<circle class="base" cx="{bx:.2}" cy="{by:.2}" r="6" fill="#b00000"/>"##).unwrap();
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aoi_graph::fixtures::*;
    use crate::aoi_graph::Axial;
    use crate::heuristics::{run, Method};

    /// Four cells in a row with base and terminal on the same line.
    fn straight_corridor() -> AoiGraph {
        let sp = 10.0;
        let mut positions: Vec<Point> = (0..4).map(|i| Point::new(sp * i as f64, 0.0)).collect();
        positions.push(Point::new(-sp, 0.0));
        positions.push(Point::new(-sp, 0.0));
        let mut adj = vec![Vec::new(); 6];
        for i in 0..3 {
            adj[i].push(i + 1);
            adj[i + 1].push(i);
        }
        for b in [4, 5] {
            adj[0].push(b);
            adj[b].push(0);
            adj[3].push(b);
            adj[b].push(3);
        }
        let cells = (0..4).map(|q| Axial { q, r: 0 }).collect();
        AoiGraph::from_parts(cells, positions, adj, vec![0.0; 4], sp).unwrap()
    }

    #[test]
    fn straight_route_has_no_turns() {
        let g = straight_corridor();
        let r = Route::from_nodes(&g, vec![4, 0, 1, 2, 3]);
        let row = score_route("x", "c", &g, &r, None).unwrap();
        assert_eq!((row.turns, row.revisits, row.steps), (0, 0, 4));
        let full = Route::from_nodes(&g, vec![4, 0, 1, 2, 3, 5]);
        let row = score_route("x", "c", &g, &full, None).unwrap();
        assert_eq!(row.steps, 5);
        assert!(row.hamiltonian && row.complete);
        // Only the final leg back to the terminal reverses direction.
        assert_eq!(row.turns, 1);
        assert!((row.distance_norm - 8.0).abs() < 1e-12);
        assert!((row.distance_per_cell - 2.0).abs() < 1e-12);
    }

    #[test]
    fn one_revisit_is_counted() {
        let g = flower();
        let r = Route::from_nodes(&g, vec![7, 2, 1, 6, 5, 4, 3, 0, 3, 8]);
        let row = score_route("x", "f", &g, &r, None).unwrap();
        assert_eq!(row.revisits, 1);
        assert!(row.complete && !row.hamiltonian);
        assert_eq!(row.steps, 9);
    }

    #[test]
    fn single_bend_counts_one_turn() {
        let g = flower();
        // Entering the centre from petal 2, then leaving opposite or sideways.
        let straight = count_turns(&g, &[2, 0, 5]);
        let bend = count_turns(&g, &[2, 0, 1]);
        assert_eq!(straight, 0);
        assert_eq!(bend, 1);
    }

    #[test]
    fn boustrophedon_turns_match_hand_count() {
        let g = block(3, 3);
        let r = run(Method::SweepBoustrophedon, &g);
        // Two bends per row change, plus the bends onto and off the long
        // legs to the base.
        let row = score_route("b", "blk", &g, &r, None).unwrap();
        assert_eq!(row.turns, 2 * 2 + 2);
    }

    #[test]
    fn invalid_routes_are_rejected() {
        let g = corridor(3);
        let mut r = Route::from_nodes(&g, vec![3, 0, 2, 4]);
        r.complete = true;
        assert!(score_route("x", "c", &g, &r, None).is_err());
    }

    fn row(m: &str, id: &str, ham: bool, complete: bool, dist: f64, turns: usize) -> MetricsRow {
        MetricsRow {
            method: m.into(),
            instance_id: id.into(),
            hamiltonian: ham,
            complete,
            revisits: usize::from(complete && !ham),
            distance_norm: dist,
            distance_per_cell: dist / 10.0,
            turns,
            steps: 10,
            wall_ms: Some(1.0),
        }
    }

    #[test]
    fn common_subset_is_the_intersection() {
        let mut rows = Vec::new();
        for i in 0..4 {
            rows.push(row("ref", &format!("i{i}"), true, true, 10.0, 5));
            rows.push(row("half", &format!("i{i}"), false, i % 2 == 0, 12.0, 7));
        }
        let rep = aggregate(&rows, "ref").unwrap();
        assert_eq!(rep.methods[0].common, 4);
        assert_eq!(rep.methods[1].common, 2);
        assert_eq!(rep.methods[1].ccr, 0.5);
        assert_eq!(rep.methods[1].hsr, 0.0);
        let selfjoin = aggregate(&rows, "half").unwrap();
        assert_eq!(selfjoin.methods[1].common, 2);
    }

    #[test]
    fn dominating_method_ranks_first_on_the_subset() {
        let mut rows = Vec::new();
        for i in 0..6 {
            let id = format!("i{i}");
            rows.push(row("ref", &id, true, true, 10.0, 8));
            rows.push(row("a", &id, true, i < 5, 9.0 + i as f64 * 0.1, 3));
            rows.push(row("b", &id, false, true, 11.0, 6));
        }
        // An outlier only method "a" fails on must not enter its averages.
        rows[15].distance_norm = 1e6;
        let rep = aggregate(&rows, "ref").unwrap();
        let get = |m: &str| rep.methods.iter().find(|s| s.method == m).unwrap().clone();
        let (a, b) = (get("a"), get("b"));
        assert_eq!(a.common, 5);
        assert!(a.distance_norm.unwrap().mean < b.distance_norm.unwrap().mean);
        assert!(a.turns.unwrap().mean < b.turns.unwrap().mean);
        assert!((a.distance_norm.unwrap().mean - 9.2).abs() < 1e-12);
    }

    #[test]
    fn mismatched_instance_sets_are_rejected() {
        let rows = vec![row("ref", "a", true, true, 1.0, 1), row("x", "b", true, true, 1.0, 1)];
        assert!(matches!(aggregate(&rows, "ref"), Err(EvalError::Mismatch { .. })));
        assert!(matches!(aggregate(&rows, "zzz"), Err(EvalError::MissingReference(_))));
    }

    #[test]
    fn csv_round_trips() {
        let rows = vec![row("ref", "a", true, true, 1.25, 1), MetricsRow { wall_ms: None, ..row("x", "a", false, false, 0.1, 0) }];
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("method,instance_id,hamiltonian,complete,revisits,distance_norm,distance_per_cell,turns,steps,wall_ms\n"));
        assert_eq!(read_rows(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn noop_solver_latency_is_tiny() {
        let items: Vec<u32> = (0..200).collect();
        let lat = measure_latency(&items, |&x| x);
        assert!(lat.median_ms >= 0.0 && lat.median_ms < 1.0);
        assert_eq!(lat.samples_ms.len(), 200);
    }

    #[test]
    fn render_is_deterministic_and_draws_every_segment() {
        let g = flower();
        let empty = render_paths(&g, None, &[]);
        assert_eq!(empty.matches("class=\"cell\"").count(), 7);
        assert!(!empty.contains("polyline"));
        let r = crate::heuristics::exact_dfs(&g, 100_000).unwrap();
        let svg = render_paths(&g, None, &[("exact_dfs", &r)]);
        assert_eq!(svg, render_paths(&g, None, &[("exact_dfs", &r)]));
        let line = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        let pts = line.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split(' ').count() - 1, g.num_cells() + 1);
    }

    #[test]
    fn render_matches_golden() {
        let g = flower();
        let r = crate::heuristics::exact_dfs(&g, 100_000).unwrap();
        let svg = render_paths(&g, None, &[("exact_dfs", &r)]);
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/flower.svg");
        if std::env::var_os("UPDATE_GOLDEN").is_some() {
            std::fs::write(path, &svg).unwrap();
        }
        assert_eq!(svg, std::fs::read_to_string(path).unwrap());
    }
}
