//! Polygon sampling, oriented bounding boxes and hexagonal tessellation.
//!
//! All lengths are nautical miles. Hexagons are laid out pointy-top in the
//! OBB frame so that rows of constant axial `r` run along the OBB major axis.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    Degenerate(usize),
    #[error("polygon sampling budget exhausted after {0} attempts")]
    SamplingBudget(usize),
    #[error("invalid polygon: {0}")]
    Invalid(String),
    #[error("invalid sensor spec: {0}")]
    Sensor(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Point) -> f64 {
        self.sub(o).norm()
    }

    /// Rotate counter-clockwise by `angle` radians about the origin.
    pub fn rotate(self, angle: f64) -> Point {
        let (s, c) = angle.sin_cos();
        Point::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    CompactConvex,
    ElongatedConcave,
    NarrowPassage,
}

impl Family {
    pub const ALL: [Family; 3] = [
        Family::CompactConvex,
        Family::ElongatedConcave,
        Family::NarrowPassage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::CompactConvex => "compact-convex",
            Family::ElongatedConcave => "elongated-concave",
            Family::NarrowPassage => "narrow-passage",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| GeometryError::Invalid(format!("unknown family {s:?}")))
    }
}

/// Area of interest: an outer ring (counter-clockwise) minus holes (clockwise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AoiPolygon {
    pub outer: Vec<Point>,
    pub holes: Vec<Vec<Point>>,
    pub family: Family,
}

impl AoiPolygon {
    pub fn new(outer: Vec<Point>, family: Family) -> Self {
        let outer = if signed_area(&outer) < 0.0 {
            outer.into_iter().rev().collect()
        } else {
            outer
        };
        Self {
            outer,
            holes: Vec::new(),
            family,
        }
    }

    /// Adds a hole, reorienting it clockwise.
    pub fn add_hole(&mut self, hole: Vec<Point>) {
        let hole = if signed_area(&hole) > 0.0 {
            hole.into_iter().rev().collect()
        } else {
            hole
        };
        self.holes.push(hole);
    }

    /// Area of the outer ring minus the holes.
    pub fn area(&self) -> f64 {
        signed_area(&self.outer).abs() - self.holes.iter().map(|h| signed_area(h).abs()).sum::<f64>()
    }

    /// True if `p` lies strictly inside the feasible region (inside outer,
    /// outside every hole, not on any boundary).
    pub fn contains(&self, p: Point) -> bool {
        point_in_ring(p, &self.outer) == Containment::Inside
            && self
                .holes
                .iter()
                .all(|h| point_in_ring(p, h) == Containment::Outside)
    }

    /// True if the segment touches the closed interior of any hole.
    pub fn segment_hits_hole(&self, a: Point, b: Point) -> bool {
        self.holes.iter().any(|h| segment_hits_ring(a, b, h))
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.outer.len() < 3 {
            return Err(GeometryError::Degenerate(self.outer.len()));
        }
        if !is_simple(&self.outer) {
            return Err(GeometryError::Invalid("outer ring self-intersects".into()));
        }
        for (i, h) in self.holes.iter().enumerate() {
            if h.len() < 3 {
                return Err(GeometryError::Degenerate(h.len()));
            }
            if h.iter().any(|&p| point_in_ring(p, &self.outer) == Containment::Outside) {
                return Err(GeometryError::Invalid(format!("hole {i} leaves the outer ring")));
            }
            for g in &self.holes[..i] {
                if rings_overlap(h, g) {
                    return Err(GeometryError::Invalid(format!("hole {i} overlaps another hole")));
                }
            }
        }
        Ok(())
    }

    /// Applies `f` to every vertex.
    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> AoiPolygon {
        AoiPolygon {
            outer: self.outer.iter().map(|&p| f(p)).collect(),
            holes: self
                .holes
                .iter()
                .map(|h| h.iter().map(|&p| f(p)).collect())
                .collect(),
            family: self.family,
        }
    }

    pub fn centroid(&self) -> Point {
        ring_centroid(&self.outer)
    }
}

pub fn signed_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    (0..n)
        .map(|i| ring[i].cross(ring[(i + 1) % n]))
        .sum::<f64>()
        * 0.5
}

fn ring_centroid(ring: &[Point]) -> Point {
    let n = ring.len();
    let a = signed_area(ring);
    if a.abs() < 1e-300 {
        let s = ring.iter().fold(Point::default(), |acc, &p| acc.add(p));
        return s.scale(1.0 / n as f64);
    }
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..n {
        let (p, q) = (ring[i], ring[(i + 1) % n]);
        let c = p.cross(q);
        cx += (p.x + q.x) * c;
        cy += (p.y + q.y) * c;
    }
    Point::new(cx / (6.0 * a), cy / (6.0 * a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Containment {
    Inside,
    Boundary,
    Outside,
}

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    let ab = b.sub(a);
    let ap = p.sub(a);
    let len2 = ab.dot(ab);
    let tol = 1e-12 * (1.0 + len2.sqrt());
    if ab.cross(ap).abs() > tol * len2.sqrt().max(1.0) {
        return false;
    }
    let t = ap.dot(ab);
    t >= -tol && t <= len2 + tol
}

/// Even-odd point location with an explicit boundary check.
pub fn point_in_ring(p: Point, ring: &[Point]) -> Containment {
    let n = ring.len();
    let mut inside = false;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        if on_segment(p, a, b) {
            return Containment::Boundary;
        }
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    if inside {
        Containment::Inside
    } else {
        Containment::Outside
    }
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    b.sub(a).cross(c.sub(a))
}

/// Closed segment intersection (touching counts).
pub fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    on_segment(p1, q1, q2) || on_segment(p2, q1, q2) || on_segment(q1, p1, p2) || on_segment(q2, p1, p2)
}

fn segment_hits_ring(a: Point, b: Point, ring: &[Point]) -> bool {
    let n = ring.len();
    if point_in_ring(a, ring) != Containment::Outside || point_in_ring(b, ring) != Containment::Outside {
        return true;
    }
    (0..n).any(|i| segments_intersect(a, b, ring[i], ring[(i + 1) % n]))
}

fn rings_overlap(a: &[Point], b: &[Point]) -> bool {
    let n = a.len();
    if (0..n).any(|i| {
        let m = b.len();
        (0..m).any(|j| segments_intersect(a[i], a[(i + 1) % n], b[j], b[(j + 1) % m]))
    }) {
        return true;
    }
    point_in_ring(a[0], b) != Containment::Outside || point_in_ring(b[0], a) != Containment::Outside
}

/// True when no two non-adjacent edges of the ring intersect.
pub fn is_simple(ring: &[Point]) -> bool {
    let n = ring.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        for j in (i + 1)..n {
            if j == i || (j + 1) % n == i || (i + 1) % n == j {
                continue;
            }
            if segments_intersect(a, b, ring[j], ring[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

/// Andrew's monotone chain; returns a counter-clockwise hull without
/// collinear points.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Point> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && orient(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && orient(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Oriented rectangle. `angle` is the direction of the first (major) axis,
/// in `[0, π)`; `half_extents.0 >= half_extents.1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obb {
    pub center: Point,
    pub angle: f64,
    pub half_extents: (f64, f64),
}

impl Obb {
    pub fn area(&self) -> f64 {
        4.0 * self.half_extents.0 * self.half_extents.1
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.half_extents.0 / self.half_extents.1
    }

    /// World point to OBB-frame coordinates.
    pub fn to_frame(&self, p: Point) -> Point {
        p.sub(self.center).rotate(-self.angle)
    }

    pub fn from_frame(&self, p: Point) -> Point {
        p.rotate(self.angle).add(self.center)
    }
}

fn normalize_angle(a: f64) -> f64 {
    let mut a = a.rem_euclid(PI);
    if a >= PI - 1e-12 {
        a = 0.0;
    }
    a
}

fn rect_for_direction(hull: &[Point], theta: f64) -> Obb {
    let u = Point::new(theta.cos(), theta.sin());
    let v = Point::new(-u.y, u.x);
    let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &p in hull {
        let (a, b) = (p.dot(u), p.dot(v));
        umin = umin.min(a);
        umax = umax.max(a);
        vmin = vmin.min(b);
        vmax = vmax.max(b);
    }
    let cu = 0.5 * (umin + umax);
    let cv = 0.5 * (vmin + vmax);
    let center = u.scale(cu).add(v.scale(cv));
    let (hu, hv) = (0.5 * (umax - umin), 0.5 * (vmax - vmin));
    if hu >= hv {
        Obb {
            center,
            angle: normalize_angle(theta),
            half_extents: (hu, hv),
        }
    } else {
        Obb {
            center,
            angle: normalize_angle(theta + PI / 2.0),
            half_extents: (hv, hu),
        }
    }
}

/// Minimum-area enclosing rectangle of the outer ring via rotating calipers
/// over the convex hull edges. Ties go to the smaller axis angle.
pub fn compute_obb(poly: &AoiPolygon) -> Result<Obb, GeometryError> {
    obb_of_points(&poly.outer)
}

pub fn obb_of_points(points: &[Point]) -> Result<Obb, GeometryError> {
    if points.len() < 3 {
        return Err(GeometryError::Degenerate(points.len()));
    }
    let hull = convex_hull(points);
    if hull.len() < 3 {
        return Err(GeometryError::Degenerate(hull.len()));
    }
    let mut best: Option<Obb> = None;
    for i in 0..hull.len() {
        let e = hull[(i + 1) % hull.len()].sub(hull[i]);
        let cand = rect_for_direction(&hull, e.y.atan2(e.x));
        best = Some(match best {
            None => cand,
            Some(b) => {
                let tol = 1e-9 * b.area().max(1e-300);
                if cand.area() < b.area() - tol
                    || ((cand.area() - b.area()).abs() <= tol && cand.angle < b.angle)
                {
                    cand
                } else {
                    b
                }
            }
        });
    }
    Ok(best.expect("hull has edges"))
}

/// Sensor footprint and the hexagon size it dictates (`rh == rs`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    footprint_radius: f64,
    cell_circumradius: f64,
}

impl SensorSpec {
    pub fn new(footprint_radius: f64) -> Result<Self, GeometryError> {
        if !(footprint_radius.is_finite() && footprint_radius > 0.0) {
            return Err(GeometryError::Sensor(format!(
                "footprint radius must be positive, got {footprint_radius}"
            )));
        }
        Ok(Self {
            footprint_radius,
            cell_circumradius: footprint_radius,
        })
    }

    pub fn footprint_radius(&self) -> f64 {
        self.footprint_radius
    }

    pub fn cell_circumradius(&self) -> f64 {
        self.cell_circumradius
    }

    /// Centre-to-centre distance of edge-sharing cells.
    pub fn cell_spacing(&self) -> f64 {
        SQRT3 * self.cell_circumradius
    }

    pub fn cell_area(&self) -> f64 {
        1.5 * SQRT3 * self.cell_circumradius * self.cell_circumradius
    }
}

/// Axial neighbour offsets, counter-clockwise starting east.
pub const HEX_DIRECTIONS: [(i32, i32); 6] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];

pub fn hex_distance(a: (i32, i32), b: (i32, i32)) -> i32 {
    let dq = a.0 - b.0;
    let dr = a.1 - b.1;
    (dq.abs() + dr.abs() + (dq + dr).abs()) / 2
}

/// Pointy-top hex lattice anchored at the OBB centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HexFrame {
    pub obb: Obb,
    pub circumradius: f64,
}

impl HexFrame {
    /// Centre of hexagon `(q, r)` in frame coordinates.
    pub fn frame_center(&self, q: i32, r: i32) -> Point {
        let rh = self.circumradius;
        Point::new(rh * SQRT3 * (q as f64 + 0.5 * r as f64), rh * 1.5 * r as f64)
    }

    pub fn center(&self, q: i32, r: i32) -> Point {
        self.obb.from_frame(self.frame_center(q, r))
    }

    pub fn frame_corners(&self, q: i32, r: i32) -> [Point; 6] {
        let c = self.frame_center(q, r);
        let mut out = [Point::default(); 6];
        for (k, o) in out.iter_mut().enumerate() {
            let a = PI / 6.0 + PI / 3.0 * k as f64;
            *o = c.add(Point::new(a.cos(), a.sin()).scale(self.circumradius));
        }
        out
    }

    /// Hexagon corners in world coordinates, counter-clockwise.
    pub fn corners(&self, q: i32, r: i32) -> [Point; 6] {
        self.frame_corners(q, r).map(|p| self.obb.from_frame(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HexCell {
    pub q: i32,
    pub r: i32,
    pub centroid: Point,
    pub visitable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tessellation {
    pub frame: HexFrame,
    pub spec: SensorSpec,
    pub cells: Vec<HexCell>,
}

impl Tessellation {
    pub fn visitable(&self) -> impl Iterator<Item = &HexCell> {
        self.cells.iter().filter(|c| c.visitable)
    }

    pub fn visitable_count(&self) -> usize {
        self.visitable().count()
    }
}

fn hex_overlaps_rect(corners: &[Point; 6], hx: f64, hy: f64) -> bool {
    // Separating axis test; touching does not count as overlap.
    let axes = [
        Point::new(1.0, 0.0),
        Point::new(0.0, 1.0),
        Point::new((PI / 3.0).cos(), (PI / 3.0).sin()),
        Point::new((2.0 * PI / 3.0).cos(), (2.0 * PI / 3.0).sin()),
    ];
    let rect = [
        Point::new(-hx, -hy),
        Point::new(hx, -hy),
        Point::new(hx, hy),
        Point::new(-hx, hy),
    ];
    let eps = 1e-12 * (hx + hy).max(1.0);
    axes.iter().all(|&ax| {
        let (mut a0, mut a1) = (f64::MAX, f64::MIN);
        for p in corners {
            let d = p.dot(ax);
            a0 = a0.min(d);
            a1 = a1.max(d);
        }
        let (mut b0, mut b1) = (f64::MAX, f64::MIN);
        for p in &rect {
            let d = p.dot(ax);
            b0 = b0.min(d);
            b1 = b1.max(d);
        }
        a1 > b0 + eps && b1 > a0 + eps
    })
}

/// Tessellates the polygon's OBB with hexagons of circumradius `rh` and
/// marks cells whose centroid lies strictly inside the feasible region.
pub fn tessellate(poly: &AoiPolygon, spec: &SensorSpec) -> Result<Tessellation, GeometryError> {
    let obb = compute_obb(poly)?;
    let frame = HexFrame {
        obb,
        circumradius: spec.cell_circumradius(),
    };
    let rh = spec.cell_circumradius();
    let (hx, hy) = obb.half_extents;
    let r_lim = ((hy + rh) / (1.5 * rh)).ceil() as i32 + 1;
    let mut cells = Vec::new();
    for r in -r_lim..=r_lim {
        let w = SQRT3 * rh;
        let q_lo = ((-hx - w) / w - 0.5 * r as f64).floor() as i32 - 1;
        let q_hi = ((hx + w) / w - 0.5 * r as f64).ceil() as i32 + 1;
        for q in q_lo..=q_hi {
            if !hex_overlaps_rect(&frame.frame_corners(q, r), hx, hy) {
                continue;
            }
            let centroid = frame.center(q, r);
            cells.push(HexCell {
                q,
                r,
                centroid,
                visitable: poly.contains(centroid),
            });
        }
    }
    Ok(Tessellation {
        frame,
        spec: *spec,
        cells,
    })
}

/// Per-family shape constraints used by the sampler.
pub const MIN_ELONGATED_ASPECT: f64 = 2.5;

fn scale_to_area(ring: &mut [Point], target: f64) {
    let a = signed_area(ring).abs();
    let s = (target / a).sqrt();
    for p in ring.iter_mut() {
        *p = p.scale(s);
    }
}

fn radial_ring(radii: &[f64], angles: &[f64], stretch: f64) -> Vec<Point> {
    radii
        .iter()
        .zip(angles)
        .map(|(&rad, &a)| Point::new(rad * a.cos() * stretch, rad * a.sin()))
        .collect()
}

fn jittered_angles<R: Rng + ?Sized>(rng: &mut R, n: usize, jitter: f64) -> Vec<f64> {
    let step = 2.0 * PI / n as f64;
    (0..n)
        .map(|k| (k as f64 + rng.gen_range(-jitter..jitter)) * step)
        .collect()
}

fn smooth(radii: &mut [f64]) {
    let n = radii.len();
    let orig = radii.to_vec();
    for i in 0..n {
        radii[i] = 0.25 * orig[(i + n - 1) % n] + 0.5 * orig[i] + 0.25 * orig[(i + 1) % n];
    }
}

fn angular_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

fn propose<R: Rng + ?Sized>(family: Family, rng: &mut R) -> Vec<Point> {
    match family {
        Family::CompactConvex => {
            let n = rng.gen_range(8..=14);
            let angles = jittered_angles(rng, n, 0.3);
            let radii: Vec<f64> = (0..n).map(|_| 1.0 + rng.gen_range(-0.25..0.25)).collect();
            let stretch = rng.gen_range(1.0..1.6);
            convex_hull(&radial_ring(&radii, &angles, stretch))
        }
        Family::ElongatedConcave => {
            let n = rng.gen_range(12..=18);
            let angles = jittered_angles(rng, n, 0.3);
            let mut radii: Vec<f64> = (0..n).map(|_| 1.0 + rng.gen_range(-0.2..0.15)).collect();
            let dents = rng.gen_range(1..=2);
            for _ in 0..dents {
                let k = rng.gen_range(0..n);
                radii[k] *= rng.gen_range(0.45..0.7);
            }
            smooth(&mut radii);
            let stretch = rng.gen_range(3.0..4.5);
            radial_ring(&radii, &angles, stretch)
        }
        Family::NarrowPassage => {
            let n = rng.gen_range(18..=26);
            let angles = jittered_angles(rng, n, 0.25);
            let depth = rng.gen_range(0.55..0.75);
            let width: f64 = rng.gen_range(0.25..0.4);
            let waist = PI / 2.0 + rng.gen_range(-0.15..0.15);
            let mut radii: Vec<f64> = angles
                .iter()
                .map(|&a| {
                    let g1 = angular_gap(a, waist);
                    let g2 = angular_gap(a, waist + PI);
                    let dip = depth * ((-(g1 * g1) / (width * width)).exp() + (-(g2 * g2) / (width * width)).exp());
                    (1.0 - dip) * (1.0 + rng.gen_range(-0.08..0.08))
                })
                .collect();
            smooth(&mut radii);
            let stretch = rng.gen_range(1.8..2.6);
            radial_ring(&radii, &angles, stretch)
        }
    }
}

fn family_ok(family: Family, ring: &[Point]) -> bool {
    if ring.len() < 3 || !is_simple(ring) {
        return false;
    }
    match family {
        Family::CompactConvex => convex_hull(ring).len() == ring.len(),
        Family::ElongatedConcave => {
            obb_of_points(ring).map(|o| o.aspect_ratio() >= MIN_ELONGATED_ASPECT).unwrap_or(false)
        }
        Family::NarrowPassage => true,
    }
}

const SAMPLING_BUDGET: usize = 256;

/// Samples a simple polygon of the given morphology with area drawn
/// uniformly from `area_band`, randomly rotated about the origin.
pub fn sample_polygon<R: Rng + ?Sized>(
    family: Family,
    area_band: (f64, f64),
    rng: &mut R,
) -> Result<AoiPolygon, GeometryError> {
    check_band(area_band)?;
    for _ in 0..SAMPLING_BUDGET {
        let mut ring = propose(family, rng);
        let target = sample_in_band(rng, area_band);
        let theta = rng.gen_range(0.0..2.0 * PI);
        for p in ring.iter_mut() {
            *p = p.rotate(theta);
        }
        if ring.len() < 3 || signed_area(&ring).abs() <= 0.0 {
            continue;
        }
        scale_to_area(&mut ring, target);
        if family_ok(family, &ring) {
            let poly = AoiPolygon::new(ring, family);
            let a = poly.area();
            if a >= area_band.0 * (1.0 - 1e-9) && a <= area_band.1 * (1.0 + 1e-9) {
                return Ok(poly);
            }
        }
    }
    Err(GeometryError::SamplingBudget(SAMPLING_BUDGET))
}

/// Uses `template` as the outline, scaled to an area drawn from the band.
/// A band collapsed onto the template's own area returns it verbatim.
pub fn sample_from_template<R: Rng + ?Sized>(
    template: &[Point],
    family: Family,
    area_band: (f64, f64),
    rng: &mut R,
) -> Result<AoiPolygon, GeometryError> {
    check_band(area_band)?;
    let mut ring = template.to_vec();
    let a = signed_area(&ring).abs();
    if ring.len() < 3 || a <= 0.0 {
        return Err(GeometryError::Degenerate(ring.len()));
    }
    let target = sample_in_band(rng, area_band);
    if target != a {
        scale_to_area(&mut ring, target);
    }
    if !family_ok(family, &ring) {
        return Err(GeometryError::Invalid(format!(
            "template violates {} constraints",
            family.as_str()
        )));
    }
    Ok(AoiPolygon::new(ring, family))
}

fn check_band(band: (f64, f64)) -> Result<(), GeometryError> {
    if !(band.0 > 0.0 && band.0 <= band.1 && band.1.is_finite()) {
        return Err(GeometryError::Invalid(format!("bad area band {band:?}")));
    }
    Ok(())
}

pub(crate) fn sample_in_band<R: Rng + ?Sized>(rng: &mut R, band: (f64, f64)) -> f64 {
    if band.0 == band.1 {
        band.0
    } else {
        rng.gen_range(band.0..=band.1)
    }
}
