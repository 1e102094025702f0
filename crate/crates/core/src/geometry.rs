//! Polygons, shapes with holes, and the two procedural shape families.
//!
//! A [`Shape`] is the unit square with a list of non-overlapping hole
//! polygons. Voronoi-family shapes turn the cells of a random Voronoi
//! tessellation into rounded pores; lattice-family shapes place smoothed
//! regular polygons at a random subset of lattice points.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),
    #[error("offset of {0} annihilates the polygon")]
    EmptyOffset(f64),
    #[error("offset requires a convex polygon")]
    NonConvex,
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("shape generation failed for seed {seed} after {attempts} attempts")]
    GenerationFailed { seed: u64, attempts: usize },
    #[error("shape invariant violated: {0}")]
    InvalidShape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

pub const fn pt(x: f64, y: f64) -> Point {
    Point { x, y }
}

impl Point {
    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Point) -> f64 {
        (self - o).norm()
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.x, self.y]
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        pt(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        pt(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        pt(self.x * s, self.y * s)
    }
}

/// Distance from `p` to the closed segment `ab`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    point_segment_distance_sq(p, a, b).sqrt()
}

pub fn point_segment_distance_sq(p: Point, a: Point, b: Point) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    let t = if len2 > 0.0 { ((p - a).dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let d = p - (a + ab * t);
    d.dot(d)
}

fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let o = |p: Point, q: Point, r: Point| (q - p).cross(r - p);
    let (d1, d2, d3, d4) = (o(c, d, a), o(c, d, b), o(a, b, c), o(a, b, d));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |p: Point, q: Point, r: Point| {
        o(p, q, r) == 0.0 && r.x >= p.x.min(q.x) && r.x <= p.x.max(q.x) && r.y >= p.y.min(q.y) && r.y <= p.y.max(q.y)
    };
    on(c, d, a) || on(c, d, b) || on(a, b, c) || on(a, b, d)
}

/// Axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Point,
    pub max: Point,
}

impl Rect {
    pub const UNIT: Rect = Rect { min: pt(0.0, 0.0), max: pt(1.0, 1.0) };

    pub fn area(&self) -> f64 {
        (self.max.x - self.min.x) * (self.max.y - self.min.y)
    }

    fn corners(&self) -> Vec<Point> {
        vec![self.min, pt(self.max.x, self.min.y), self.max, pt(self.min.x, self.max.y)]
    }

    fn strictly_contains(&self, p: Point) -> bool {
        p.x > self.min.x && p.x < self.max.x && p.y > self.min.y && p.y < self.max.y
    }
}

/// Closed loop of vertices, counter-clockwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    vertices: Vec<Point>,
}

const MIN_VERTEX_GAP: f64 = 1e-9;

impl Polygon {
    /// Validates vertex count and consecutive-vertex separation, and
    /// reorients clockwise input to counter-clockwise.
    pub fn new(mut vertices: Vec<Point>) -> Result<Self, GeometryError> {
        if vertices.len() < 3 {
            return Err(GeometryError::InvalidPolygon(format!("{} vertices", vertices.len())));
        }
        let n = vertices.len();
        for i in 0..n {
            if vertices[i].dist(vertices[(i + 1) % n]) <= MIN_VERTEX_GAP {
                return Err(GeometryError::InvalidPolygon(format!("vertices {} and {} coincide", i, (i + 1) % n)));
            }
            if !vertices[i].x.is_finite() || !vertices[i].y.is_finite() {
                return Err(GeometryError::InvalidPolygon("non-finite coordinate".into()));
            }
        }
        if signed_area(&vertices) < 0.0 {
            vertices.reverse();
        }
        Ok(Polygon { vertices })
    }

    pub fn rect(r: Rect) -> Self {
        Polygon { vertices: r.corners() }
    }

    /// Regular `sides`-gon with circumradius `radius`, first vertex at angle `phase`.
    pub fn regular(center: Point, radius: f64, sides: usize, phase: f64) -> Result<Self, GeometryError> {
        let v = (0..sides)
            .map(|i| {
                let a = phase + 2.0 * PI * i as f64 / sides as f64;
                center + pt(a.cos(), a.sin()) * radius
            })
            .collect();
        Polygon::new(v)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Shoelace area (positive for counter-clockwise loops).
    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn perimeter(&self) -> f64 {
        self.edges().map(|(a, b)| a.dist(b)).sum()
    }

    pub fn centroid(&self) -> Point {
        let a = self.area();
        let (mut cx, mut cy) = (0.0, 0.0);
        for (p, q) in self.edges() {
            let c = p.cross(q);
            cx += (p.x + q.x) * c;
            cy += (p.y + q.y) * c;
        }
        pt(cx / (6.0 * a), cy / (6.0 * a))
    }

    /// Even-odd point containment. Points exactly on the boundary may go either way.
    pub fn contains(&self, p: Point) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    pub fn boundary_distance(&self, p: Point) -> f64 {
        self.edges().map(|(a, b)| point_segment_distance(p, a, b)).fold(f64::INFINITY, f64::min)
    }

    /// Smallest interior angle, degrees.
    pub fn min_interior_angle(&self) -> f64 {
        let v = &self.vertices;
        let n = v.len();
        (0..n)
            .map(|i| {
                let (u, w) = (v[(i + n - 1) % n] - v[i], v[(i + 1) % n] - v[i]);
                let ang = (u.dot(w) / (u.norm() * w.norm())).clamp(-1.0, 1.0).acos().to_degrees();
                // reflex corners turn clockwise on a counter-clockwise loop
                if u.cross(w) > 0.0 { 360.0 - ang } else { ang }
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_convex(&self) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let (a, b, c) = (self.vertices[i], self.vertices[(i + 1) % n], self.vertices[(i + 2) % n]);
            (b - a).cross(c - b) >= -1e-12
        })
    }

    /// No two non-adjacent edges touch.
    pub fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        let v = &self.vertices;
        for i in 0..n {
            for j in i + 1..n {
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                if segments_intersect(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]) {
                    return false;
                }
            }
        }
        true
    }

    /// Minimum distance between the boundaries of two polygons.
    pub fn boundary_gap(&self, other: &Polygon) -> f64 {
        let a = self.vertices.iter().map(|&p| other.boundary_distance(p)).fold(f64::INFINITY, f64::min);
        let b = other.vertices.iter().map(|&p| self.boundary_distance(p)).fold(f64::INFINITY, f64::min);
        a.min(b)
    }

    /// Split every edge into equal pieces no longer than `max_len`, with at
    /// least `min_vertices` vertices in total. Original vertices are kept.
    pub fn subdivide(&self, max_len: f64, min_vertices: usize) -> Polygon {
        let per = self.perimeter();
        let spacing = max_len.min(per / min_vertices as f64);
        let mut out = Vec::new();
        for (a, b) in self.edges() {
            let pieces = ((a.dist(b) / spacing).ceil() as usize).max(1);
            for k in 0..pieces {
                out.push(a + (b - a) * (k as f64 / pieces as f64));
            }
        }
        Polygon { vertices: out }
    }
}

fn signed_area(v: &[Point]) -> f64 {
    let n = v.len();
    0.5 * (0..n).map(|i| v[i].cross(v[(i + 1) % n])).sum::<f64>()
}

/// Keep the part of a convex loop where `normal . x <= offset`.
fn clip_halfplane(poly: &[Point], normal: Point, offset: f64) -> Vec<Point> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let (da, db) = (normal.dot(a) - offset, normal.dot(b) - offset);
        if da <= 0.0 {
            out.push(a);
        }
        if (da < 0.0 && db > 0.0) || (da > 0.0 && db < 0.0) {
            let t = da / (da - db);
            out.push(a + (b - a) * t);
        }
    }
    dedup_loop(out)
}

fn dedup_loop(mut v: Vec<Point>) -> Vec<Point> {
    v.dedup_by(|a, b| a.dist(*b) <= MIN_VERTEX_GAP);
    while v.len() > 1 && v[0].dist(v[v.len() - 1]) <= MIN_VERTEX_GAP {
        v.pop();
    }
    v
}

/// Voronoi cell of every site, clipped to `bbox`.
///
/// Cells are convex intersections of `bbox` with the bisector half-planes of
/// all other sites, so they tile `bbox` exactly.
pub fn voronoi_cells(points: &[Point], bbox: Rect) -> Result<Vec<Polygon>, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::DegenerateInput("no sites".into()));
    }
    for (i, p) in points.iter().enumerate() {
        if !bbox.strictly_contains(*p) {
            return Err(GeometryError::DegenerateInput(format!("site {} = ({}, {}) not strictly inside box", i, p.x, p.y)));
        }
        for q in &points[..i] {
            if p.dist(*q) <= 1e-12 {
                return Err(GeometryError::DegenerateInput(format!("duplicate site ({}, {})", p.x, p.y)));
            }
        }
    }
    points
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let mut cell = bbox.corners();
            for (j, &q) in points.iter().enumerate() {
                if i != j {
                    let normal = q - p;
                    cell = clip_halfplane(&cell, normal, normal.dot((p + q) * 0.5));
                }
            }
            Polygon::new(cell)
        })
        .collect()
}

/// Offset a convex polygon by `d`: inward for `d < 0`, outward for `d > 0`
/// (round joins, at most `PI / 16` per arc step).
pub fn offset_polygon(p: &Polygon, d: f64) -> Result<Polygon, GeometryError> {
    if d == 0.0 {
        return Ok(p.clone());
    }
    if !p.is_convex() {
        return Err(GeometryError::NonConvex);
    }
    if d < 0.0 {
        let mut cell = p.vertices.clone();
        for (a, b) in p.edges() {
            let e = b - a;
            // outward normal of a counter-clockwise edge
            let n = pt(e.y, -e.x) * (1.0 / e.norm());
            cell = clip_halfplane(&cell, n, n.dot(a) + d);
            if cell.len() < 3 {
                return Err(GeometryError::EmptyOffset(d));
            }
        }
        let out = Polygon::new(cell).map_err(|_| GeometryError::EmptyOffset(d))?;
        if out.area() <= 1e-14 {
            return Err(GeometryError::EmptyOffset(d));
        }
        return Ok(out);
    }
    let v = &p.vertices;
    let n = v.len();
    let mut out = Vec::new();
    for i in 0..n {
        let (prev, cur, next) = (v[(i + n - 1) % n], v[i], v[(i + 1) % n]);
        let e0 = cur - prev;
        let e1 = next - cur;
        let a0 = e0.y.atan2(e0.x) - PI / 2.0;
        let mut a1 = e1.y.atan2(e1.x) - PI / 2.0;
        while a1 < a0 {
            a1 += 2.0 * PI;
        }
        let steps = (((a1 - a0) / (PI / 16.0)).ceil() as usize).max(1);
        for k in 0..=steps {
            let a = a0 + (a1 - a0) * k as f64 / steps as f64;
            out.push(cur + pt(a.cos(), a.sin()) * d);
        }
    }
    Polygon::new(dedup_loop(out))
}

/// `degree` passes of `v_i <- (v_{i-1} + 2 v_i + v_{i+1}) / 4` over the closed loop.
pub fn laplacian_smooth(p: &Polygon, degree: usize) -> Polygon {
    let mut v = p.vertices.clone();
    let n = v.len();
    let mut next = v.clone();
    for _ in 0..degree {
        for i in 0..n {
            next[i] = (v[(i + n - 1) % n] + v[i] * 2.0 + v[(i + 1) % n]) * 0.25;
        }
        std::mem::swap(&mut v, &mut next);
    }
    Polygon { vertices: v }
}

/// Which procedure built a shape, and from what.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub params: serde_json::Value,
    pub seed: u64,
}

/// The unit square with holes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub outer: Polygon,
    pub holes: Vec<Polygon>,
    pub provenance: Provenance,
}

impl Shape {
    pub fn new(holes: Vec<Polygon>, provenance: Provenance) -> Self {
        Shape { outer: Polygon::rect(Rect::UNIT), holes, provenance }
    }

    pub fn solid() -> Self {
        Shape::new(Vec::new(), Provenance { generator: "solid".into(), params: serde_json::Value::Null, seed: 0 })
    }

    /// Material area: outer area minus hole areas.
    pub fn area(&self) -> f64 {
        self.outer.area() - self.holes.iter().map(|h| h.area()).sum::<f64>()
    }

    /// Point is in the material (inside the outer loop, outside every hole).
    pub fn contains(&self, p: Point) -> bool {
        self.outer.contains(p) && !self.holes.iter().any(|h| h.contains(p))
    }

    pub fn boundary_segments(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        self.outer.edges().chain(self.holes.iter().flat_map(|h| h.edges()))
    }

    /// Check containment, disjointness and clearance against `min_wall`.
    pub fn validate(&self, min_wall: f64) -> Result<(), GeometryError> {
        let bad = |m: String| Err(GeometryError::InvalidShape(m));
        for (i, h) in self.holes.iter().enumerate() {
            if !h.is_simple() {
                return bad(format!("hole {} self-intersects", i));
            }
            for v in h.vertices() {
                if !self.outer.contains(*v) {
                    return bad(format!("hole {} leaves the outer boundary", i));
                }
            }
            let gap = h.vertices().iter().map(|&v| self.outer.boundary_distance(v)).fold(f64::INFINITY, f64::min);
            if gap < min_wall - 1e-9 {
                return bad(format!("hole {} is {:.4} from the outer boundary (< {})", i, gap, min_wall));
            }
            for (j, g) in self.holes.iter().enumerate().skip(i + 1) {
                if h.contains(g.vertices()[0]) || g.contains(h.vertices()[0]) {
                    return bad(format!("holes {} and {} overlap", i, j));
                }
                let gap = h.boundary_gap(g);
                if gap < min_wall - 1e-9 {
                    return bad(format!("holes {} and {} are {:.4} apart (< {})", i, j, gap, min_wall));
                }
            }
        }
        Ok(())
    }
}

/// Pore boundaries are resampled to at most this spacing before smoothing.
pub const PORE_SPACING: f64 = 0.02;
pub const MIN_PORE_VERTICES: usize = 32;
const MIN_PORE_AREA: f64 = 4e-4;
/// Sharper pore corners are rejected; quality meshing cannot resolve them.
pub const MIN_PORE_ANGLE: f64 = 60.0;
const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoronoiParams {
    pub n_holes: usize,
    pub wall_thickness: f64,
    pub smoothing_degree: usize,
    pub seed: u64,
}

impl VoronoiParams {
    /// Seed points are drawn from this square so insets stay feasible.
    pub const SITE_MARGIN: (f64, f64) = (0.15, 0.85);

    fn validate(&self) -> Result<(), GeometryError> {
        if self.n_holes == 0 {
            return Err(GeometryError::InvalidParams("n_holes must be >= 1".into()));
        }
        if !(self.wall_thickness > 0.0) {
            return Err(GeometryError::InvalidParams("wall_thickness must be positive".into()));
        }
        Ok(())
    }
}

fn attempt_rng(seed: u64, attempt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attempt as u64);
    rng
}

/// Random sites, Voronoi cells, cell insets, then Laplacian smoothing.
///
/// Each cell is inset by half the wall thickness from its bisectors and by
/// the full wall thickness from the outer square, so neighbouring pores are
/// at least one wall apart. A cell that collapses triggers a retry on a
/// fresh random stream.
pub fn gen_voronoi_shape(params: &VoronoiParams) -> Result<Shape, GeometryError> {
    params.validate()?;
    let (lo, hi) = VoronoiParams::SITE_MARGIN;
    let w = params.wall_thickness;
    'attempt: for attempt in 0..MAX_ATTEMPTS {
        let mut rng = attempt_rng(params.seed, attempt);
        let sites: Vec<Point> = (0..params.n_holes).map(|_| pt(rng.gen_range(lo..hi), rng.gen_range(lo..hi))).collect();
        if sites.iter().enumerate().any(|(i, p)| sites[..i].iter().any(|q| q.dist(*p) < 1e-6)) {
            continue;
        }
        let mut holes = Vec::with_capacity(sites.len());
        for (i, &p) in sites.iter().enumerate() {
            let mut cell = Rect { min: pt(w, w), max: pt(1.0 - w, 1.0 - w) }.corners();
            if w >= 0.5 {
                continue 'attempt;
            }
            for (j, &q) in sites.iter().enumerate() {
                if i != j {
                    let d = q - p;
                    let u = d * (1.0 / d.norm());
                    cell = clip_halfplane(&cell, u, u.dot((p + q) * 0.5) - 0.5 * w);
                }
            }
            if cell.len() < 3 || signed_area(&cell).abs() < MIN_PORE_AREA {
                continue 'attempt;
            }
            let Ok(poly) = Polygon::new(cell) else { continue 'attempt };
            let pore = laplacian_smooth(&poly.subdivide(PORE_SPACING, MIN_PORE_VERTICES), params.smoothing_degree);
            if pore.min_interior_angle() < MIN_PORE_ANGLE {
                continue 'attempt;
            }
            holes.push(pore);
        }
        let shape = Shape::new(
            holes,
            Provenance {
                generator: "voronoi".into(),
                params: serde_json::to_value(params).unwrap_or_default(),
                seed: params.seed,
            },
        );
        if shape.validate(w).is_ok() {
            return Ok(shape);
        }
    }
    Err(GeometryError::GenerationFailed { seed: params.seed, attempts: MAX_ATTEMPTS })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeParams {
    pub lattice_n: usize,
    pub n_holes: usize,
    pub side_count_range: (usize, usize),
    pub smoothness_range: (usize, usize),
    /// Circumradius range of the hole polygons.
    pub size_range: (f64, f64),
    pub min_wall: f64,
    pub seed: u64,
}

impl LatticeParams {
    pub fn new(lattice_n: usize, n_holes: usize, seed: u64) -> Self {
        LatticeParams {
            lattice_n,
            n_holes,
            side_count_range: (3, 6),
            smoothness_range: (1, 15),
            size_range: (0.07, 0.15),
            min_wall: 0.05,
            seed,
        }
    }

    fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: String| Err(GeometryError::InvalidParams(m));
        if self.lattice_n == 0 {
            return bad("lattice_n must be >= 1".into());
        }
        if self.n_holes > self.lattice_n * self.lattice_n {
            return bad(format!("{} holes do not fit on a {}x{} lattice", self.n_holes, self.lattice_n, self.lattice_n));
        }
        if self.side_count_range.0 < 3 || self.side_count_range.0 > self.side_count_range.1 {
            return bad("side counts must be >= 3 and ordered".into());
        }
        if self.smoothness_range.0 > self.smoothness_range.1 {
            return bad("smoothness range must be ordered".into());
        }
        if !(self.size_range.0 > 0.0 && self.size_range.0 <= self.size_range.1) || !(self.min_wall > 0.0) {
            return bad("size range and min_wall must be positive".into());
        }
        Ok(())
    }

    /// Lattice point `(i, j)` at cell centres of an `n x n` partition.
    pub fn lattice_point(&self, i: usize, j: usize) -> Point {
        let n = self.lattice_n as f64;
        pt((i as f64 + 0.5) / n, (j as f64 + 0.5) / n)
    }
}

/// Smoothed random polygons centred on a random subset of lattice points.
///
/// A hole's circumradius is shrunk when needed so its circumcircle keeps
/// `min_wall` clearance from the outer square and from neighbouring
/// circumcircles.
pub fn gen_lattice_shape(params: &LatticeParams) -> Result<Shape, GeometryError> {
    params.validate()?;
    let n = params.lattice_n;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = attempt_rng(params.seed, attempt);
        let mut chosen: Vec<usize> = sample(&mut rng, n * n, params.n_holes).into_vec();
        chosen.sort_unstable();
        let centers: Vec<Point> = chosen.iter().map(|&k| params.lattice_point(k % n, k / n)).collect();
        let mut holes = Vec::with_capacity(centers.len());
        let mut ok = true;
        for (i, &c) in centers.iter().enumerate() {
            let sides = rng.gen_range(params.side_count_range.0..=params.side_count_range.1);
            let phase = rng.gen_range(0.0..2.0 * PI / sides as f64);
            let mut radius = rng.gen_range(params.size_range.0..=params.size_range.1);
            let smooth = rng.gen_range(params.smoothness_range.0..=params.smoothness_range.1);
            let edge_room = c.x.min(c.y).min(1.0 - c.x).min(1.0 - c.y) - params.min_wall;
            let neighbour_room = centers
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &o)| 0.5 * (c.dist(o) - params.min_wall))
                .fold(f64::INFINITY, f64::min);
            radius = radius.min(edge_room).min(neighbour_room);
            if radius < 0.01 {
                ok = false;
                break;
            }
            let poly = Polygon::regular(c, radius, sides, phase)?;
            holes.push(laplacian_smooth(&poly.subdivide(PORE_SPACING, MIN_PORE_VERTICES), smooth));
        }
        if !ok {
            continue;
        }
        let shape = Shape::new(
            holes,
            Provenance {
                generator: "lattice".into(),
                params: serde_json::to_value(params).unwrap_or_default(),
                seed: params.seed,
            },
        );
        if shape.validate(params.min_wall).is_ok() {
            return Ok(shape);
        }
    }
    Err(GeometryError::GenerationFailed { seed: params.seed, attempts: MAX_ATTEMPTS })
}
