//! Quality triangulation of shapes with holes.
//!
//! Bowyer-Watson insertion with exact predicates, then Ruppert refinement:
//! encroached boundary segments are split at their midpoints, and triangles
//! that are too skinny or too large get their circumcenter inserted. Since
//! no segment is left encroached, every segment is a Delaunay edge and the
//! domain is recovered by flood fill without a constrained triangulation.

use std::collections::HashSet;

use robust::Coord;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pt, Point, Polygon, Shape};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeshError {
    #[error("invalid mesh input: {0}")]
    InvalidInput(String),
    #[error("mesh generation failed: {0}")]
    MeshFailure(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundaryTag {
    OuterTop,
    OuterBottom,
    OuterSide,
    Hole,
}

impl BoundaryTag {
    pub const ALL: [BoundaryTag; 4] = [BoundaryTag::OuterTop, BoundaryTag::OuterBottom, BoundaryTag::OuterSide, BoundaryTag::Hole];

    pub fn code(self) -> u8 {
        match self {
            BoundaryTag::OuterTop => 0,
            BoundaryTag::OuterBottom => 1,
            BoundaryTag::OuterSide => 2,
            BoundaryTag::Hole => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        BoundaryTag::ALL.get(c as usize).copied()
    }

    pub fn is_outer(self) -> bool {
        self != BoundaryTag::Hole
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryEdge {
    pub nodes: [usize; 2],
    pub tag: BoundaryTag,
}

/// Linear triangle mesh. Triangles are counter-clockwise; boundary edges are
/// oriented with the material on their left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub nodes: Vec<Point>,
    pub tris: Vec<[usize; 3]>,
    pub boundary: Vec<BoundaryEdge>,
    pub h_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshStats {
    pub n_nodes: usize,
    pub n_tris: usize,
    pub max_edge: f64,
    /// Degrees.
    pub min_angle: f64,
}

pub const MIN_TRI_AREA: f64 = 1e-14;

fn tri_signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * (b - a).cross(c - a)
}

/// Interior angles of a triangle in degrees.
pub fn tri_angles(a: Point, b: Point, c: Point) -> [f64; 3] {
    let ang = |p: Point, q: Point, r: Point| {
        let (u, v) = (q - p, r - p);
        u.cross(v).abs().atan2(u.dot(v)).to_degrees()
    };
    [ang(a, b, c), ang(b, c, a), ang(c, a, b)]
}

impl Mesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn tri_points(&self, t: usize) -> [Point; 3] {
        let [a, b, c] = self.tris[t];
        [self.nodes[a], self.nodes[b], self.nodes[c]]
    }

    pub fn tri_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.tri_points(t);
        tri_signed_area(a, b, c)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.tris.len()).map(|t| self.tri_area(t)).sum()
    }

    /// Undirected edges, each listed once with the smaller index first.
    pub fn edges(&self) -> Vec<[usize; 2]> {
        let mut e: Vec<[usize; 2]> = self
            .tris
            .iter()
            .flat_map(|t| (0..3).map(move |i| {
                let (a, b) = (t[i], t[(i + 1) % 3]);
                [a.min(b), a.max(b)]
            }))
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    /// Nodes on edges tagged with any tag in `tags`.
    pub fn nodes_with_tag(&self, tags: &[BoundaryTag]) -> Vec<usize> {
        let mut v: Vec<usize> = self.boundary.iter().filter(|e| tags.contains(&e.tag)).flat_map(|e| e.nodes).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Check every structural invariant.
    pub fn validate(&self) -> Result<(), MeshError> {
        let bad = |m: String| Err(MeshError::InvalidMesh(m));
        if !(self.h_max > 0.0) || !self.h_max.is_finite() {
            return bad(format!("h_max {}", self.h_max));
        }
        let n = self.nodes.len();
        for (i, p) in self.nodes.iter().enumerate() {
            if !(p.x >= -1e-12 && p.x <= 1.0 + 1e-12 && p.y >= -1e-12 && p.y <= 1.0 + 1e-12) {
                return bad(format!("node {} at ({}, {}) outside the unit square", i, p.x, p.y));
            }
        }
        let mut count = std::collections::HashMap::<(usize, usize), (usize, usize)>::new();
        for (t, tri) in self.tris.iter().enumerate() {
            if tri.iter().any(|&v| v >= n) {
                return bad(format!("triangle {} references a missing node", t));
            }
            let a = self.tri_area(t);
            if !(a > MIN_TRI_AREA) {
                return bad(format!("triangle {} has area {}", t, a));
            }
            for i in 0..3 {
                let (u, v) = (tri[i], tri[(i + 1) % 3]);
                if self.nodes[u].dist(self.nodes[v]) > self.h_max * (1.0 + 1e-9) {
                    return bad(format!("edge {}-{} longer than h_max", u, v));
                }
                count.entry((u.min(v), u.max(v))).or_insert((0, 0)).0 += 1;
                count.get_mut(&(u.min(v), u.max(v))).unwrap().1 = u;
            }
        }
        let mut open: HashSet<(usize, usize)> = HashSet::new();
        for (&(u, v), &(c, from)) in &count {
            if c > 2 {
                return bad(format!("edge {}-{} shared by {} triangles", u, v, c));
            }
            if c == 1 {
                // orientation as it appears in the triangle
                open.insert(if from == u { (u, v) } else { (v, u) });
            }
        }
        if open.len() != self.boundary.len() {
            return bad(format!("{} open edges but {} boundary edges", open.len(), self.boundary.len()));
        }
        for e in &self.boundary {
            if !open.contains(&(e.nodes[0], e.nodes[1])) {
                return bad(format!("boundary edge {:?} is not an open edge with material on its left", e.nodes));
            }
        }
        Ok(())
    }
}

pub fn mesh_stats(mesh: &Mesh) -> MeshStats {
    let mut max_edge: f64 = 0.0;
    let mut min_angle: f64 = 180.0;
    for t in 0..mesh.tris.len() {
        let [a, b, c] = mesh.tri_points(t);
        max_edge = max_edge.max(a.dist(b)).max(b.dist(c)).max(c.dist(a));
        min_angle = tri_angles(a, b, c).into_iter().fold(min_angle, f64::min);
    }
    MeshStats { n_nodes: mesh.nodes.len(), n_tris: mesh.tris.len(), max_edge, min_angle }
}

/// Minimum-angle target, degrees.
pub const MIN_ANGLE: f64 = 20.0;
const NONE: usize = usize::MAX;
const SUPER: usize = 3;

#[derive(Clone, Copy)]
struct Tri {
    v: [usize; 3],
    /// `nb[i]` lies across the edge opposite `v[i]`.
    nb: [usize; 3],
    alive: bool,
}

struct Seg {
    a: usize,
    b: usize,
    tag: BoundaryTag,
}

fn coord(p: Point) -> Coord<f64> {
    Coord { x: p.x, y: p.y }
}

struct Delaunay {
    pts: Vec<Point>,
    tris: Vec<Tri>,
    free: Vec<usize>,
    vtri: Vec<usize>,
    last: usize,
    mark: Vec<u32>,
    stamp: u32,
}

impl Delaunay {
    fn new() -> Self {
        let pts = vec![pt(-1e3, -1e3), pt(1e3, -1e3), pt(0.5, 1e3)];
        Delaunay {
            pts,
            tris: vec![Tri { v: [0, 1, 2], nb: [NONE; 3], alive: true }],
            free: Vec::new(),
            vtri: vec![0; 3],
            last: 0,
            mark: vec![0],
            stamp: 0,
        }
    }

    fn orient(&self, a: usize, b: usize, p: Point) -> f64 {
        robust::orient2d(coord(self.pts[a]), coord(self.pts[b]), coord(p))
    }

    fn locate(&self, p: Point) -> Result<usize, MeshError> {
        let mut t = if self.tris[self.last].alive { self.last } else { self.tris.iter().position(|t| t.alive).unwrap() };
        let mut steps = 0usize;
        'walk: loop {
            steps += 1;
            if steps > 4 * self.tris.len() + 16 {
                return Err(MeshError::MeshFailure("point location did not terminate".into()));
            }
            let tri = self.tris[t];
            for i in 0..3 {
                if self.orient(tri.v[(i + 1) % 3], tri.v[(i + 2) % 3], p) < 0.0 {
                    if tri.nb[i] == NONE {
                        return Err(MeshError::MeshFailure(format!("point ({}, {}) outside the super triangle", p.x, p.y)));
                    }
                    t = tri.nb[i];
                    continue 'walk;
                }
            }
            return Ok(t);
        }
    }

    fn in_circle(&self, t: usize, p: Point) -> bool {
        let [a, b, c] = self.tris[t].v;
        robust::incircle(coord(self.pts[a]), coord(self.pts[b]), coord(self.pts[c]), coord(p)) > 0.0
    }

    fn alloc(&mut self, tri: Tri) -> usize {
        if let Some(i) = self.free.pop() {
            self.tris[i] = tri;
            i
        } else {
            self.tris.push(tri);
            self.mark.push(0);
            self.tris.len() - 1
        }
    }

    /// Insert `p`; returns its index, or `None` if it coincides with an existing vertex.
    fn insert(&mut self, p: Point) -> Result<Option<usize>, MeshError> {
        let t0 = self.locate(p)?;
        self.stamp += 1;
        let stamp = self.stamp;
        let mut cavity = vec![t0];
        self.mark[t0] = stamp;
        let mut k = 0;
        while k < cavity.len() {
            let t = cavity[k];
            k += 1;
            for n in self.tris[t].nb {
                if n != NONE && self.mark[n] != stamp && self.in_circle(n, p) {
                    self.mark[n] = stamp;
                    cavity.push(n);
                }
            }
        }
        // (a, b, outside neighbour) for every cavity boundary edge
        let mut rim = Vec::with_capacity(cavity.len() + 2);
        for &t in &cavity {
            let tri = self.tris[t];
            for i in 0..3 {
                let n = tri.nb[i];
                if n == NONE || self.mark[n] != stamp {
                    rim.push((tri.v[(i + 1) % 3], tri.v[(i + 2) % 3], n));
                }
            }
        }
        for &(a, b, _) in &rim {
            if self.pts[a].dist(p) < 1e-12 {
                return Ok(None);
            }
            if !(self.orient(a, b, p) > 0.0) {
                return Err(MeshError::MeshFailure("insertion cavity is not star-shaped".into()));
            }
        }
        for &t in &cavity {
            self.tris[t].alive = false;
            self.free.push(t);
        }
        let pi = self.pts.len();
        self.pts.push(p);
        self.vtri.push(NONE);
        let mut made = Vec::with_capacity(rim.len());
        for &(a, b, n) in &rim {
            let id = self.alloc(Tri { v: [a, b, pi], nb: [NONE, NONE, n], alive: true });
            self.mark[id] = 0;
            if n != NONE {
                let nt = &mut self.tris[n];
                for j in 0..3 {
                    if nt.v[(j + 1) % 3] == b && nt.v[(j + 2) % 3] == a {
                        nt.nb[j] = id;
                    }
                }
            }
            made.push((a, b, id));
        }
        for &(a, b, id) in &made {
            // across (b, p): the new triangle starting at b; across (p, a): the one ending at a
            let next = made.iter().find(|m| m.0 == b).map(|m| m.2).unwrap_or(NONE);
            let prev = made.iter().find(|m| m.1 == a).map(|m| m.2).unwrap_or(NONE);
            self.tris[id].nb[0] = next;
            self.tris[id].nb[1] = prev;
            self.vtri[a] = id;
            self.vtri[b] = id;
        }
        self.vtri[pi] = made[0].2;
        self.last = made[0].2;
        Ok(Some(pi))
    }

    /// Triangles around vertex `a`, counter-clockwise.
    fn star(&self, a: usize) -> Vec<usize> {
        let start = self.vtri[a];
        let mut out = Vec::with_capacity(8);
        let mut t = start;
        loop {
            out.push(t);
            let tri = &self.tris[t];
            let i = tri.v.iter().position(|&v| v == a).unwrap();
            t = tri.nb[(i + 1) % 3];
            if t == start || t == NONE || out.len() > 64 {
                break;
            }
        }
        out
    }

    /// Apexes of the triangles left and right of edge `a -> b`, if the edge exists.
    fn edge_apexes(&self, a: usize, b: usize) -> Option<[usize; 2]> {
        let mut left = NONE;
        let mut right = NONE;
        for t in self.star(a) {
            let v = self.tris[t].v;
            let i = v.iter().position(|&x| x == a).unwrap();
            if v[(i + 1) % 3] == b {
                left = v[(i + 2) % 3];
            }
            if v[(i + 2) % 3] == b {
                right = v[(i + 1) % 3];
            }
        }
        (left != NONE && right != NONE).then_some([left, right])
    }
}

fn in_diametral_circle(a: Point, b: Point, p: Point) -> bool {
    (a - p).dot(b - p) < 0.0
}

fn circumcenter(a: Point, b: Point, c: Point) -> Point {
    let (b, c) = (b - a, c - a);
    let d = 2.0 * b.cross(c);
    let (bb, cc) = (b.dot(b), c.dot(c));
    a + pt((c.y * bb - b.y * cc) / d, (b.x * cc - c.x * bb) / d)
}

struct Refiner<'a> {
    dt: Delaunay,
    segs: Vec<Seg>,
    shape: &'a Shape,
    h_max: f64,
    budget: usize,
    /// Vertex came from the input boundary rather than a segment split.
    input: Vec<bool>,
}

impl Refiner<'_> {
    fn insert(&mut self, p: Point) -> Result<Option<usize>, MeshError> {
        if self.budget == 0 {
            return Err(MeshError::MeshFailure("vertex budget exhausted".into()));
        }
        self.budget -= 1;
        let i = self.dt.insert(p)?;
        if i.is_some() {
            self.input.push(false);
        }
        Ok(i)
    }

    fn encroached(&self, s: usize) -> bool {
        let Seg { a, b, .. } = self.segs[s];
        match self.dt.edge_apexes(a, b) {
            None => true,
            Some(apex) => apex.iter().any(|&c| in_diametral_circle(self.dt.pts[a], self.dt.pts[b], self.dt.pts[c])),
        }
    }

    /// Split point of a segment. Segments hanging off an input vertex are cut
    /// on power-of-two shells around it, so neighbouring segments at a small
    /// angle get matching lengths instead of encroaching on each other forever.
    fn split_point(&self, a: usize, b: usize) -> Point {
        let (pa, pb) = (self.dt.pts[a], self.dt.pts[b]);
        let (from, to) = match (self.input[a], self.input[b]) {
            (true, false) => (pa, pb),
            (false, true) => (pb, pa),
            _ => return (pa + pb) * 0.5,
        };
        let len = from.dist(to);
        let shell = 2f64.powf((0.5 * len).log2().round());
        from + (to - from) * (shell / len)
    }

    fn split(&mut self, s: usize) -> Result<(), MeshError> {
        let Seg { a, b, tag } = self.segs[s];
        let m = self.split_point(a, b);
        let Some(mi) = self.insert(m)? else {
            return Err(MeshError::MeshFailure(format!("segment {}-{} collapsed", a, b)));
        };
        self.segs[s].b = mi;
        self.segs.push(Seg { a: mi, b, tag });
        Ok(())
    }

    fn fix_segments(&mut self) -> Result<(), MeshError> {
        loop {
            let mut changed = false;
            let mut s = 0;
            while s < self.segs.len() {
                if self.encroached(s) {
                    self.split(s)?;
                    changed = true;
                } else {
                    s += 1;
                }
            }
            if !changed {
                return Ok(());
            }
        }
    }

    /// Triangles reachable from the material side of any segment without crossing one.
    fn domain(&self) -> Vec<bool> {
        let seg_edges: HashSet<(usize, usize)> =
            self.segs.iter().flat_map(|s| [(s.a, s.b), (s.b, s.a)]).collect();
        let mut inside = vec![false; self.dt.tris.len()];
        let mut stack = Vec::new();
        for s in &self.segs {
            for t in self.dt.star(s.a) {
                let v = self.dt.tris[t].v;
                let i = v.iter().position(|&x| x == s.a).unwrap();
                if v[(i + 1) % 3] == s.b && !inside[t] {
                    inside[t] = true;
                    stack.push(t);
                }
            }
        }
        while let Some(t) = stack.pop() {
            let tri = self.dt.tris[t];
            for i in 0..3 {
                let n = tri.nb[i];
                let (u, v) = (tri.v[(i + 1) % 3], tri.v[(i + 2) % 3]);
                if n != NONE && !inside[n] && !seg_edges.contains(&(u, v)) {
                    inside[n] = true;
                    stack.push(n);
                }
            }
        }
        inside
    }

    fn is_bad(&self, t: usize) -> bool {
        let [a, b, c] = self.dt.tris[t].v.map(|i| self.dt.pts[i]);
        let (ab, bc, ca) = (a.dist(b), b.dist(c), c.dist(a));
        let longest = ab.max(bc).max(ca);
        if longest > self.h_max {
            return true;
        }
        let shortest = ab.min(bc).min(ca);
        let r = ab * bc * ca / (4.0 * tri_signed_area(a, b, c).abs());
        // circumradius / shortest edge = 1 / (2 sin(min angle))
        r / shortest > 1.0 / (2.0 * MIN_ANGLE.to_radians().sin()) * (1.0 + 1e-9)
    }

    fn refine(&mut self) -> Result<(), MeshError> {
        loop {
            self.fix_segments()?;
            let inside = self.domain();
            let bad: Vec<(usize, [usize; 3])> = (0..self.dt.tris.len())
                .filter(|&t| inside[t] && self.dt.tris[t].alive && self.is_bad(t))
                .map(|t| (t, self.dt.tris[t].v))
                .collect();
            if bad.is_empty() {
                return Ok(());
            }
            for (t, v) in bad {
                if !self.dt.tris[t].alive || self.dt.tris[t].v != v {
                    continue;
                }
                let [a, b, c] = v.map(|i| self.dt.pts[i]);
                let cc = circumcenter(a, b, c);
                let enc: Vec<usize> = (0..self.segs.len())
                    .filter(|&s| in_diametral_circle(self.dt.pts[self.segs[s].a], self.dt.pts[self.segs[s].b], cc))
                    .collect();
                if !enc.is_empty() {
                    for s in enc {
                        self.split(s)?;
                    }
                    self.fix_segments()?;
                    continue;
                }
                let inserted = if self.shape.contains(cc) { self.insert(cc)? } else { None };
                if inserted.is_none() {
                    let g = (a + b + c) * (1.0 / 3.0);
                    if self.insert(g)?.is_none() {
                        return Err(MeshError::MeshFailure("refinement stalled".into()));
                    }
                }
            }
        }
    }
}

fn outer_tag(a: Point, b: Point) -> BoundaryTag {
    if a.y.abs() < 1e-12 && b.y.abs() < 1e-12 {
        BoundaryTag::OuterBottom
    } else if (a.y - 1.0).abs() < 1e-12 && (b.y - 1.0).abs() < 1e-12 {
        BoundaryTag::OuterTop
    } else {
        BoundaryTag::OuterSide
    }
}

/// Conforming quality triangulation of the material region of `shape`.
///
/// Every edge ends up no longer than `h_max` and every angle at least
/// [`MIN_ANGLE`]. Nodes on the boundary come first, then interior Steiner
/// points, both in insertion order.
pub fn triangulate(shape: &Shape, h_max: f64) -> Result<Mesh, MeshError> {
    if !(h_max > 0.0) || !h_max.is_finite() {
        return Err(MeshError::InvalidInput(format!("h_max must be positive, got {}", h_max)));
    }
    let mut r = Refiner { dt: Delaunay::new(), segs: Vec::new(), shape, h_max, budget: 0, input: vec![false; SUPER] };
    let area = shape.area().max(0.0);
    // generous cap: about 20x the equilateral count at this size, plus boundary
    let perimeter: f64 = shape.outer.perimeter() + shape.holes.iter().map(|h| h.perimeter()).sum::<f64>();
    r.budget = (40.0 * area / (h_max * h_max) + 40.0 * perimeter / h_max) as usize + 10_000;

    let add_loop = |r: &mut Refiner, poly: &Polygon, hole: bool| -> Result<(), MeshError> {
        let mut ids = Vec::new();
        for (a, b) in poly.edges() {
            let pieces = ((a.dist(b) / h_max).ceil() as usize).max(1);
            for k in 0..pieces {
                let p = if k == 0 { a } else { a + (b - a) * (k as f64 / pieces as f64) };
                match r.insert(p)? {
                    Some(i) => {
                        r.input[i] = true;
                        ids.push(i);
                    }
                    None => return Err(MeshError::MeshFailure(format!("duplicate boundary vertex ({}, {})", p.x, p.y))),
                }
            }
        }
        let n = ids.len();
        for i in 0..n {
            let (a, b) = (ids[i], ids[(i + 1) % n]);
            // material on the left: outer loop as is (counter-clockwise), holes reversed
            let (a, b) = if hole { (b, a) } else { (a, b) };
            let tag = if hole { BoundaryTag::Hole } else { outer_tag(r.dt.pts[a], r.dt.pts[b]) };
            r.segs.push(Seg { a, b, tag });
        }
        Ok(())
    };
    add_loop(&mut r, &shape.outer, false)?;
    for h in &shape.holes {
        add_loop(&mut r, h, true)?;
    }
    r.refine()?;

    let inside = r.domain();
    let n_pts = r.dt.pts.len();
    let mut on_boundary = vec![false; n_pts];
    for s in &r.segs {
        on_boundary[s.a] = true;
        on_boundary[s.b] = true;
    }
    let mut used = vec![false; n_pts];
    let tris_old: Vec<[usize; 3]> = (0..r.dt.tris.len()).filter(|&t| inside[t] && r.dt.tris[t].alive).map(|t| r.dt.tris[t].v).collect();
    for t in &tris_old {
        for &v in t {
            if v < SUPER {
                return Err(MeshError::MeshFailure("domain leaked to the super triangle".into()));
            }
            used[v] = true;
        }
    }
    let mut remap = vec![NONE; n_pts];
    let mut nodes = Vec::new();
    for pass in [true, false] {
        for v in SUPER..n_pts {
            if used[v] && on_boundary[v] == pass {
                remap[v] = nodes.len();
                nodes.push(r.dt.pts[v]);
            }
        }
    }
    let tris = tris_old.iter().map(|t| t.map(|v| remap[v])).collect();
    let boundary = r.segs.iter().map(|s| BoundaryEdge { nodes: [remap[s.a], remap[s.b]], tag: s.tag }).collect();
    let mesh = Mesh { nodes, tris, boundary, h_max };
    mesh.validate().map_err(|e| MeshError::MeshFailure(e.to_string()))?;
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{gen_lattice_shape, gen_voronoi_shape, LatticeParams, Provenance, VoronoiParams};

    fn square_hole(lo: f64, hi: f64) -> Shape {
        let hole = Polygon::new(vec![pt(lo, lo), pt(hi, lo), pt(hi, hi), pt(lo, hi)]).unwrap();
        Shape::new(vec![hole], Provenance { generator: "test".into(), params: serde_json::Value::Null, seed: 0 })
    }

    #[test]
    fn coarse_square_is_two_triangles() {
        let m = triangulate(&Shape::solid(), 1.5).unwrap();
        assert_eq!(m.nodes.len(), 4);
        assert_eq!(m.tris.len(), 2);
        assert!((m.total_area() - 1.0).abs() < 1e-15);
        let s = mesh_stats(&m);
        assert!((s.max_edge - 2f64.sqrt()).abs() < 1e-15);
        assert!((s.min_angle - 45.0).abs() < 1e-9);
        let tags: HashSet<BoundaryTag> = m.boundary.iter().map(|e| e.tag).collect();
        assert_eq!(tags.len(), 3);
    }

    #[test]
    fn equilateral_min_angle() {
        let h = 3f64.sqrt() / 2.0;
        let m = Mesh {
            nodes: vec![pt(0.0, 0.0), pt(1.0, 0.0), pt(0.5, h)],
            tris: vec![[0, 1, 2]],
            boundary: vec![],
            h_max: 1.0,
        };
        assert!((mesh_stats(&m).min_angle - 60.0).abs() < 1e-12);
    }

    #[test]
    fn fine_square_conserves_area_and_quality() {
        let m = triangulate(&Shape::solid(), 0.025).unwrap();
        assert!((m.total_area() - 1.0).abs() < 1e-9);
        let s = mesh_stats(&m);
        assert!(s.max_edge <= 0.025);
        assert!(s.min_angle >= MIN_ANGLE - 1e-6, "{}", s.min_angle);
        // V - E + F = 1 for a disk
        assert_eq!(m.nodes.len() as i64 - m.edges().len() as i64 + m.tris.len() as i64, 1);
    }

    #[test]
    fn square_hole_tags_and_euler() {
        let shape = square_hole(0.4, 0.6);
        let m = triangulate(&shape, 0.05).unwrap();
        assert!((m.total_area() - 0.96).abs() < 1e-12);
        assert_eq!(m.nodes.len() as i64 - m.edges().len() as i64 + m.tris.len() as i64, 0);
        for e in &m.boundary {
            let [a, b] = e.nodes.map(|i| m.nodes[i]);
            match e.tag {
                BoundaryTag::OuterBottom => assert!(a.y == 0.0 && b.y == 0.0),
                BoundaryTag::OuterTop => assert!(a.y == 1.0 && b.y == 1.0),
                BoundaryTag::OuterSide => assert!((a.x == 0.0 && b.x == 0.0) || (a.x == 1.0 && b.x == 1.0)),
                BoundaryTag::Hole => {
                    let mid = (a + b) * 0.5;
                    assert!(shape.holes[0].boundary_distance(mid) < 1e-9);
                }
            }
        }
        // boundary nodes are numbered first
        let nb = m.nodes_with_tag(&BoundaryTag::ALL);
        assert_eq!(nb, (0..nb.len()).collect::<Vec<_>>());
    }

    #[test]
    fn generated_shapes_mesh_cleanly() {
        for seed in 0..4 {
            let s = gen_voronoi_shape(&VoronoiParams { n_holes: 3 + seed as usize % 2, wall_thickness: 0.12, smoothing_degree: 8, seed }).unwrap();
            let m = triangulate(&s, 0.025).unwrap();
            assert!((m.total_area() - s.area()).abs() / s.area() < 1e-6);
            let st = mesh_stats(&m);
            assert!(st.max_edge <= 0.025 && st.min_angle >= MIN_ANGLE - 1e-6);
            let h = s.holes.len() as i64;
            assert_eq!(m.nodes.len() as i64 - m.edges().len() as i64 + m.tris.len() as i64, 1 - h);
            let l = gen_lattice_shape(&LatticeParams::new(4, 8, seed)).unwrap();
            let m = triangulate(&l, 0.025).unwrap();
            assert!((m.total_area() - l.area()).abs() / l.area() < 1e-6);
        }
    }

    #[test]
    fn finer_mesh_has_many_more_nodes() {
        let s = gen_voronoi_shape(&VoronoiParams { n_holes: 3, wall_thickness: 0.14, smoothing_degree: 10, seed: 9 }).unwrap();
        let coarse = triangulate(&s, 0.025).unwrap();
        let fine = triangulate(&s, 0.01).unwrap();
        assert!(fine.nodes.len() >= 4 * coarse.nodes.len(), "{} vs {}", fine.nodes.len(), coarse.nodes.len());
    }

    #[test]
    fn deterministic_output() {
        let s = gen_voronoi_shape(&VoronoiParams { n_holes: 4, wall_thickness: 0.1, smoothing_degree: 3, seed: 5 }).unwrap();
        assert_eq!(triangulate(&s, 0.025).unwrap(), triangulate(&s, 0.025).unwrap());
    }

    #[test]
    fn rejects_bad_h() {
        assert!(matches!(triangulate(&Shape::solid(), 0.0), Err(MeshError::InvalidInput(_))));
        assert!(matches!(triangulate(&Shape::solid(), f64::NAN), Err(MeshError::InvalidInput(_))));
    }

    #[test]
    fn validate_catches_broken_meshes() {
        let mut m = triangulate(&Shape::solid(), 1.5).unwrap();
        m.validate().unwrap();
        let mut flipped = m.clone();
        flipped.tris[0].swap(0, 1);
        assert!(flipped.validate().is_err());
        m.boundary.pop();
        assert!(m.validate().is_err());
    }

    #[test]
    fn circumcenter_is_equidistant() {
        let (a, b, c) = (pt(0.1, 0.2), pt(0.7, 0.25), pt(0.3, 0.9));
        let o = circumcenter(a, b, c);
        assert!((o.dist(a) - o.dist(b)).abs() < 1e-14 && (o.dist(a) - o.dist(c)).abs() < 1e-14);
    }
}
