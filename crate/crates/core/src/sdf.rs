//! Exact signed distance fields on a vertex-aligned grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{point_segment_distance, point_segment_distance_sq, pt, Point, Shape};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SdfError {
    #[error("grid size must be at least 2, got {0}")]
    GridTooSmall(usize),
    #[error("grid has {found} values, expected {expected}")]
    BadLength { expected: usize, found: usize },
}

pub const DEFAULT_GRID: usize = 64;

/// Row `r`, column `c` holds the value at `(c / (n - 1), r / (n - 1))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdfGrid {
    n: usize,
    values: Vec<f64>,
}

impl SdfGrid {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self, SdfError> {
        if n < 2 {
            return Err(SdfError::GridTooSmall(n));
        }
        if values.len() != n * n {
            return Err(SdfError::BadLength { expected: n * n, found: values.len() });
        }
        Ok(SdfGrid { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.n + c]
    }

    pub fn coord(&self, r: usize, c: usize) -> Point {
        grid_coord(self.n, r, c)
    }

    /// `1 x n x n` model input.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(vec![1, self.n, self.n], |i| T::from_f64(self.values[i]))
    }
}

fn grid_coord(n: usize, r: usize, c: usize) -> Point {
    let s = (n - 1) as f64;
    pt(c as f64 / s, r as f64 / s)
}

/// Distance from `x` to the nearest segment of the outer loop or any hole.
pub fn distance_to_boundary(shape: &Shape, x: Point) -> f64 {
    shape.boundary_segments().map(|(a, b)| point_segment_distance(x, a, b)).fold(f64::INFINITY, f64::min)
}

/// Positive in the material, negative in holes, zero on the boundary.
pub fn signed_distance(shape: &Shape, x: Point) -> f64 {
    let d = distance_to_boundary(shape, x);
    if d == 0.0 {
        0.0
    } else if shape.contains(x) {
        d
    } else {
        -d
    }
}

pub fn sample_sdf(shape: &Shape, n: usize) -> Result<SdfGrid, SdfError> {
    if n < 2 {
        return Err(SdfError::GridTooSmall(n));
    }
    let index = BoundaryIndex::new(shape, 32);
    let mut values = vec![0.0; n * n];
    values.par_chunks_mut(n).enumerate().for_each(|(r, row)| {
        for (c, v) in row.iter_mut().enumerate() {
            *v = index.signed_distance(grid_coord(n, r, c));
        }
    });
    Ok(SdfGrid { n, values })
}

/// Boundary segments bucketed on a uniform grid over the outer bounding box.
/// Gives the same values as [`signed_distance`]: the minimum is taken over
/// the same per-segment distances, only fewer of them are evaluated.
struct BoundaryIndex<'a> {
    shape: &'a Shape,
    segs: Vec<(Point, Point)>,
    lo: Point,
    hi: Point,
    cell: f64,
    cells: usize,
    buckets: Vec<Vec<u32>>,
    hole_boxes: Vec<(Point, Point)>,
}

fn bbox(pts: impl Iterator<Item = Point>) -> (Point, Point) {
    pts.fold((pt(f64::INFINITY, f64::INFINITY), pt(f64::NEG_INFINITY, f64::NEG_INFINITY)), |(lo, hi), p| {
        (pt(lo.x.min(p.x), lo.y.min(p.y)), pt(hi.x.max(p.x), hi.y.max(p.y)))
    })
}

impl<'a> BoundaryIndex<'a> {
    fn new(shape: &'a Shape, cells: usize) -> Self {
        let segs: Vec<(Point, Point)> = shape.boundary_segments().collect();
        let (lo, hi) = bbox(shape.outer.vertices().iter().copied());
        let cell = (hi.x - lo.x).max(hi.y - lo.y) / cells as f64;
        let mut buckets = vec![Vec::new(); cells * cells];
        let to_cell = |v: f64, o: f64| (((v - o) / cell).floor().max(0.0) as usize).min(cells - 1);
        for (k, &(a, b)) in segs.iter().enumerate() {
            let (c0, r0) = (to_cell(a.x.min(b.x), lo.x), to_cell(a.y.min(b.y), lo.y));
            let (c1, r1) = (to_cell(a.x.max(b.x), lo.x), to_cell(a.y.max(b.y), lo.y));
            for r in r0..=r1 {
                for c in c0..=c1 {
                    buckets[r * cells + c].push(k as u32);
                }
            }
        }
        let hole_boxes = shape.holes.iter().map(|h| bbox(h.vertices().iter().copied())).collect();
        BoundaryIndex { shape, segs, lo, hi, cell, cells, buckets, hole_boxes }
    }

    fn distance(&self, p: Point) -> f64 {
        let inside_box = p.x >= self.lo.x && p.x <= self.hi.x && p.y >= self.lo.y && p.y <= self.hi.y;
        if !inside_box || self.cell <= 0.0 {
            return distance_to_boundary(self.shape, p);
        }
        let to_cell = |v: f64, o: f64| (((v - o) / self.cell).floor() as usize).min(self.cells - 1);
        let (pc, pr) = (to_cell(p.x, self.lo.x) as isize, to_cell(p.y, self.lo.y) as isize);
        let n = self.cells as isize;
        let mut best = f64::INFINITY;
        for ring in 0..n {
            for r in (pr - ring)..=(pr + ring) {
                for c in (pc - ring)..=(pc + ring) {
                    let on_ring = (r - pr).abs() == ring || (c - pc).abs() == ring;
                    if !on_ring || r < 0 || c < 0 || r >= n || c >= n {
                        continue;
                    }
                    for &k in &self.buckets[(r * n + c) as usize] {
                        let (a, b) = self.segs[k as usize];
                        best = best.min(point_segment_distance_sq(p, a, b));
                    }
                }
            }
            // anything unvisited sits at least `ring` whole cells away
            let reach = ring as f64 * self.cell;
            if best <= reach * reach {
                break;
            }
        }
        // sqrt is monotone, so this equals the minimum of the square roots
        best.sqrt()
    }

    fn contains(&self, p: Point) -> bool {
        self.shape.outer.contains(p)
            && !self.shape.holes.iter().zip(&self.hole_boxes).any(|(h, (lo, hi))| {
                p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && h.contains(p)
            })
    }

    fn signed_distance(&self, p: Point) -> f64 {
        let d = self.distance(p);
        if d == 0.0 {
            0.0
        } else if self.contains(p) {
            d
        } else {
            -d
        }
    }
}
