//! Planar geometry for quadrilateral ground truth and detections.
//!
//! Everything works in double precision image coordinates (y grows
//! downward). Quads are stored in a canonical corner order so that storage
//! and matching are deterministic.

mod homography;

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use homography::{rectification_homography, warp_sample, Homography};

/// Absolute tolerance used for geometric predicates at pixel scale.
pub const EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("expected 8 coordinates, got {0}")]
    WrongCoordinateCount(usize),
    #[error("coordinate {index} is not a finite number")]
    NonFinite { index: usize },
    #[error("edges {vertices:?} cross each other")]
    SelfIntersecting { vertices: Vec<usize> },
    #[error("quadrilateral has zero area (vertices {vertices:?})")]
    ZeroArea { vertices: Vec<usize> },
    #[error("quadrilateral is not convex at vertices {vertices:?}")]
    NonConvex { vertices: Vec<usize> },
    #[error("rectification system is singular")]
    DegenerateQuad,
    #[error("output size must be positive, got {width}x{height}")]
    InvalidOutputSize { width: f64, height: f64 },
    #[error("homography is not invertible")]
    NotInvertible,
    #[error("point maps to infinity")]
    PointAtInfinity,
}

impl GeometryError {
    /// Stable machine-readable code, used in API and validation reports.
    pub fn code(&self) -> &'static str {
        match self {
            GeometryError::WrongCoordinateCount(_) => "WrongCoordinateCount",
            GeometryError::NonFinite { .. } => "NonFinite",
            GeometryError::SelfIntersecting { .. } => "SelfIntersecting",
            GeometryError::ZeroArea { .. } => "ZeroArea",
            GeometryError::NonConvex { .. } => "NonConvex",
            GeometryError::DegenerateQuad => "DegenerateQuad",
            GeometryError::InvalidOutputSize { .. } => "InvalidOutputSize",
            GeometryError::NotInvertible => "NotInvertible",
            GeometryError::PointAtInfinity => "PointAtInfinity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

fn cross(a: Point, b: Point) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Orientation of `c` relative to the directed line `a -> b`.
fn orient(a: Point, b: Point, c: Point) -> f64 {
    cross(b.sub(a), c.sub(a))
}

/// Signed shoelace area. Positive for clockwise-on-screen winding.
pub fn signed_area(pts: &[Point]) -> f64 {
    if pts.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..pts.len() {
        let p = pts[i];
        let q = pts[(i + 1) % pts.len()];
        acc += p.x * q.y - q.x * p.y;
    }
    acc / 2.0
}

fn segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = orient(a, b, c);
    let d2 = orient(a, b, d);
    let d3 = orient(c, d, a);
    let d4 = orient(c, d, b);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// Ordered convex quadrilateral: top-left corner first, clockwise on screen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 8]", into = "[f64; 8]")]
pub struct Quad {
    corners: [Point; 4],
}

impl Quad {
    /// Validates and canonicalizes 8 raw coordinates `x1,y1,...,x4,y4`.
    pub fn from_coords(raw: &[f64]) -> Result<Quad, GeometryError> {
        if raw.len() != 8 {
            return Err(GeometryError::WrongCoordinateCount(raw.len()));
        }
        let mut pts = [Point::new(0.0, 0.0); 4];
        for (i, p) in pts.iter_mut().enumerate() {
            *p = Point::new(raw[2 * i], raw[2 * i + 1]);
        }
        Quad::from_points(pts)
    }

    pub fn from_points(pts: [Point; 4]) -> Result<Quad, GeometryError> {
        for (i, p) in pts.iter().enumerate() {
            if !p.x.is_finite() {
                return Err(GeometryError::NonFinite { index: 2 * i });
            }
            if !p.y.is_finite() {
                return Err(GeometryError::NonFinite { index: 2 * i + 1 });
            }
        }

        if segments_cross(pts[0], pts[1], pts[2], pts[3]) {
            return Err(GeometryError::SelfIntersecting {
                vertices: vec![0, 1, 2, 3],
            });
        }
        if segments_cross(pts[1], pts[2], pts[3], pts[0]) {
            return Err(GeometryError::SelfIntersecting {
                vertices: vec![1, 2, 3, 0],
            });
        }

        let area = signed_area(&pts);
        if area.abs() < EPS {
            return Err(GeometryError::ZeroArea {
                vertices: vec![0, 1, 2, 3],
            });
        }

        let sign = area.signum();
        let bad: Vec<usize> = (0..4)
            .filter(|&i| {
                let prev = pts[(i + 3) % 4];
                let next = pts[(i + 1) % 4];
                cross(pts[i].sub(prev), next.sub(pts[i])) * sign <= EPS
            })
            .collect();
        if !bad.is_empty() {
            return Err(GeometryError::NonConvex { vertices: bad });
        }

        let mut ordered = if sign > 0.0 {
            pts
        } else {
            [pts[0], pts[3], pts[2], pts[1]]
        };
        let start = (0..4)
            .min_by(|&i, &j| corner_rank(ordered[i], ordered[j]))
            .unwrap_or(0);
        ordered.rotate_left(start);
        Ok(Quad { corners: ordered })
    }

    /// Axis-aligned rectangle given two opposite corners.
    pub fn axis_rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Quad, GeometryError> {
        let (l, r) = (x0.min(x1), x0.max(x1));
        let (t, b) = (y0.min(y1), y0.max(y1));
        Quad::from_coords(&[l, t, r, t, r, b, l, b])
    }

    pub fn corners(&self) -> &[Point; 4] {
        &self.corners
    }

    pub fn to_coords(&self) -> [f64; 8] {
        let c = &self.corners;
        [
            c[0].x, c[0].y, c[1].x, c[1].y, c[2].x, c[2].y, c[3].x, c[3].y,
        ]
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.corners)
    }

    /// Mean horizontal and vertical edge lengths.
    pub fn mean_extent(&self) -> (f64, f64) {
        let c = &self.corners;
        let len = |a: Point, b: Point| (a.x - b.x).hypot(a.y - b.y);
        let w = (len(c[0], c[1]) + len(c[3], c[2])) / 2.0;
        let h = (len(c[0], c[3]) + len(c[1], c[2])) / 2.0;
        (w, h)
    }

    /// Returns a copy with every coordinate multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Result<Quad, GeometryError> {
        let c = self.to_coords().map(|v| v * s);
        Quad::from_coords(&c)
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.corners {
            b.0 = b.0.min(p.x);
            b.1 = b.1.min(p.y);
            b.2 = b.2.max(p.x);
            b.3 = b.3.max(p.y);
        }
        b
    }

    fn total_cmp(&self, other: &Quad) -> Ordering {
        self.to_coords()
            .iter()
            .zip(other.to_coords().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    }
}

fn corner_rank(a: Point, b: Point) -> Ordering {
    (a.x + a.y)
        .total_cmp(&(b.x + b.y))
        .then(a.y.total_cmp(&b.y))
        .then(a.x.total_cmp(&b.x))
}

impl TryFrom<[f64; 8]> for Quad {
    type Error = GeometryError;

    fn try_from(raw: [f64; 8]) -> Result<Self, Self::Error> {
        Quad::from_coords(&raw)
    }
}

impl From<Quad> for [f64; 8] {
    fn from(q: Quad) -> Self {
        q.to_coords()
    }
}

/// Convex polygon with 0 (empty) or 3..=8 vertices, clockwise on screen.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvexPolygon {
    vertices: Vec<Point>,
}

impl ConvexPolygon {
    pub fn empty() -> Self {
        ConvexPolygon::default()
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices).max(0.0)
    }
}

impl From<Quad> for ConvexPolygon {
    fn from(q: Quad) -> Self {
        ConvexPolygon {
            vertices: q.corners.to_vec(),
        }
    }
}

fn clip_by_edge(subject: &[Point], e0: Point, e1: Point, out: &mut Vec<Point>) {
    out.clear();
    let n = subject.len();
    if n == 0 {
        return;
    }
    let edge = e1.sub(e0);
    let side = |p: Point| cross(edge, p.sub(e0));
    let mut prev = subject[n - 1];
    let mut prev_side = side(prev);
    for &cur in subject {
        let cur_side = side(cur);
        let cur_in = cur_side >= 0.0;
        let prev_in = prev_side >= 0.0;
        if cur_in != prev_in {
            let t = prev_side / (prev_side - cur_side);
            out.push(Point::new(
                prev.x + t * (cur.x - prev.x),
                prev.y + t * (cur.y - prev.y),
            ));
        }
        if cur_in {
            out.push(cur);
        }
        prev = cur;
        prev_side = cur_side;
    }
}

fn tidy(mut pts: Vec<Point>) -> ConvexPolygon {
    pts.dedup_by(|a, b| (a.x - b.x).abs() <= EPS && (a.y - b.y).abs() <= EPS);
    while pts.len() > 1 {
        let (f, l) = (pts[0], pts[pts.len() - 1]);
        if (f.x - l.x).abs() <= EPS && (f.y - l.y).abs() <= EPS {
            pts.pop();
        } else {
            break;
        }
    }
    // Only drop collinear vertices when needed to respect the vertex cap.
    while pts.len() > 8 {
        let n = pts.len();
        let (idx, _) = (0..n)
            .map(|i| {
                let prev = pts[(i + n - 1) % n];
                let next = pts[(i + 1) % n];
                (i, cross(pts[i].sub(prev), next.sub(pts[i])).abs())
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or((0, 0.0));
        pts.remove(idx);
    }
    if pts.len() < 3 || signed_area(&pts) <= 0.0 {
        return ConvexPolygon::empty();
    }
    ConvexPolygon { vertices: pts }
}

/// Convex intersection of two quads (Sutherland–Hodgman clip of `a` by `b`).
pub fn intersect(a: &Quad, b: &Quad) -> ConvexPolygon {
    let (ab, bb) = (a.bbox(), b.bbox());
    if ab.2 <= bb.0 || bb.2 <= ab.0 || ab.3 <= bb.1 || bb.3 <= ab.1 {
        return ConvexPolygon::empty();
    }
    let mut poly: Vec<Point> = a.corners.to_vec();
    let mut scratch = Vec::with_capacity(8);
    for i in 0..4 {
        clip_by_edge(&poly, b.corners[i], b.corners[(i + 1) % 4], &mut scratch);
        std::mem::swap(&mut poly, &mut scratch);
        if poly.is_empty() {
            return ConvexPolygon::empty();
        }
    }
    tidy(poly)
}

/// Intersection area, computed with the arguments in a canonical order so
/// that the result is exactly symmetric.
pub fn intersection_area(a: &Quad, b: &Quad) -> f64 {
    let (lo, hi) = if a.total_cmp(b) == Ordering::Greater {
        (b, a)
    } else {
        (a, b)
    };
    intersect(lo, hi).area()
}

pub fn iou(a: &Quad, b: &Quad) -> f64 {
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(c: [f64; 8]) -> Quad {
        Quad::from_coords(&c).unwrap()
    }

    #[test]
    fn canonical_rectangle_keeps_order() {
        let r = q([0.0, 0.0, 10.0, 0.0, 10.0, 5.0, 0.0, 5.0]);
        assert_eq!(r.to_coords(), [0.0, 0.0, 10.0, 0.0, 10.0, 5.0, 0.0, 5.0]);
    }

    #[test]
    fn rotated_vertex_list_is_reordered() {
        let r = q([10.0, 0.0, 10.0, 5.0, 0.0, 5.0, 0.0, 0.0]);
        assert_eq!(r.to_coords(), [0.0, 0.0, 10.0, 0.0, 10.0, 5.0, 0.0, 5.0]);
    }

    #[test]
    fn counter_clockwise_input_is_reversed() {
        let r = q([0.0, 0.0, 0.0, 5.0, 10.0, 5.0, 10.0, 0.0]);
        assert_eq!(r.to_coords(), [0.0, 0.0, 10.0, 0.0, 10.0, 5.0, 0.0, 5.0]);
    }

    #[test]
    fn bow_tie_is_self_intersecting() {
        let err = Quad::from_coords(&[0.0, 0.0, 10.0, 5.0, 10.0, 0.0, 0.0, 5.0]).unwrap_err();
        assert!(matches!(err, GeometryError::SelfIntersecting { .. }), "{err:?}");
    }

    #[test]
    fn concave_and_degenerate_inputs() {
        let err = Quad::from_coords(&[0.0, 0.0, 10.0, 0.0, 3.0, 3.0, 0.0, 10.0]).unwrap_err();
        assert_eq!(err, GeometryError::NonConvex { vertices: vec![2] });
        let err = Quad::from_coords(&[0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 3.0, 0.0]).unwrap_err();
        assert!(matches!(err, GeometryError::ZeroArea { .. }));
        let err = Quad::from_coords(&[0.0, 0.0, 5.0, 0.0, 10.0, 0.0, 5.0, 5.0]).unwrap_err();
        assert!(matches!(err, GeometryError::NonConvex { .. }));
        let err = Quad::from_coords(&[0.0, f64::NAN, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap_err();
        assert_eq!(err, GeometryError::NonFinite { index: 1 });
        assert_eq!(
            Quad::from_coords(&[0.0; 6]).unwrap_err(),
            GeometryError::WrongCoordinateCount(6)
        );
    }

    #[test]
    fn areas() {
        assert_eq!(q([0.0, 0.0, 10.0, 0.0, 10.0, 5.0, 0.0, 5.0]).area(), 50.0);
        assert_eq!(ConvexPolygon::empty().area(), 0.0);
        assert_eq!(q([0.0, 0.0, 4.0, 0.0, 6.0, 3.0, 1.0, 3.0]).area(), 13.5);
    }

    #[test]
    fn intersections() {
        let a = Quad::axis_rect(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(intersect(&a, &a).area(), 100.0);
        let far = Quad::axis_rect(20.0, 20.0, 30.0, 30.0).unwrap();
        assert!(intersect(&a, &far).is_empty());
        let b = Quad::axis_rect(5.0, 0.0, 15.0, 10.0).unwrap();
        assert!((intersect(&a, &b).area() - 50.0).abs() < 1e-9);
        assert!((iou(&a, &b) - 50.0 / 150.0).abs() < 1e-9);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &far), 0.0);
    }

    #[test]
    fn touching_edges_have_zero_overlap() {
        let a = Quad::axis_rect(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = Quad::axis_rect(10.0, 0.0, 20.0, 10.0).unwrap();
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn serde_uses_flat_coordinates() {
        let a = Quad::axis_rect(0.0, 0.0, 10.0, 5.0).unwrap();
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(s, "[0.0,0.0,10.0,0.0,10.0,5.0,0.0,5.0]");
        assert!(serde_json::from_str::<Quad>("[0,0,10,5,10,0,0,5]").is_err());
    }
}
