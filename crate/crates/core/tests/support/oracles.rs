//! Independent reference computations used by the test suites.
//!
//! Nothing here calls into the clipping, matching or edit-distance code it
//! is meant to check.
#![allow(dead_code)]

use rand::Rng;
use rrc_core::geometry::{Point, Quad};

/// Horizontal extent of a convex polygon at height `y`, if any.
fn row_span(poly: &[Point; 4], y: f64) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..4 {
        let a = poly[i];
        let b = poly[(i + 1) % 4];
        let (ymin, ymax) = (a.y.min(b.y), a.y.max(b.y));
        if y < ymin || y > ymax || a.y == b.y {
            continue;
        }
        let t = (y - a.y) / (b.y - a.y);
        let x = a.x + t * (b.x - a.x);
        lo = lo.min(x);
        hi = hi.max(x);
    }
    (lo <= hi).then_some((lo, hi))
}

/// Number of lattice columns `x0 + (k + 0.5) h` inside `[lo, hi]`.
fn count_cols(lo: f64, hi: f64, x0: f64, h: f64) -> f64 {
    let first = ((lo - x0) / h - 0.5).ceil();
    let last = ((hi - x0) / h - 0.5).floor();
    (last - first + 1.0).max(0.0)
}

/// Grid point-in-polygon counting at spacing `h`, one scanline per grid row.
/// Returns (area a, area b, area a∩b).
pub fn raster_areas(a: &Quad, b: &Quad, h: f64) -> (f64, f64, f64) {
    let (pa, pb) = (a.corners(), b.corners());
    let ys = pa.iter().chain(pb.iter()).map(|p| p.y);
    let xs = pa.iter().chain(pb.iter()).map(|p| p.x);
    let y0 = ys.clone().fold(f64::INFINITY, f64::min).floor();
    let y1 = ys.fold(f64::NEG_INFINITY, f64::max).ceil();
    let x0 = xs.fold(f64::INFINITY, f64::min).floor();
    let rows = ((y1 - y0) / h).ceil() as usize;
    let (mut ca, mut cb, mut ci) = (0.0, 0.0, 0.0);
    for r in 0..rows {
        let y = y0 + (r as f64 + 0.5) * h;
        let sa = row_span(pa, y);
        let sb = row_span(pb, y);
        if let Some((l, r)) = sa {
            ca += count_cols(l, r, x0, h);
        }
        if let Some((l, r)) = sb {
            cb += count_cols(l, r, x0, h);
        }
        if let (Some(s), Some(t)) = (sa, sb) {
            let (l, r) = (s.0.max(t.0), s.1.min(t.1));
            if l <= r {
                ci += count_cols(l, r, x0, h);
            }
        }
    }
    let cell = h * h;
    (ca * cell, cb * cell, ci * cell)
}

pub fn raster_iou(a: &Quad, b: &Quad, h: f64) -> f64 {
    let (aa, ab, ai) = raster_areas(a, b, h);
    if ai == 0.0 {
        0.0
    } else {
        ai / (aa + ab - ai)
    }
}

/// Monte-Carlo area estimate by uniform sampling in the bounding box.
pub fn monte_carlo_area<R: Rng>(q: &Quad, samples: usize, rng: &mut R) -> f64 {
    let c = q.corners();
    let (x0, x1) = (
        c.iter().map(|p| p.x).fold(f64::INFINITY, f64::min),
        c.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max),
    );
    let (y0, y1) = (
        c.iter().map(|p| p.y).fold(f64::INFINITY, f64::min),
        c.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max),
    );
    let mut hits = 0usize;
    for _ in 0..samples {
        let p = Point::new(rng.random_range(x0..x1), rng.random_range(y0..y1));
        let inside = (0..4).all(|i| {
            let a = c[i];
            let b = c[(i + 1) % 4];
            (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x) >= 0.0
        });
        if inside {
            hits += 1;
        }
    }
    hits as f64 / samples as f64 * (x1 - x0) * (y1 - y0)
}

/// Random convex quad around `(cx, cy)` with radius about `r`.
pub fn random_quad<R: Rng>(rng: &mut R, cx: f64, cy: f64, r: f64) -> Quad {
    loop {
        let mut angles: Vec<f64> = (0..4)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(f64::total_cmp);
        let stretch = rng.random_range(0.3..1.0);
        let pts: Vec<Point> = angles
            .iter()
            .map(|t| {
                let rr = r * rng.random_range(0.7..1.0);
                Point::new(cx + rr * t.cos(), cy + rr * stretch * t.sin())
            })
            .collect();
        if let Ok(q) = Quad::from_points([pts[0], pts[1], pts[2], pts[3]]) {
            if q.area() > 1.0 {
                return q;
            }
        }
    }
}

/// Solves the 8x8 rectification system with nalgebra's LU decomposition,
/// without any coordinate conditioning.
pub fn reference_homography(q: &Quad, w: f64, h: f64) -> [[f64; 3]; 3] {
    let src = q.corners();
    let dst = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    let mut a = nalgebra::SMatrix::<f64, 8, 8>::zeros();
    let mut b = nalgebra::SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (x, y) = (src[i].x, src[i].y);
        let (u, v) = dst[i];
        let r = 2 * i;
        a[(r, 0)] = x;
        a[(r, 1)] = y;
        a[(r, 2)] = 1.0;
        a[(r, 6)] = -u * x;
        a[(r, 7)] = -u * y;
        b[r] = u;
        a[(r + 1, 3)] = x;
        a[(r + 1, 4)] = y;
        a[(r + 1, 5)] = 1.0;
        a[(r + 1, 6)] = -v * x;
        a[(r + 1, 7)] = -v * y;
        b[r + 1] = v;
    }
    let s = a.lu().solve(&b).expect("reference system singular");
    [[s[0], s[1], s[2]], [s[3], s[4], s[5]], [s[6], s[7], 1.0]]
}

/// Maximum bipartite matching size by exhaustive search.
pub fn max_matching(adj: &[Vec<bool>]) -> usize {
    fn go(adj: &[Vec<bool>], row: usize, used: &mut Vec<bool>) -> usize {
        if row == adj.len() {
            return 0;
        }
        let mut best = go(adj, row + 1, used);
        for j in 0..adj[row].len() {
            if adj[row][j] && !used[j] {
                used[j] = true;
                best = best.max(1 + go(adj, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    let cols = adj.first().map_or(0, |r| r.len());
    go(adj, 0, &mut vec![false; cols])
}

/// Levenshtein distance by the full recurrence, memoized.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut memo = vec![vec![usize::MAX; b.len() + 1]; a.len() + 1];
    fn rec(a: &[char], b: &[char], i: usize, j: usize, memo: &mut Vec<Vec<usize>>) -> usize {
        if memo[i][j] != usize::MAX {
            return memo[i][j];
        }
        let v = if i == a.len() {
            b.len() - j
        } else if j == b.len() {
            a.len() - i
        } else if a[i] == b[j] {
            rec(a, b, i + 1, j + 1, memo)
        } else {
            1 + rec(a, b, i + 1, j, memo)
                .min(rec(a, b, i, j + 1, memo))
                .min(rec(a, b, i + 1, j + 1, memo))
        };
        memo[i][j] = v;
        v
    }
    rec(&a, &b, 0, 0, &mut memo)
}
