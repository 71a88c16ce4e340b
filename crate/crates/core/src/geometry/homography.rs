use serde::{Deserialize, Serialize};

use super::{GeometryError, Point, Quad};

/// Projective 3x3 transform, row-major, normalized so `m[2][2] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    pub m: [[f64; 3]; 3],
}

impl Homography {
    pub const IDENTITY: Homography = Homography {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn translation(dx: f64, dy: f64) -> Homography {
        Homography {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]],
        }
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Homography, GeometryError> {
        let det = self.determinant();
        if det.abs() <= 1e-12 || !det.is_finite() {
            return Err(GeometryError::NotInvertible);
        }
        let m = &self.m;
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        let mut inv = Homography { m: adj };
        let scale = if inv.m[2][2].abs() > 1e-12 {
            inv.m[2][2]
        } else {
            det
        };
        inv.scale_by(1.0 / scale);
        Ok(inv)
    }

    pub fn compose(&self, rhs: &Homography) -> Homography {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[r][k] * rhs.m[k][c]).sum();
            }
        }
        Homography { m: out }
    }

    fn scale_by(&mut self, s: f64) {
        for row in self.m.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn apply(&self, p: Point) -> Result<Point, GeometryError> {
        warp_sample(self, p)
    }
}

/// Projective application with homogeneous divide.
pub fn warp_sample(h: &Homography, p: Point) -> Result<Point, GeometryError> {
    let m = &h.m;
    let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
    if w.abs() < 1e-12 {
        return Err(GeometryError::PointAtInfinity);
    }
    Ok(Point::new(
        (m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / w,
        (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / w,
    ))
}

/// Similarity transform taking `pts` to zero centroid and mean distance sqrt(2).
fn conditioning(pts: &[Point; 4]) -> Homography {
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / 4.0;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / 4.0;
    let mean = pts
        .iter()
        .map(|p| (p.x - cx).hypot(p.y - cy))
        .sum::<f64>()
        / 4.0;
    let s = if mean > 0.0 {
        std::f64::consts::SQRT_2 / mean
    } else {
        1.0
    };
    Homography {
        m: [[s, 0.0, -s * cx], [0.0, s, -s * cy], [0.0, 0.0, 1.0]],
    }
}

/// Gaussian elimination with partial pivoting on an 8x8 system.
fn solve8(mut a: [[f64; 9]; 8]) -> Option<[f64; 8]> {
    for col in 0..8 {
        let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-9 {
            return None;
        }
        a.swap(col, pivot);
        for row in col + 1..8 {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..9 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut x = [0.0; 8];
    for row in (0..8).rev() {
        let s: f64 = (row + 1..8).map(|k| a[row][k] * x[k]).sum();
        x[row] = (a[row][8] - s) / a[row][row];
    }
    Some(x)
}

fn dlt(src: &[Point; 4], dst: &[Point; 4]) -> Option<Homography> {
    let mut a = [[0.0; 9]; 8];
    for i in 0..4 {
        let (x, y) = (src[i].x, src[i].y);
        let (u, v) = (dst[i].x, dst[i].y);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    let h = solve8(a)?;
    Some(Homography {
        m: [[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]],
    })
}

/// Homography sending corner `i` of `q` to corner `i` of the output
/// rectangle `(0,0), (w,0), (w,h), (0,h)`.
pub fn rectification_homography(
    q: &Quad,
    out_w: f64,
    out_h: f64,
) -> Result<Homography, GeometryError> {
    if !(out_w > 0.0 && out_h > 0.0 && out_w.is_finite() && out_h.is_finite()) {
        return Err(GeometryError::InvalidOutputSize {
            width: out_w,
            height: out_h,
        });
    }
    let src = *q.corners();
    let dst = [
        Point::new(0.0, 0.0),
        Point::new(out_w, 0.0),
        Point::new(out_w, out_h),
        Point::new(0.0, out_h),
    ];
    let ts = conditioning(&src);
    let td = conditioning(&dst);
    let map = |t: &Homography, p: &[Point; 4]| -> Result<[Point; 4], GeometryError> {
        Ok([
            warp_sample(t, p[0])?,
            warp_sample(t, p[1])?,
            warp_sample(t, p[2])?,
            warp_sample(t, p[3])?,
        ])
    };
    let hn = dlt(&map(&ts, &src)?, &map(&td, &dst)?).ok_or(GeometryError::DegenerateQuad)?;
    let td_inv = td.inverse().map_err(|_| GeometryError::DegenerateQuad)?;
    let mut h = td_inv.compose(&hn).compose(&ts);
    let s = h.m[2][2];
    if s.abs() < 1e-12 || !s.is_finite() {
        return Err(GeometryError::DegenerateQuad);
    }
    h.scale_by(1.0 / s);
    h.m[2][2] = 1.0;
    if h.determinant().abs() <= 1e-12 {
        return Err(GeometryError::DegenerateQuad);
    }
    Ok(h)
}
