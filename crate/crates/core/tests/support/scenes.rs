//! Random evaluation scenes with pairwise-disjoint ground truth.

use rand::Rng;
use rrc_core::evalcore::GtRegion;
use rrc_core::geometry::Quad;
use rrc_core::ingest::Detection;

use super::oracles::random_quad;

pub struct Scene {
    pub gt: Vec<GtRegion>,
    pub dets: Vec<Detection>,
}

const CELL: f64 = 120.0;
const TEXTS: &[&str] = &["EXIT", "exit", "Food", "bus", "ΟΔΟΣ", "a,b", "42"];

fn centre(cell: usize) -> (f64, f64) {
    ((cell % 3) as f64 * CELL + CELL / 2.0, (cell / 3) as f64 * CELL + CELL / 2.0)
}

/// Up to `max_gt` regions, one per cell of a 3x2 grid so none overlap, and
/// up to `max_det` detections, most of them near some region.
pub fn random_scene<R: Rng>(rng: &mut R, max_gt: usize, max_det: usize, dont_care: bool) -> Scene {
    let n_gt = rng.random_range(0..=max_gt.min(6));
    let mut cells: Vec<usize> = (0..6).collect();
    for i in 0..cells.len() {
        let j = rng.random_range(i..cells.len());
        cells.swap(i, j);
    }
    let mut gt = Vec::new();
    let mut radii = Vec::new();
    for (k, &cell) in cells[..n_gt].iter().enumerate() {
        let (cx, cy) = centre(cell);
        let r = rng.random_range(20.0..45.0);
        let care = !dont_care || rng.random_bool(0.75);
        gt.push(GtRegion {
            id: format!("w{k}"),
            quad: random_quad(rng, cx, cy, r),
            care,
            transcription: if care { TEXTS[rng.random_range(0..TEXTS.len())].to_string() } else { String::new() },
        });
        radii.push(r);
    }
    let n_det = rng.random_range(0..=max_det);
    let mut dets = Vec::new();
    for _ in 0..n_det {
        let quad = if !gt.is_empty() && rng.random_bool(0.75) {
            let k = rng.random_range(0..gt.len());
            let c = gt[k].quad.to_coords();
            let (cx, cy) = ((c[0] + c[2] + c[4] + c[6]) / 4.0, (c[1] + c[3] + c[5] + c[7]) / 4.0);
            let r = radii[k] * rng.random_range(0.7..1.3);
            let (dx, dy) = (rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0));
            random_quad(rng, cx + dx, cy + dy, r)
        } else {
            let (x, y, r) = (rng.random_range(0.0..3.0 * CELL), rng.random_range(0.0..2.0 * CELL), rng.random_range(10.0..50.0));
            random_quad(rng, x, y, r)
        };
        let transcription = if rng.random_bool(0.6) && !gt.is_empty() {
            gt[rng.random_range(0..gt.len())].transcription.clone()
        } else {
            TEXTS[rng.random_range(0..TEXTS.len())].to_string()
        };
        dets.push(Detection {
            quad,
            confidence: None,
            transcription: Some(transcription),
        });
    }
    Scene { gt, dets }
}

/// A quad strictly inside `q`: `q` shrunk about its vertex centroid.
pub fn shrunk(q: &Quad, s: f64) -> Quad {
    let c = q.to_coords();
    let cx = (c[0] + c[2] + c[4] + c[6]) / 4.0;
    let cy = (c[1] + c[3] + c[5] + c[7]) / 4.0;
    let mut out = c;
    for i in 0..4 {
        out[2 * i] = cx + (c[2 * i] - cx) * s;
        out[2 * i + 1] = cy + (c[2 * i + 1] - cy) * s;
    }
    Quad::from_coords(&out).expect("shrunk convex quad stays valid")
}
