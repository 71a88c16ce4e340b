//! Rectified word crops and the shared homography test vectors.

use std::io::Cursor;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrc_core::geometry::{warp_sample, GeometryError, Homography, Point, Quad};
use rrc_core::workflow::crop_for;
use serde::Serialize;

/// Widest crop the preview endpoint renders.
pub const MAX_CROP_WIDTH: u32 = 8192;

#[derive(Debug, Clone, Serialize)]
pub struct RectifiedCrop {
    pub width: u32,
    pub height: u32,
    pub homography: Homography,
    #[serde(skip)]
    pub image: RgbImage,
}

/// Nearest-neighbour warp of `quad` to a 64 px high crop. Output pixel
/// centres are pulled back through the inverse homography; samples falling
/// outside the source are black.
pub fn rectify(src: &RgbImage, quad: &Quad) -> Result<RectifiedCrop, GeometryError> {
    let (width, height, hm) = crop_for(quad)?;
    if width > MAX_CROP_WIDTH {
        return Err(GeometryError::InvalidOutputSize {
            width: width as f64,
            height: height as f64,
        });
    }
    let inv = hm.inverse()?;
    let mut out = RgbImage::new(width, height);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let p = warp_sample(&inv, Point::new(x as f64 + 0.5, y as f64 + 0.5));
        *px = match p {
            Ok(p) if p.x >= 0.0 && p.y >= 0.0 && p.x < src.width() as f64 && p.y < src.height() as f64 => {
                *src.get_pixel(p.x as u32, p.y as u32)
            }
            _ => Rgb([0, 0, 0]),
        };
    }
    Ok(RectifiedCrop {
        width,
        height,
        homography: hm,
        image: out,
    })
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("png encodes into memory");
    out.into_inner()
}

#[derive(Debug, Clone, Serialize)]
pub struct HomographyVector {
    pub quad: Quad,
    pub width: u32,
    pub height: u32,
    pub homography: [[f64; 3]; 3],
}

/// Random quads with their crop size and rectification homography, for
/// clients that reimplement the transform.
pub fn homography_vectors(count: usize, seed: u64) -> Vec<HomographyVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let (cx, cy, r) = (rng.random_range(50.0..1500.0), rng.random_range(50.0..1000.0), rng.random_range(5.0..200.0));
        let mut pts = [Point::new(0.0, 0.0); 4];
        for (k, p) in pts.iter_mut().enumerate() {
            let t = std::f64::consts::FRAC_PI_2 * k as f64 + rng.random_range(-0.6..0.6) + std::f64::consts::PI * 1.25;
            let rr = r * rng.random_range(0.5..1.0);
            *p = Point::new(
                ((cx + rr * t.cos()) * 100.0).round() / 100.0,
                ((cy + rr * t.sin() * 0.5) * 100.0).round() / 100.0,
            );
        }
        let Ok(quad) = Quad::from_points(pts) else {
            continue;
        };
        let Ok((width, height, hm)) = crop_for(&quad) else {
            continue;
        };
        out.push(HomographyVector {
            quad,
            width,
            height,
            homography: hm.m,
        });
    }
    out
}

/// Vectors as JSON with one vector per line.
pub fn vectors_json(vectors: &[HomographyVector]) -> String {
    let lines: Vec<String> = vectors
        .iter()
        .map(|v| serde_json::to_string(v).expect("vector serializes"))
        .collect();
    format!(
        "{{\"crop_height\":{},\"vectors\":[\n{}\n]}}\n",
        rrc_core::workflow::CROP_HEIGHT,
        lines.join(",\n")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rectangle_crop_is_a_scaled_axis_crop() {
        let src = RgbImage::from_fn(200, 100, |x, y| Rgb([x as u8, y as u8, 0]));
        let q = Quad::axis_rect(20.0, 10.0, 84.0, 42.0).unwrap();
        let c = rectify(&src, &q).unwrap();
        assert_eq!((c.width, c.height), (128, 64));
        for (x, y, px) in c.image.enumerate_pixels() {
            assert_eq!(*px, *src.get_pixel(20 + x / 2, 10 + y / 2), "at {x},{y}");
        }
    }

    #[test]
    fn vectors_are_deterministic() {
        let a = serde_json::to_string(&homography_vectors(20, 1)).unwrap();
        assert_eq!(a, serde_json::to_string(&homography_vectors(20, 1)).unwrap());
        assert_eq!(homography_vectors(20, 1).len(), 20);
    }
}
