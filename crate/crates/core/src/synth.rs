//! Deterministic synthetic corpora: images, annotation trees with
//! don't-care words, and noisy result files resembling real method output.

use std::io::Cursor;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datastore::{AnnotationNode, AnnotationTree, Datastore, DatastoreError, Granularity, Region, Subset};
use crate::evalcore::gt_regions;
use crate::geometry::Quad;
use crate::ingest::{serialize_detection, Detection, LineGrammar};

pub const IMAGE_WIDTH: u32 = 640;
pub const IMAGE_HEIGHT: u32 = 480;

const WORDS: &[&str] = &[
    "EXIT", "Food", "open", "24h", "CAFÉ", "Straße", "ΟΔΟΣ", "pharmacy", "No.7", "SALE", "a,b", "Hotel",
    "parking", "STOP", "Tiredness", "kills", "ÉCOLE", "bus", "Zone", "42",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small PNG with seeded noise so every seed yields distinct bytes.
pub fn png(width: u32, height: u32, seed: u64) -> Vec<u8> {
    let mut r = rng(seed ^ 0x5eed);
    let img = image::RgbImage::from_fn(width, height, |x, y| {
        let n: u8 = r.random();
        image::Rgb([(x % 256) as u8, (y % 256) as u8, n])
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("png encodes");
    out.into_inner()
}

fn skewed(x0: f64, y0: f64, w: f64, h: f64, shear: f64) -> Quad {
    let coords = [x0, y0, x0 + w, y0 + shear, x0 + w, y0 + shear + h, x0, y0 + h];
    Quad::from_coords(&coords.map(|v| (v * 100.0).round() / 100.0))
        .unwrap_or_else(|_| Quad::axis_rect(x0, y0, x0 + w, y0 + h).expect("positive box"))
}

/// Lines of words laid out on a grid so no two regions overlap. About one
/// word in six is marked don't-care.
pub fn random_tree<R: Rng>(r: &mut R, width: u32, height: u32) -> AnnotationTree {
    let rows = ((height as f64 - 40.0) / 60.0).floor().max(1.0) as usize;
    let mut tree = Vec::new();
    for row in 0..rows {
        if r.random_bool(0.3) {
            continue;
        }
        let y = 20.0 + row as f64 * 60.0 + r.random_range(0.0..8.0);
        let mut x = 10.0 + r.random_range(0.0..20.0);
        let line_id = format!("l{row}");
        let mut words = Vec::new();
        let n = r.random_range(1..=4);
        for k in 0..n {
            let w = r.random_range(40.0..110.0);
            if x + w > width as f64 - 10.0 {
                break;
            }
            let h = r.random_range(18.0..30.0);
            let shear = r.random_range(-4.0..4.0);
            let quad = skewed(x, y + 6.0, w, h, shear);
            let care = !r.random_bool(1.0 / 6.0);
            let text = if care { (*WORDS.choose(r).expect("non-empty")).to_string() } else { String::new() };
            words.push(
                AnnotationNode::new(format!("{line_id}_w{k}"), Granularity::Word, Region::Quad(quad))
                    .with_text(text)
                    .with_care(care),
            );
            x += w + r.random_range(15.0..40.0);
        }
        if words.is_empty() {
            continue;
        }
        let line = AnnotationNode::new(line_id, Granularity::Line, Region::Rect([10.0, y, x, y + 44.0]))
            .with_children(words);
        tree.push(line);
    }
    tree
}

fn jitter<R: Rng>(r: &mut R, q: &Quad, amount: f64) -> Quad {
    let c = q.to_coords().map(|v| v + r.random_range(-amount..=amount));
    Quad::from_coords(&c).unwrap_or(*q)
}

fn scaled_about_centre(q: &Quad, s: f64) -> Quad {
    let c = q.to_coords();
    let cx = (c[0] + c[2] + c[4] + c[6]) / 4.0;
    let cy = (c[1] + c[3] + c[5] + c[7]) / 4.0;
    let mut out = c;
    for i in 0..4 {
        out[2 * i] = cx + (c[2 * i] - cx) * s;
        out[2 * i + 1] = cy + (c[2 * i + 1] - cy) * s;
    }
    Quad::from_coords(&out).unwrap_or(*q)
}

fn halves(q: &Quad) -> Option<(Quad, Quad)> {
    let c = q.to_coords();
    let (mx0, my0) = ((c[0] + c[2]) / 2.0, (c[1] + c[3]) / 2.0);
    let (mx1, my1) = ((c[6] + c[4]) / 2.0, (c[7] + c[5]) / 2.0);
    let left = Quad::from_coords(&[c[0], c[1], mx0, my0, mx1, my1, c[6], c[7]]).ok()?;
    let right = Quad::from_coords(&[mx0, my0, c[2], c[3], c[4], c[5], mx1, my1]).ok()?;
    Some((left, right))
}

fn misread<R: Rng>(r: &mut R, text: &str) -> String {
    let mut chars: Vec<char> = text.chars().collect();
    match r.random_range(0..3) {
        0 => text.to_lowercase(),
        1 if chars.len() > 1 => {
            chars.remove(r.random_range(0..chars.len()));
            chars.into_iter().collect()
        }
        _ => format!("{text}x"),
    }
}

/// Noisy detections for one image: matches with jitter, loose boxes, split
/// words, misses, detections on don't-care words and false positives.
pub fn noisy_detections<R: Rng>(r: &mut R, tree: &AnnotationTree, width: u32, height: u32) -> Vec<Detection> {
    let mut out = Vec::new();
    let conf = |r: &mut R| Some((r.random_range(0.05..1.0f64) * 100.0).round() / 100.0);
    for g in gt_regions(tree, Granularity::Word) {
        if !g.care {
            if r.random_bool(0.5) {
                out.push(Detection {
                    quad: scaled_about_centre(&g.quad, 0.8),
                    confidence: conf(r),
                    transcription: Some("???".into()),
                });
            }
            continue;
        }
        let text = if r.random_bool(0.8) { g.transcription.clone() } else { misread(r, &g.transcription) };
        let roll: f64 = r.random();
        if roll < 0.55 {
            out.push(Detection {
                quad: jitter(r, &g.quad, 2.0),
                confidence: conf(r),
                transcription: Some(text),
            });
        } else if roll < 0.7 {
            out.push(Detection {
                quad: scaled_about_centre(&g.quad, r.random_range(1.1..1.5)),
                confidence: conf(r),
                transcription: Some(text),
            });
        } else if roll < 0.82 {
            if let Some((a, b)) = halves(&g.quad) {
                let (ta, tb) = text.split_at(text.char_indices().nth(text.chars().count() / 2).map_or(0, |(i, _)| i));
                out.push(Detection {
                    quad: a,
                    confidence: conf(r),
                    transcription: Some(ta.to_string()),
                });
                out.push(Detection {
                    quad: b,
                    confidence: conf(r),
                    transcription: Some(tb.to_string()),
                });
            }
        }
    }
    for _ in 0..r.random_range(0..3) {
        let x = r.random_range(0.0..width as f64 - 60.0);
        let y = r.random_range(0.0..height as f64 - 30.0);
        out.push(Detection {
            quad: Quad::axis_rect(x, y, x + 50.0, y + 20.0).expect("positive box"),
            confidence: conf(r),
            transcription: Some("noise".into()),
        });
    }
    out
}

/// Result file text for one image under `grammar`.
pub fn result_file<R: Rng>(r: &mut R, tree: &AnnotationTree, grammar: LineGrammar) -> String {
    if grammar == LineGrammar::TranscriptionOnly {
        let mut s = String::new();
        let regions = gt_regions(tree, Granularity::Word);
        let keep = regions.len().saturating_sub(usize::from(r.random_bool(0.2)));
        for g in &regions[..keep] {
            let text = if !g.care {
                "?".to_string()
            } else if r.random_bool(0.75) {
                g.transcription.clone()
            } else {
                misread(r, &g.transcription)
            };
            s.push_str(&text);
            s.push('\n');
        }
        return s;
    }
    let mut s = String::new();
    for d in noisy_detections(r, tree, IMAGE_WIDTH, IMAGE_HEIGHT) {
        s.push_str(&serialize_detection(&d, grammar));
        s.push('\n');
    }
    s
}

/// Imports `n` synthetic annotated images into collection `cid` (created if
/// missing) and assigns them to `subset`. Returns the image ids.
pub fn populate_collection(
    ds: &Datastore,
    cid: &str,
    owner: &str,
    n: usize,
    seed: u64,
    subset: Subset,
) -> Result<Vec<String>, DatastoreError> {
    match ds.create_collection(cid, cid, owner) {
        Ok(_) | Err(DatastoreError::DuplicateId(_)) => {}
        Err(e) => return Err(e),
    }
    let mut r = rng(seed);
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let bytes = png(IMAGE_WIDTH, IMAGE_HEIGHT, seed.wrapping_mul(1000).wrapping_add(i as u64));
        let rec = ds.import_image(cid, &bytes, &format!("img_{i}.png"), owner)?.record;
        if ds.head(cid, &rec.id)? == 0 {
            let tree = random_tree(&mut r, IMAGE_WIDTH, IMAGE_HEIGHT);
            ds.save_annotation(cid, &rec.id, tree, owner, 0, "synthetic ground truth")?;
        }
        ids.push(rec.id);
    }
    ds.assign_subset(cid, &ids, subset, owner)?;
    Ok(ids)
}
