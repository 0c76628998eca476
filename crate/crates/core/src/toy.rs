//! Desk-scale stand-ins for a real perception stack: a generator of
//! synthetic "cone" images and a colour-segmentation detector.
//!
//! They exist so the whole testing cycle can run end to end without a
//! trained network. The detector can be made blind to orange, which gives
//! the per-class weakness the cycle is meant to find and treat.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{save_manifest, Annotation, BBox, DatasetManifest, ImageRecord, ManifestEntry, Provenance};
use crate::datamorph::{rgb_to_hsv, DatamorphError, PixelImage};
use crate::modelrun::{Detection, ModelRunManifest, PredictionRecord};

pub const TOY_CLASSES: [&str; 3] = ["yellow", "blue", "orange"];

const YELLOW: [u8; 3] = [240, 220, 20];
const BLUE: [u8; 3] = [20, 60, 230];
const ORANGE: [u8; 3] = [250, 120, 10];

#[derive(Debug, Clone)]
pub struct ToyCorpusConfig {
    pub images: usize,
    pub width: u32,
    pub height: u32,
    pub min_cones: usize,
    pub max_cones: usize,
    /// Chance per image of a cone-coloured diamond that is not a cone.
    pub distractor_rate: f64,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig { images: 60, width: 128, height: 96, min_cones: 2, max_cones: 5, distractor_rate: 0.35, seed: 2024 }
    }
}

/// Paints an upright triangle with its apex at the top and returns the box
/// of the painted pixels.
fn paint_triangle(img: &mut PixelImage, left: u32, top: u32, w: u32, h: u32, rgb: [u8; 3]) -> BBox {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    let cx = f64::from(left) + f64::from(w) / 2.0;
    for row in 0..h {
        let half = f64::from(w) / 2.0 * f64::from(row + 1) / f64::from(h);
        let from = (cx - half).round().max(f64::from(left)) as u32;
        let to = ((cx + half).round() as u32).min(left + w);
        for x in from..to {
            let y = top + row;
            img.set(x, y, rgb);
            x0 = x0.min(x);
            x1 = x1.max(x + 1);
            y0 = y0.min(y);
            y1 = y1.max(y + 1);
        }
    }
    let (fw, fh) = (f64::from(img.width), f64::from(img.height));
    BBox::new(f64::from(x0) / fw, f64::from(y0) / fh, f64::from(x1 - x0) / fw, f64::from(y1 - y0) / fh)
}

fn paint_diamond(img: &mut PixelImage, left: u32, top: u32, size: u32, rgb: [u8; 3]) {
    let half = f64::from(size) / 2.0;
    for dy in 0..size {
        for dx in 0..size {
            let (fx, fy) = (f64::from(dx) + 0.5 - half, f64::from(dy) + 0.5 - half);
            if fx.abs() + fy.abs() <= half {
                img.set(left + dx, top + dy, rgb);
            }
        }
    }
}

fn is_clear(placed: &[(u32, u32, u32, u32)], left: u32, top: u32, w: u32, h: u32) -> bool {
    placed.iter().all(|&(l, t, pw, ph)| left + w + 6 <= l || l + pw + 6 <= left || top + h + 3 <= t || t + ph + 3 <= top)
}

/// One synthetic scene: textured gray ground with a few cones of varied
/// size, the smallest close to what the stub detector can resolve.
pub fn toy_image(cfg: &ToyCorpusConfig, rng: &mut ChaCha8Rng) -> (PixelImage, Vec<Annotation>) {
    let (w, h) = (cfg.width, cfg.height);
    let base: u8 = rng.random_range(90..=150);
    let mut img = PixelImage::filled(w, h, [base, base, base]);
    for px in img.pixels.chunks_mut(3) {
        let n: i16 = rng.random_range(-6..=6);
        let v = (i16::from(base) + n).clamp(0, 255) as u8;
        px.copy_from_slice(&[v, v, v]);
    }
    let count = rng.random_range(cfg.min_cones..=cfg.max_cones);
    let mut placed: Vec<(u32, u32, u32, u32)> = Vec::new();
    let mut anns = Vec::new();
    for _ in 0..count {
        for _attempt in 0..50 {
            let cw = rng.random_range(6..=26u32).min(w - 2);
            let ch = rng.random_range(8..=32u32).min(h - 2);
            let left = rng.random_range(1..w - cw);
            let top = rng.random_range(1..h - ch);
            if !is_clear(&placed, left, top, cw, ch) {
                continue;
            }
            let roll: f64 = rng.random();
            let (class, rgb) = if roll < 0.4 {
                ("yellow", YELLOW)
            } else if roll < 0.8 {
                ("blue", BLUE)
            } else {
                ("orange", ORANGE)
            };
            let bbox = paint_triangle(&mut img, left, top, cw, ch, rgb);
            placed.push((left, top, cw, ch));
            anns.push(Annotation::new(class, bbox));
            break;
        }
    }
    if rng.random_bool(cfg.distractor_rate) {
        for _attempt in 0..50 {
            let size = rng.random_range(8..=16u32);
            let left = rng.random_range(1..w - size);
            let top = rng.random_range(1..h - size);
            if is_clear(&placed, left, top, size, size) {
                let rgb = if rng.random_bool(0.5) { [225, 205, 40] } else { [40, 80, 210] };
                paint_diamond(&mut img, left, top, size, rgb);
                placed.push((left, top, size, size));
                break;
            }
        }
    }
    (img, anns)
}

/// Writes `cfg.images` scenes as PNGs under `out_dir/images` plus
/// `out_dir/manifest.json`.
pub fn generate_toy_corpus(cfg: &ToyCorpusConfig, out_dir: &Path) -> Result<DatasetManifest, crate::Error> {
    std::fs::create_dir_all(out_dir.join("images"))
        .map_err(|source| crate::Error::Io { path: out_dir.to_path_buf(), source })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut m = DatasetManifest::new(TOY_CLASSES.iter().map(|s| s.to_string()).collect());
    m.master_seed = Some(cfg.seed);
    for i in 0..cfg.images {
        let (img, annotations) = toy_image(cfg, &mut rng);
        let id = format!("toy_{i:04}");
        let rel = format!("images/{id}.png");
        img.save_png(&out_dir.join(&rel))?;
        m.images.push(ManifestEntry {
            image: ImageRecord { id, path: rel, width: img.width, height: img.height, annotations },
            provenance: Provenance::original(),
        });
    }
    save_manifest(&m, &out_dir.join("manifest.json"))?;
    Ok(m)
}

/// Colour-threshold detector: labels saturated pixels by hue band and boxes
/// each connected blob.
#[derive(Debug, Clone)]
pub struct StubDetector {
    pub detect_orange: bool,
    pub min_pixels: usize,
    pub min_saturation: f64,
    pub min_value: f64,
}

impl StubDetector {
    pub fn orange_blind() -> Self {
        StubDetector { detect_orange: false, ..Self::orange_aware() }
    }

    pub fn orange_aware() -> Self {
        StubDetector { detect_orange: true, min_pixels: 20, min_saturation: 0.35, min_value: 0.12 }
    }

    fn classify(&self, rgb: [u8; 3]) -> u8 {
        let (h, s, v) = rgb_to_hsv(rgb);
        if s < self.min_saturation || v < self.min_value {
            return 0;
        }
        match h {
            h if (5.0..42.0).contains(&h) => {
                if self.detect_orange {
                    3
                } else {
                    0
                }
            }
            h if (42.0..80.0).contains(&h) => 1,
            h if (190.0..=265.0).contains(&h) => 2,
            _ => 0,
        }
    }

    pub fn detect(&self, img: &PixelImage) -> Vec<Detection> {
        let (w, h) = (img.width as usize, img.height as usize);
        let labels: Vec<u8> = img.pixels.chunks(3).map(|p| self.classify([p[0], p[1], p[2]])).collect();
        let mut seen = vec![false; labels.len()];
        let mut out = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..labels.len() {
            if labels[start] == 0 || seen[start] {
                continue;
            }
            let label = labels[start];
            seen[start] = true;
            queue.push_back(start);
            let (mut x0, mut y0, mut x1, mut y1, mut n) = (w, h, 0, 0, 0usize);
            while let Some(i) = queue.pop_front() {
                let (x, y) = (i % w, i / w);
                n += 1;
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                for (dx, dy) in [(-1i64, -1i64), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)] {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] && labels[j] == label {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
            if n < self.min_pixels {
                continue;
            }
            let class = TOY_CLASSES[label as usize - 1];
            let area = ((x1 - x0) * (y1 - y0)) as f64;
            // a solid triangle fills about half its box
            let fill = n as f64 / area;
            let confidence = (1.0 - (fill - 0.5).abs()).clamp(0.05, 1.0);
            let (fw, fh) = (w as f64, h as f64);
            out.push(Detection::new(
                class,
                BBox::new(x0 as f64 / fw, y0 as f64 / fh, (x1 - x0) as f64 / fw, (y1 - y0) as f64 / fh),
                (confidence * 1e6).round() / 1e6,
            ));
        }
        out
    }

    pub fn detect_file(&self, path: &Path) -> Result<Vec<Detection>, DatamorphError> {
        Ok(self.detect(&PixelImage::load(path)?))
    }
}

/// Runs the detector in-process over every image of `m`, whose paths are
/// relative to `base_dir`.
pub fn stub_run(
    detector: &StubDetector,
    m: &DatasetManifest,
    base_dir: &Path,
    model_id: &str,
) -> Result<ModelRunManifest, DatamorphError> {
    let predictions = m
        .images
        .par_iter()
        .map(|e| {
            Ok(PredictionRecord {
                image_id: e.image.id.clone(),
                detections: detector.detect_file(&base_dir.join(&e.image.path))?,
            })
        })
        .collect::<Result<Vec<_>, DatamorphError>>()?;
    Ok(ModelRunManifest::new(model_id, m, predictions))
}

/// Copy of `run` with every detection removed on images of `scenario`.
pub fn degrade_scenario(run: &ModelRunManifest, m: &DatasetManifest, scenario: &str, model_id: &str) -> ModelRunManifest {
    let mut out = run.clone();
    out.model_id = model_id.to_string();
    for p in &mut out.predictions {
        if m.get(&p.image_id).is_some_and(|e| e.provenance.scenario.eq_ignore_ascii_case(scenario)) {
            p.detections.clear();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::{iou, match_detections};

    #[test]
    fn aware_detector_finds_painted_cones() {
        let cfg = ToyCorpusConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut tp, mut gt) = (0, 0);
        for _ in 0..10 {
            let (img, anns) = toy_image(&cfg, &mut rng);
            let dets = StubDetector::orange_aware().detect(&img);
            let ms = match_detections(&dets, &anns, 0.5);
            tp += ms.true_positives();
            gt += ms.gt_count;
        }
        assert!(tp as f64 >= 0.8 * gt as f64, "{tp} of {gt}");
    }

    #[test]
    fn blind_detector_ignores_orange() {
        let mut img = PixelImage::filled(40, 40, [120, 120, 120]);
        let bbox = paint_triangle(&mut img, 5, 5, 20, 24, ORANGE);
        assert!(StubDetector::orange_blind().detect(&img).is_empty());
        let dets = StubDetector::orange_aware().detect(&img);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class.as_str(), "orange");
        assert!(iou(&dets[0].bbox, &bbox) > 0.99);
    }
}
