//! Independent reference implementations and random fixtures shared by the
//! integration tests. Nothing here calls into the metric code under test.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scenario_core::dataset::{
    Annotation, BBox, DatasetManifest, ImageRecord, ManifestEntry, Provenance,
};
use scenario_core::modelrun::{Detection, ModelRunManifest, PredictionRecord};

pub const CLASSES: [&str; 3] = ["yellow", "blue", "orange"];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// IoU from corner coordinates.
pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.x, a.y, a.x + a.w, a.y + a.h);
    let (bx1, by1, bx2, by2) = (b.x, b.y, b.x + b.w, b.y + b.h);
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// Greedy matcher over one class: detections by confidence descending (box
/// coordinates break ties), each taking the best still-free ground truth.
/// Returns the (confidence, is-true-positive) pairs.
pub fn oracle_match(dets: &[Detection], gts: &[Annotation], tau: f64) -> Vec<(f64, bool)> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&i, &j| {
        let (a, b) = (&dets[i], &dets[j]);
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.bbox.x.partial_cmp(&b.bbox.x).unwrap())
            .then(a.bbox.y.partial_cmp(&b.bbox.y).unwrap())
            .then(a.bbox.w.partial_cmp(&b.bbox.w).unwrap())
            .then(a.bbox.h.partial_cmp(&b.bbox.h).unwrap())
    });
    let mut free: Vec<bool> = gts.iter().map(|g| g.recognizable).collect();
    let mut out = Vec::new();
    for i in idx {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if !free[g] || gt.class != d.class {
                continue;
            }
            let v = oracle_iou(&d.bbox, &gt.bbox);
            match best {
                Some((_, bv)) if v <= bv + 1e-12 => {}
                _ => best = Some((g, v)),
            }
        }
        let tp = match best {
            Some((g, v)) if v >= tau => {
                free[g] = false;
                true
            }
            _ => false,
        };
        out.push((d.confidence, tp));
    }
    out
}

/// All-point interpolated AP by brute force: for every confidence cutoff
/// compute (recall, precision) over detections at or above it, then
/// integrate the upper envelope `max { p : r' >= r }` over recall.
pub fn oracle_ap(pairs: &[(f64, bool)], gt_count: usize) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let mut cutoffs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    cutoffs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    cutoffs.dedup();
    let points: Vec<(f64, f64)> = cutoffs
        .iter()
        .map(|&t| {
            let kept: Vec<&(f64, bool)> = pairs.iter().filter(|p| p.0 >= t).collect();
            let tp = kept.iter().filter(|p| p.1).count() as f64;
            (tp / gt_count as f64, tp / kept.len() as f64)
        })
        .collect();
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    recalls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let env = points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
        ap += (r - prev) * env;
        prev = r;
    }
    Some(ap)
}

pub fn random_box(r: &mut ChaCha8Rng) -> BBox {
    let w = r.random_range(0.05..0.4);
    let h = r.random_range(0.05..0.4);
    BBox::new(r.random_range(0.0..1.0 - w), r.random_range(0.0..1.0 - h), w, h)
}

/// A box near `b`, kept inside the unit square.
pub fn jitter(r: &mut ChaCha8Rng, b: &BBox, amount: f64) -> BBox {
    let w = (b.w * (1.0 + r.random_range(-amount..amount))).clamp(0.01, 1.0);
    let h = (b.h * (1.0 + r.random_range(-amount..amount))).clamp(0.01, 1.0);
    let x = (b.x + b.w * r.random_range(-amount..amount)).clamp(0.0, 1.0 - w);
    let y = (b.y + b.h * r.random_range(-amount..amount)).clamp(0.0, 1.0 - h);
    BBox::new(x, y, w, h)
}

/// Random confidence; coarse values are drawn now and then to create ties.
pub fn random_confidence(r: &mut ChaCha8Rng) -> f64 {
    if r.random_bool(0.3) {
        f64::from(r.random_range(1..=10u32)) / 10.0
    } else {
        r.random_range(0.001..1.0)
    }
}

/// Single-class instance with up to `max_gt` ground truths and `max_det`
/// detections, a mix of near-hits and clutter.
pub fn random_instance(r: &mut ChaCha8Rng, max_gt: usize, max_det: usize) -> (Vec<Detection>, Vec<Annotation>) {
    let n_gt = r.random_range(0..=max_gt);
    let gts: Vec<Annotation> = (0..n_gt).map(|_| Annotation::new("blue", random_box(r))).collect();
    let n_det = r.random_range(0..=max_det);
    let dets = (0..n_det)
        .map(|_| {
            let bbox = if !gts.is_empty() && r.random_bool(0.6) {
                let g = &gts[r.random_range(0..gts.len())];
                jitter(r, &g.bbox, 0.3)
            } else {
                random_box(r)
            };
            Detection::new("blue", bbox, random_confidence(r))
        })
        .collect();
    (dets, gts)
}

pub fn entry(id: &str, scenario_chain: &[&str], annotations: Vec<Annotation>) -> ManifestEntry {
    let provenance = if scenario_chain.is_empty() {
        Provenance::original()
    } else {
        Provenance::mutant(format!("seed_of_{id}"), scenario_chain.iter().map(|s| s.to_string()).collect())
    };
    ManifestEntry {
        image: ImageRecord { id: id.to_string(), path: format!("images/{id}.png"), width: 64, height: 48, annotations },
        provenance,
    }
}

/// Random three-class test set spread over a few scenarios, plus a run
/// whose detections are noisy copies of the ground truth and clutter.
pub fn random_run(r: &mut ChaCha8Rng, images: usize) -> (DatasetManifest, ModelRunManifest) {
    let scenarios: [&[&str]; 4] = [&[], &["fog"], &["dark"], &["dark", "fog"]];
    let mut m = DatasetManifest::new(CLASSES.iter().map(|s| s.to_string()).collect());
    let mut preds = Vec::new();
    for i in 0..images {
        let id = format!("img_{i:03}");
        let anns: Vec<Annotation> = (0..r.random_range(0..5))
            .map(|_| Annotation::new(CLASSES[r.random_range(0..3)], random_box(r)))
            .collect();
        let mut dets = Vec::new();
        for a in &anns {
            if r.random_bool(0.8) {
                dets.push(Detection::new(a.class.as_str(), jitter(r, &a.bbox, 0.25), random_confidence(r)));
            }
        }
        for _ in 0..r.random_range(0..3) {
            dets.push(Detection::new(CLASSES[r.random_range(0..3)], random_box(r), random_confidence(r)));
        }
        let chain = scenarios[r.random_range(0..scenarios.len())];
        m.images.push(entry(&id, chain, anns));
        preds.push(PredictionRecord { image_id: id, detections: dets });
    }
    let run = ModelRunManifest::new("random", &m, preds);
    (m, run)
}

/// Applies `f` to every confidence of the run.
pub fn map_confidences(run: &ModelRunManifest, f: impl Fn(f64) -> f64) -> ModelRunManifest {
    let mut out = run.clone();
    for p in &mut out.predictions {
        for d in &mut p.detections {
            d.confidence = f(d.confidence);
        }
    }
    out
}

/// Run that reports every recognizable ground-truth box exactly.
pub fn perfect_run(m: &DatasetManifest) -> ModelRunManifest {
    let preds = m
        .images
        .iter()
        .map(|e| PredictionRecord {
            image_id: e.image.id.clone(),
            detections: e
                .image
                .annotations
                .iter()
                .filter(|a| a.recognizable)
                .map(|a| Detection::new(a.class.as_str(), a.bbox, 0.9))
                .collect(),
        })
        .collect();
    ModelRunManifest::new("perfect", m, preds)
}

pub fn empty_run(m: &DatasetManifest) -> ModelRunManifest {
    let preds = m.images.iter().map(|e| PredictionRecord { image_id: e.image.id.clone(), detections: vec![] }).collect();
    ModelRunManifest::new("empty", m, preds)
}

/// Binomial coefficient by Pascal's rule.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let mut row = vec![1usize];
    for _ in 0..n {
        let mut next = vec![1usize; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    row[k]
}

/// Every subset of `0..m` with at most `max` elements, as bit masks.
pub fn subsets_up_to(m: usize, max: usize) -> Vec<u32> {
    (0u32..1 << m).filter(|s| s.count_ones() as usize <= max).collect()
}
