//! Detection scoring and the statistical steps of the testing cycle.
//!
//! Matching is greedy per class at a single IoU threshold; AP is the
//! all-point interpolated area under the precision envelope. Report values
//! (AP, mAP, precision, recall, deltas) are percentages.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Annotation, BBox, ClassLabel, DatasetManifest, ManifestEntry, ORIGINAL_SCENARIO};
use crate::datamorph::step_seed;
use crate::modelrun::{Detection, ModelRunError, ModelRunManifest};

pub const REPORT_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Run(#[from] ModelRunError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no group named {0}")]
    UnknownGroup(String),
    #[error("{0} has no recognizable ground truth")]
    NoGroundTruth(String),
    #[error("group {group} has {images} image(s); bootstrap needs at least 2")]
    GroupTooSmall { group: String, images: usize },
    #[error("at least one suspect is required")]
    NoSuspects,
    #[error("reports are not comparable: {0}")]
    Mismatch(String),
    #[error("invalid suspect {0:?}")]
    BadSuspect(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    pub detection: Detection,
    pub matched: bool,
    /// Index into the ground-truth list passed to [`match_detections`].
    pub gt_index: Option<usize>,
    pub iou: f64,
}

/// Detections in ranking order with their match outcome.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub entries: Vec<MatchEntry>,
    pub gt_count: usize,
}

/// Confidence descending, then box coordinates as a stable tie-break.
fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.class.cmp(&b.class))
        .then_with(|| a.bbox.x.total_cmp(&b.bbox.x))
        .then_with(|| a.bbox.y.total_cmp(&b.bbox.y))
        .then_with(|| a.bbox.w.total_cmp(&b.bbox.w))
        .then_with(|| a.bbox.h.total_cmp(&b.bbox.h))
}

impl MatchSet {
    pub fn true_positives(&self) -> usize {
        self.entries.iter().filter(|e| e.matched).count()
    }

    pub fn false_positives(&self) -> usize {
        self.entries.len() - self.true_positives()
    }

    /// Concatenation of several match sets, re-ranked.
    pub fn pooled<'a>(sets: impl IntoIterator<Item = &'a MatchSet>) -> MatchSet {
        let mut out = MatchSet::default();
        for s in sets {
            out.entries.extend(s.entries.iter().cloned());
            out.gt_count += s.gt_count;
        }
        out.entries.sort_by(|a, b| rank_order(&a.detection, &b.detection));
        out
    }

    fn scored(&self) -> Vec<(f64, bool)> {
        self.entries.iter().map(|e| (e.detection.confidence, e.matched)).collect()
    }
}

/// IoU values closer than this count as equal when choosing a ground truth.
const IOU_TIE_EPS: f64 = 1e-12;

/// Greedy matching: each detection, by descending confidence, takes the
/// unmatched same-class ground truth with the highest IoU (lowest index on
/// ties) if that IoU reaches `tau`. Unrecognizable ground truth is never
/// matched and does not count toward `gt_count`.
pub fn match_detections(preds: &[Detection], gts: &[Annotation], tau: f64) -> MatchSet {
    let mut order: Vec<&Detection> = preds.iter().collect();
    order.sort_by(|a, b| rank_order(a, b));
    let mut taken = vec![false; gts.len()];
    let mut entries = Vec::with_capacity(order.len());
    for det in order {
        let mut best: Option<(usize, f64)> = None;
        for (i, gt) in gts.iter().enumerate() {
            if taken[i] || !gt.recognizable || gt.class != det.class {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if best.is_none_or(|(_, b)| v > b + IOU_TIE_EPS) {
                best = Some((i, v));
            }
        }
        let entry = match best {
            Some((i, v)) if v >= tau => {
                taken[i] = true;
                MatchEntry { detection: det.clone(), matched: true, gt_index: Some(i), iou: v }
            }
            other => MatchEntry { detection: det.clone(), matched: false, gt_index: None, iou: other.map_or(0.0, |b| b.1) },
        };
        entries.push(entry);
    }
    MatchSet { entries, gt_count: gts.iter().filter(|g| g.recognizable).count() }
}

/// Precision/recall after each distinct confidence level, plus the
/// all-point interpolated AP as a ratio. `None` when there is no ground truth.
fn ap_core(scored: &mut [(f64, bool)], gt_count: usize) -> (Option<f64>, Vec<(f64, f64)>) {
    if gt_count == 0 {
        return (None, Vec::new());
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let gt = gt_count as f64;
    let mut points = Vec::new();
    let (mut tp, mut n) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let level = scored[i].0;
        while i < scored.len() && scored[i].0 == level {
            tp += usize::from(scored[i].1);
            n += 1;
            i += 1;
        }
        points.push((tp as f64 / gt, tp as f64 / n as f64));
    }
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    // walk backwards so `envelope` is the max precision at recall >= r
    for k in (0..points.len()).rev() {
        envelope = envelope.max(points[k].1);
        let prev = if k == 0 { 0.0 } else { points[k - 1].0 };
        ap += (points[k].0 - prev) * envelope;
    }
    (Some(ap.clamp(0.0, 1.0)), points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APResult {
    pub class: ClassLabel,
    pub group: String,
    /// Ratio in [0, 1]; `None` when the group has no ground truth of the class.
    pub ap: Option<f64>,
    /// (recall, precision) after each confidence level.
    pub pr_points: Vec<(f64, f64)>,
}

pub fn average_precision(ms: &MatchSet, class: &ClassLabel, group: &str) -> APResult {
    let (ap, pr_points) = ap_core(&mut ms.scored(), ms.gt_count);
    APResult { class: class.clone(), group: group.to_string(), ap, pr_points }
}

/// Selector for a scenario group or a class, as named by triage or on the
/// command line (`fog`, `scenario:fog`, `class:orange`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Suspect {
    Scenario(String),
    Class(String),
}

impl fmt::Display for Suspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Suspect::Scenario(s) => write!(f, "scenario:{s}"),
            Suspect::Class(c) => write!(f, "class:{c}"),
        }
    }
}

impl FromStr for Suspect {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (kind, name) = match s.split_once(':') {
            Some((k, n)) => (k, n),
            None => ("scenario", s),
        };
        if name.is_empty() {
            return Err(EvalError::BadSuspect(s.to_string()));
        }
        match kind {
            "class" | "suspect-class" => Ok(Suspect::Class(name.to_string())),
            "scenario" | "suspect-scenario" => Ok(Suspect::Scenario(name.to_string())),
            _ => Err(EvalError::BadSuspect(s.to_string())),
        }
    }
}

impl Serialize for Suspect {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Suspect {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses a comma-separated suspect list.
pub fn parse_suspects(list: &str) -> Result<Vec<Suspect>, EvalError> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisConfig {
    pub iou_threshold: f64,
    /// Weakness margin in percentage points.
    pub delta: f64,
    pub bootstrap: usize,
    pub confidence: f64,
    pub seed: u64,
    /// Fixed reference mAP (percent) instead of the run's overall mAP.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        DiagnosisConfig { iou_threshold: 0.5, delta: 5.0, bootstrap: 1000, confidence: 0.95, seed: 7, target: None }
    }
}

impl DiagnosisConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(EvalError::Config(format!("iou threshold {} outside (0, 1)", self.iou_threshold)));
        }
        if self.bootstrap < 100 {
            return Err(EvalError::Config(format!("bootstrap replicates {} < 100", self.bootstrap)));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(EvalError::Config(format!("confidence level {} outside (0, 1)", self.confidence)));
        }
        if !(self.delta >= 0.0) {
            return Err(EvalError::Config(format!("delta {} must be >= 0", self.delta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub gt_count: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub ap: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub image_count: usize,
    pub classes: Vec<ClassMetrics>,
    /// Mean AP over the classes with ground truth in this group.
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub map: Option<f64>,
}

/// Image with at least one false positive or missed recognizable box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailingCase {
    pub image_id: String,
    pub scenario: String,
    pub false_positives: usize,
    pub misses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub kind: String,
    pub version: String,
    pub model_id: String,
    pub dataset_fingerprint: String,
    pub class_set: Vec<String>,
    pub iou_threshold: f64,
    /// "original" first, then scenarios by name.
    pub groups: Vec<GroupReport>,
    /// Per-class results pooled over every group.
    pub per_class: Vec<ClassMetrics>,
    pub overall: OverallMetrics,
    /// Worst first.
    pub failing_cases: Vec<FailingCase>,
}

impl ScenarioReport {
    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.name.eq_ignore_ascii_case(name))
    }

    pub fn class(&self, name: &str) -> Option<&ClassMetrics> {
        self.per_class.iter().find(|c| c.class == name)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        load_json(path)
    }
}

pub(crate) fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<(), EvalError> {
    let io = |source| EvalError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(io)
}

pub(crate) fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|source| EvalError::Parse { path: path.to_path_buf(), source })
}

fn pct(v: f64) -> f64 {
    v * 100.0
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-image, per-class match sets of a run.
pub struct ScoredRun {
    pub class_set: Vec<String>,
    pub images: Vec<ScoredImage>,
}

pub struct ScoredImage {
    pub image_id: String,
    pub scenario: String,
    /// Indexed like `class_set`.
    pub per_class: Vec<MatchSet>,
}

impl ScoredRun {
    pub fn new(run: &ModelRunManifest, m: &DatasetManifest, tau: f64) -> Result<Self, EvalError> {
        run.validate_against(m)?;
        let preds = run.by_image();
        let images = m
            .images
            .par_iter()
            .map(|entry| {
                let dets = preds[entry.image.id.as_str()];
                let per_class = m
                    .class_set
                    .iter()
                    .map(|c| {
                        let d: Vec<Detection> = dets.iter().filter(|d| d.class.as_str() == c).cloned().collect();
                        let g: Vec<Annotation> =
                            entry.image.annotations.iter().filter(|a| a.class.as_str() == c).cloned().collect();
                        match_detections(&d, &g, tau)
                    })
                    .collect();
                ScoredImage {
                    image_id: entry.image.id.clone(),
                    scenario: entry.provenance.scenario.clone(),
                    per_class,
                }
            })
            .collect();
        Ok(ScoredRun { class_set: m.class_set.clone(), images })
    }

    fn class_index(&self, class: &str) -> Option<usize> {
        self.class_set.iter().position(|c| c == class)
    }

    /// Group names present in the run: "original" first, then sorted.
    pub fn scenario_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.images.iter().map(|i| i.scenario.clone()).collect();
        names.sort_by(|a, b| (a != ORIGINAL_SCENARIO).cmp(&(b != ORIGINAL_SCENARIO)).then_with(|| a.cmp(b)));
        names.dedup();
        names
    }

    fn class_metrics(&self, images: &[&ScoredImage], ci: usize) -> ClassMetrics {
        let pooled = MatchSet::pooled(images.iter().map(|img| &img.per_class[ci]));
        let tp = pooled.true_positives();
        let fp = pooled.false_positives();
        let (ap, _) = ap_core(&mut pooled.scored(), pooled.gt_count);
        ClassMetrics {
            class: self.class_set[ci].clone(),
            gt_count: pooled.gt_count,
            true_positives: tp,
            false_positives: fp,
            ap: ap.map(pct),
            precision: (tp + fp > 0).then(|| pct(tp as f64 / (tp + fp) as f64)),
            recall: (pooled.gt_count > 0).then(|| pct(tp as f64 / pooled.gt_count as f64)),
        }
    }
}

pub fn evaluate_report(run: &ModelRunManifest, m: &DatasetManifest, cfg: &DiagnosisConfig) -> Result<ScenarioReport, EvalError> {
    cfg.validate()?;
    let scored = ScoredRun::new(run, m, cfg.iou_threshold)?;
    Ok(report_from_scored(&scored, run, m, cfg.iou_threshold))
}

fn report_from_scored(scored: &ScoredRun, run: &ModelRunManifest, m: &DatasetManifest, tau: f64) -> ScenarioReport {
    let n_classes = scored.class_set.len();
    let groups = scored
        .scenario_names()
        .into_iter()
        .map(|name| {
            let imgs: Vec<&ScoredImage> = scored.images.iter().filter(|i| i.scenario == name).collect();
            let classes: Vec<ClassMetrics> = (0..n_classes).map(|ci| scored.class_metrics(&imgs, ci)).collect();
            let map = mean(classes.iter().filter_map(|c| c.ap));
            GroupReport { name, image_count: imgs.len(), classes, map }
        })
        .collect();

    let all: Vec<&ScoredImage> = scored.images.iter().collect();
    let per_class: Vec<ClassMetrics> = (0..n_classes).map(|ci| scored.class_metrics(&all, ci)).collect();
    let tp: usize = per_class.iter().map(|c| c.true_positives).sum();
    let fp: usize = per_class.iter().map(|c| c.false_positives).sum();
    let gt: usize = per_class.iter().map(|c| c.gt_count).sum();
    let overall = OverallMetrics {
        precision: (tp + fp > 0).then(|| pct(tp as f64 / (tp + fp) as f64)),
        recall: (gt > 0).then(|| pct(tp as f64 / gt as f64)),
        map: mean(per_class.iter().filter_map(|c| c.ap)),
    };

    let mut failing_cases: Vec<FailingCase> = scored
        .images
        .iter()
        .filter_map(|img| {
            let fps: usize = img.per_class.iter().map(MatchSet::false_positives).sum();
            let misses: usize = img.per_class.iter().map(|s| s.gt_count - s.true_positives()).sum();
            (fps + misses > 0).then(|| FailingCase {
                image_id: img.image_id.clone(),
                scenario: img.scenario.clone(),
                false_positives: fps,
                misses,
            })
        })
        .collect();
    failing_cases.sort_by(|a, b| {
        (b.false_positives + b.misses).cmp(&(a.false_positives + a.misses)).then_with(|| a.image_id.cmp(&b.image_id))
    });

    ScenarioReport {
        kind: "scenario-report".to_string(),
        version: REPORT_VERSION.to_string(),
        model_id: run.model_id.clone(),
        dataset_fingerprint: m.fingerprint(),
        class_set: m.class_set.clone(),
        iou_threshold: tau,
        groups,
        per_class,
        overall,
        failing_cases,
    }
}

/// Images and metric a suspect refers to, flattened to (confidence, tp)
/// pairs per image and class for fast resampling.
struct BootstrapTarget {
    /// per selected image: per class (scored detections, gt count)
    images: Vec<Vec<(Vec<(f64, bool)>, usize)>>,
    /// classes that enter the mean
    classes: Vec<usize>,
}

impl BootstrapTarget {
    fn new(scored: &ScoredRun, suspect: &Suspect) -> Result<Self, EvalError> {
        let (selected, classes): (Vec<&ScoredImage>, Vec<usize>) = match suspect {
            Suspect::Scenario(name) => {
                let imgs: Vec<&ScoredImage> =
                    scored.images.iter().filter(|i| i.scenario.eq_ignore_ascii_case(name)).collect();
                if imgs.is_empty() {
                    return Err(EvalError::UnknownGroup(suspect.to_string()));
                }
                (imgs, (0..scored.class_set.len()).collect())
            }
            Suspect::Class(name) => {
                let ci = scored.class_index(name).ok_or_else(|| EvalError::UnknownGroup(suspect.to_string()))?;
                (scored.images.iter().collect(), vec![ci])
            }
        };
        if selected.len() < 2 {
            return Err(EvalError::GroupTooSmall { group: suspect.to_string(), images: selected.len() });
        }
        let images = selected
            .iter()
            .map(|img| img.per_class.iter().map(|ms| (ms.scored(), ms.gt_count)).collect())
            .collect();
        Ok(BootstrapTarget { images, classes })
    }

    /// mAP (percent) over a multiset of image indices.
    fn metric(&self, indices: impl Iterator<Item = usize> + Clone) -> Option<f64> {
        let aps = self.classes.iter().filter_map(|&ci| {
            let mut pairs = Vec::new();
            let mut gt = 0;
            for i in indices.clone() {
                let (p, g) = &self.images[i][ci];
                pairs.extend_from_slice(p);
                gt += g;
            }
            ap_core(&mut pairs, gt).0
        });
        mean(aps).map(pct)
    }
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

fn bootstrap_scored(scored: &ScoredRun, suspect: &Suspect, cfg: &DiagnosisConfig) -> Result<(f64, f64), EvalError> {
    let target = BootstrapTarget::new(scored, suspect)?;
    let n = target.images.len();
    let mut values: Vec<f64> = (0..cfg.bootstrap)
        .into_par_iter()
        .filter_map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, b));
            let draw: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            target.metric(draw.into_iter())
        })
        .collect();
    if values.is_empty() {
        return Err(EvalError::NoGroundTruth(suspect.to_string()));
    }
    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - cfg.confidence) / 2.0;
    Ok((percentile(&values, alpha), percentile(&values, 1.0 - alpha)))
}

/// Percentile bootstrap interval (percent) of the suspect's mAP, resampling
/// images with replacement.
pub fn bootstrap_ci(
    run: &ModelRunManifest,
    m: &DatasetManifest,
    group: &Suspect,
    cfg: &DiagnosisConfig,
) -> Result<(f64, f64), EvalError> {
    cfg.validate()?;
    let scored = ScoredRun::new(run, m, cfg.iou_threshold)?;
    bootstrap_scored(&scored, group, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Confirmed,
    NotConfirmed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisEntry {
    pub suspect: Suspect,
    pub map: Option<f64>,
    pub ci_low: f64,
    pub ci_high: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub kind: String,
    pub version: String,
    pub model_id: String,
    pub dataset_fingerprint: String,
    /// Reference mAP (percent) the suspects are compared against.
    pub reference: f64,
    pub reference_source: String,
    pub config: DiagnosisConfig,
    pub entries: Vec<DiagnosisEntry>,
}

impl DiagnosisReport {
    pub fn confirmed(&self) -> impl Iterator<Item = &Suspect> {
        self.entries.iter().filter(|e| e.verdict == Verdict::Confirmed).map(|e| &e.suspect)
    }
}

/// A suspect is confirmed when the upper end of its bootstrap interval lies
/// more than `delta` points below the reference.
pub fn diagnose(
    run: &ModelRunManifest,
    m: &DatasetManifest,
    suspects: &[Suspect],
    cfg: &DiagnosisConfig,
) -> Result<DiagnosisReport, EvalError> {
    cfg.validate()?;
    if suspects.is_empty() {
        return Err(EvalError::NoSuspects);
    }
    let scored = ScoredRun::new(run, m, cfg.iou_threshold)?;
    let report = report_from_scored(&scored, run, m, cfg.iou_threshold);
    let (reference, reference_source) = match cfg.target {
        Some(t) => (t, "target".to_string()),
        None => (report.overall.map.ok_or_else(|| EvalError::NoGroundTruth("run".into()))?, "overall".to_string()),
    };
    let mut entries = Vec::with_capacity(suspects.len());
    for s in suspects {
        let point = match s {
            Suspect::Scenario(name) => report.group(name).ok_or_else(|| EvalError::UnknownGroup(s.to_string()))?.map,
            Suspect::Class(name) => report.class(name).ok_or_else(|| EvalError::UnknownGroup(s.to_string()))?.ap,
        };
        if point.is_none() {
            return Err(EvalError::NoGroundTruth(s.to_string()));
        }
        let (lo, hi) = bootstrap_scored(&scored, s, cfg)?;
        let verdict = if hi < reference - cfg.delta { Verdict::Confirmed } else { Verdict::NotConfirmed };
        entries.push(DiagnosisEntry { suspect: s.clone(), map: point, ci_low: lo, ci_high: hi, verdict });
    }
    Ok(DiagnosisReport {
        kind: "diagnosis-report".to_string(),
        version: REPORT_VERSION.to_string(),
        model_id: run.model_id.clone(),
        dataset_fingerprint: m.fingerprint(),
        reference,
        reference_source,
        config: cfg.clone(),
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEntry {
    pub name: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// `b - a` in points; `None` when either side is undefined.
    pub delta: Option<f64>,
    pub treated: bool,
    pub forgetting: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub kind: String,
    pub version: String,
    pub model_a: String,
    pub model_b: String,
    pub dataset_fingerprint: String,
    pub treated: Vec<Suspect>,
    pub epsilon: f64,
    pub groups: Vec<DeltaEntry>,
    pub classes: Vec<DeltaEntry>,
    pub overall: DeltaEntry,
    /// Untreated scenarios whose mAP dropped by more than `epsilon`.
    pub forgetting_flags: Vec<String>,
}

impl ComparisonReport {
    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        load_json(path)
    }

    pub fn group(&self, name: &str) -> Option<&DeltaEntry> {
        self.groups.iter().find(|g| g.name.eq_ignore_ascii_case(name))
    }

    pub fn class(&self, name: &str) -> Option<&DeltaEntry> {
        self.classes.iter().find(|g| g.name == name)
    }
}

fn delta_entry(name: &str, a: Option<f64>, b: Option<f64>, treated: bool, eps: f64, flaggable: bool) -> DeltaEntry {
    let delta = a.zip(b).map(|(a, b)| b - a);
    let forgetting = flaggable && !treated && delta.is_some_and(|d| d < -eps);
    DeltaEntry { name: name.to_string(), a, b, delta, treated, forgetting }
}

/// Per-scenario and per-class deltas of `b` relative to `a`, flagging
/// untreated scenarios that regressed by more than `epsilon` points.
pub fn compare(
    a: &ScenarioReport,
    b: &ScenarioReport,
    treated: &[Suspect],
    epsilon: f64,
) -> Result<ComparisonReport, EvalError> {
    if a.dataset_fingerprint != b.dataset_fingerprint {
        return Err(EvalError::Mismatch(format!(
            "dataset fingerprints {} and {}",
            a.dataset_fingerprint, b.dataset_fingerprint
        )));
    }
    if a.class_set != b.class_set {
        return Err(EvalError::Mismatch(format!("class sets {:?} and {:?}", a.class_set, b.class_set)));
    }
    let names_a: Vec<&str> = a.groups.iter().map(|g| g.name.as_str()).collect();
    let names_b: Vec<&str> = b.groups.iter().map(|g| g.name.as_str()).collect();
    if names_a != names_b {
        return Err(EvalError::Mismatch(format!("scenario groups {names_a:?} and {names_b:?}")));
    }
    let is_treated = |s: &Suspect| treated.iter().any(|t| suspect_eq(t, s));

    let groups: Vec<DeltaEntry> = a
        .groups
        .iter()
        .zip(&b.groups)
        .map(|(ga, gb)| {
            let t = is_treated(&Suspect::Scenario(ga.name.clone()));
            delta_entry(&ga.name, ga.map, gb.map, t, epsilon, true)
        })
        .collect();
    let classes = a
        .per_class
        .iter()
        .zip(&b.per_class)
        .map(|(ca, cb)| {
            let t = is_treated(&Suspect::Class(ca.class.clone()));
            delta_entry(&ca.class, ca.ap, cb.ap, t, epsilon, false)
        })
        .collect();
    let overall = delta_entry("overall", a.overall.map, b.overall.map, false, epsilon, false);
    let forgetting_flags = groups.iter().filter(|g| g.forgetting).map(|g| g.name.clone()).collect();
    Ok(ComparisonReport {
        kind: "comparison-report".to_string(),
        version: REPORT_VERSION.to_string(),
        model_a: a.model_id.clone(),
        model_b: b.model_id.clone(),
        dataset_fingerprint: a.dataset_fingerprint.clone(),
        treated: treated.to_vec(),
        epsilon,
        groups,
        classes,
        overall,
        forgetting_flags,
    })
}

fn suspect_eq(a: &Suspect, b: &Suspect) -> bool {
    match (a, b) {
        (Suspect::Scenario(x), Suspect::Scenario(y)) => x.eq_ignore_ascii_case(y),
        (Suspect::Class(x), Suspect::Class(y)) => x == y,
        _ => false,
    }
}

/// Per-scenario mAP values of a report, keyed by group name.
pub fn group_maps(report: &ScenarioReport) -> BTreeMap<String, Option<f64>> {
    report.groups.iter().map(|g| (g.name.clone(), g.map)).collect()
}

/// Per-image match details of one case, for the triage views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDetail {
    pub image_id: String,
    pub scenario: String,
    pub ground_truth: Vec<Annotation>,
    pub predictions: Vec<Detection>,
    pub matches: BTreeMap<String, MatchSet>,
    pub false_positives: usize,
    pub misses: usize,
}

pub fn case_detail(run: &ModelRunManifest, m: &DatasetManifest, image_id: &str, tau: f64) -> Option<CaseDetail> {
    let entry = m.get(image_id)?;
    let preds = run.predictions.iter().find(|p| p.image_id == image_id)?;
    Some(case_detail_for(entry, &m.class_set, &preds.detections, tau))
}

/// Match details of one manifest entry against its detections.
pub fn case_detail_for(entry: &ManifestEntry, class_set: &[String], detections: &[Detection], tau: f64) -> CaseDetail {
    let mut matches = BTreeMap::new();
    let (mut fps, mut misses) = (0, 0);
    for c in class_set {
        let d: Vec<Detection> = detections.iter().filter(|d| d.class.as_str() == c).cloned().collect();
        let g: Vec<Annotation> = entry.image.annotations.iter().filter(|a| a.class.as_str() == c).cloned().collect();
        let ms = match_detections(&d, &g, tau);
        fps += ms.false_positives();
        misses += ms.gt_count - ms.true_positives();
        matches.insert(c.clone(), ms);
    }
    CaseDetail {
        image_id: entry.image.id.clone(),
        scenario: entry.provenance.scenario.clone(),
        ground_truth: entry.image.annotations.clone(),
        predictions: detections.to_vec(),
        matches,
        false_positives: fps,
        misses,
    }
}

/// Index of scenario names by image id.
pub fn scenario_index(m: &DatasetManifest) -> HashMap<&str, &str> {
    m.images.iter().map(|e| (e.image.id.as_str(), e.provenance.scenario.as_str())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h)
    }

    #[test]
    fn iou_cases() {
        let a = b(0.0, 0.0, 0.2, 0.2);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(0.5, 0.5, 0.1, 0.1)), 0.0);
        let v = iou(&a, &b(0.1, 0.1, 0.2, 0.2));
        assert!((v - 0.01 / 0.07).abs() < 1e-12, "{v}");
    }

    #[test]
    fn greedy_matching() {
        let gt = vec![Annotation::new("blue", b(0.1, 0.1, 0.2, 0.2))];
        // IoU 0.7-ish: shift the box slightly
        let near = b(0.12, 0.1, 0.2, 0.2);
        let ms = match_detections(&[Detection::new("blue", near, 0.5)], &gt, 0.5);
        assert!(ms.entries[0].matched);

        let ms = match_detections(
            &[Detection::new("blue", near, 0.6), Detection::new("blue", gt[0].bbox, 0.9)],
            &gt,
            0.5,
        );
        assert_eq!(ms.entries[0].detection.confidence, 0.9);
        assert!(ms.entries[0].matched);
        assert!(!ms.entries[1].matched);
        assert_eq!(ms.true_positives(), 1);
    }

    #[test]
    fn unrecognizable_gt_is_excluded() {
        let mut gt = Annotation::new("blue", b(0.1, 0.1, 0.2, 0.2));
        gt.recognizable = false;
        let ms = match_detections(&[Detection::new("blue", gt.bbox, 0.9)], &[gt], 0.5);
        assert_eq!(ms.gt_count, 0);
        assert_eq!(ms.false_positives(), 1);
    }

    #[test]
    fn equal_iou_prefers_lower_index() {
        let gts = vec![
            Annotation::new("blue", b(0.0, 0.0, 0.2, 0.2)),
            Annotation::new("blue", b(0.2, 0.0, 0.2, 0.2)),
        ];
        let ms = match_detections(&[Detection::new("blue", b(0.1, 0.0, 0.2, 0.2), 0.9)], &gts, 0.3);
        assert_eq!(ms.entries[0].gt_index, Some(0));
    }

    #[test]
    fn ap_basic_cases() {
        let blue = ClassLabel::new("blue");
        let gt = vec![Annotation::new("blue", b(0.1, 0.1, 0.2, 0.2)); 2];
        let dets = vec![Detection::new("blue", gt[0].bbox, 0.9), Detection::new("blue", gt[0].bbox, 0.8)];
        let ms = match_detections(&dets, &gt, 0.5);
        assert_eq!(average_precision(&ms, &blue, "g").ap, Some(1.0));

        let empty = MatchSet { entries: vec![], gt_count: 3 };
        assert_eq!(average_precision(&empty, &blue, "g").ap, Some(0.0));
        let none = MatchSet { entries: vec![], gt_count: 0 };
        assert_eq!(average_precision(&none, &blue, "g").ap, None);
    }

    #[test]
    fn ap_false_positive_first() {
        // det1 misses (IoU 0.3), det2 hits (IoU 0.7): PR walk (0,0), (1,0.5)
        let gt = vec![Annotation::new("blue", b(0.0, 0.0, 0.5, 0.5))];
        let ms = MatchSet {
            entries: vec![
                MatchEntry { detection: Detection::new("blue", b(0.3, 0.3, 0.2, 0.2), 0.9), matched: false, gt_index: None, iou: 0.3 },
                MatchEntry { detection: Detection::new("blue", gt[0].bbox, 0.8), matched: true, gt_index: Some(0), iou: 0.7 },
            ],
            gt_count: 1,
        };
        let r = average_precision(&ms, &ClassLabel::new("blue"), "g");
        assert_eq!(r.pr_points, vec![(0.0, 0.0), (1.0, 0.5)]);
        assert!((r.ap.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ties_form_one_threshold() {
        let mut pairs = vec![(0.5, false), (0.5, true)];
        let (ap, pts) = ap_core(&mut pairs, 1);
        assert_eq!(pts, vec![(1.0, 0.5)]);
        assert_eq!(ap, Some(0.5));
    }

    #[test]
    fn suspect_parsing() {
        assert_eq!("class:orange".parse::<Suspect>().unwrap(), Suspect::Class("orange".into()));
        assert_eq!("fog".parse::<Suspect>().unwrap(), Suspect::Scenario("fog".into()));
        assert_eq!("scenario:Fog".parse::<Suspect>().unwrap(), Suspect::Scenario("Fog".into()));
        assert!("weird:x".parse::<Suspect>().is_err());
        assert_eq!(parse_suspects("fog, class:orange").unwrap().len(), 2);
    }

    #[test]
    fn config_validation() {
        let mut c = DiagnosisConfig::default();
        c.validate().unwrap();
        c.bootstrap = 99;
        assert!(c.validate().is_err());
        c = DiagnosisConfig { iou_threshold: 1.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 10.0, 20.0, 30.0, 40.0];
        assert_eq!(percentile(&v, 0.0), 0.0);
        assert_eq!(percentile(&v, 0.5), 20.0);
        assert_eq!(percentile(&v, 0.125), 5.0);
        assert_eq!(percentile(&v, 1.0), 40.0);
    }
}
