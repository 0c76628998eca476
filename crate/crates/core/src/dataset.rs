//! Image datasets with normalized bounding-box annotations.
//!
//! A [`DatasetManifest`] is the canonical listing of images plus their
//! ground truth and provenance (seed or mutant, and the datamorphism chain
//! that produced it). Manifests are stored as versioned JSON documents; image
//! paths inside a manifest are relative to the directory holding the file.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::ops::Add;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_VERSION: &str = "1";

/// Scenario name of unmodified seed images.
pub const ORIGINAL_SCENARIO: &str = "original";

/// Slack for float comparisons on normalized coordinates.
const COORD_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse manifest {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid manifest: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("fraction too small for dataset size ({fraction} of {size} images)")]
    FractionTooSmall { fraction: f64, size: usize },
    #[error("cannot sample {wanted} images from {available}")]
    NotEnoughImages { wanted: usize, available: usize },
    #[error("merge requires at least one manifest")]
    EmptyMerge,
    #[error("class sets differ: {0:?} vs {1:?}")]
    ClassSetMismatch(Vec<String>, Vec<String>),
    #[error("duplicate image id {0:?}")]
    IdCollision(String),
}

/// Axis-aligned box in ratios of the image size; `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        BBox { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    /// Returns every violated invariant, empty when the box is valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite {
            out.push("box has non-finite coordinates".to_string());
            return out;
        }
        if self.x < 0.0 {
            out.push(format!("x < 0 ({})", self.x));
        }
        if self.y < 0.0 {
            out.push(format!("y < 0 ({})", self.y));
        }
        if self.w <= 0.0 {
            out.push(format!("w <= 0 ({})", self.w));
        }
        if self.h <= 0.0 {
            out.push(format!("h <= 0 ({})", self.h));
        }
        if self.x + self.w > 1.0 + COORD_EPS {
            out.push(format!("x+w > 1 ({} + {})", self.x, self.w));
        }
        if self.y + self.h > 1.0 + COORD_EPS {
            out.push(format!("y+h > 1 ({} + {})", self.y, self.h));
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.violations().is_empty()
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Pixel rectangle `[x0, x1) x [y0, y1)` covered by the box on a
    /// `width x height` raster. Partially covered pixels are included.
    pub fn pixel_rect(&self, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let to_px = |v: f64, size: u32, ceil: bool| -> u32 {
            let p = v * f64::from(size);
            let p = if ceil { (p - COORD_EPS).ceil() } else { (p + COORD_EPS).floor() };
            p.clamp(0.0, f64::from(size)) as u32
        };
        (
            to_px(self.x, width, false),
            to_px(self.y, height, false),
            to_px(self.x + self.w, width, true),
            to_px(self.y + self.h, height, true),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassLabel(pub String);

impl ClassLabel {
    pub fn new(name: impl Into<String>) -> Self {
        ClassLabel(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClassLabel {
    fn from(s: &str) -> Self {
        ClassLabel(s.to_string())
    }
}

fn default_true() -> bool {
    true
}

fn is_true(v: &bool) -> bool {
    *v
}

/// Ground-truth box. `recognizable = false` marks a label a human tester
/// could not make out; such labels are kept on file but treated as absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class: ClassLabel,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub recognizable: bool,
}

impl Annotation {
    pub fn new(class: impl Into<String>, bbox: BBox) -> Self {
        Annotation { class: ClassLabel(class.into()), bbox, recognizable: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_id: Option<String>,
    #[serde(default)]
    pub chain: Vec<String>,
    pub scenario: String,
}

impl Provenance {
    pub fn original() -> Self {
        Provenance { seed_id: None, chain: Vec::new(), scenario: ORIGINAL_SCENARIO.to_string() }
    }

    pub fn mutant(seed_id: impl Into<String>, chain: Vec<String>) -> Self {
        let scenario = scenario_name(&chain);
        Provenance { seed_id: Some(seed_id.into()), chain, scenario }
    }

    pub fn is_seed(&self) -> bool {
        self.chain.is_empty()
    }

    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.chain.is_empty() != self.seed_id.is_none() {
            out.push("chain must be empty exactly when seed_id is absent".to_string());
        }
        let expected = scenario_name(&self.chain);
        if self.scenario != expected {
            out.push(format!("scenario {:?} does not match chain (expected {:?})", self.scenario, expected));
        }
        out
    }
}

/// Canonical scenario name of a datamorphism chain.
pub fn scenario_name<S: AsRef<str>>(chain: &[S]) -> String {
    if chain.is_empty() {
        ORIGINAL_SCENARIO.to_string()
    } else {
        chain.iter().map(AsRef::as_ref).collect::<Vec<_>>().join("+")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: ImageRecord,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub class_set: Vec<String>,
    pub images: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master_seed: Option<u64>,
}

impl DatasetManifest {
    pub fn new(class_set: Vec<String>) -> Self {
        DatasetManifest {
            version: MANIFEST_VERSION.to_string(),
            class_set,
            images: Vec::new(),
            master_seed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.images.iter().find(|e| e.image.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.images.iter().map(|e| e.image.id.as_str())
    }

    pub fn has_class(&self, class: &str) -> bool {
        self.class_set.iter().any(|c| c == class)
    }

    /// Order-independent digest of the image ids and class set. Runs and
    /// reports carry it so they can be checked against the manifest they
    /// were computed on.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut ids: Vec<&str> = self.ids().collect();
        ids.sort_unstable();
        let mut hasher = Sha256::new();
        for c in &self.class_set {
            hasher.update(c.as_bytes());
            hasher.update([0u8]);
        }
        hasher.update([1u8]);
        for id in ids {
            hasher.update(id.as_bytes());
            hasher.update([0u8]);
        }
        hasher.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect()
    }

    /// Returns every violated invariant.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.version != MANIFEST_VERSION {
            out.push(format!("unsupported manifest version {:?}", self.version));
        }
        let mut classes = HashSet::new();
        for c in &self.class_set {
            if !classes.insert(c.as_str()) {
                out.push(format!("duplicate class {c:?} in class_set"));
            }
        }
        let mut ids = HashSet::new();
        for entry in &self.images {
            let img = &entry.image;
            if !ids.insert(img.id.as_str()) {
                out.push(format!("duplicate image id {:?}", img.id));
            }
            if img.width == 0 || img.height == 0 {
                out.push(format!("image {:?}: width and height must be >= 1", img.id));
            }
            for (i, ann) in img.annotations.iter().enumerate() {
                if !classes.contains(ann.class.as_str()) {
                    out.push(format!("image {:?} annotation {i}: unknown class {:?}", img.id, ann.class.0));
                }
                for v in ann.bbox.violations() {
                    out.push(format!("image {:?} annotation {i}: {v}", img.id));
                }
            }
            for v in entry.provenance.violations() {
                out.push(format!("image {:?}: {v}", img.id));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(DatasetError::Validation(v))
        }
    }

    /// Checks that every referenced image file exists under `base_dir`.
    pub fn check_files(&self, base_dir: &Path) -> Result<(), DatasetError> {
        let missing: Vec<String> = self
            .images
            .iter()
            .filter(|e| !base_dir.join(&e.image.path).is_file())
            .map(|e| format!("image {:?}: file {} not found", e.image.id, e.image.path))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(DatasetError::Validation(missing))
        }
    }

    /// Copy with the same class set and seed but no images.
    pub fn empty_like(&self) -> Self {
        DatasetManifest {
            version: self.version.clone(),
            class_set: self.class_set.clone(),
            images: Vec::new(),
            master_seed: self.master_seed,
        }
    }
}

/// Directory that image paths of a manifest file are relative to.
pub fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|source| DatasetError::Parse { path: path.to_path_buf(), source })?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest(m: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut text = serde_json::to_string_pretty(m).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(io)
}

/// Picks `count` images uniformly without replacement. Ids are sorted before
/// a seeded ChaCha shuffle so the result only depends on the id set.
pub fn sample_count(m: &DatasetManifest, count: usize, seed: u64) -> Result<DatasetManifest, DatasetError> {
    if count > m.len() {
        return Err(DatasetError::NotEnoughImages { wanted: count, available: m.len() });
    }
    let mut order: Vec<usize> = (0..m.len()).collect();
    order.sort_by(|&a, &b| m.images[a].image.id.cmp(&m.images[b].image.id));
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut out = m.empty_like();
    out.images = order[..count].iter().map(|&i| m.images[i].clone()).collect();
    Ok(out)
}

/// `floor(fraction * n)` with a small tolerance so that e.g. `0.29 * 100`
/// yields 29 rather than 28.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

pub fn sample_fraction(m: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest, DatasetError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::InvalidFraction(fraction));
    }
    let count = fraction_count(fraction, m.len());
    if count == 0 {
        return Err(DatasetError::FractionTooSmall { fraction, size: m.len() });
    }
    sample_count(m, count, seed)
}

/// Per-class counts of recognizable annotations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    pub per_class: BTreeMap<String, u64>,
    pub total: u64,
}

impl ClassStats {
    pub fn count(&self, class: &str) -> u64 {
        self.per_class.get(class).copied().unwrap_or(0)
    }
}

impl Add for ClassStats {
    type Output = ClassStats;

    fn add(mut self, rhs: ClassStats) -> ClassStats {
        for (k, v) in rhs.per_class {
            *self.per_class.entry(k).or_insert(0) += v;
        }
        self.total += rhs.total;
        self
    }
}

pub fn class_stats(m: &DatasetManifest) -> ClassStats {
    let mut stats = ClassStats::default();
    for c in &m.class_set {
        stats.per_class.insert(c.clone(), 0);
    }
    for ann in m.images.iter().flat_map(|e| &e.image.annotations).filter(|a| a.recognizable) {
        *stats.per_class.entry(ann.class.0.clone()).or_insert(0) += 1;
        stats.total += 1;
    }
    stats
}

/// Concatenates manifests sharing one class set. The master seed survives
/// only when all inputs agree on it.
pub fn merge_manifests(ms: &[DatasetManifest]) -> Result<DatasetManifest, DatasetError> {
    let first = ms.first().ok_or(DatasetError::EmptyMerge)?;
    let mut out = first.empty_like();
    let mut seen = HashSet::new();
    for m in ms {
        if m.class_set != first.class_set {
            return Err(DatasetError::ClassSetMismatch(first.class_set.clone(), m.class_set.clone()));
        }
        if m.master_seed != first.master_seed {
            out.master_seed = None;
        }
        for entry in &m.images {
            if !seen.insert(entry.image.id.clone()) {
                return Err(DatasetError::IdCollision(entry.image.id.clone()));
            }
            out.images.push(entry.clone());
        }
    }
    Ok(out)
}
