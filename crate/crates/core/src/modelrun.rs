//! Binding an external detection model to a dataset manifest.
//!
//! The model lives behind a process boundary: either a command template run
//! once per image, or prediction files produced elsewhere and ingested here.
//!
//! A prediction file holds one detection per line,
//! `class confidence x y w h`, whitespace separated, normalized top-left box
//! coordinates. A directory may instead hold a single `predictions.json`
//! mapping image ids to lists of `{class, confidence, box}` objects.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{BBox, ClassLabel, DatasetManifest};

pub const RUN_VERSION: &str = "1";
pub const PREDICTION_EXT: &str = "pred";
pub const STRUCTURED_PREDICTIONS: &str = "predictions.json";

#[derive(Debug, Error)]
pub enum ModelRunError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no predictions for {0}")]
    MissingPredictions(String),
    #[error("{file}:{line}: {msg}")]
    Malformed { file: String, line: usize, msg: String },
    #[error("cannot parse {file}: {msg}")]
    BadDocument { file: String, msg: String },
    #[error("command template must contain {{image}} and {{out}}: {0:?}")]
    BadTemplate(String),
    #[error("model command failed on {image_id} (exit {code:?}): {stderr}")]
    CommandFailed { image_id: String, code: Option<i32>, stderr: String },
    #[error("model command timed out after {secs}s on {image_id}")]
    Timeout { image_id: String, secs: f64 },
    #[error("model command exited 0 but wrote no predictions for {0}")]
    NoOutput(String),
    #[error("run does not match the manifest: {0}")]
    Unbound(String),
    #[error("cannot parse run manifest {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: ClassLabel,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(class: impl Into<String>, bbox: BBox, confidence: f64) -> Self {
        Detection { class: ClassLabel(class.into()), bbox, confidence }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub fingerprint: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRunManifest {
    pub version: String,
    pub model_id: String,
    pub dataset: DatasetRef,
    pub predictions: Vec<PredictionRecord>,
    #[serde(default)]
    pub metadata: RunMetadata,
}

impl ModelRunManifest {
    /// Run bound to `m` from in-memory predictions.
    pub fn new(model_id: impl Into<String>, m: &DatasetManifest, predictions: Vec<PredictionRecord>) -> Self {
        ModelRunManifest {
            version: RUN_VERSION.to_string(),
            model_id: model_id.into(),
            dataset: DatasetRef { path: None, fingerprint: m.fingerprint() },
            predictions,
            metadata: RunMetadata::default(),
        }
    }

    /// Detections per image id.
    pub fn by_image(&self) -> HashMap<&str, &[Detection]> {
        self.predictions.iter().map(|p| (p.image_id.as_str(), p.detections.as_slice())).collect()
    }

    /// Checks the one-record-per-image bijection and the detection invariants.
    pub fn validate_against(&self, m: &DatasetManifest) -> Result<(), ModelRunError> {
        if self.dataset.fingerprint != m.fingerprint() {
            return Err(ModelRunError::Unbound(format!(
                "fingerprint {} != {}",
                self.dataset.fingerprint,
                m.fingerprint()
            )));
        }
        let ids: HashSet<&str> = m.ids().collect();
        let mut seen = HashSet::new();
        for p in &self.predictions {
            if !ids.contains(p.image_id.as_str()) {
                return Err(ModelRunError::Unbound(format!("prediction for unknown image {:?}", p.image_id)));
            }
            if !seen.insert(p.image_id.as_str()) {
                return Err(ModelRunError::Unbound(format!("duplicate predictions for {:?}", p.image_id)));
            }
            for d in &p.detections {
                if let Err(msg) = check_detection(d, m) {
                    return Err(ModelRunError::Unbound(format!("{}: {msg}", p.image_id)));
                }
            }
        }
        if let Some(id) = m.ids().find(|id| !seen.contains(id)) {
            return Err(ModelRunError::MissingPredictions(id.to_string()));
        }
        Ok(())
    }

    /// Same run with every timestamp cleared, for reproducibility checks.
    pub fn without_timestamps(&self) -> Self {
        let mut out = self.clone();
        out.metadata.started = None;
        out.metadata.finished = None;
        out
    }
}

fn check_detection(d: &Detection, m: &DatasetManifest) -> Result<(), String> {
    if !(0.0..=1.0).contains(&d.confidence) {
        return Err(format!("confidence {} outside [0, 1]", d.confidence));
    }
    if !m.has_class(d.class.as_str()) {
        return Err(format!("unknown class {:?}", d.class.0));
    }
    let v = d.bbox.violations();
    if !v.is_empty() {
        return Err(v.join(", "));
    }
    Ok(())
}

pub fn save_run(run: &ModelRunManifest, path: &Path) -> Result<(), ModelRunError> {
    let io = |source| ModelRunError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let text = serde_json::to_string_pretty(run).expect("run serializes");
    fs::write(path, text + "\n").map_err(io)
}

pub fn load_run(path: &Path) -> Result<ModelRunManifest, ModelRunError> {
    let text = fs::read_to_string(path).map_err(|source| ModelRunError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|source| ModelRunError::Parse { path: path.to_path_buf(), source })
}

/// Renders detections in the line format.
pub fn format_predictions(detections: &[Detection]) -> String {
    detections
        .iter()
        .map(|d| format!("{} {} {} {} {} {}\n", d.class, d.confidence, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h))
        .collect()
}

/// Parses the line format. Blank lines and `#` comments are skipped.
pub fn parse_predictions(text: &str, file: &str, m: &DatasetManifest) -> Result<Vec<Detection>, ModelRunError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| ModelRunError::Malformed { file: file.to_string(), line: i + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", fields.len())));
        }
        let mut nums = [0.0; 5];
        for (slot, field) in nums.iter_mut().zip(&fields[1..]) {
            *slot = field.parse::<f64>().map_err(|_| bad(format!("not a number: {field:?}")))?;
            if !slot.is_finite() {
                return Err(bad(format!("not a finite number: {field:?}")));
            }
        }
        let d = Detection::new(fields[0], BBox::new(nums[1], nums[2], nums[3], nums[4]), nums[0]);
        check_detection(&d, m).map_err(bad)?;
        out.push(d);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct StructuredDetection {
    class: String,
    confidence: f64,
    #[serde(rename = "box")]
    bbox: BBox,
}

fn ingest_structured(
    path: &Path,
    m: &DatasetManifest,
    metadata: &mut RunMetadata,
) -> Result<Vec<PredictionRecord>, ModelRunError> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| ModelRunError::Io { path: path.to_path_buf(), source })?;
    let mut doc: BTreeMap<String, Vec<StructuredDetection>> = serde_json::from_str(&text)
        .map_err(|e| ModelRunError::BadDocument { file: file.clone(), msg: e.to_string() })?;
    let mut out = Vec::with_capacity(m.len());
    for id in m.ids() {
        let raw = doc.remove(id).ok_or_else(|| ModelRunError::MissingPredictions(id.to_string()))?;
        let mut detections = Vec::with_capacity(raw.len());
        for (i, r) in raw.into_iter().enumerate() {
            let d = Detection::new(r.class, r.bbox, r.confidence);
            check_detection(&d, m)
                .map_err(|msg| ModelRunError::BadDocument { file: file.clone(), msg: format!("{id}[{i}]: {msg}") })?;
            detections.push(d);
        }
        out.push(PredictionRecord { image_id: id.to_string(), detections });
    }
    for extra in doc.keys() {
        let msg = format!("ignoring predictions for unknown image {extra:?}");
        log::warn!("{msg}");
        metadata.warnings.push(msg);
    }
    Ok(out)
}

fn read_prediction_dir(
    dir: &Path,
    m: &DatasetManifest,
    metadata: &mut RunMetadata,
    missing: impl Fn(&str) -> ModelRunError,
) -> Result<Vec<PredictionRecord>, ModelRunError> {
    let structured = dir.join(STRUCTURED_PREDICTIONS);
    if structured.is_file() {
        return ingest_structured(&structured, m, metadata);
    }
    let mut out = Vec::with_capacity(m.len());
    for id in m.ids() {
        let path = dir.join(format!("{id}.{PREDICTION_EXT}"));
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(missing(id)),
            Err(source) => return Err(ModelRunError::Io { path, source }),
        };
        let detections = parse_predictions(&text, &path.display().to_string(), m)?;
        out.push(PredictionRecord { image_id: id.to_string(), detections });
    }
    let ids: HashSet<&str> = m.ids().collect();
    let listing = fs::read_dir(dir).map_err(|source| ModelRunError::Io { path: dir.to_path_buf(), source })?;
    let mut extras = Vec::new();
    for entry in listing.flatten() {
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some(PREDICTION_EXT) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if !ids.contains(stem.as_str()) {
            extras.push(stem);
        }
    }
    extras.sort();
    for stem in extras {
        let msg = format!("ignoring prediction file for unknown image {stem:?}");
        log::warn!("{msg}");
        metadata.warnings.push(msg);
    }
    Ok(out)
}

/// Builds a run manifest from stored prediction files.
pub fn ingest_predictions(dir: &Path, m: &DatasetManifest, model_id: &str) -> Result<ModelRunManifest, ModelRunError> {
    let mut metadata = RunMetadata::default();
    let predictions =
        read_prediction_dir(dir, m, &mut metadata, |id| ModelRunError::MissingPredictions(id.to_string()))?;
    Ok(ModelRunManifest { metadata, ..ModelRunManifest::new(model_id, m, predictions) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerConfig {
    pub command_template: String,
    pub timeout: Duration,
    /// Run the command once for the whole manifest: `{image}` becomes a
    /// list file of `id<TAB>path` lines and `{out}` the output directory.
    pub batch: bool,
}

impl RunnerConfig {
    pub fn new(command_template: impl Into<String>, timeout: Duration) -> Result<Self, ModelRunError> {
        let command_template = command_template.into();
        if !command_template.contains("{image}") || !command_template.contains("{out}") {
            return Err(ModelRunError::BadTemplate(command_template));
        }
        Ok(RunnerConfig { command_template, timeout, batch: false })
    }

    fn render(&self, image: &Path, out: &Path) -> String {
        self.command_template
            .replace("{image}", &shell_quote(&image.display().to_string()))
            .replace("{out}", &shell_quote(&out.display().to_string()))
    }
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Runs `sh -c command`, enforcing the timeout and capturing stderr.
fn run_one(command: &str, timeout: Duration, image_id: &str) -> Result<(), ModelRunError> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|source| ModelRunError::Io { path: PathBuf::from("sh"), source })?;
    let mut stderr = child.stderr.take().expect("stderr piped");
    let reader = std::thread::spawn(move || {
        let mut buf = String::new();
        let _ = stderr.read_to_string(&mut buf);
        buf
    });
    let start = Instant::now();
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if start.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(ModelRunError::Timeout { image_id: image_id.to_string(), secs: timeout.as_secs_f64() });
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(source) => return Err(ModelRunError::Io { path: PathBuf::from("sh"), source }),
        }
    };
    let stderr = reader.join().unwrap_or_default();
    if !status.success() {
        return Err(ModelRunError::CommandFailed {
            image_id: image_id.to_string(),
            code: status.code(),
            stderr: stderr.trim().to_string(),
        });
    }
    Ok(())
}

/// Runs the model command over every image of `m` (paths resolved against
/// `manifest_dir`), writing prediction files into `out_dir`, with at most
/// `jobs` commands in flight.
pub fn run_model(
    cfg: &RunnerConfig,
    m: &DatasetManifest,
    manifest_dir: &Path,
    model_id: &str,
    out_dir: &Path,
    jobs: usize,
) -> Result<ModelRunManifest, ModelRunError> {
    if !cfg.command_template.contains("{image}") || !cfg.command_template.contains("{out}") {
        return Err(ModelRunError::BadTemplate(cfg.command_template.clone()));
    }
    fs::create_dir_all(out_dir).map_err(|source| ModelRunError::Io { path: out_dir.to_path_buf(), source })?;
    let out_abs = absolute(out_dir);
    let started = chrono::Utc::now().to_rfc3339();

    for id in m.ids() {
        let stale = out_abs.join(format!("{id}.{PREDICTION_EXT}"));
        if stale.exists() {
            fs::remove_file(&stale).map_err(|source| ModelRunError::Io { path: stale, source })?;
        }
    }

    if cfg.batch {
        let list = out_abs.join("images.lst");
        let body: String = m
            .images
            .iter()
            .map(|e| format!("{}\t{}\n", e.image.id, absolute(&manifest_dir.join(&e.image.path)).display()))
            .collect();
        fs::write(&list, body).map_err(|source| ModelRunError::Io { path: list.clone(), source })?;
        run_one(&cfg.render(&list, &out_abs), cfg.timeout, "<batch>")?;
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .expect("thread pool");
        let results: Vec<Result<(), ModelRunError>> = pool.install(|| {
            m.images
                .par_iter()
                .map(|e| {
                    let image = absolute(&manifest_dir.join(&e.image.path));
                    let out = out_abs.join(format!("{}.{PREDICTION_EXT}", e.image.id));
                    run_one(&cfg.render(&image, &out), cfg.timeout, &e.image.id)
                })
                .collect()
        });
        // report the first failure in manifest order
        results.into_iter().collect::<Result<Vec<()>, _>>()?;
    }

    let mut metadata = RunMetadata { command: Some(cfg.command_template.clone()), ..Default::default() };
    let predictions = read_prediction_dir(&out_abs, m, &mut metadata, |id| ModelRunError::NoOutput(id.to_string()))?;
    metadata.started = Some(started);
    metadata.finished = Some(chrono::Utc::now().to_rfc3339());
    Ok(ModelRunManifest {
        version: RUN_VERSION.to_string(),
        model_id: model_id.to_string(),
        dataset: DatasetRef { path: None, fingerprint: m.fingerprint() },
        predictions,
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::manifest_of;

    #[test]
    fn line_format_round_trip() {
        let m = manifest_of(1);
        let dets = vec![
            Detection::new("blue", BBox::new(0.1, 0.2, 0.3, 0.4), 0.93),
            Detection::new("orange", BBox::new(0.0, 0.0, 1.0, 1.0), 1.0),
        ];
        let text = format_predictions(&dets);
        assert_eq!(text.lines().next().unwrap(), "blue 0.93 0.1 0.2 0.3 0.4");
        assert_eq!(parse_predictions(&text, "f", &m).unwrap(), dets);
    }

    #[test]
    fn bad_confidence_reports_line() {
        let m = manifest_of(1);
        let text = "blue 0.5 0.1 0.1 0.1 0.1\n\nblue 1.3 0.1 0.1 0.1 0.1\n";
        match parse_predictions(text, "img.pred", &m) {
            Err(ModelRunError::Malformed { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("confidence"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_predictions("blue 0.5 0.1", "f", &m), Err(ModelRunError::Malformed { line: 1, .. })));
        assert!(parse_predictions("red 0.5 0.1 0.1 0.1 0.1", "f", &m).is_err());
        assert!(parse_predictions("blue 0.5 0.9 0.1 0.2 0.1", "f", &m).is_err());
    }

    fn write_preds(dir: &Path, m: &DatasetManifest, skip: Option<&str>) {
        for id in m.ids() {
            if Some(id) == skip {
                continue;
            }
            fs::write(dir.join(format!("{id}.pred")), "yellow 0.8 0.1 0.1 0.2 0.3\n").unwrap();
        }
    }

    #[test]
    fn ingest_complete_directory() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_of(4);
        write_preds(dir.path(), &m, None);
        fs::write(dir.path().join("stray.pred"), "").unwrap();
        let run = ingest_predictions(dir.path(), &m, "M0").unwrap();
        assert_eq!(run.predictions.len(), 4);
        assert_eq!(run.metadata.warnings.len(), 1);
        run.validate_against(&m).unwrap();
    }

    #[test]
    fn ingest_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_of(4);
        write_preds(dir.path(), &m, Some("img_0003"));
        let err = ingest_predictions(dir.path(), &m, "M0").unwrap_err();
        assert_eq!(err.to_string(), "no predictions for img_0003");
    }

    #[test]
    fn ingest_structured_document() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_of(2);
        let doc = r#"{"img_0000": [{"class":"blue","confidence":0.5,"box":[0.1,0.1,0.2,0.2]}], "img_0001": []}"#;
        fs::write(dir.path().join(STRUCTURED_PREDICTIONS), doc).unwrap();
        let run = ingest_predictions(dir.path(), &m, "M0").unwrap();
        assert_eq!(run.predictions[0].detections.len(), 1);
        assert!(run.predictions[1].detections.is_empty());
    }

    #[test]
    fn template_needs_both_placeholders() {
        assert!(RunnerConfig::new("detect.sh {image}", Duration::from_secs(1)).is_err());
        assert!(RunnerConfig::new("detect.sh {image} {out}", Duration::from_secs(1)).is_ok());
    }

    #[test]
    fn runner_stub_and_failures() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_of(3);
        let out = dir.path().join("run");
        let cfg = RunnerConfig::new(": {image}; : > {out}", Duration::from_secs(10)).unwrap();
        let run = run_model(&cfg, &m, dir.path(), "M0", &out, 2).unwrap();
        assert!(run.predictions.iter().all(|p| p.detections.is_empty()));
        assert!(run.metadata.started.is_some());

        let failing = RunnerConfig::new(
            "case {image} in *img_0002*) echo boom >&2; exit 1;; esac; : > {out}",
            Duration::from_secs(10),
        )
        .unwrap();
        match run_model(&failing, &m, dir.path(), "M0", &out, 2) {
            Err(ModelRunError::CommandFailed { image_id, stderr, code }) => {
                assert_eq!(image_id, "img_0002");
                assert_eq!(stderr, "boom");
                assert_eq!(code, Some(1));
            }
            other => panic!("{other:?}"),
        }

        let lazy = RunnerConfig::new(": {image} {out}", Duration::from_secs(10)).unwrap();
        assert!(matches!(run_model(&lazy, &m, dir.path(), "M0", &out, 1), Err(ModelRunError::NoOutput(_))));

        let slow = RunnerConfig::new("sleep 5; : {image} {out}", Duration::from_millis(200)).unwrap();
        assert!(matches!(run_model(&slow, &m, dir.path(), "M0", &out, 1), Err(ModelRunError::Timeout { .. })));
    }

    #[test]
    fn batch_mode_runs_once() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_of(3);
        let out = dir.path().join("run");
        let mut cfg = RunnerConfig::new(
            r#"cut -f1 {image} | while read id; do echo "blue 0.5 0.1 0.1 0.1 0.1" > {out}/$id.pred; done"#,
            Duration::from_secs(10),
        )
        .unwrap();
        cfg.batch = true;
        let run = run_model(&cfg, &m, dir.path(), "M0", &out, 1).unwrap();
        assert!(run.predictions.iter().all(|p| p.detections.len() == 1));
    }
}
