//! Human triage decisions: suspected weak scenarios/classes and labels that
//! a tester could not recognize in a mutant image.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetManifest;
use crate::datamorph::{apply_recognizability_filter, DatamorphError};
use crate::evaluate::Suspect;

pub const TRIAGE_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum TriageError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse triage file {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unknown tag {0:?}")]
    UnknownTag(String),
    #[error("triage references unknown image {0:?}")]
    UnknownImage(String),
    #[error(transparent)]
    Dangling(#[from] DatamorphError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Tag {
    SuspectScenario(String),
    SuspectClass(String),
    Unrecognizable,
    Ok,
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::SuspectScenario(s) => write!(f, "suspect-scenario:{s}"),
            Tag::SuspectClass(c) => write!(f, "suspect-class:{c}"),
            Tag::Unrecognizable => f.write_str("unrecognizable"),
            Tag::Ok => f.write_str("ok"),
        }
    }
}

impl FromStr for Tag {
    type Err = TriageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(name) = s.strip_prefix("suspect-scenario:").filter(|n| !n.is_empty()) {
            return Ok(Tag::SuspectScenario(name.to_string()));
        }
        if let Some(name) = s.strip_prefix("suspect-class:").filter(|n| !n.is_empty()) {
            return Ok(Tag::SuspectClass(name.to_string()));
        }
        match s {
            "unrecognizable" => Ok(Tag::Unrecognizable),
            "ok" => Ok(Tag::Ok),
            _ => Err(TriageError::UnknownTag(s.to_string())),
        }
    }
}

impl Serialize for Tag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Tag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageEntry {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation_index: Option<usize>,
    pub tag: Tag,
    #[serde(default)]
    pub note: String,
    #[serde(default)]
    pub author: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl TriageEntry {
    pub fn new(image_id: impl Into<String>, annotation_index: Option<usize>, tag: Tag) -> Self {
        TriageEntry {
            image_id: image_id.into(),
            annotation_index,
            tag,
            note: String::new(),
            author: String::new(),
            timestamp: None,
        }
    }

    /// Same entry stamped with the current UTC time.
    pub fn stamped(mut self) -> Self {
        self.timestamp = Some(chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
        self
    }

    fn same_target(&self, other: &TriageEntry) -> bool {
        self.image_id == other.image_id && self.annotation_index == other.annotation_index && self.tag == other.tag
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageFile {
    pub version: String,
    pub entries: Vec<TriageEntry>,
}

impl Default for TriageFile {
    fn default() -> Self {
        TriageFile { version: TRIAGE_VERSION.to_string(), entries: Vec::new() }
    }
}

impl TriageFile {
    /// Adds an entry unless one with the same image, annotation and tag is
    /// already present. Returns whether the file changed.
    pub fn add(&mut self, entry: TriageEntry) -> bool {
        if self.entries.iter().any(|e| e.same_target(&entry)) {
            return false;
        }
        self.entries.push(entry);
        true
    }

    /// Distinct suspects named by `suspect-*` tags, in first-seen order.
    pub fn suspects(&self) -> Vec<Suspect> {
        let mut out: Vec<Suspect> = Vec::new();
        for e in &self.entries {
            let s = match &e.tag {
                Tag::SuspectScenario(name) => Suspect::Scenario(name.clone()),
                Tag::SuspectClass(name) => Suspect::Class(name.clone()),
                _ => continue,
            };
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out
    }

    /// Checks that every entry points at an image (and annotation) of `m`.
    pub fn validate_against(&self, m: &DatasetManifest) -> Result<(), TriageError> {
        for e in &self.entries {
            let entry = m.get(&e.image_id).ok_or_else(|| TriageError::UnknownImage(e.image_id.clone()))?;
            if let Some(index) = e.annotation_index {
                let len = entry.image.annotations.len();
                if index >= len {
                    return Err(DatamorphError::DanglingTriage { image_id: e.image_id.clone(), index, len }.into());
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TriageError> {
        let text = fs::read_to_string(path).map_err(|source| TriageError::Io { path: path.to_path_buf(), source })?;
        serde_json::from_str(&text).map_err(|source| TriageError::Parse { path: path.to_path_buf(), source })
    }

    /// Missing file reads as an empty triage.
    pub fn load_or_default(path: &Path) -> Result<Self, TriageError> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::default())
        }
    }

    /// Writes to a temporary sibling and renames it over `path`.
    pub fn save_atomic(&self, path: &Path) -> Result<(), TriageError> {
        let io = |source| TriageError::Io { path: path.to_path_buf(), source };
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(io)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        let text = serde_json::to_string_pretty(self).expect("triage serializes");
        tmp.write_all(text.as_bytes()).map_err(io)?;
        tmp.write_all(b"\n").map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }
}

/// Applies every `unrecognizable` entry of `triage` to the annotations of `m`.
pub fn apply_triage(m: &DatasetManifest, triage: &TriageFile) -> Result<DatasetManifest, TriageError> {
    triage.validate_against(m)?;
    let mut out = m.clone();
    for entry in &mut out.images {
        entry.image.annotations = apply_recognizability_filter(&entry.image.id, &entry.image.annotations, triage)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::manifest_of;
    use crate::dataset::class_stats;

    #[test]
    fn tag_strings_round_trip() {
        for s in ["suspect-scenario:fog", "suspect-class:orange", "unrecognizable", "ok"] {
            assert_eq!(s.parse::<Tag>().unwrap().to_string(), s);
        }
        assert!("suspect-class:".parse::<Tag>().is_err());
        assert!("bogus".parse::<Tag>().is_err());
    }

    #[test]
    fn duplicate_tags_are_idempotent() {
        let mut t = TriageFile::default();
        assert!(t.add(TriageEntry::new("a", None, Tag::SuspectClass("orange".into()))));
        assert!(!t.add(TriageEntry::new("a", None, Tag::SuspectClass("orange".into()))));
        assert!(t.add(TriageEntry::new("b", None, Tag::SuspectClass("orange".into()))));
        assert_eq!(t.entries.len(), 2);
        assert_eq!(t.suspects(), vec![Suspect::Class("orange".into())]);
    }

    #[test]
    fn save_is_atomic_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("triage").join("triage.json");
        let mut t = TriageFile::default();
        t.add(TriageEntry::new("img_0001", Some(0), Tag::Unrecognizable));
        t.save_atomic(&path).unwrap();
        assert_eq!(TriageFile::load(&path).unwrap(), t);
        let leftovers = fs::read_dir(path.parent().unwrap()).unwrap().count();
        assert_eq!(leftovers, 1);
    }

    #[test]
    fn apply_triage_flips_stats() {
        let m = manifest_of(3);
        let before = class_stats(&m);
        let mut t = TriageFile::default();
        t.add(TriageEntry::new("img_0002", Some(0), Tag::Unrecognizable));
        let after = class_stats(&apply_triage(&m, &t).unwrap());
        assert_eq!(after.total, before.total - 1);
        assert_eq!(after.count("orange"), before.count("orange") - 1);

        let mut bad = TriageFile::default();
        bad.add(TriageEntry::new("nope", None, Tag::Ok));
        assert!(matches!(apply_triage(&m, &bad), Err(TriageError::UnknownImage(_))));
    }
}
