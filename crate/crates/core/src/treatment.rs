//! Retraining dataset recipes: targeted synthetic images for the diagnosed
//! weak scenarios plus a rehearsal sample of untouched training images.
//!
//! Training itself happens outside the harness; a plan is a manifest and a
//! summary naming the base model to continue from.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::mutant_id;
use crate::dataset::{
    fraction_count, merge_manifests, sample_count, save_manifest, DatasetError, DatasetManifest, ImageRecord,
    ManifestEntry,
};
use crate::datamorph::{
    compose_chain, derive_case_seed, derive_stream_seed, DatamorphChain, DatamorphError, DatamorphismSpec, PixelImage,
};

pub const SYNTHETIC_STREAM: &str = "synthetic";
pub const REHEARSAL_STREAM: &str = "rehearsal";

/// Above this many target operators each source image gets a single
/// operator, assigned round-robin.
pub const MAX_OPERATORS_PER_SOURCE: usize = 3;

#[derive(Debug, Error)]
pub enum TreatmentError {
    #[error("synthetic and rehearsal fractions must lie in (0, 1], got p={p}, r={r}")]
    InvalidFraction { p: f64, r: f64 },
    #[error("treatment needs at least one target operator")]
    NoTarget,
    #[error("training manifest is empty")]
    EmptyTrain,
    #[error("fraction too small for dataset size ({fraction} of {size} images)")]
    FractionTooSmall { fraction: f64, size: usize },
    #[error("sweep fractions must be strictly increasing: {0:?}")]
    UnsortedSweep(Vec<f64>),
    #[error("invalid sweep range {0:?} (expected start:end:step)")]
    BadRange(String),
    #[error("plan references unknown training image {0:?}")]
    UnknownSource(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Datamorph(#[from] DatamorphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    /// Source images to augment, as a fraction of the training set.
    pub synthetic_fraction: f64,
    /// Original images kept unmodified, as a fraction of the training set.
    pub rehearsal_fraction: f64,
    pub target: Vec<DatamorphismSpec>,
    pub master_seed: u64,
    /// Draw synthetic sources only from images not picked for rehearsal.
    #[serde(default)]
    pub disjoint: bool,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<(), TreatmentError> {
        let ok = |v: f64| v > 0.0 && v <= 1.0;
        if !ok(self.synthetic_fraction) || !ok(self.rehearsal_fraction) {
            return Err(TreatmentError::InvalidFraction { p: self.synthetic_fraction, r: self.rehearsal_fraction });
        }
        if self.target.is_empty() {
            return Err(TreatmentError::NoTarget);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorAssignment {
    /// Every source receives every target operator.
    All,
    /// Source `i` receives target operator `i mod |target|`.
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEntry {
    pub source_id: String,
    pub operator: DatamorphismSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanCounts {
    pub sources: usize,
    pub synthetic: usize,
    pub rehearsal: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentPlan {
    pub label: String,
    pub spec: MixtureSpec,
    pub base_model_id: String,
    pub train_size: usize,
    pub assignment: OperatorAssignment,
    pub synthetic_seed: u64,
    pub rehearsal_seed: u64,
    pub synthetic: Vec<SyntheticEntry>,
    pub rehearsal: Vec<String>,
    pub counts: PlanCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_path: Option<String>,
}

fn ids(m: &DatasetManifest) -> Vec<String> {
    m.ids().map(String::from).collect()
}

/// Pure planning step: which images are augmented with which operator and
/// which are rehearsed.
pub fn plan_treatment(
    train: &DatasetManifest,
    spec: &MixtureSpec,
    base_model_id: &str,
) -> Result<TreatmentPlan, TreatmentError> {
    spec.validate()?;
    if train.is_empty() {
        return Err(TreatmentError::EmptyTrain);
    }
    let n = train.len();
    let n_sources = fraction_count(spec.synthetic_fraction, n);
    let n_rehearsal = fraction_count(spec.rehearsal_fraction, n);
    for (fraction, count) in [(spec.synthetic_fraction, n_sources), (spec.rehearsal_fraction, n_rehearsal)] {
        if count == 0 {
            return Err(TreatmentError::FractionTooSmall { fraction, size: n });
        }
    }

    // rehearsal is drawn first from the full set so it does not depend on p
    let rehearsal_seed = derive_stream_seed(spec.master_seed, REHEARSAL_STREAM);
    let synthetic_seed = derive_stream_seed(spec.master_seed, SYNTHETIC_STREAM);
    let rehearsal = ids(&sample_count(train, n_rehearsal, rehearsal_seed)?);
    let pool = if spec.disjoint {
        let taken: HashSet<&str> = rehearsal.iter().map(String::as_str).collect();
        let mut rest = train.empty_like();
        rest.images = train.images.iter().filter(|e| !taken.contains(e.image.id.as_str())).cloned().collect();
        rest
    } else {
        train.clone()
    };
    let sources = ids(&sample_count(&pool, n_sources, synthetic_seed)?);

    let assignment = if spec.target.len() <= MAX_OPERATORS_PER_SOURCE {
        OperatorAssignment::All
    } else {
        OperatorAssignment::RoundRobin
    };
    let synthetic: Vec<SyntheticEntry> = match assignment {
        OperatorAssignment::All => sources
            .iter()
            .flat_map(|s| spec.target.iter().map(|op| SyntheticEntry { source_id: s.clone(), operator: op.clone() }))
            .collect(),
        OperatorAssignment::RoundRobin => sources
            .iter()
            .enumerate()
            .map(|(i, s)| SyntheticEntry { source_id: s.clone(), operator: spec.target[i % spec.target.len()].clone() })
            .collect(),
    };
    let counts = PlanCounts {
        sources: sources.len(),
        synthetic: synthetic.len(),
        rehearsal: rehearsal.len(),
        total: synthetic.len() + rehearsal.len(),
    };
    Ok(TreatmentPlan {
        label: format!("M-{}-p{}", base_model_id, (spec.synthetic_fraction * 100.0).round()),
        spec: spec.clone(),
        base_model_id: base_model_id.to_string(),
        train_size: n,
        assignment,
        synthetic_seed,
        rehearsal_seed,
        synthetic,
        rehearsal,
        counts,
        manifest_path: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub synthetic_fractions: Vec<f64>,
    pub rehearsal_fraction: f64,
    pub target: Vec<DatamorphismSpec>,
    pub master_seed: u64,
    #[serde(default)]
    pub disjoint: bool,
}

impl SweepSpec {
    pub const DEFAULT_FRACTIONS: [f64; 5] = [0.10, 0.20, 0.30, 0.40, 0.50];

    pub fn validate(&self) -> Result<(), TreatmentError> {
        if self.synthetic_fractions.is_empty() || self.synthetic_fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TreatmentError::UnsortedSweep(self.synthetic_fractions.clone()));
        }
        Ok(())
    }
}

/// Parses `start:end:step`, inclusive of `end` up to rounding.
pub fn parse_range(s: &str) -> Result<Vec<f64>, TreatmentError> {
    let bad = || TreatmentError::BadRange(s.to_string());
    let parts: Vec<f64> = s.split(':').map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_, _>>()?;
    let [start, end, step] = parts[..] else { return Err(bad()) };
    if !(step > 0.0) || end < start {
        return Err(bad());
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect())
}

/// One plan per synthetic fraction, all sharing the rehearsal sample.
pub fn sweep(train: &DatasetManifest, s: &SweepSpec, base_model_id: &str) -> Result<Vec<TreatmentPlan>, TreatmentError> {
    s.validate()?;
    s.synthetic_fractions
        .iter()
        .map(|&p| {
            let spec = MixtureSpec {
                synthetic_fraction: p,
                rehearsal_fraction: s.rehearsal_fraction,
                target: s.target.clone(),
                master_seed: s.master_seed,
                disjoint: s.disjoint,
            };
            let mut plan = plan_treatment(train, &spec, base_model_id)?;
            plan.label = format!("M-sweep-p{}", (p * 100.0).round());
            Ok(plan)
        })
        .collect()
}

/// Writes the plan's images under `out_dir/images`, its manifest to
/// `out_dir/manifest.json` and the summary to `out_dir/plan.json`.
pub fn emit_treatment(
    plan: &mut TreatmentPlan,
    train: &DatasetManifest,
    train_dir: &Path,
    out_dir: &Path,
) -> Result<DatasetManifest, TreatmentError> {
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|source| TreatmentError::Io { path: images_dir.clone(), source })?;
    let index: HashMap<&str, &ManifestEntry> = train.images.iter().map(|e| (e.image.id.as_str(), e)).collect();
    let lookup = |id: &str| index.get(id).copied().ok_or_else(|| TreatmentError::UnknownSource(id.to_string()));

    let synthetic: Vec<ManifestEntry> = plan
        .synthetic
        .par_iter()
        .map(|entry| {
            let src = lookup(&entry.source_id)?;
            let image = PixelImage::load(&train_dir.join(&src.image.path))?;
            let chain = DatamorphChain::single(entry.operator.clone());
            let case_seed = derive_case_seed(plan.synthetic_seed, &entry.source_id, chain.ops());
            let rec = compose_chain(&chain, &entry.source_id, &image, &src.image.annotations, case_seed)?;
            let id = mutant_id(&entry.source_id, &chain.names());
            let rel = format!("images/{id}.png");
            rec.image.save_png(&out_dir.join(&rel))?;
            Ok(ManifestEntry {
                image: ImageRecord {
                    id,
                    path: rel,
                    width: rec.image.width,
                    height: rec.image.height,
                    annotations: rec.annotations,
                },
                provenance: rec.provenance,
            })
        })
        .collect::<Result<_, TreatmentError>>()?;

    let rehearsal: Vec<ManifestEntry> = plan
        .rehearsal
        .par_iter()
        .map(|id| {
            let src = lookup(id)?;
            let from = train_dir.join(&src.image.path);
            let ext = Path::new(&src.image.path).extension().and_then(|e| e.to_str()).unwrap_or("png");
            let rel = format!("images/{id}.{ext}");
            // rehearsal images are byte-for-byte copies
            fs::copy(&from, out_dir.join(&rel)).map_err(|source| TreatmentError::Io { path: from.clone(), source })?;
            let mut entry = src.clone();
            entry.image.path = rel;
            Ok(entry)
        })
        .collect::<Result<_, TreatmentError>>()?;

    let mut synth_manifest = train.empty_like();
    synth_manifest.images = synthetic;
    let mut rehearsal_manifest = train.empty_like();
    rehearsal_manifest.images = rehearsal;
    let mut manifest = merge_manifests(&[synth_manifest, rehearsal_manifest])?;
    manifest.master_seed = Some(plan.spec.master_seed);

    let manifest_path = out_dir.join("manifest.json");
    save_manifest(&manifest, &manifest_path)?;
    plan.manifest_path = Some("manifest.json".to_string());
    let summary = out_dir.join("plan.json");
    let text = serde_json::to_string_pretty(plan).expect("plan serializes");
    fs::write(&summary, text + "\n").map_err(|source| TreatmentError::Io { path: summary, source })?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::manifest_of;
    use crate::datamorph::Operator;

    fn spec(p: f64, r: f64, target: &[Operator]) -> MixtureSpec {
        MixtureSpec {
            synthetic_fraction: p,
            rehearsal_fraction: r,
            target: target.iter().map(|&o| o.into()).collect(),
            master_seed: 99,
            disjoint: false,
        }
    }

    #[test]
    fn peak_mixture_counts() {
        let plan = plan_treatment(&manifest_of(1000), &spec(0.30, 0.10, &[Operator::OrangeCone]), "M1").unwrap();
        assert_eq!(plan.counts, PlanCounts { sources: 300, synthetic: 300, rehearsal: 100, total: 400 });
        assert_eq!(plan.assignment, OperatorAssignment::All);
    }

    #[test]
    fn seven_operators_go_round_robin() {
        let plan = plan_treatment(&manifest_of(1000), &spec(0.10, 0.10, &Operator::SCENARIOS), "M0").unwrap();
        assert_eq!((plan.counts.synthetic, plan.counts.rehearsal), (100, 100));
        assert_eq!(plan.assignment, OperatorAssignment::RoundRobin);
        assert_eq!(plan.synthetic[8].operator.op(), Operator::Dark);
    }

    #[test]
    fn few_operators_apply_to_every_source() {
        let plan = plan_treatment(&manifest_of(100), &spec(0.10, 0.10, &[Operator::Fog, Operator::Rain]), "M0").unwrap();
        assert_eq!(plan.counts.sources, 10);
        assert_eq!(plan.counts.synthetic, 20);
    }

    #[test]
    fn disjoint_sampling() {
        let mut s = spec(0.5, 0.5, &[Operator::Fog]);
        s.disjoint = true;
        let plan = plan_treatment(&manifest_of(100), &s, "M0").unwrap();
        let rehearsal: HashSet<&String> = plan.rehearsal.iter().collect();
        assert!(plan.synthetic.iter().all(|e| !rehearsal.contains(&e.source_id)));
        s.synthetic_fraction = 0.6;
        assert!(plan_treatment(&manifest_of(100), &s, "M0").is_err());
    }

    #[test]
    fn invalid_specs() {
        let m = manifest_of(10);
        assert!(matches!(plan_treatment(&m, &spec(0.0, 0.1, &[Operator::Fog]), "M"), Err(TreatmentError::InvalidFraction { .. })));
        assert!(matches!(plan_treatment(&m, &spec(0.1, 0.1, &[]), "M"), Err(TreatmentError::NoTarget)));
        assert!(matches!(plan_treatment(&m, &spec(0.05, 0.1, &[Operator::Fog]), "M"), Err(TreatmentError::FractionTooSmall { .. })));
    }

    #[test]
    fn sweep_shares_rehearsal() {
        let s = SweepSpec {
            synthetic_fractions: SweepSpec::DEFAULT_FRACTIONS.to_vec(),
            rehearsal_fraction: 0.1,
            target: vec![Operator::OrangeCone.into()],
            master_seed: 3,
            disjoint: false,
        };
        let plans = sweep(&manifest_of(1000), &s, "M1").unwrap();
        let counts: Vec<usize> = plans.iter().map(|p| p.counts.synthetic).collect();
        assert_eq!(counts, [100, 200, 300, 400, 500]);
        assert!(plans.windows(2).all(|w| w[0].rehearsal == w[1].rehearsal));
        assert_eq!(plans[0].label, "M-sweep-p10");
        assert_eq!(plans[4].label, "M-sweep-p50");

        let single = SweepSpec { synthetic_fractions: vec![0.3], ..s.clone() };
        let one = sweep(&manifest_of(1000), &single, "M1").unwrap();
        let direct = plan_treatment(
            &manifest_of(1000),
            &MixtureSpec { synthetic_fraction: 0.3, rehearsal_fraction: 0.1, target: s.target.clone(), master_seed: 3, disjoint: false },
            "M1",
        )
        .unwrap();
        assert_eq!(one[0].synthetic, direct.synthetic);
        assert_eq!(one[0].rehearsal, direct.rehearsal);

        let unsorted = SweepSpec { synthetic_fractions: vec![0.3, 0.2], ..s };
        assert!(matches!(sweep(&manifest_of(10), &unsorted, "M1"), Err(TreatmentError::UnsortedSweep(_))));
    }

    #[test]
    fn range_parsing() {
        assert_eq!(parse_range("0.10:0.50:0.10").unwrap(), vec![0.1, 0.2, 0.3, 0.4, 0.5]);
        assert!(parse_range("0.5:0.1:0.1").is_err());
        assert!(parse_range("a:b").is_err());
    }
}
