//! Mutant coverage criteria: planning test sets that satisfy them and
//! measuring how much of a criterion an existing test set covers.
//!
//! Chains are unordered operator subsets applied in registry order, so the
//! coverage identity of a test case is `(seed id, set of operators)`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{save_manifest, DatasetError, DatasetManifest, ImageRecord, ManifestEntry, Provenance};
use crate::datamorph::{
    compose_chain, derive_case_seed, DatamorphChain, DatamorphError, DatamorphismSpec, Operator, PixelImage,
};

#[derive(Debug, Error)]
pub enum CoverageError {
    #[error("invalid criterion {0:?} (expected first, kth:K with K >= 2, or combo:J with 1 <= J <= 8)")]
    InvalidCriterion(String),
    #[error("no seed images to plan from")]
    EmptySeeds,
    #[error("operator set is empty")]
    EmptyOperators,
    #[error("operator {0} listed more than once")]
    DuplicateOperator(Operator),
    #[error("test set image {image:?} uses unknown operator {name:?}")]
    UnknownOperator { image: String, name: String },
    #[error("plan references seed {0:?}, which is not in the seed manifest")]
    UnknownSeed(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Datamorph(#[from] DatamorphError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoverageCriterion {
    /// Seeds plus every single-operator mutant.
    FirstOrder,
    /// Seeds plus every mutant of order `1..K`.
    KthOrder(u32),
    /// Seeds plus every operator combination up to `max_order`.
    CombinationComplete(u32),
}

impl CoverageCriterion {
    pub fn validate(self) -> Result<Self, CoverageError> {
        match self {
            CoverageCriterion::KthOrder(k) if k < 2 => Err(CoverageError::InvalidCriterion(self.to_string())),
            CoverageCriterion::CombinationComplete(j) if j < 1 || j as usize > Operator::ALL.len() => {
                Err(CoverageError::InvalidCriterion(self.to_string()))
            }
            _ => Ok(self),
        }
    }

    /// Longest chain the criterion requires.
    pub fn max_order(self) -> usize {
        match self {
            CoverageCriterion::FirstOrder => 1,
            CoverageCriterion::KthOrder(k) => k as usize - 1,
            CoverageCriterion::CombinationComplete(j) => j as usize,
        }
    }
}

impl fmt::Display for CoverageCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoverageCriterion::FirstOrder => f.write_str("first"),
            CoverageCriterion::KthOrder(k) => write!(f, "kth:{k}"),
            CoverageCriterion::CombinationComplete(j) => write!(f, "combo:{j}"),
        }
    }
}

impl FromStr for CoverageCriterion {
    type Err = CoverageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CoverageError::InvalidCriterion(s.to_string());
        let s = s.trim();
        let c = if s == "first" {
            CoverageCriterion::FirstOrder
        } else if let Some(k) = s.strip_prefix("kth:") {
            CoverageCriterion::KthOrder(k.parse().map_err(|_| bad())?)
        } else if let Some(j) = s.strip_prefix("combo:") {
            CoverageCriterion::CombinationComplete(j.parse().map_err(|_| bad())?)
        } else {
            return Err(bad());
        };
        c.validate().map_err(|_| bad())
    }
}

impl Serialize for CoverageCriterion {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CoverageCriterion {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub seed_id: String,
    /// Empty for the seed itself.
    pub chain: Vec<DatamorphismSpec>,
}

impl PlanEntry {
    pub fn chain_names(&self) -> Vec<String> {
        self.chain.iter().map(|s| s.name().to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutantPlan {
    pub criterion: CoverageCriterion,
    pub operator_set: Vec<String>,
    pub entries: Vec<PlanEntry>,
}

/// All `k`-subsets of `0..n` in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

/// Sorts operators into registry order, rejecting duplicates.
fn canonical_operators(operators: &[DatamorphismSpec]) -> Result<Vec<DatamorphismSpec>, CoverageError> {
    if operators.is_empty() {
        return Err(CoverageError::EmptyOperators);
    }
    let mut ops = operators.to_vec();
    ops.sort_by_key(|s| s.op().registry_index());
    for pair in ops.windows(2) {
        if pair[0].op() == pair[1].op() {
            return Err(CoverageError::DuplicateOperator(pair[0].op()));
        }
    }
    Ok(ops)
}

pub fn plan_mutants(
    seeds: &DatasetManifest,
    operators: &[DatamorphismSpec],
    criterion: CoverageCriterion,
) -> Result<MutantPlan, CoverageError> {
    let criterion = criterion.validate()?;
    let ops = canonical_operators(operators)?;
    let seed_ids: Vec<&str> =
        seeds.images.iter().filter(|e| e.provenance.is_seed()).map(|e| e.image.id.as_str()).collect();
    if seed_ids.is_empty() {
        return Err(CoverageError::EmptySeeds);
    }
    let max = criterion.max_order().min(ops.len());
    let subsets: Vec<Vec<usize>> = (0..=max).flat_map(|k| combinations(ops.len(), k)).collect();
    let entries = seed_ids
        .iter()
        .flat_map(|seed| {
            subsets.iter().map(|subset| PlanEntry {
                seed_id: seed.to_string(),
                chain: subset.iter().map(|&i| ops[i].clone()).collect(),
            })
        })
        .collect();
    Ok(MutantPlan { criterion, operator_set: ops.iter().map(|s| s.name().to_string()).collect(), entries })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingEntry {
    pub seed_id: String,
    pub chain: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub criterion: CoverageCriterion,
    pub operator_set: Vec<String>,
    pub satisfied: bool,
    pub required: usize,
    pub present: usize,
    pub ratio: f64,
    pub missing: Vec<MissingEntry>,
}

/// Measures `testset` against `criterion` over `operators`. Seeds are the
/// original images plus every seed id a mutant refers to.
pub fn measure_coverage(
    testset: &DatasetManifest,
    operators: &[DatamorphismSpec],
    criterion: CoverageCriterion,
) -> Result<CoverageReport, CoverageError> {
    let criterion = criterion.validate()?;
    let ops = canonical_operators(operators)?;
    let allowed: HashSet<Operator> = ops.iter().map(DatamorphismSpec::op).collect();

    let mut seed_order: Vec<String> = Vec::new();
    let mut known_seeds = HashSet::new();
    let mut present: HashSet<(String, BTreeSet<Operator>)> = HashSet::new();
    for entry in &testset.images {
        let prov = &entry.provenance;
        let seed = prov.seed_id.clone().unwrap_or_else(|| entry.image.id.clone());
        if known_seeds.insert(seed.clone()) {
            seed_order.push(seed.clone());
        }
        let mut set = BTreeSet::new();
        for name in &prov.chain {
            let op: Operator = name
                .parse()
                .map_err(|_| CoverageError::UnknownOperator { image: entry.image.id.clone(), name: name.clone() })?;
            set.insert(op);
        }
        // repeated operators or operators outside the set satisfy nothing
        if set.len() == prov.chain.len() && set.iter().all(|o| allowed.contains(o)) {
            present.insert((seed, set));
        }
    }

    let max = criterion.max_order().min(ops.len());
    let subsets: Vec<BTreeSet<Operator>> = (0..=max)
        .flat_map(|k| combinations(ops.len(), k))
        .map(|idx| idx.into_iter().map(|i| ops[i].op()).collect())
        .collect();
    let mut missing = Vec::new();
    let mut hit = 0;
    for seed in &seed_order {
        for subset in &subsets {
            if present.contains(&(seed.clone(), subset.clone())) {
                hit += 1;
            } else {
                missing.push(MissingEntry {
                    seed_id: seed.clone(),
                    chain: subset.iter().map(|o| o.name().to_string()).collect(),
                });
            }
        }
    }
    let required = seed_order.len() * subsets.len();
    Ok(CoverageReport {
        criterion,
        operator_set: ops.iter().map(|s| s.name().to_string()).collect(),
        satisfied: missing.is_empty(),
        required,
        present: hit,
        ratio: if required == 0 { 1.0 } else { hit as f64 / required as f64 },
        missing,
    })
}

/// Id of the test case produced by `chain` from `seed_id`.
pub fn mutant_id(seed_id: &str, chain: &[String]) -> String {
    if chain.is_empty() {
        seed_id.to_string()
    } else {
        format!("{seed_id}__{}", chain.join("+"))
    }
}

/// Runs the plan: writes one PNG per entry under `out_dir/images` and the
/// resulting manifest to `out_dir/manifest.json`.
pub fn materialize_plan(
    plan: &MutantPlan,
    seeds: &DatasetManifest,
    seeds_dir: &Path,
    master_seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest, CoverageError> {
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|source| CoverageError::Io { path: images_dir.clone(), source })?;

    let seed_index: HashMap<&str, &ManifestEntry> = seeds.images.iter().map(|e| (e.image.id.as_str(), e)).collect();
    for e in &plan.entries {
        if !seed_index.contains_key(e.seed_id.as_str()) {
            return Err(CoverageError::UnknownSeed(e.seed_id.clone()));
        }
    }

    // group entries by seed so each seed image is decoded once
    let mut groups: Vec<(&str, Vec<&PlanEntry>)> = Vec::new();
    for e in &plan.entries {
        match groups.last_mut() {
            Some((seed, list)) if *seed == e.seed_id => list.push(e),
            _ => groups.push((e.seed_id.as_str(), vec![e])),
        }
    }

    let produced: Vec<Vec<ManifestEntry>> = groups
        .par_iter()
        .map(|(seed_id, entries)| {
            let seed = seed_index[seed_id];
            let image = PixelImage::load(&seeds_dir.join(&seed.image.path))?;
            let mut out = Vec::with_capacity(entries.len());
            for entry in entries {
                let names = entry.chain_names();
                let id = mutant_id(seed_id, &names);
                let (pixels, annotations, provenance) = if entry.chain.is_empty() {
                    (image.clone(), seed.image.annotations.clone(), Provenance::original())
                } else {
                    let chain = DatamorphChain::new(entry.chain.clone())?;
                    let case_seed = derive_case_seed(master_seed, seed_id, &entry.chain);
                    let rec = compose_chain(&chain, seed_id, &image, &seed.image.annotations, case_seed)?;
                    (rec.image, rec.annotations, rec.provenance)
                };
                let rel = format!("images/{id}.png");
                pixels.save_png(&out_dir.join(&rel))?;
                out.push(ManifestEntry {
                    image: ImageRecord { id, path: rel, width: pixels.width, height: pixels.height, annotations },
                    provenance,
                });
            }
            Ok(out)
        })
        .collect::<Result<_, CoverageError>>()?;

    let mut manifest = seeds.empty_like();
    manifest.master_seed = Some(master_seed);
    manifest.images = produced.into_iter().flatten().collect();
    manifest.validate()?;
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}
