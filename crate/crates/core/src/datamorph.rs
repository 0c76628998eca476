//! Seeded, geometry-preserving image transforms ("datamorphisms") and their
//! composition into chains.
//!
//! Every operator is a pure function of `(spec, image, annotations, seed)`.
//! Randomness only comes from the seed handed in, which callers derive with
//! [`derive_case_seed`], so outputs never depend on scheduling.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Annotation, BBox, Provenance};
use crate::triage::{Tag, TriageFile};

/// Class whose boxes the orange-cone operator recolors.
pub const BLUE_CLASS: &str = "blue";

#[derive(Debug, Error)]
pub enum DatamorphError {
    #[error("unknown operator {0:?}")]
    UnknownOperator(String),
    #[error("operator {op}: unknown parameter {param:?}")]
    UnknownParam { op: &'static str, param: String },
    #[error("operator {op}: parameter {param} = {value} outside [{min}, {max}]")]
    ParamOutOfRange { op: &'static str, param: &'static str, value: f64, min: f64, max: f64 },
    #[error("operator {op}: {msg}")]
    InvalidParams { op: &'static str, msg: String },
    #[error("chain must contain at least one operator")]
    EmptyChain,
    #[error("pixel buffer has {actual} bytes, expected {expected}")]
    BadBuffer { expected: usize, actual: usize },
    #[error("image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("triage entry references annotation {index} of {image_id:?}, which has {len}")]
    DanglingTriage { image_id: String, index: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    Bright,
    Dark,
    Flare,
    Fog,
    Rain,
    Speed,
    Water,
    #[serde(rename = "orangecone")]
    OrangeCone,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamDef {
    pub name: &'static str,
    pub default: f64,
    pub min: f64,
    pub max: f64,
    pub integer: bool,
}

const fn p(name: &'static str, default: f64, min: f64, max: f64) -> ParamDef {
    ParamDef { name, default, min, max, integer: false }
}

const fn pi(name: &'static str, default: f64, min: f64, max: f64) -> ParamDef {
    ParamDef { name, default, min, max, integer: true }
}

const BRIGHT_PARAMS: &[ParamDef] = &[p("alpha", 0.9, 0.0, 1.0)];
const DARK_PARAMS: &[ParamDef] = &[p("c", 0.4, 0.0, 1.0)];
const FLARE_PARAMS: &[ParamDef] = &[p("radius", 0.25, 0.01, 1.0), p("intensity", 180.0, 0.0, 255.0)];
const FOG_PARAMS: &[ParamDef] = &[p("f", 0.4, 0.0, 1.0), p("color", 220.0, 0.0, 255.0)];
const RAIN_PARAMS: &[ParamDef] = &[
    p("density", 0.002, 0.0, 0.05),
    pi("len_min", 12.0, 1.0, 500.0),
    pi("len_max", 24.0, 1.0, 500.0),
    p("angle_min", 100.0, 0.0, 180.0),
    p("angle_max", 110.0, 0.0, 180.0),
    p("opacity", 0.6, 0.0, 1.0),
    p("gray", 200.0, 0.0, 255.0),
];
const SPEED_PARAMS: &[ParamDef] = &[pi("kernel", 9.0, 1.0, 99.0)];
const WATER_PARAMS: &[ParamDef] = &[
    p("sigma", 1.5, 0.1, 20.0),
    pi("drops", 20.0, 0.0, 1000.0),
    pi("drop_rmin", 4.0, 1.0, 200.0),
    pi("drop_rmax", 10.0, 1.0, 200.0),
    p("drop_sigma", 4.0, 0.1, 20.0),
    p("drop_brighten", 10.0, 0.0, 255.0),
];
const ORANGECONE_PARAMS: &[ParamDef] = &[
    p("blue_lo", 190.0, 0.0, 360.0),
    p("blue_hi", 260.0, 0.0, 360.0),
    p("min_saturation", 0.25, 0.0, 1.0),
    p("orange_lo", 20.0, 0.0, 360.0),
    p("orange_hi", 35.0, 0.0, 360.0),
];

impl Operator {
    /// Registry order; also the canonical application order inside chains.
    pub const ALL: [Operator; 8] = [
        Operator::Bright,
        Operator::Dark,
        Operator::Flare,
        Operator::Fog,
        Operator::Rain,
        Operator::Speed,
        Operator::Water,
        Operator::OrangeCone,
    ];

    /// The seven weather/camera scenarios of the case study.
    pub const SCENARIOS: [Operator; 7] = [
        Operator::Bright,
        Operator::Dark,
        Operator::Flare,
        Operator::Fog,
        Operator::Rain,
        Operator::Speed,
        Operator::Water,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operator::Bright => "bright",
            Operator::Dark => "dark",
            Operator::Flare => "flare",
            Operator::Fog => "fog",
            Operator::Rain => "rain",
            Operator::Speed => "speed",
            Operator::Water => "water",
            Operator::OrangeCone => "orangecone",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Operator::Bright => "blend toward white: v' = v*alpha + 255*(1-alpha)",
            Operator::Dark => "gain: v' = v*c",
            Operator::Flare => "additive radial glare centered in the top half of the frame",
            Operator::Fog => "uniform blend toward fog gray: v' = v*(1-f) + color*f",
            Operator::Rain => "seeded semi-transparent streaks",
            Operator::Speed => "horizontal box motion blur",
            Operator::Water => "gaussian blur plus seeded blurred droplets",
            Operator::OrangeCone => "re-hue blue pixels to orange inside blue-class boxes",
        }
    }

    pub fn params(self) -> &'static [ParamDef] {
        match self {
            Operator::Bright => BRIGHT_PARAMS,
            Operator::Dark => DARK_PARAMS,
            Operator::Flare => FLARE_PARAMS,
            Operator::Fog => FOG_PARAMS,
            Operator::Rain => RAIN_PARAMS,
            Operator::Speed => SPEED_PARAMS,
            Operator::Water => WATER_PARAMS,
            Operator::OrangeCone => ORANGECONE_PARAMS,
        }
    }

    /// Whether the output depends on the case seed.
    pub fn is_stochastic(self) -> bool {
        matches!(self, Operator::Flare | Operator::Rain | Operator::Water)
    }

    pub fn registry_index(self) -> usize {
        Operator::ALL.iter().position(|&o| o == self).unwrap()
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operator {
    type Err = DatamorphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Operator::ALL
            .into_iter()
            .find(|o| o.name() == lower)
            .ok_or_else(|| DatamorphError::UnknownOperator(s.to_string()))
    }
}

/// An operator with a fully resolved parameter map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct DatamorphismSpec {
    op: Operator,
    params: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    name: String,
    #[serde(default)]
    params: BTreeMap<String, f64>,
}

impl TryFrom<RawSpec> for DatamorphismSpec {
    type Error = DatamorphError;

    fn try_from(raw: RawSpec) -> Result<Self, Self::Error> {
        DatamorphismSpec::with_params(raw.name.parse()?, &raw.params)
    }
}

impl From<DatamorphismSpec> for RawSpec {
    fn from(s: DatamorphismSpec) -> Self {
        RawSpec { name: s.op.name().to_string(), params: s.params }
    }
}

impl DatamorphismSpec {
    /// Operator with its default parameters.
    pub fn new(op: Operator) -> Self {
        let params = op.params().iter().map(|d| (d.name.to_string(), d.default)).collect();
        DatamorphismSpec { op, params }
    }

    pub fn with_params(op: Operator, overrides: &BTreeMap<String, f64>) -> Result<Self, DatamorphError> {
        let mut spec = DatamorphismSpec::new(op);
        for (k, &v) in overrides {
            let def = op
                .params()
                .iter()
                .find(|d| d.name == k)
                .ok_or_else(|| DatamorphError::UnknownParam { op: op.name(), param: k.clone() })?;
            if !(v >= def.min && v <= def.max) {
                return Err(DatamorphError::ParamOutOfRange {
                    op: op.name(),
                    param: def.name,
                    value: v,
                    min: def.min,
                    max: def.max,
                });
            }
            if def.integer && v.fract() != 0.0 {
                return Err(DatamorphError::InvalidParams { op: op.name(), msg: format!("{k} must be an integer") });
            }
            spec.params.insert(k.clone(), v);
        }
        spec.check_relations()?;
        Ok(spec)
    }

    fn check_relations(&self) -> Result<(), DatamorphError> {
        let bad = |msg: &str| Err(DatamorphError::InvalidParams { op: self.op.name(), msg: msg.to_string() });
        match self.op {
            Operator::Rain if self.get("len_min") > self.get("len_max") => bad("len_min > len_max"),
            Operator::Rain if self.get("angle_min") > self.get("angle_max") => bad("angle_min > angle_max"),
            Operator::Water if self.get("drop_rmin") > self.get("drop_rmax") => bad("drop_rmin > drop_rmax"),
            Operator::Speed if self.get("kernel") as u32 % 2 == 0 => bad("kernel length must be odd"),
            Operator::OrangeCone if self.get("blue_lo") >= self.get("blue_hi") => bad("blue_lo >= blue_hi"),
            Operator::OrangeCone if self.get("orange_lo") > self.get("orange_hi") => bad("orange_lo > orange_hi"),
            _ => Ok(()),
        }
    }

    pub fn op(&self) -> Operator {
        self.op
    }

    pub fn name(&self) -> &'static str {
        self.op.name()
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    /// Resolved parameter value. Panics on a name the operator does not declare.
    pub fn get(&self, name: &str) -> f64 {
        self.params[name]
    }
}

impl From<Operator> for DatamorphismSpec {
    fn from(op: Operator) -> Self {
        DatamorphismSpec::new(op)
    }
}

/// Ordered, non-empty sequence of operators; its length is the mutant order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<DatamorphismSpec>", into = "Vec<DatamorphismSpec>")]
pub struct DatamorphChain {
    ops: Vec<DatamorphismSpec>,
}

impl TryFrom<Vec<DatamorphismSpec>> for DatamorphChain {
    type Error = DatamorphError;

    fn try_from(ops: Vec<DatamorphismSpec>) -> Result<Self, Self::Error> {
        DatamorphChain::new(ops)
    }
}

impl From<DatamorphChain> for Vec<DatamorphismSpec> {
    fn from(c: DatamorphChain) -> Self {
        c.ops
    }
}

impl DatamorphChain {
    pub fn new(ops: Vec<DatamorphismSpec>) -> Result<Self, DatamorphError> {
        if ops.is_empty() {
            return Err(DatamorphError::EmptyChain);
        }
        Ok(DatamorphChain { ops })
    }

    pub fn single(spec: DatamorphismSpec) -> Self {
        DatamorphChain { ops: vec![spec] }
    }

    pub fn ops(&self) -> &[DatamorphismSpec] {
        &self.ops
    }

    pub fn order(&self) -> usize {
        self.ops.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.ops.iter().map(|s| s.name().to_string()).collect()
    }
}

/// Row-major 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl PixelImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, DatamorphError> {
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(DatamorphError::BadBuffer { expected, actual: pixels.len() });
        }
        Ok(PixelImage { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        PixelImage { width, height, pixels }
    }

    fn check(&self) -> Result<(), DatamorphError> {
        let expected = self.width as usize * self.height as usize * 3;
        if self.pixels.len() != expected {
            return Err(DatamorphError::BadBuffer { expected, actual: self.pixels.len() });
        }
        Ok(())
    }

    #[inline]
    fn idx(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.idx(x, y);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.idx(x, y);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn load(path: &Path) -> Result<Self, DatamorphError> {
        let img = image::open(path)
            .map_err(|source| DatamorphError::Image { path: path.display().to_string(), source })?
            .to_rgb8();
        let (width, height) = img.dimensions();
        Ok(PixelImage { width, height, pixels: img.into_raw() })
    }

    /// Writes a PNG, creating missing parent directories.
    pub fn save_png(&self, path: &Path) -> Result<(), DatamorphError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| DatamorphError::Image {
                path: path.display().to_string(),
                source: image::ImageError::IoError(e),
            })?;
        }
        image::save_buffer_with_format(
            path,
            &self.pixels,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|source| DatamorphError::Image { path: path.display().to_string(), source })
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut out = std::io::Cursor::new(Vec::new());
        image::write_buffer_with_format(
            &mut out,
            &self.pixels,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .expect("in-memory png encoding");
        out.into_inner()
    }
}

/// A mutant test case: transformed image, propagated labels and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MutantRecord {
    pub image: PixelImage,
    pub annotations: Vec<Annotation>,
    pub provenance: Provenance,
    pub case_seed: u64,
}

/// Stable 64-bit seed for one (image, chain) pair under a master seed.
pub fn derive_case_seed(master_seed: u64, image_id: &str, chain: &[DatamorphismSpec]) -> u64 {
    let mut h = Sha256::new();
    h.update(b"case-seed/v1");
    h.update(master_seed.to_le_bytes());
    h.update((image_id.len() as u64).to_le_bytes());
    h.update(image_id.as_bytes());
    for spec in chain {
        h.update([0xff]);
        h.update(spec.name().as_bytes());
        for (k, v) in spec.params() {
            h.update([0]);
            h.update(k.as_bytes());
            h.update(v.to_bits().to_le_bytes());
        }
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Seed for an independent named stream (e.g. "synthetic", "rehearsal").
pub fn derive_stream_seed(master_seed: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"stream-seed/v1");
    h.update(master_seed.to_le_bytes());
    h.update(stream.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for step `index` of a chain.
pub fn step_seed(case_seed: u64, index: usize) -> u64 {
    splitmix64(case_seed ^ splitmix64(index as u64 + 1))
}

/// Rounds half away from zero and clamps to a channel value. The value is
/// first snapped to 1e-6 so that exact halves reached through inexact
/// decimal coefficients (255 * (1 - 0.9) = 25.499999...) round as written.
#[inline]
fn to_u8(v: f64) -> u8 {
    let snapped = (v * 1e6).round() / 1e6;
    snapped.round().clamp(0.0, 255.0) as u8
}

fn map_channels(image: &PixelImage, f: impl Fn(f64) -> f64) -> PixelImage {
    let mut lut = [0u8; 256];
    for (v, slot) in lut.iter_mut().enumerate() {
        *slot = to_u8(f(v as f64));
    }
    PixelImage {
        width: image.width,
        height: image.height,
        pixels: image.pixels.iter().map(|&v| lut[v as usize]).collect(),
    }
}

pub fn apply_datamorphism(
    spec: &DatamorphismSpec,
    image: &PixelImage,
    annotations: &[Annotation],
    case_seed: u64,
) -> Result<(PixelImage, Vec<Annotation>), DatamorphError> {
    image.check()?;
    let out = match spec.op {
        Operator::Bright => {
            let a = spec.get("alpha");
            map_channels(image, |v| v * a + 255.0 * (1.0 - a))
        }
        Operator::Dark => {
            let c = spec.get("c");
            map_channels(image, |v| v * c)
        }
        Operator::Fog => {
            let (f, color) = (spec.get("f"), spec.get("color"));
            map_channels(image, |v| v * (1.0 - f) + color * f)
        }
        Operator::Flare => flare(spec, image, case_seed),
        Operator::Rain => rain(spec, image, case_seed),
        Operator::Speed => motion_blur(image, spec.get("kernel") as usize),
        Operator::Water => water(spec, image, case_seed),
        Operator::OrangeCone => {
            let boxes: Vec<BBox> =
                annotations.iter().filter(|a| a.class.as_str() == BLUE_CLASS).map(|a| a.bbox).collect();
            recolor_blue_to_orange(image, &boxes, &HueRemap::from_spec(spec))
        }
    };
    // every operator is photometric, so labels carry over unchanged
    Ok((out, annotations.to_vec()))
}

/// Applies `chain` left to right, seeding step `i` with `step_seed(case_seed, i)`.
pub fn compose_chain(
    chain: &DatamorphChain,
    seed_id: &str,
    image: &PixelImage,
    annotations: &[Annotation],
    case_seed: u64,
) -> Result<MutantRecord, DatamorphError> {
    let mut current = image.clone();
    let mut anns = annotations.to_vec();
    for (i, spec) in chain.ops().iter().enumerate() {
        let (next, next_anns) = apply_datamorphism(spec, &current, &anns, step_seed(case_seed, i))?;
        current = next;
        anns = next_anns;
    }
    Ok(MutantRecord {
        image: current,
        annotations: anns,
        provenance: Provenance::mutant(seed_id, chain.names()),
        case_seed,
    })
}

fn flare(spec: &DatamorphismSpec, image: &PixelImage, seed: u64) -> PixelImage {
    let mut out = image.clone();
    let (w, h) = (f64::from(image.width), f64::from(image.height));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cx = rng.random::<f64>() * w;
    let cy = rng.random::<f64>() * h / 2.0;
    let radius = spec.get("radius") * w.min(h);
    let intensity = spec.get("intensity");
    let x0 = (cx - radius).floor().max(0.0) as u32;
    let x1 = ((cx + radius).ceil().max(0.0) as u32).min(image.width);
    let y0 = (cy - radius).floor().max(0.0) as u32;
    let y1 = ((cy + radius).ceil().max(0.0) as u32).min(image.height);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = (f64::from(x) + 0.5 - cx).hypot(f64::from(y) + 0.5 - cy);
            if d < radius {
                let add = intensity * (1.0 - d / radius);
                let [r, g, b] = out.get(x, y);
                out.set(x, y, [to_u8(f64::from(r) + add), to_u8(f64::from(g) + add), to_u8(f64::from(b) + add)]);
            }
        }
    }
    out
}

fn rain(spec: &DatamorphismSpec, image: &PixelImage, seed: u64) -> PixelImage {
    let mut out = image.clone();
    let (w, h) = (f64::from(image.width), f64::from(image.height));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let streaks = (spec.get("density") * w * h).round() as usize;
    let (len_min, len_max) = (spec.get("len_min") as u32, spec.get("len_max") as u32);
    let (a_min, a_max) = (spec.get("angle_min"), spec.get("angle_max"));
    let opacity = spec.get("opacity");
    let gray = spec.get("gray");
    for _ in 0..streaks {
        let x0 = rng.random::<f64>() * w;
        let y0 = rng.random::<f64>() * h;
        let len = rng.random_range(len_min..=len_max);
        let angle = (a_min + rng.random::<f64>() * (a_max - a_min)).to_radians();
        let (dx, dy) = (angle.cos(), angle.sin());
        let mut last = None;
        for t in 0..len {
            let px = (x0 + f64::from(t) * dx).floor();
            let py = (y0 + f64::from(t) * dy).floor();
            if px < 0.0 || py < 0.0 || px >= w || py >= h {
                continue;
            }
            let (px, py) = (px as u32, py as u32);
            if last == Some((px, py)) {
                continue;
            }
            last = Some((px, py));
            let rgb = out.get(px, py).map(|v| to_u8(f64::from(v) * (1.0 - opacity) + gray * opacity));
            out.set(px, py, rgb);
        }
    }
    out
}

/// Horizontal box blur of odd length `kernel`, edges clamped.
fn motion_blur(image: &PixelImage, kernel: usize) -> PixelImage {
    let half = (kernel / 2) as i64;
    let w = image.width as i64;
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..w {
            let mut acc = [0u32; 3];
            for dx in -half..=half {
                let sx = (x + dx).clamp(0, w - 1) as u32;
                let px = image.get(sx, y);
                for c in 0..3 {
                    acc[c] += u32::from(px[c]);
                }
            }
            out.set(x as u32, y, acc.map(|a| to_u8(f64::from(a) / kernel as f64)));
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let weights: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / sum).collect()
}

/// Separable gaussian blur with clamped edges; returns unrounded channel values.
fn gaussian_blur(image: &PixelImage, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (w, h) = (image.width as i64, image.height as i64);
    let mut tmp = vec![0.0; image.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let sx = (x + k as i64 - radius).clamp(0, w - 1);
                    acc += wt * f64::from(image.pixels[((y * w + sx) * 3) as usize + c]);
                }
                tmp[((y * w + x) * 3) as usize + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; image.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let sy = (y + k as i64 - radius).clamp(0, h - 1);
                    acc += wt * tmp[((sy * w + x) * 3) as usize + c];
                }
                out[((y * w + x) * 3) as usize + c] = acc;
            }
        }
    }
    out
}

fn water(spec: &DatamorphismSpec, image: &PixelImage, seed: u64) -> PixelImage {
    let blurred = PixelImage {
        width: image.width,
        height: image.height,
        pixels: gaussian_blur(image, spec.get("sigma")).into_iter().map(to_u8).collect(),
    };
    let drops = spec.get("drops") as usize;
    if drops == 0 {
        return blurred;
    }
    let drop_src = gaussian_blur(&blurred, spec.get("drop_sigma"));
    let brighten = spec.get("drop_brighten");
    let (rmin, rmax) = (spec.get("drop_rmin") as u32, spec.get("drop_rmax") as u32);
    let (w, h) = (f64::from(image.width), f64::from(image.height));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = blurred.clone();
    for _ in 0..drops {
        let cx = rng.random::<f64>() * w;
        let cy = rng.random::<f64>() * h;
        let r = f64::from(rng.random_range(rmin..=rmax));
        let x0 = (cx - r).floor().max(0.0) as u32;
        let x1 = ((cx + r).ceil().max(0.0) as u32).min(image.width);
        let y0 = (cy - r).floor().max(0.0) as u32;
        let y1 = ((cy + r).ceil().max(0.0) as u32).min(image.height);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (f64::from(x) + 0.5 - cx, f64::from(y) + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    let i = out.idx(x, y);
                    for c in 0..3 {
                        out.pixels[i + c] = to_u8(drop_src[i + c] + brighten);
                    }
                }
            }
        }
    }
    out
}

/// Hue bands for the orange-cone recoloring, in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HueRemap {
    pub blue: (f64, f64),
    pub orange: (f64, f64),
    pub min_saturation: f64,
}

impl Default for HueRemap {
    fn default() -> Self {
        HueRemap::from_spec(&DatamorphismSpec::new(Operator::OrangeCone))
    }
}

impl HueRemap {
    pub fn from_spec(spec: &DatamorphismSpec) -> Self {
        HueRemap {
            blue: (spec.get("blue_lo"), spec.get("blue_hi")),
            orange: (spec.get("orange_lo"), spec.get("orange_hi")),
            min_saturation: spec.get("min_saturation"),
        }
    }

    /// New hue for a pixel, or `None` when it is not in the blue band.
    pub fn remap(&self, h: f64, s: f64) -> Option<f64> {
        let (lo, hi) = self.blue;
        if s < self.min_saturation || h < lo || h > hi {
            return None;
        }
        let t = (h - lo) / (hi - lo);
        Some(self.orange.0 + t * (self.orange.1 - self.orange.0))
    }
}

/// RGB to (hue degrees in [0, 360), saturation, value), all from 8-bit channels.
pub fn rgb_to_hsv([r, g, b]: [u8; 3]) -> (f64, f64, f64) {
    let (r, g, b) = (f64::from(r) / 255.0, f64::from(g) / 255.0, f64::from(b) / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [to_u8((r1 + m) * 255.0), to_u8((g1 + m) * 255.0), to_u8((b1 + m) * 255.0)]
}

/// Re-hues blue pixels to orange inside `blue_boxes`; saturation and value
/// are kept, everything else is left untouched.
pub fn recolor_blue_to_orange(image: &PixelImage, blue_boxes: &[BBox], remap: &HueRemap) -> PixelImage {
    let mut out = image.clone();
    let mut done = vec![false; image.width as usize * image.height as usize];
    for bbox in blue_boxes {
        let (x0, y0, x1, y1) = bbox.pixel_rect(image.width, image.height);
        for y in y0..y1 {
            for x in x0..x1 {
                let flat = y as usize * image.width as usize + x as usize;
                if std::mem::replace(&mut done[flat], true) {
                    continue;
                }
                let (h, s, v) = rgb_to_hsv(image.get(x, y));
                if let Some(nh) = remap.remap(h, s) {
                    out.set(x, y, hsv_to_rgb(nh, s, v));
                }
            }
        }
    }
    out
}

/// Marks the annotations of `image_id` that the triage file flags as
/// unrecognizable.
pub fn apply_recognizability_filter(
    image_id: &str,
    annotations: &[Annotation],
    triage: &TriageFile,
) -> Result<Vec<Annotation>, DatamorphError> {
    let mut out = annotations.to_vec();
    for entry in triage.entries.iter().filter(|e| e.image_id == image_id && e.tag == Tag::Unrecognizable) {
        let Some(index) = entry.annotation_index else { continue };
        let ann = out.get_mut(index).ok_or_else(|| DatamorphError::DanglingTriage {
            image_id: image_id.to_string(),
            index,
            len: annotations.len(),
        })?;
        ann.recognizable = false;
    }
    Ok(out)
}
