//! Procedural radiograph-like dataset with known discriminative regions.
//!
//! Each image holds a rotated elliptical object (the hand analog) on a dark
//! background. Age is painted into the image as affine intensity/texture
//! statistics at three fidelities:
//!
//! * a primary patch (Region-1 analog) with a strong, low-noise signal,
//! * a secondary patch (Region-2 analog) with a flatter, noisier copy,
//! * the object body with a weak trace of the same signal, so whole-object
//!   attention has a true target,
//!
//! while the background carries no age information at all. Gender shifts the
//! age-to-texture mapping by a configured number of months. A closed-form
//! oracle decoder inverts the affine mapping, which pins the information
//! hierarchy of the data at generation time.

use crate::attention::{RegionBox, RegionKind};
use crate::raster::{GrayImage, RasterError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    BadSpec(String),
    #[error("could not place disjoint regions inside the object for sample {sample}")]
    InfeasibleGeometry { sample: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{file} line {line}: {message}")]
    MalformedRow {
        file: String,
        line: u64,
        message: String,
    },
    #[error("missing image file for id {0}")]
    MissingImage(String),
    #[error("record {id}: age {age} outside 1..={max}")]
    AgeOutOfRange { id: String, age: i64, max: usize },
    #[error("csv error in {0}: {1}")]
    Csv(String, #[source] csv::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("split sizes {n_val}+{n_test} do not leave training data from {total}")]
    SplitTooLarge {
        n_val: usize,
        n_test: usize,
        total: usize,
    },
}

/// Everything that determines a generated dataset, bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Fraction of the image spanned by the object's major axis.
    pub object_extent: f64,
    pub region1_size: usize,
    pub region2_size: usize,
    pub age_min: usize,
    pub age_max: usize,
    /// Relative information content of Region-1 vs Region-2, in (0,1).
    /// Region-2 pixel noise is scaled by `split / (1 - split)`.
    pub info_split: f64,
    /// Months by which gender shifts the age-to-texture mapping.
    pub gender_effect: f64,
    /// Pixel noise stddev inside the primary patch.
    pub noise_level: f64,
    /// Fraction of the primary signal span carried by the object body.
    #[serde(default = "default_body_signal")]
    pub body_signal: f64,
    pub seed: u64,
}

fn default_body_signal() -> f64 {
    0.2
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            object_extent: 0.75,
            region1_size: 12,
            region2_size: 10,
            age_min: 1,
            age_max: 240,
            info_split: 0.75,
            gender_effect: 16.0,
            noise_level: 0.05,
            body_signal: 0.2,
            seed: 7,
        }
    }
}

// Texture calibration. Patch means are affine in the shifted, normalized age
// `u`; the sinusoidal banding sums to exactly zero over each patch row, so
// the patch mean alone inverts back to age. The intensity bands of the four
// zones stay disjoint at every age (bg < body < region2 < region1), which
// keeps each region salient across the whole age range; only the position
// inside its band carries age information.
const BG_LEVEL: f64 = 0.08;
const BG_NOISE_FACTOR: f64 = 0.5;
const BODY_BASE: f64 = 0.22;
const R1_BASE: f64 = 0.62;
const R1_SPAN: f64 = 0.28;
const R1_AMP_BASE: f64 = 0.03;
const R1_AMP_SPAN: f64 = 0.02;
const R1_CYCLES: usize = 3;
const R2_BASE: f64 = 0.36;
const R2_SPAN: f64 = 0.20;
const R2_AMP_BASE: f64 = 0.03;
const R2_AMP_SPAN: f64 = 0.01;
const R2_CYCLES: usize = 2;
const MINOR_AXIS_RATIO: f64 = 0.75;
const CENTER_JITTER_FRAC: f64 = 0.05;
const PLACEMENT_TRIES: usize = 1000;

impl GenSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.image_size < 16 {
            return Err(SynthError::BadSpec("image size must be >= 16".into()));
        }
        if !(0.0 < self.object_extent && self.object_extent <= 1.0) {
            return Err(SynthError::BadSpec("object extent must be in (0,1]".into()));
        }
        if self.age_min < 1 || self.age_max < self.age_min {
            return Err(SynthError::BadSpec(format!(
                "bad age range {}..{}",
                self.age_min, self.age_max
            )));
        }
        if !(0.0 < self.info_split && self.info_split < 1.0) {
            return Err(SynthError::BadSpec("info split must be in (0,1)".into()));
        }
        if self.noise_level < 0.0 || self.gender_effect < 0.0 || self.body_signal < 0.0 {
            return Err(SynthError::BadSpec(
                "noise, gender effect and body signal must be non-negative".into(),
            ));
        }
        let geo = Geometry::nominal(self);
        for (size, shrink) in [
            (self.region1_size, geo.shrink_for(self.region1_size)),
            (self.region2_size, geo.shrink_for(self.region2_size)),
        ] {
            if size < 2 {
                return Err(SynthError::BadSpec("patch sizes must be >= 2".into()));
            }
            if shrink <= 0.0 {
                return Err(SynthError::BadSpec(format!(
                    "patch of size {size} cannot fit inside the object"
                )));
            }
        }
        Ok(())
    }

    /// Normalized shifted age in [0,1]; gender in {-1,+1} moves the mapping
    /// by half the effect in each direction.
    fn u_of(&self, age: usize, gender: i8) -> f64 {
        let half = self.gender_effect / 2.0;
        let shifted = age as f64 - gender as f64 * half;
        let u_min = self.age_min as f64 - half;
        let u_max = self.age_max as f64 + half;
        if u_max > u_min {
            (shifted - u_min) / (u_max - u_min)
        } else {
            0.5
        }
    }

    /// Inverse of `u_of`: shifted age from u, then undo the gender shift.
    fn age_of_u(&self, u: f64, gender: i8) -> f64 {
        let half = self.gender_effect / 2.0;
        let u_min = self.age_min as f64 - half;
        let u_max = self.age_max as f64 + half;
        let shifted = u_min + u * (u_max - u_min);
        shifted + gender as f64 * half
    }
}

/// One dataset record. Images are float `[0,1]` in memory, 8-bit on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image: GrayImage,
    /// Age in months.
    pub age: usize,
    /// +1 male, -1 female.
    pub gender: i8,
    /// Ground-truth boxes; empty for externally loaded data without truth.
    pub truth_boxes: Vec<RegionBox>,
}

impl SampleRecord {
    pub fn truth_box(&self, kind: RegionKind) -> Option<&RegionBox> {
        self.truth_boxes.iter().find(|b| b.kind == kind)
    }
}

/// Oracle-decoder errors measured on the generated data, stored in the
/// manifest so the information hierarchy is pinned alongside the files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleStats {
    pub mae_region1: f64,
    pub mae_region2: f64,
    pub mae_background: f64,
    pub mae_region1_no_gender: f64,
    pub mae_body: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: GenSpec,
    pub count: usize,
    pub oracle: OracleStats,
}

struct Geometry {
    cx: f64,
    cy: f64,
    theta: f64,
    semi_major: f64,
    semi_minor: f64,
}

impl Geometry {
    fn nominal(spec: &GenSpec) -> Self {
        let a = spec.object_extent * spec.image_size as f64 / 2.0;
        Self {
            cx: spec.image_size as f64 / 2.0,
            cy: spec.image_size as f64 / 2.0,
            theta: 0.0,
            semi_major: a,
            semi_minor: a * MINOR_AXIS_RATIO,
        }
    }

    fn sample(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Self {
        let s = spec.image_size as f64;
        let jitter = s * CENTER_JITTER_FRAC;
        let a = spec.object_extent * s / 2.0;
        Self {
            cx: s / 2.0 + rng.gen_range(-jitter..=jitter),
            cy: s / 2.0 + rng.gen_range(-jitter..=jitter),
            theta: rng.gen_range(0.0..std::f64::consts::PI),
            semi_major: a,
            semi_minor: a * MINOR_AXIS_RATIO,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.theta.cos(), self.theta.sin());
        let ex = c * dx + s * dy;
        let ey = -s * dx + c * dy;
        (ex / self.semi_major).powi(2) + (ey / self.semi_minor).powi(2) <= 1.0
    }

    /// Scale factor for the inner ellipse whose points keep a patch of the
    /// given size fully inside the object (margin = patch half-diagonal).
    fn shrink_for(&self, patch_size: usize) -> f64 {
        let margin = patch_size as f64 / 2.0 * std::f64::consts::SQRT_2;
        1.0 - margin / self.semi_minor
    }

    /// Uniform point inside the ellipse scaled by `shrink`, in image coords.
    fn sample_interior(&self, shrink: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
        // uniform in unit disc, then stretch onto the scaled ellipse
        let r = rng.gen::<f64>().sqrt();
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let ex = r * phi.cos() * self.semi_major * shrink;
        let ey = r * phi.sin() * self.semi_minor * shrink;
        let (c, s) = (self.theta.cos(), self.theta.sin());
        (self.cx + c * ex - s * ey, self.cy + s * ex + c * ey)
    }
}

fn patch_box(center: (f64, f64), size: usize, kind: RegionKind) -> RegionBox {
    let half = size as f64 / 2.0;
    let x0 = (center.0 - half).round().max(0.0) as usize;
    let y0 = (center.1 - half).round().max(0.0) as usize;
    RegionBox::new(kind, x0, y0, x0 + size, y0 + size)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generates `n` records, deterministically in `spec.seed`. Per-sample
/// sub-seeds make per-sample generation order-independent.
pub fn generate(spec: &GenSpec, n: usize) -> Result<Vec<SampleRecord>, SynthError> {
    spec.validate()?;
    if n == 0 {
        return Err(SynthError::BadSpec("sample count must be >= 1".into()));
    }
    (0..n).map(|i| generate_sample(spec, i)).collect()
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ ((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn generate_sample(spec: &GenSpec, index: usize) -> Result<SampleRecord, SynthError> {
    let mut rng = sample_rng(spec.seed, index);
    let age = rng.gen_range(spec.age_min..=spec.age_max);
    let gender: i8 = if rng.gen_bool(0.5) { 1 } else { -1 };
    let geo = Geometry::sample(spec, &mut rng);

    let shrink1 = geo.shrink_for(spec.region1_size);
    let shrink2 = geo.shrink_for(spec.region2_size);
    let mut placed = None;
    for _ in 0..PLACEMENT_TRIES {
        let c1 = geo.sample_interior(shrink1, &mut rng);
        let c2 = geo.sample_interior(shrink2, &mut rng);
        let b1 = patch_box(c1, spec.region1_size, RegionKind::Region1);
        let b2 = patch_box(c2, spec.region2_size, RegionKind::Region2);
        if !b1.intersects(&b2) {
            placed = Some((b1, b2));
            break;
        }
    }
    let (r1, r2) = placed.ok_or(SynthError::InfeasibleGeometry { sample: index })?;

    let u = spec.u_of(age, gender);
    let phase1 = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase2 = rng.gen_range(0.0..std::f64::consts::TAU);
    let sigma = spec.noise_level;
    // information per pixel scales as 1/variance, so the secondary patch
    // carries (1-split)/split of the primary's information
    let sigma2 = sigma * (spec.info_split / (1.0 - spec.info_split)).sqrt();
    let body_span = spec.body_signal * R1_SPAN;

    let s = spec.image_size;
    let mut data = vec![0.0f32; s * s];
    // tight pixel bbox of the object, for the Hand truth box
    let (mut hx0, mut hy0, mut hx1, mut hy1) = (s, s, 0usize, 0usize);
    for y in 0..s {
        for x in 0..s {
            let noise = standard_normal(&mut rng);
            let inside = geo.contains(x as f64 + 0.5, y as f64 + 0.5);
            let v = if r1.contains(x, y) {
                let amp = R1_AMP_BASE + R1_AMP_SPAN * u;
                let t = (x - r1.x0) as f64 / spec.region1_size as f64;
                R1_BASE
                    + R1_SPAN * u
                    + amp * (std::f64::consts::TAU * R1_CYCLES as f64 * t + phase1).sin()
                    + sigma * noise
            } else if r2.contains(x, y) {
                let amp = R2_AMP_BASE + R2_AMP_SPAN * u;
                let t = (x - r2.x0) as f64 / spec.region2_size as f64;
                R2_BASE
                    + R2_SPAN * u
                    + amp * (std::f64::consts::TAU * R2_CYCLES as f64 * t + phase2).sin()
                    + sigma2 * noise
            } else if inside {
                BODY_BASE + body_span * u + sigma * noise
            } else {
                BG_LEVEL + BG_NOISE_FACTOR * sigma * noise
            };
            if inside {
                hx0 = hx0.min(x);
                hy0 = hy0.min(y);
                hx1 = hx1.max(x + 1);
                hy1 = hy1.max(y + 1);
            }
            data[y * s + x] = v.clamp(0.0, 1.0) as f32;
        }
    }
    let hand = RegionBox::new(RegionKind::Hand, hx0, hy0, hx1, hy1);
    Ok(SampleRecord {
        id: format!("s{index:05}"),
        image: GrayImage::from_data(s, s, data)?,
        age,
        gender,
        truth_boxes: vec![hand, r1, r2],
    })
}

// --- oracle decoders --------------------------------------------------------

fn patch_mean(image: &GrayImage, bbox: &RegionBox) -> f64 {
    let mut sum = 0.0f64;
    for y in bbox.y0..bbox.y1 {
        for x in bbox.x0..bbox.x1 {
            sum += image.get(x, y) as f64;
        }
    }
    sum / bbox.area() as f64
}

fn clamp_age(spec: &GenSpec, age: f64) -> f64 {
    age.clamp(spec.age_min as f64, spec.age_max as f64)
}

/// Closed-form inversion of the primary patch statistic.
pub fn decode_region1(
    spec: &GenSpec,
    record: &SampleRecord,
    use_gender: bool,
) -> Option<f64> {
    let bbox = record.truth_box(RegionKind::Region1)?;
    let u = (patch_mean(&record.image, bbox) - R1_BASE) / R1_SPAN;
    let g = if use_gender { record.gender } else { 0 };
    Some(clamp_age(spec, spec.age_of_u(u, g)))
}

/// Same inversion through the noisier secondary patch.
pub fn decode_region2(spec: &GenSpec, record: &SampleRecord) -> Option<f64> {
    let bbox = record.truth_box(RegionKind::Region2)?;
    let u = (patch_mean(&record.image, bbox) - R2_BASE) / R2_SPAN;
    Some(clamp_age(spec, spec.age_of_u(u, record.gender)))
}

/// Weak-signal decoder reading the object body outside both patches.
pub fn decode_body(spec: &GenSpec, record: &SampleRecord) -> Option<f64> {
    let hand = record.truth_box(RegionKind::Hand)?;
    let r1 = record.truth_box(RegionKind::Region1)?;
    let r2 = record.truth_box(RegionKind::Region2)?;
    let body_span = spec.body_signal * R1_SPAN;
    if body_span <= 0.0 {
        return None;
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    // interior sampling: skip patch pixels and the object boundary ring
    for y in hand.y0..hand.y1 {
        for x in hand.x0..hand.x1 {
            if r1.contains(x, y) || r2.contains(x, y) {
                continue;
            }
            let v = record.image.get(x, y) as f64;
            if v > BG_LEVEL + 0.08 {
                sum += v;
                count += 1;
            }
        }
    }
    if count == 0 {
        return None;
    }
    let u = (sum / count as f64 - BODY_BASE) / body_span;
    Some(clamp_age(spec, spec.age_of_u(u, record.gender)))
}

/// The no-information baseline: always predicts the mid age.
pub fn decode_background(spec: &GenSpec) -> f64 {
    (spec.age_min as f64 + spec.age_max as f64) / 2.0
}

/// Decoder MAEs over a record set; this is what the manifest stores.
pub fn oracle_stats(spec: &GenSpec, records: &[SampleRecord]) -> OracleStats {
    let mae = |f: &dyn Fn(&SampleRecord) -> Option<f64>| -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for r in records {
            if let Some(est) = f(r) {
                total += (est - r.age as f64).abs();
                n += 1;
            }
        }
        if n == 0 {
            f64::NAN
        } else {
            total / n as f64
        }
    };
    OracleStats {
        mae_region1: mae(&|r| decode_region1(spec, r, true)),
        mae_region2: mae(&|r| decode_region2(spec, r)),
        mae_background: mae(&|_| Some(decode_background(spec))),
        mae_region1_no_gender: mae(&|r| decode_region1(spec, r, false)),
        mae_body: mae(&|r| decode_body(spec, r)),
    }
}

pub fn generate_with_manifest(
    spec: &GenSpec,
    n: usize,
) -> Result<(Vec<SampleRecord>, Manifest), SynthError> {
    let records = generate(spec, n)?;
    let oracle = oracle_stats(spec, &records);
    Ok((
        records,
        Manifest {
            spec: spec.clone(),
            count: n,
            oracle,
        },
    ))
}

// --- splits ------------------------------------------------------------------

/// Disjoint, exhaustive train/val/test index sets, deterministic per seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split(
    total: usize,
    seed: u64,
    n_val: usize,
    n_test: usize,
) -> Result<Splits, SynthError> {
    if n_val + n_test >= total {
        return Err(SynthError::SplitTooLarge {
            n_val,
            n_test,
            total,
        });
    }
    let mut indices: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..total).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let mut val: Vec<usize> = indices[..n_val].to_vec();
    let mut test: Vec<usize> = indices[n_val..n_val + n_test].to_vec();
    let mut train: Vec<usize> = indices[n_val + n_test..].to_vec();
    val.sort_unstable();
    test.sort_unstable();
    train.sort_unstable();
    Ok(Splits { train, val, test })
}

// --- dataset directory I/O ----------------------------------------------------

/// Layout: `images/<id>.pgm`, `metadata.csv` (id,age,gender),
/// `boxes.csv` (id,kind,x0,y0,x1,y1; optional), `manifest.json`.
pub fn store_dataset(
    dir: &Path,
    records: &[SampleRecord],
    manifest: Option<&Manifest>,
) -> Result<(), SynthError> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut meta = csv::Writer::from_path(dir.join("metadata.csv"))
        .map_err(|e| SynthError::Csv("metadata.csv".into(), e))?;
    meta.write_record(["id", "age", "gender"])
        .map_err(|e| SynthError::Csv("metadata.csv".into(), e))?;
    let mut boxes = csv::Writer::from_path(dir.join("boxes.csv"))
        .map_err(|e| SynthError::Csv("boxes.csv".into(), e))?;
    boxes
        .write_record(["id", "kind", "x0", "y0", "x1", "y1"])
        .map_err(|e| SynthError::Csv("boxes.csv".into(), e))?;
    for r in records {
        r.image.write_pgm(&images.join(format!("{}.pgm", r.id)))?;
        meta.write_record([
            r.id.as_str(),
            &r.age.to_string(),
            &r.gender.to_string(),
        ])
        .map_err(|e| SynthError::Csv("metadata.csv".into(), e))?;
        for b in &r.truth_boxes {
            boxes
                .write_record([
                    r.id.as_str(),
                    &b.kind.to_string(),
                    &b.x0.to_string(),
                    &b.y0.to_string(),
                    &b.x1.to_string(),
                    &b.y1.to_string(),
                ])
                .map_err(|e| SynthError::Csv("boxes.csv".into(), e))?;
        }
    }
    meta.flush()?;
    boxes.flush()?;
    if let Some(m) = manifest {
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(m)? + "\n",
        )?;
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Option<Manifest>, SynthError> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<SampleRecord>, Option<Manifest>), SynthError> {
    let manifest = load_manifest(dir)?;
    let max_age = manifest
        .as_ref()
        .map(|m| m.spec.age_max)
        .unwrap_or(crate::ldl::DEFAULT_T_MAX);

    // boxes.csv is optional (external data may lack truth boxes)
    let mut box_map: BTreeMap<String, Vec<RegionBox>> = BTreeMap::new();
    let boxes_path = dir.join("boxes.csv");
    if boxes_path.exists() {
        let mut rdr = csv::Reader::from_path(&boxes_path)
            .map_err(|e| SynthError::Csv("boxes.csv".into(), e))?;
        for result in rdr.records() {
            let row = result.map_err(|e| SynthError::Csv("boxes.csv".into(), e))?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            let bad = |message: String| SynthError::MalformedRow {
                file: "boxes.csv".into(),
                line,
                message,
            };
            if row.len() != 6 {
                return Err(bad(format!("expected 6 fields, got {}", row.len())));
            }
            let kind: RegionKind = row[1].parse().map_err(bad)?;
            let nums: Vec<usize> = row
                .iter()
                .skip(2)
                .map(|f| f.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| bad(e.to_string()))?;
            box_map
                .entry(row[0].to_string())
                .or_default()
                .push(RegionBox::new(kind, nums[0], nums[1], nums[2], nums[3]));
        }
    }

    let mut rdr = csv::Reader::from_path(dir.join("metadata.csv"))
        .map_err(|e| SynthError::Csv("metadata.csv".into(), e))?;
    let mut records = Vec::new();
    for result in rdr.records() {
        let row = result.map_err(|e| SynthError::Csv("metadata.csv".into(), e))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let bad = |message: String| SynthError::MalformedRow {
            file: "metadata.csv".into(),
            line,
            message,
        };
        if row.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", row.len())));
        }
        let id = row[0].to_string();
        let age: i64 = row[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
        if age < 1 || age as usize > max_age {
            return Err(SynthError::AgeOutOfRange {
                id,
                age,
                max: max_age,
            });
        }
        let gender: i8 = row[2].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
        if gender != 1 && gender != -1 {
            return Err(bad(format!("gender must be -1 or +1, got {gender}")));
        }
        let img_path = dir.join("images").join(format!("{id}.pgm"));
        if !img_path.exists() {
            return Err(SynthError::MissingImage(id));
        }
        let image = GrayImage::read_pgm(&img_path)?;
        records.push(SampleRecord {
            truth_boxes: box_map.remove(&id).unwrap_or_default(),
            id,
            image,
            age: age as usize,
            gender,
        });
    }
    Ok((records, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_spec() -> GenSpec {
        GenSpec {
            seed: 11,
            ..GenSpec::default()
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = quick_spec();
        let a = generate(&spec, 5).unwrap();
        let b = generate(&spec, 5).unwrap();
        assert_eq!(a, b);
        let c = generate(
            &GenSpec {
                seed: 12,
                ..quick_spec()
            },
            5,
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn records_satisfy_structural_invariants() {
        let spec = quick_spec();
        for r in generate(&spec, 40).unwrap() {
            assert!(r.age >= spec.age_min && r.age <= spec.age_max);
            assert!(r.gender == 1 || r.gender == -1);
            let s = spec.image_size;
            for b in &r.truth_boxes {
                assert!(b.is_valid_within(s, s), "{b:?}");
            }
            let r1 = r.truth_box(RegionKind::Region1).unwrap();
            let r2 = r.truth_box(RegionKind::Region2).unwrap();
            assert!(!r1.intersects(r2), "{r1:?} vs {r2:?}");
            let hand = r.truth_box(RegionKind::Hand).unwrap();
            assert!(hand.area() > r1.area() + r2.area());
        }
    }

    #[test]
    fn zero_noise_decodes_exactly() {
        let spec = GenSpec {
            noise_level: 0.0,
            seed: 3,
            ..GenSpec::default()
        };
        for r in generate(&spec, 30).unwrap() {
            let est = decode_region1(&spec, &r, true).unwrap();
            assert_eq!(est.round() as usize, r.age, "sample {}", r.id);
            let est2 = decode_region2(&spec, &r).unwrap();
            assert_eq!(est2.round() as usize, r.age, "r2 sample {}", r.id);
        }
    }

    #[test]
    fn information_hierarchy_holds_on_default_spec() {
        let spec = quick_spec();
        let records = generate(&spec, 300).unwrap();
        let stats = oracle_stats(&spec, &records);
        assert!(
            stats.mae_region1 < stats.mae_region2,
            "r1 {} vs r2 {}",
            stats.mae_region1,
            stats.mae_region2
        );
        assert!(
            stats.mae_region2 < stats.mae_background,
            "r2 {} vs bg {}",
            stats.mae_region2,
            stats.mae_background
        );
    }

    #[test]
    fn ignoring_gender_costs_at_least_half_the_effect() {
        let spec = quick_spec();
        let records = generate(&spec, 300).unwrap();
        let stats = oracle_stats(&spec, &records);
        assert!(
            stats.mae_region1_no_gender >= spec.gender_effect / 2.0 * 0.95,
            "no-gender mae {}",
            stats.mae_region1_no_gender
        );
        assert!(stats.mae_region1_no_gender > stats.mae_region1);
    }

    #[test]
    fn split_partitions_the_index_range() {
        let s = split(3000, 42, 500, 500).unwrap();
        assert_eq!(s.train.len(), 2000);
        assert_eq!(s.val.len(), 500);
        assert_eq!(s.test.len(), 500);
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..3000).collect::<Vec<_>>());
        // determinism
        assert_eq!(s, split(3000, 42, 500, 500).unwrap());
        assert_ne!(s, split(3000, 43, 500, 500).unwrap());
    }

    #[test]
    fn oversized_split_is_rejected() {
        assert!(matches!(
            split(100, 1, 60, 40),
            Err(SynthError::SplitTooLarge { .. })
        ));
    }

    #[test]
    fn dataset_round_trips_through_directory() {
        let spec = quick_spec();
        let (records, manifest) = generate_with_manifest(&spec, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        store_dataset(dir.path(), &records, Some(&manifest)).unwrap();
        let (loaded, lm) = load_dataset(dir.path()).unwrap();
        assert_eq!(lm.unwrap(), manifest);
        assert_eq!(loaded.len(), records.len());
        for (a, b) in records.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.age, b.age);
            assert_eq!(a.gender, b.gender);
            assert_eq!(a.truth_boxes, b.truth_boxes);
            // image round-trips at 8-bit exactly
            assert_eq!(a.image.to_u8(), b.image.to_u8());
        }
    }

    #[test]
    fn age_zero_row_is_rejected() {
        let spec = quick_spec();
        let (records, manifest) = generate_with_manifest(&spec, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        store_dataset(dir.path(), &records, Some(&manifest)).unwrap();
        let meta = dir.path().join("metadata.csv");
        let text = std::fs::read_to_string(&meta).unwrap();
        std::fs::write(&meta, text.replace(&records[0].age.to_string(), "0")).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(SynthError::AgeOutOfRange { .. })
        ));
    }

    #[test]
    fn missing_boxes_file_loads_with_empty_truths() {
        let spec = quick_spec();
        let records = generate(&spec, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        store_dataset(dir.path(), &records, None).unwrap();
        std::fs::remove_file(dir.path().join("boxes.csv")).unwrap();
        let (loaded, manifest) = load_dataset(dir.path()).unwrap();
        assert!(manifest.is_none());
        assert!(loaded.iter().all(|r| r.truth_boxes.is_empty()));
    }

    #[test]
    fn malformed_metadata_reports_line() {
        let spec = quick_spec();
        let records = generate(&spec, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        store_dataset(dir.path(), &records, None).unwrap();
        let meta = dir.path().join("metadata.csv");
        let mut text = std::fs::read_to_string(&meta).unwrap();
        text.push_str("s99999,not_a_number,1\n");
        std::fs::write(&meta, text).unwrap();
        match load_dataset(dir.path()).unwrap_err() {
            SynthError::MalformedRow { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_image_is_reported_by_id() {
        let spec = quick_spec();
        let records = generate(&spec, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        store_dataset(dir.path(), &records, None).unwrap();
        std::fs::remove_file(dir.path().join("images").join("s00001.pgm")).unwrap();
        match load_dataset(dir.path()).unwrap_err() {
            SynthError::MissingImage(id) => assert_eq!(id, "s00001"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut s = GenSpec::default();
        s.info_split = 1.0;
        assert!(s.validate().is_err());
        let mut s = GenSpec::default();
        s.region1_size = 60; // cannot fit inside the object
        assert!(s.validate().is_err());
        let mut s = GenSpec::default();
        s.age_min = 0;
        assert!(s.validate().is_err());
    }
}
