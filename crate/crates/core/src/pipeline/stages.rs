//! In-memory pipeline stages: region extraction, crop assembly, evaluation,
//! and parameter sweeps, plus their file formats.

use super::train::{
    predict_age, predict_distribution, train_phase2, Phase1Mode, Phase2Head, Phase2Sample,
};
use super::{erase_seed_for, ExperimentConfig, PipelineError, RegionChannel};
use crate::attention::{
    attention_map, crop, erase_region, localize, mask_to_box, resize_map, threshold_mask,
    AttentionError, LocalizeParams, RegionBox, RegionKind,
};
use crate::ldl::AgeDistribution;
use crate::metrics::{
    ap50, distribution_diagnostics, format_float, mean_iou, EvalReport, LocalizationRow,
    SweepTable,
};
use crate::nn::Network;
use crate::raster::GrayImage;
use crate::synth::SampleRecord;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// One row of `localization.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationRecord {
    pub image_id: String,
    pub bbox: RegionBox,
    pub tau: f32,
    /// Peak normalized attention inside the box; 0 for fallback boxes.
    pub score: f32,
}

/// Predicted boxes per image, plus the images whose localization fell back
/// to the full-image box.
#[derive(Debug, Clone, Default)]
pub struct ExtractionOutput {
    pub rows: Vec<LocalizationRecord>,
    pub skipped: Vec<(String, RegionKind)>,
}

impl ExtractionOutput {
    pub fn boxes_of(&self, kind: RegionKind) -> BTreeMap<String, RegionBox> {
        self.rows
            .iter()
            .filter(|r| r.bbox.kind == kind)
            .map(|r| (r.image_id.clone(), r.bbox))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), PipelineError> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| PipelineError::Csv("localization.csv".into(), e))?;
        w.write_record(["image_id", "kind", "x0", "y0", "x1", "y1", "tau", "score"])
            .map_err(|e| PipelineError::Csv("localization.csv".into(), e))?;
        for r in &self.rows {
            w.write_record([
                r.image_id.clone(),
                r.bbox.kind.to_string(),
                r.bbox.x0.to_string(),
                r.bbox.y0.to_string(),
                r.bbox.x1.to_string(),
                r.bbox.y1.to_string(),
                format_float(r.tau as f64),
                format_float(r.score as f64),
            ])
            .map_err(|e| PipelineError::Csv("localization.csv".into(), e))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, PipelineError> {
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| PipelineError::Csv("localization.csv".into(), e))?;
        let mut out = ExtractionOutput::default();
        for row in rdr.records() {
            let row = row.map_err(|e| PipelineError::Csv("localization.csv".into(), e))?;
            let kind: RegionKind = row[1]
                .parse()
                .map_err(|e: String| PipelineError::Config(e))?;
            let nums: Vec<usize> = (2..6)
                .map(|i| row[i].parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| PipelineError::Config(format!("localization.csv: {e}")))?;
            out.rows.push(LocalizationRecord {
                image_id: row[0].to_string(),
                bbox: RegionBox::new(kind, nums[0], nums[1], nums[2], nums[3]),
                tau: row[6].parse().unwrap_or(0.0),
                score: row[7].parse().unwrap_or(0.0),
            });
        }
        Ok(out)
    }

    pub fn write_skipped_csv(&self, path: &Path) -> Result<(), PipelineError> {
        let mut w =
            csv::Writer::from_path(path).map_err(|e| PipelineError::Csv("skipped.csv".into(), e))?;
        w.write_record(["image_id", "kind"])
            .map_err(|e| PipelineError::Csv("skipped.csv".into(), e))?;
        for (id, kind) in &self.skipped {
            w.write_record([id.clone(), kind.to_string()])
                .map_err(|e| PipelineError::Csv("skipped.csv".into(), e))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trained Phase-1 classifiers available to the extractor.
#[derive(Default)]
pub struct Phase1Nets {
    pub region1: Option<Network<f32>>,
    pub hand: Option<Network<f32>>,
    pub erased: Option<Network<f32>>,
}

impl Phase1Nets {
    fn require(&self, mode: Phase1Mode) -> Result<&Network<f32>, PipelineError> {
        let net = match mode {
            Phase1Mode::Region1 => self.region1.as_ref(),
            Phase1Mode::Hand => self.hand.as_ref(),
            Phase1Mode::Erased => self.erased.as_ref(),
        };
        net.ok_or_else(|| {
            PipelineError::MissingPrerequisite(format!(
                "phase-1 {} checkpoint not available",
                mode.name()
            ))
        })
    }
}

fn localize_params(cfg: &ExperimentConfig, mode: Phase1Mode) -> LocalizeParams {
    LocalizeParams {
        input_size: mode.input_size(cfg),
        tau: match mode {
            Phase1Mode::Hand => cfg.localization.tau_hand,
            Phase1Mode::Region1 => cfg.localization.tau_region1,
            Phase1Mode::Erased => cfg.localization.tau_region2,
        },
        normalize: cfg.localization.normalize,
    }
}

fn full_image_box(kind: RegionKind, image: &GrayImage) -> RegionBox {
    RegionBox::new(kind, 0, 0, image.width(), image.height())
}

/// Peak of the normalized attention map inside the box.
fn box_score(map: &crate::attention::AttentionMap, bbox: &RegionBox, normalize: bool) -> f32 {
    let src = if normalize { map.normalized() } else { map.clone() };
    let mut best = f32::NEG_INFINITY;
    for y in bbox.y0..bbox.y1.min(src.height) {
        for x in bbox.x0..bbox.x1.min(src.width) {
            best = best.max(src.get(y, x));
        }
    }
    best
}

/// Localizes one kind on one image, falling back to the full-image box when
/// no region clears the threshold.
fn localize_or_fallback(
    net: &Network<f32>,
    image: &GrayImage,
    kind: RegionKind,
    params: &LocalizeParams,
) -> Result<(LocalizationRecord, bool), PipelineError> {
    match localize(net, image, kind, params) {
        Ok((bbox, map)) => Ok((
            LocalizationRecord {
                image_id: String::new(),
                bbox,
                tau: params.tau,
                score: box_score(&map, &bbox, params.normalize),
            },
            false,
        )),
        Err(AttentionError::NoRegionFound { tau }) => Ok((
            LocalizationRecord {
                image_id: String::new(),
                bbox: full_image_box(kind, image),
                tau,
                score: 0.0,
            },
            true,
        )),
        Err(e) => Err(e.into()),
    }
}

/// Region-1 boxes for every record; needed both by erased-model training
/// and by the full extraction pass.
pub fn localize_region1(
    cfg: &ExperimentConfig,
    net: &Network<f32>,
    records: &[SampleRecord],
) -> Result<ExtractionOutput, PipelineError> {
    let params = localize_params(cfg, Phase1Mode::Region1);
    let mut out = ExtractionOutput::default();
    for r in records {
        let (mut rec, fell_back) =
            localize_or_fallback(net, &r.image, RegionKind::Region1, &params)?;
        rec.image_id = r.id.clone();
        if fell_back {
            out.skipped.push((r.id.clone(), RegionKind::Region1));
        }
        out.rows.push(rec);
    }
    Ok(out)
}

/// Erased variant of each record's image, seeded per image.
pub fn erased_images(
    cfg: &ExperimentConfig,
    records: &[SampleRecord],
    r1_boxes: &BTreeMap<String, RegionBox>,
) -> Result<Vec<GrayImage>, PipelineError> {
    records
        .iter()
        .map(|r| {
            let bbox = r1_boxes.get(&r.id).ok_or_else(|| {
                PipelineError::MissingPrerequisite(format!("no Region-1 box for {}", r.id))
            })?;
            Ok(erase_region(
                &r.image,
                bbox,
                erase_seed_for(cfg.erase_seed, &r.id),
            )?)
        })
        .collect()
}

/// Full extraction: every box kind the configured region set needs.
pub fn extract_regions(
    cfg: &ExperimentConfig,
    nets: &Phase1Nets,
    records: &[SampleRecord],
) -> Result<ExtractionOutput, PipelineError> {
    let modes = cfg.needed_phase1_modes();
    let mut out = ExtractionOutput::default();

    let mut r1_boxes: BTreeMap<String, RegionBox> = BTreeMap::new();
    if modes.contains(&Phase1Mode::Region1) {
        let r1 = localize_region1(cfg, nets.require(Phase1Mode::Region1)?, records)?;
        r1_boxes = r1.boxes_of(RegionKind::Region1);
        out.rows.extend(r1.rows);
        out.skipped.extend(r1.skipped);
    }

    if modes.contains(&Phase1Mode::Hand) {
        let net = nets.require(Phase1Mode::Hand)?;
        let params = localize_params(cfg, Phase1Mode::Hand);
        for r in records {
            let (mut rec, fell_back) =
                localize_or_fallback(net, &r.image, RegionKind::Hand, &params)?;
            rec.image_id = r.id.clone();
            if fell_back {
                out.skipped.push((r.id.clone(), RegionKind::Hand));
            }
            out.rows.push(rec);
        }
    }

    if modes.contains(&Phase1Mode::Erased) {
        let net = nets.require(Phase1Mode::Erased)?;
        let params = localize_params(cfg, Phase1Mode::Erased);
        let erased = erased_images(cfg, records, &r1_boxes)?;
        for (r, img) in records.iter().zip(&erased) {
            let (mut rec, fell_back) =
                localize_or_fallback(net, img, RegionKind::Region2, &params)?;
            rec.image_id = r.id.clone();
            if fell_back {
                out.skipped.push((r.id.clone(), RegionKind::Region2));
            }
            out.rows.push(rec);
        }
    }

    out.rows.sort_by(|a, b| {
        (a.image_id.clone(), kind_order(a.bbox.kind)).cmp(&(b.image_id.clone(), kind_order(b.bbox.kind)))
    });
    Ok(out)
}

fn kind_order(kind: RegionKind) -> u8 {
    match kind {
        RegionKind::Hand => 0,
        RegionKind::Region1 => 1,
        RegionKind::Region2 => 2,
    }
}

/// Builds one channel image for a record from the extraction boxes.
pub fn channel_image(
    cfg: &ExperimentConfig,
    channel: RegionChannel,
    record: &SampleRecord,
    extraction: &ExtractionOutput,
) -> Result<GrayImage, PipelineError> {
    let size = cfg.phase2_extra.crop_size;
    let boxes = |kind: RegionKind| -> Result<RegionBox, PipelineError> {
        extraction
            .rows
            .iter()
            .find(|r| r.image_id == record.id && r.bbox.kind == kind)
            .map(|r| r.bbox)
            .ok_or_else(|| {
                PipelineError::MissingPrerequisite(format!(
                    "no {kind} box for image {}",
                    record.id
                ))
            })
    };
    Ok(match channel {
        RegionChannel::Original => record.image.resize(size, size)?,
        RegionChannel::Hand => crop(&record.image, &boxes(RegionKind::Hand)?, size)?,
        RegionChannel::Region1 => crop(&record.image, &boxes(RegionKind::Region1)?, size)?,
        RegionChannel::Region2 => crop(&record.image, &boxes(RegionKind::Region2)?, size)?,
        RegionChannel::Erased => {
            let bbox = boxes(RegionKind::Region1)?;
            let erased = erase_region(
                &record.image,
                &bbox,
                erase_seed_for(cfg.erase_seed, &record.id),
            )?;
            erased.resize(size, size)?
        }
    })
}

/// Writes `crops/<channel>/<id>.pgm` for every configured channel.
pub fn write_crops(
    cfg: &ExperimentConfig,
    records: &[SampleRecord],
    extraction: &ExtractionOutput,
    crops_root: &Path,
) -> Result<(), PipelineError> {
    for &channel in &cfg.regions {
        let dir = crops_root.join(channel.dir_name());
        fs::create_dir_all(&dir)?;
        for r in records {
            let img = channel_image(cfg, channel, r, extraction)?;
            img.write_pgm(&dir.join(format!("{}.pgm", r.id)))?;
        }
    }
    Ok(())
}

/// Stacks the configured channels into one `[S,S,C]` tensor per record,
/// reading the crop files written by `write_crops`.
pub fn load_phase2_samples(
    cfg: &ExperimentConfig,
    records: &[SampleRecord],
    crops_root: &Path,
) -> Result<Vec<Phase2Sample>, PipelineError> {
    let s = cfg.phase2_extra.crop_size;
    let c = cfg.regions.len();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let mut channels = Vec::with_capacity(c);
        for channel in &cfg.regions {
            let path = crops_root
                .join(channel.dir_name())
                .join(format!("{}.pgm", r.id));
            if !path.exists() {
                return Err(PipelineError::MissingPrerequisite(format!(
                    "crop {} missing; run localize first",
                    path.display()
                )));
            }
            let img = GrayImage::read_pgm(&path)?;
            if img.width() != s || img.height() != s {
                return Err(PipelineError::Config(format!(
                    "crop {} is {}x{}, config expects {s}",
                    path.display(),
                    img.width(),
                    img.height()
                )));
            }
            channels.push(img);
        }
        let mut data = Vec::with_capacity(s * s * c);
        for y in 0..s {
            for x in 0..s {
                for img in &channels {
                    data.push(img.get(x, y));
                }
            }
        }
        out.push(Phase2Sample {
            id: r.id.clone(),
            input: Tensor::new(vec![s, s, c], data).expect("stacked shape"),
            gender: r.gender as f32,
            age: r.age,
        });
    }
    Ok(out)
}

/// In-memory variant of crop assembly, for tests and sweeps that do not go
/// through an experiment directory.
pub fn assemble_phase2_samples(
    cfg: &ExperimentConfig,
    records: &[SampleRecord],
    extraction: &ExtractionOutput,
) -> Result<Vec<Phase2Sample>, PipelineError> {
    let s = cfg.phase2_extra.crop_size;
    let c = cfg.regions.len();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let mut channels = Vec::with_capacity(c);
        for &channel in &cfg.regions {
            // quantize to the on-disk 8-bit values so in-memory runs match
            // runs that round-trip through crop files
            let img = channel_image(cfg, channel, r, extraction)?;
            let q = GrayImage::from_u8(img.width(), img.height(), &img.to_u8())?;
            channels.push(q);
        }
        let mut data = Vec::with_capacity(s * s * c);
        for y in 0..s {
            for x in 0..s {
                for img in &channels {
                    data.push(img.get(x, y));
                }
            }
        }
        out.push(Phase2Sample {
            id: r.id.clone(),
            input: Tensor::new(vec![s, s, c], data).expect("stacked shape"),
            gender: r.gender as f32,
            age: r.age,
        });
    }
    Ok(out)
}

/// Localization quality per region kind against ground-truth boxes.
pub fn localization_rows(
    cfg: &ExperimentConfig,
    extraction: &ExtractionOutput,
    records: &[SampleRecord],
) -> Result<Vec<LocalizationRow>, PipelineError> {
    let mut rows = Vec::new();
    for (kind, tau) in [
        (RegionKind::Hand, cfg.localization.tau_hand),
        (RegionKind::Region1, cfg.localization.tau_region1),
        (RegionKind::Region2, cfg.localization.tau_region2),
    ] {
        let predicted = extraction.boxes_of(kind);
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        for r in records {
            if let (Some(p), Some(t)) = (predicted.get(&r.id), r.truth_box(kind)) {
                preds.push(*p);
                truths.push(*t);
            }
        }
        if !preds.is_empty() {
            rows.push(LocalizationRow {
                kind,
                miou: mean_iou(&preds, &truths)?,
                ap50: ap50(&preds, &truths)?,
                tau,
            });
        }
    }
    Ok(rows)
}

/// Evaluates a trained Phase-2 net on prepared samples.
pub fn evaluate_phase2(
    cfg: &ExperimentConfig,
    net: &Network<f32>,
    samples: &[Phase2Sample],
) -> Result<EvalReport, PipelineError> {
    if samples.is_empty() {
        return Err(PipelineError::Config("evaluation split is empty".into()));
    }
    let head = cfg.phase2_extra.head;
    let mut ids = Vec::with_capacity(samples.len());
    let mut preds = Vec::with_capacity(samples.len());
    let mut truths = Vec::with_capacity(samples.len());
    let mut dists: Vec<AgeDistribution> = Vec::new();
    let mut ages: Vec<usize> = Vec::new();
    for s in samples {
        ids.push(s.id.clone());
        preds.push(predict_age(net, head, &s.input, s.gender, cfg.loss.t_max)?);
        truths.push(s.age as f64);
        if head == Phase2Head::Expectation {
            dists.push(predict_distribution(net, &s.input, s.gender)?);
            ages.push(s.age);
        }
    }
    let mut report = EvalReport::from_predictions(&ids, &preds, &truths)?;
    if head == Phase2Head::Expectation {
        report.distribution = Some(distribution_diagnostics(&dists, &ages, cfg.loss.delta)?);
    }
    Ok(report)
}

/// Attention maps resized to image resolution, reusable across thresholds.
fn resized_maps(
    net: &Network<f32>,
    records: &[SampleRecord],
    images: Option<&[GrayImage]>,
    input_size: usize,
    normalize: bool,
) -> Result<Vec<crate::attention::AttentionMap>, PipelineError> {
    let mut maps = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let img = images.map(|v| &v[i]).unwrap_or(&r.image);
        let m = attention_map(net, img, input_size)?;
        let m = resize_map(&m, img.height(), img.width());
        maps.push(if normalize { m.normalized() } else { m });
    }
    Ok(maps)
}

/// mIoU and AP50 per threshold for one region kind, from cached maps.
pub struct TauSweep {
    pub miou: SweepTable,
    pub ap50: SweepTable,
}

/// Threshold sweep for every kind the config's region set localizes.
/// Attention maps are computed once per image and re-thresholded per grid
/// point.
pub fn run_tau_sweep(
    cfg: &ExperimentConfig,
    nets: &Phase1Nets,
    records: &[SampleRecord],
    grid: &[f64],
) -> Result<BTreeMap<RegionKind, TauSweep>, PipelineError> {
    if grid.is_empty() {
        return Err(PipelineError::Config("empty tau grid".into()));
    }
    let mut out = BTreeMap::new();
    let mut r1_boxes: BTreeMap<String, RegionBox> = BTreeMap::new();
    for mode in cfg.needed_phase1_modes() {
        let (kind, images) = match mode {
            Phase1Mode::Region1 => (RegionKind::Region1, None),
            Phase1Mode::Hand => (RegionKind::Hand, None),
            Phase1Mode::Erased => {
                if r1_boxes.is_empty() {
                    let r1 = localize_region1(cfg, nets.require(Phase1Mode::Region1)?, records)?;
                    r1_boxes = r1.boxes_of(RegionKind::Region1);
                }
                (
                    RegionKind::Region2,
                    Some(erased_images(cfg, records, &r1_boxes)?),
                )
            }
        };
        let net = nets.require(mode)?;
        let maps = resized_maps(
            net,
            records,
            images.as_deref(),
            mode.input_size(cfg),
            cfg.localization.normalize,
        )?;
        let mut miou_rows = Vec::with_capacity(grid.len());
        let mut ap_rows = Vec::with_capacity(grid.len());
        for &tau in grid {
            let mut preds = Vec::new();
            let mut truths = Vec::new();
            for (r, map) in records.iter().zip(&maps) {
                let Some(truth) = r.truth_box(kind) else {
                    continue;
                };
                let mask = threshold_mask(map, tau as f32);
                let bbox = mask_to_box(&mask, kind)
                    .unwrap_or_else(|_| full_image_box(kind, &r.image));
                preds.push(bbox);
                truths.push(*truth);
            }
            if preds.is_empty() {
                return Err(PipelineError::Config(
                    "tau sweep needs ground-truth boxes".into(),
                ));
            }
            miou_rows.push((tau, mean_iou(&preds, &truths)?));
            ap_rows.push((tau, ap50(&preds, &truths)?));
        }
        out.insert(
            kind,
            TauSweep {
                miou: SweepTable::new("tau", &format!("miou_{kind}"), miou_rows)?,
                ap50: SweepTable::new("tau", &format!("ap50_{kind}"), ap_rows)?,
            },
        );
    }
    Ok(out)
}

/// Trains Phase 2 once per lambda and reports test MAE per grid point.
/// Returns the sweep table plus the per-lambda mean test KL divergence.
pub fn run_lambda_sweep(
    cfg: &ExperimentConfig,
    grid: &[f64],
    train: &[Phase2Sample],
    val: &[Phase2Sample],
    test: &[Phase2Sample],
) -> Result<(SweepTable, Vec<(f64, f64)>), PipelineError> {
    if grid.is_empty() {
        return Err(PipelineError::Config("empty lambda grid".into()));
    }
    let mut mae_rows = Vec::with_capacity(grid.len());
    let mut kl_rows = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let mut c = cfg.clone();
        c.loss.lambda = lambda;
        c.phase2_extra.head = Phase2Head::Expectation;
        let (net, _, _) = train_phase2(&c, train, val)?;
        let report = evaluate_phase2(&c, &net, test)?;
        mae_rows.push((lambda, report.mae));
        kl_rows.push((
            lambda,
            report
                .distribution
                .as_ref()
                .map(|d| d.mean_kl)
                .unwrap_or(f64::NAN),
        ));
    }
    Ok((SweepTable::new("lambda", "mae", mae_rows)?, kl_rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::SplitConfig;
    use crate::synth::{generate, GenSpec};

    fn mini_cfg(n: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.gen = Some(GenSpec {
            seed: 21,
            ..GenSpec::default()
        });
        cfg.data.n = n;
        cfg.split = SplitConfig {
            n_val: 5,
            n_test: 5,
            seed: 3,
        };
        cfg.phase1.epochs = 2;
        cfg.phase1.channels = vec![4, 8];
        cfg.phase2.epochs = 2;
        cfg.phase2.channels = vec![4, 8];
        cfg
    }

    /// Extraction with identity-free nets: uses truth boxes to sidestep
    /// training in unit tests.
    fn truth_extraction(records: &[SampleRecord]) -> ExtractionOutput {
        let mut out = ExtractionOutput::default();
        for r in records {
            for b in &r.truth_boxes {
                out.rows.push(LocalizationRecord {
                    image_id: r.id.clone(),
                    bbox: *b,
                    tau: 50.0,
                    score: 100.0,
                });
            }
        }
        out
    }

    #[test]
    fn localization_csv_round_trips() {
        let records = generate(&GenSpec::default(), 4).unwrap();
        let out = truth_extraction(&records);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("localization.csv");
        out.write_csv(&path).unwrap();
        let back = ExtractionOutput::read_csv(&path).unwrap();
        assert_eq!(out.rows, back.rows);
    }

    #[test]
    fn channel_images_have_crop_size() {
        let cfg = mini_cfg(30);
        let records = generate(cfg.data.gen.as_ref().unwrap(), 3).unwrap();
        let ext = truth_extraction(&records);
        for ch in RegionChannel::ALL {
            let img = channel_image(&cfg, ch, &records[0], &ext).unwrap();
            assert_eq!(img.width(), cfg.phase2_extra.crop_size);
            assert_eq!(img.height(), cfg.phase2_extra.crop_size);
        }
    }

    #[test]
    fn crops_round_trip_through_files() {
        let mut cfg = mini_cfg(30);
        cfg.regions = vec![RegionChannel::Hand, RegionChannel::Region1];
        let records = generate(cfg.data.gen.as_ref().unwrap(), 4).unwrap();
        let ext = truth_extraction(&records);
        let dir = tempfile::tempdir().unwrap();
        write_crops(&cfg, &records, &ext, dir.path()).unwrap();
        let from_files = load_phase2_samples(&cfg, &records, dir.path()).unwrap();
        let in_memory = assemble_phase2_samples(&cfg, &records, &ext).unwrap();
        for (a, b) in from_files.iter().zip(&in_memory) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.input.data(), b.input.data());
        }
    }

    #[test]
    fn perfect_boxes_score_perfect_localization() {
        let cfg = mini_cfg(30);
        let records = generate(cfg.data.gen.as_ref().unwrap(), 6).unwrap();
        let ext = truth_extraction(&records);
        let rows = localization_rows(&cfg, &ext, &records).unwrap();
        assert_eq!(rows.len(), 3);
        for row in rows {
            assert!((row.miou - 1.0).abs() < 1e-12);
            assert!((row.ap50 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_checkpoint_is_a_clear_error() {
        let cfg = mini_cfg(30);
        let records = generate(cfg.data.gen.as_ref().unwrap(), 2).unwrap();
        let nets = Phase1Nets::default();
        match extract_regions(&cfg, &nets, &records) {
            Err(PipelineError::MissingPrerequisite(msg)) => {
                assert!(msg.contains("hand") || msg.contains("region1"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
