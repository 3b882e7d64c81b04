//! Stage sequencing inside one experiment directory.
//!
//! Each stage checks its marker (fingerprint of the config slice that feeds
//! it) and becomes a no-op when already complete, unless forced. Checkpoints
//! carry their producing fingerprint and refuse to load under a different
//! config.

use super::stages::{
    evaluate_phase2, extract_regions, load_phase2_samples, localization_rows, localize_region1,
    run_lambda_sweep, run_tau_sweep, write_crops, ExtractionOutput, Phase1Nets,
};
use super::train::{
    image_input, predict_distribution, train_phase1, train_phase2, Phase1Mode, Phase2Head,
    TrainLog,
};
use super::{ExperimentConfig, ExperimentDir, PipelineError};
use crate::attention::RegionKind;
use crate::ldl::expectation;
use crate::metrics::{format_float, line_plot, EvalReport, SweepTable};
use crate::nn::{load_checkpoint, save_checkpoint, Network};
use crate::synth::{
    generate_with_manifest, load_dataset, load_manifest, split, store_dataset, Manifest,
    SampleRecord, Splits,
};
use crate::tensor::Tensor;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

impl FromStr for SplitName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" | "validation" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Owns the experiment directory for the life of a command.
pub struct Runner {
    exp: ExperimentDir,
    cfg: ExperimentConfig,
    force: bool,
}

impl Runner {
    pub fn open(out: &Path, cfg: ExperimentConfig, force: bool) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let exp = ExperimentDir::open(out)?;
        // keep the effective config next to the artifacts
        fs::write(exp.root().join("config.toml"), cfg.to_toml())?;
        Ok(Self { exp, cfg, force })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        self.exp.root()
    }

    fn hash_json(value: &impl Serialize) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(value).expect("serializes").as_bytes());
        h.finalize()
            .iter()
            .take(16)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn dataset_fingerprint(&self) -> String {
        Self::hash_json(&("dataset", &self.cfg.data))
    }

    /// Dataset directory this experiment reads from.
    pub fn dataset_dir(&self) -> PathBuf {
        match &self.cfg.data.path {
            Some(p) => p.clone(),
            None => self.exp.dataset_dir(),
        }
    }

    /// Generates the dataset when configured inline and not yet present,
    /// then loads it.
    pub fn ensure_dataset(&self) -> Result<(Vec<SampleRecord>, Option<Manifest>), PipelineError> {
        if let Some(path) = &self.cfg.data.path {
            return Ok(load_dataset(path)?);
        }
        let gen = self.cfg.data.gen.as_ref().expect("validated");
        let dir = self.exp.dataset_dir();
        let fp = self.dataset_fingerprint();
        if self.force || !self.exp.stage_is_done("gen-data", &fp) {
            let (records, manifest) = generate_with_manifest(gen, self.cfg.data.n)?;
            store_dataset(&dir, &records, Some(&manifest))?;
            self.exp.mark_stage_done("gen-data", &fp)?;
        }
        Ok(load_dataset(&dir)?)
    }

    pub fn splits_for(&self, total: usize) -> Result<Splits, PipelineError> {
        Ok(split(
            total,
            self.cfg.split.seed,
            self.cfg.split.n_val,
            self.cfg.split.n_test,
        )?)
    }

    fn select<'a>(records: &'a [SampleRecord], idx: &[usize]) -> Vec<&'a SampleRecord> {
        idx.iter().map(|&i| &records[i]).collect()
    }

    fn write_log(&self, name: &str, log: &TrainLog) -> Result<(), PipelineError> {
        let dir = self.exp.root().join("logs");
        fs::create_dir_all(&dir)?;
        fs::write(
            dir.join(format!("{name}.json")),
            serde_json::to_string_pretty(log).expect("log serializes") + "\n",
        )?;
        Ok(())
    }

    /// Trains one Phase-1 classifier (no-op when its marker is current).
    pub fn train_phase1_mode(&self, mode: Phase1Mode) -> Result<PathBuf, PipelineError> {
        let stage = format!("phase1-{}", mode.name());
        let fp = self.cfg.phase1_fingerprint(mode);
        let path = self.exp.checkpoint_path(&stage);
        if !self.force && self.exp.stage_is_done(&stage, &fp) && path.exists() {
            return Ok(path);
        }
        let (records, _) = self.ensure_dataset()?;
        let splits = self.splits_for(records.len())?;
        let train_records = Self::select(&records, &splits.train);
        let input_size = mode.input_size(&self.cfg);

        let inputs: Vec<Tensor<f32>> = match mode {
            Phase1Mode::Region1 | Phase1Mode::Hand => train_records
                .iter()
                .map(|r| image_input(&r.image, input_size))
                .collect::<Result<_, _>>()?,
            Phase1Mode::Erased => {
                // erase the train images at their predicted Region-1 boxes
                let r1_net = self.load_phase1_net(Phase1Mode::Region1)?;
                let owned: Vec<SampleRecord> =
                    train_records.iter().map(|r| (*r).clone()).collect();
                let r1 = localize_region1(&self.cfg, &r1_net, &owned)?;
                let boxes = r1.boxes_of(RegionKind::Region1);
                super::stages::erased_images(&self.cfg, &owned, &boxes)?
                    .iter()
                    .map(|img| image_input(img, input_size))
                    .collect::<Result<_, _>>()?
            }
        };
        let ages: Vec<usize> = train_records.iter().map(|r| r.age).collect();
        let (net, opt, log) = train_phase1(&self.cfg, mode, &inputs, &ages)?;

        let mut meta = BTreeMap::new();
        meta.insert("phase".into(), format!("1-{}", mode.name()));
        meta.insert("fingerprint".into(), fp.clone());
        meta.insert("epochs".into(), self.cfg.phase1.epochs.to_string());
        save_checkpoint(&path, &net, Some(&opt), &meta)?;
        self.write_log(&stage, &log)?;
        self.exp.mark_stage_done(&stage, &fp)?;
        Ok(path)
    }

    /// Loads a Phase-1 checkpoint, verifying it matches this config.
    pub fn load_phase1_net(&self, mode: Phase1Mode) -> Result<Network<f32>, PipelineError> {
        let stage = format!("phase1-{}", mode.name());
        let path = self.exp.checkpoint_path(&stage);
        if !path.exists() {
            return Err(PipelineError::MissingPrerequisite(format!(
                "checkpoint {} not found; run train-phase1 --mode {}",
                path.display(),
                mode.name()
            )));
        }
        let data = load_checkpoint(&path)?;
        let expected = self.cfg.phase1_fingerprint(mode);
        let found = data.meta.get("fingerprint").cloned().unwrap_or_default();
        if found != expected {
            return Err(PipelineError::IncompatibleCheckpoint {
                path,
                expected,
                found,
            });
        }
        Ok(data.net)
    }

    fn load_phase1_nets(&self) -> Result<Phase1Nets, PipelineError> {
        let mut nets = Phase1Nets::default();
        for mode in self.cfg.needed_phase1_modes() {
            let net = self.load_phase1_net(mode)?;
            match mode {
                Phase1Mode::Region1 => nets.region1 = Some(net),
                Phase1Mode::Hand => nets.hand = Some(net),
                Phase1Mode::Erased => nets.erased = Some(net),
            }
        }
        Ok(nets)
    }

    /// Runs extraction: localization.csv, skipped.csv, crops/ for every
    /// configured channel and every record.
    pub fn localize(&self) -> Result<ExtractionOutput, PipelineError> {
        let fp = self.cfg.extraction_fingerprint();
        let csv_path = self.exp.localization_csv();
        if !self.force && self.exp.stage_is_done("extract", &fp) && csv_path.exists() {
            return ExtractionOutput::read_csv(&csv_path);
        }
        let (records, _) = self.ensure_dataset()?;
        let nets = self.load_phase1_nets()?;
        let extraction = extract_regions(&self.cfg, &nets, &records)?;
        extraction.write_csv(&csv_path)?;
        extraction.write_skipped_csv(&self.exp.root().join("skipped.csv"))?;
        write_crops(
            &self.cfg,
            &records,
            &extraction,
            &self.exp.root().join("crops"),
        )?;
        self.exp.mark_stage_done("extract", &fp)?;
        Ok(extraction)
    }

    /// Trains the Phase-2 regressor from the crop files.
    pub fn train_phase2_stage(&self) -> Result<PathBuf, PipelineError> {
        let fp = self.cfg.phase2_fingerprint();
        let path = self.exp.checkpoint_path("phase2");
        if !self.force && self.exp.stage_is_done("phase2", &fp) && path.exists() {
            return Ok(path);
        }
        let ext_fp = self.cfg.extraction_fingerprint();
        if !self.exp.stage_is_done("extract", &ext_fp) {
            return Err(PipelineError::MissingPrerequisite(
                "crops are missing or stale; run localize first".into(),
            ));
        }
        let (records, _) = self.ensure_dataset()?;
        let splits = self.splits_for(records.len())?;
        let crops_root = self.exp.root().join("crops");
        let train_recs: Vec<SampleRecord> = splits.train.iter().map(|&i| records[i].clone()).collect();
        let val_recs: Vec<SampleRecord> = splits.val.iter().map(|&i| records[i].clone()).collect();
        let train_samples = load_phase2_samples(&self.cfg, &train_recs, &crops_root)?;
        let val_samples = load_phase2_samples(&self.cfg, &val_recs, &crops_root)?;
        let (net, opt, log) = train_phase2(&self.cfg, &train_samples, &val_samples)?;

        let mut meta = BTreeMap::new();
        meta.insert("phase".into(), "2".into());
        meta.insert("fingerprint".into(), fp.clone());
        meta.insert(
            "best_epoch".into(),
            log.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
        );
        save_checkpoint(&path, &net, Some(&opt), &meta)?;
        self.write_log("phase2", &log)?;
        self.exp.mark_stage_done("phase2", &fp)?;
        Ok(path)
    }

    pub fn load_phase2_net(&self) -> Result<Network<f32>, PipelineError> {
        let path = self.exp.checkpoint_path("phase2");
        if !path.exists() {
            return Err(PipelineError::MissingPrerequisite(format!(
                "checkpoint {} not found; run train-phase2",
                path.display()
            )));
        }
        let data = load_checkpoint(&path)?;
        let expected = self.cfg.phase2_fingerprint();
        let found = data.meta.get("fingerprint").cloned().unwrap_or_default();
        if found != expected {
            return Err(PipelineError::IncompatibleCheckpoint {
                path,
                expected,
                found,
            });
        }
        Ok(data.net)
    }

    /// Evaluates the Phase-2 checkpoint on a split and writes the report
    /// files (report.json, per_sample.csv, distribution dumps).
    pub fn evaluate(&self, split_name: SplitName) -> Result<EvalReport, PipelineError> {
        let net = self.load_phase2_net()?;
        let (records, _) = self.ensure_dataset()?;
        let splits = self.splits_for(records.len())?;
        let idx = match split_name {
            SplitName::Train => &splits.train,
            SplitName::Val => &splits.val,
            SplitName::Test => &splits.test,
        };
        if idx.is_empty() {
            return Err(PipelineError::Config(format!(
                "split {split_name} is empty"
            )));
        }
        let recs: Vec<SampleRecord> = idx.iter().map(|&i| records[i].clone()).collect();
        let samples = load_phase2_samples(&self.cfg, &recs, &self.exp.root().join("crops"))?;
        let mut report = evaluate_phase2(&self.cfg, &net, &samples)?;

        // localization quality on this split, when truth boxes exist
        let csv_path = self.exp.localization_csv();
        if csv_path.exists() {
            let extraction = ExtractionOutput::read_csv(&csv_path)?;
            let rows = localization_rows(&self.cfg, &extraction, &recs)?;
            if !rows.is_empty() {
                report.localization = Some(rows);
            }
        }

        let dir = self.exp.report_dir(&split_name.to_string());
        report.write_files(&dir)?;
        if self.cfg.phase2_extra.head == Phase2Head::Expectation {
            self.dump_distributions(&net, &samples, &dir)?;
        }
        Ok(report)
    }

    /// Age-distribution curves for the first few samples: CSV (age,k,prob)
    /// plus an SVG overlay.
    fn dump_distributions(
        &self,
        net: &Network<f32>,
        samples: &[super::train::Phase2Sample],
        dir: &Path,
    ) -> Result<(), PipelineError> {
        const N_CURVES: usize = 4;
        let take = samples.len().min(N_CURVES);
        let mut w = csv::Writer::from_path(dir.join("distributions.csv"))
            .map_err(|e| PipelineError::Csv("distributions.csv".into(), e))?;
        w.write_record(["age", "k", "prob"])
            .map_err(|e| PipelineError::Csv("distributions.csv".into(), e))?;
        let mut series = Vec::with_capacity(take);
        for s in &samples[..take] {
            let dist = predict_distribution(net, &s.input, s.gender)?;
            let mut points = Vec::with_capacity(dist.t_max());
            for (k, &p) in dist.probs().iter().enumerate() {
                w.write_record([
                    s.age.to_string(),
                    (k + 1).to_string(),
                    format_float(p),
                ])
                .map_err(|e| PipelineError::Csv("distributions.csv".into(), e))?;
                points.push(((k + 1) as f64, p));
            }
            series.push((
                format!("{} (age {}, pred {:.1})", s.id, s.age, expectation(&dist)),
                points,
            ));
        }
        w.flush()?;
        fs::write(
            dir.join("distributions.svg"),
            line_plot("learned age distributions", "age (months)", "probability", &series),
        )?;
        Ok(())
    }

    /// Lambda sweep: trains Phase 2 per grid point, writes CSV/SVG tables.
    pub fn sweep_lambda(&self, grid: &[f64]) -> Result<SweepTable, PipelineError> {
        let ext_fp = self.cfg.extraction_fingerprint();
        if !self.exp.stage_is_done("extract", &ext_fp) {
            return Err(PipelineError::MissingPrerequisite(
                "crops are missing or stale; run localize first".into(),
            ));
        }
        let fp = Self::hash_json(&("sweep-lambda", &ext_fp, &self.cfg.phase2, &self.cfg.phase2_extra, self.cfg.loss.delta, self.cfg.loss.t_max, &self.cfg.split, grid));
        let dir = self.exp.sweep_dir();
        let csv_path = dir.join("lambda_mae.csv");
        if !self.force && self.exp.stage_is_done("sweep-lambda", &fp) && csv_path.exists() {
            return read_sweep_csv(&csv_path, "lambda", "mae");
        }
        let (records, _) = self.ensure_dataset()?;
        let splits = self.splits_for(records.len())?;
        let crops_root = self.exp.root().join("crops");
        let pick = |idx: &[usize]| -> Result<Vec<super::train::Phase2Sample>, PipelineError> {
            let recs: Vec<SampleRecord> = idx.iter().map(|&i| records[i].clone()).collect();
            load_phase2_samples(&self.cfg, &recs, &crops_root)
        };
        let train = pick(&splits.train)?;
        let val = pick(&splits.val)?;
        let test = pick(&splits.test)?;
        let (table, kl_rows) = run_lambda_sweep(&self.cfg, grid, &train, &val, &test)?;
        fs::create_dir_all(&dir)?;
        table.write_csv(&csv_path)?;
        table.write_svg(&dir.join("lambda_mae.svg"))?;
        let kl_table = SweepTable::new("lambda", "mean_kl", kl_rows)?;
        kl_table.write_csv(&dir.join("lambda_kl.csv"))?;
        kl_table.write_svg(&dir.join("lambda_kl.svg"))?;
        self.exp.mark_stage_done("sweep-lambda", &fp)?;
        Ok(table)
    }

    /// Threshold sweep on the test split; writes a table pair per kind.
    pub fn sweep_tau(&self, grid: &[f64]) -> Result<Vec<SweepTable>, PipelineError> {
        let nets = self.load_phase1_nets()?;
        let (records, _) = self.ensure_dataset()?;
        let splits = self.splits_for(records.len())?;
        let recs: Vec<SampleRecord> = splits.test.iter().map(|&i| records[i].clone()).collect();
        let sweeps = run_tau_sweep(&self.cfg, &nets, &recs, grid)?;
        let dir = self.exp.sweep_dir();
        fs::create_dir_all(&dir)?;
        let mut tables = Vec::new();
        for (kind, sweep) in sweeps {
            sweep
                .miou
                .write_csv(&dir.join(format!("tau_{kind}_miou.csv")))?;
            sweep
                .miou
                .write_svg(&dir.join(format!("tau_{kind}_miou.svg")))?;
            sweep
                .ap50
                .write_csv(&dir.join(format!("tau_{kind}_ap50.csv")))?;
            sweep
                .ap50
                .write_svg(&dir.join(format!("tau_{kind}_ap50.svg")))?;
            tables.push(sweep.miou);
            tables.push(sweep.ap50);
        }
        Ok(tables)
    }
}

fn read_sweep_csv(path: &Path, param: &str, metric: &str) -> Result<SweepTable, PipelineError> {
    let mut rdr =
        csv::Reader::from_path(path).map_err(|e| PipelineError::Csv(path.display().to_string(), e))?;
    let mut rows = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| PipelineError::Csv(path.display().to_string(), e))?;
        let v: f64 = row[0]
            .parse()
            .map_err(|_| PipelineError::Config(format!("bad sweep row in {}", path.display())))?;
        let m: f64 = row[1]
            .parse()
            .map_err(|_| PipelineError::Config(format!("bad sweep row in {}", path.display())))?;
        rows.push((v, m));
    }
    Ok(SweepTable::new(param, metric, rows)?)
}

/// Human summary for `report`: dataset manifests and experiment results.
pub fn summarize_dir(path: &Path) -> Result<String, PipelineError> {
    let mut out = String::new();
    if let Some(manifest) = load_manifest(path)? {
        out.push_str(&format!(
            "dataset: {} samples, image {}x{}, ages {}..{}\n",
            manifest.count,
            manifest.spec.image_size,
            manifest.spec.image_size,
            manifest.spec.age_min,
            manifest.spec.age_max
        ));
        out.push_str(&format!(
            "oracle decoder MAE (months): region1 {:.2} | region2 {:.2} | background {:.2} | region1 w/o gender {:.2} | body {:.2}\n",
            manifest.oracle.mae_region1,
            manifest.oracle.mae_region2,
            manifest.oracle.mae_background,
            manifest.oracle.mae_region1_no_gender,
            manifest.oracle.mae_body,
        ));
    }
    if path.join("dataset").exists() {
        if let Some(m) = load_manifest(&path.join("dataset"))? {
            out.push_str(&format!(
                "dataset: {} samples; oracle MAE r1 {:.2}, r2 {:.2}, background {:.2}\n",
                m.count, m.oracle.mae_region1, m.oracle.mae_region2, m.oracle.mae_background
            ));
        }
    }
    let reports = path.join("reports");
    if reports.exists() {
        let mut names: Vec<_> = fs::read_dir(&reports)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        for name in names {
            let rp = reports.join(&name).join("report.json");
            if rp.exists() {
                let report: EvalReport = serde_json::from_str(&fs::read_to_string(&rp)?)
                    .map_err(|e| PipelineError::Config(format!("bad report.json: {e}")))?;
                out.push_str(&format!(
                    "{name}: MAE {:.2} months over {} samples",
                    report.mae,
                    report.per_sample.len()
                ));
                if let Some(rows) = &report.localization {
                    for r in rows {
                        out.push_str(&format!(
                            " | {} mIoU {:.3} AP50 {:.3} (tau {})",
                            r.kind, r.miou, r.ap50, r.tau
                        ));
                    }
                }
                out.push('\n');
            }
        }
    }
    if out.is_empty() {
        out.push_str("nothing to report: no manifest.json or reports/ found\n");
    }
    Ok(out)
}
