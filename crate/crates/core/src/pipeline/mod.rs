//! Two-phase experiment orchestration.
//!
//! Phase I trains soft-label classifiers whose attention maps localize the
//! hand region, the most discriminative region, and (after erasing that
//! region and retraining) the next most discriminative region. Guided by
//! those boxes, region crops are cut and stacked as input channels for the
//! Phase II regression model, which learns an age distribution and predicts
//! its expectation.
//!
//! Every stage works inside one experiment directory and is keyed by a
//! fingerprint of the configuration slice that affects it, so reruns are
//! no-ops and checkpoints cannot be mixed across incompatible configs.

mod runner;
mod stages;
mod train;

pub use runner::{summarize_dir, Runner, SplitName};
pub use stages::{
    assemble_phase2_samples, channel_image, erased_images, evaluate_phase2, extract_regions,
    load_phase2_samples, localization_rows, localize_region1, run_lambda_sweep, run_tau_sweep,
    write_crops, ExtractionOutput, LocalizationRecord, Phase1Nets, TauSweep,
};
pub use train::{
    build_phase1_net, build_phase2_net, classification_argmax_mae, image_input, predict_age,
    predict_distribution, train_phase1, train_phase2, Phase1Mode, Phase2Head, Phase2Sample,
    TrainLog,
};

use crate::ldl::LossConfig;
use crate::nn::{CheckpointError, LrSchedule, NetError};
use crate::synth::{GenSpec, SynthError};
use crate::{attention::AttentionError, ldl::LdlError, metrics::MetricsError, raster::RasterError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("experiment directory {0} is locked by another process")]
    Locked(PathBuf),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("checkpoint {path} was produced by an incompatible config (expected fingerprint {expected}, found {found})")]
    IncompatibleCheckpoint {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Ldl(#[from] LdlError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("toml error: {0}")]
    Toml(String),
    #[error("csv error in {0}: {1}")]
    Csv(String, #[source] csv::Error),
}

/// Input channels the regression model can aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionChannel {
    /// Whole original image, downscaled to the crop size.
    Original,
    /// Crop of the localized hand box.
    Hand,
    /// Crop of the most discriminative region.
    Region1,
    /// Crop of the next most discriminative region.
    Region2,
    /// Whole image with Region-1 erased, downscaled to the crop size.
    Erased,
}

impl RegionChannel {
    pub const ALL: [RegionChannel; 5] = [
        RegionChannel::Original,
        RegionChannel::Hand,
        RegionChannel::Region1,
        RegionChannel::Region2,
        RegionChannel::Erased,
    ];

    pub fn short(&self) -> &'static str {
        match self {
            RegionChannel::Original => "O",
            RegionChannel::Hand => "H",
            RegionChannel::Region1 => "R1",
            RegionChannel::Region2 => "R2",
            RegionChannel::Erased => "E",
        }
    }

    pub fn dir_name(&self) -> &'static str {
        match self {
            RegionChannel::Original => "original",
            RegionChannel::Hand => "hand",
            RegionChannel::Region1 => "region1",
            RegionChannel::Region2 => "region2",
            RegionChannel::Erased => "erased",
        }
    }
}

impl fmt::Display for RegionChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for RegionChannel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "original" | "O" | "o" => Ok(RegionChannel::Original),
            "hand" | "H" | "h" => Ok(RegionChannel::Hand),
            "region1" | "R1" | "r1" => Ok(RegionChannel::Region1),
            "region2" | "R2" | "r2" => Ok(RegionChannel::Region2),
            "erased" | "E" | "e" => Ok(RegionChannel::Erased),
            other => Err(format!("unknown region channel {other:?}")),
        }
    }
}

/// Where the dataset comes from: an existing directory or an inline
/// generator spec plus sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub gen: Option<GenSpec>,
    /// Number of samples when generating.
    #[serde(default = "default_n_samples")]
    pub n: usize,
}

fn default_n_samples() -> usize {
    3000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationConfig {
    /// Threshold for the hand map (normalized 0..100 units by default).
    pub tau_hand: f32,
    pub tau_region1: f32,
    pub tau_region2: f32,
    /// Rescale attention maps to [0,100] before thresholding.
    pub normalize: bool,
    /// Square input side for the hand-mode (downscaled) classifier.
    pub hand_input: usize,
    /// Square input side for the full-size classifiers.
    pub full_input: usize,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            tau_hand: 20.0,
            tau_region1: 50.0,
            tau_region2: 50.0,
            normalize: true,
            hand_input: 32,
            full_input: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch: usize,
    /// Conv channel widths.
    pub channels: Vec<usize>,
    /// Stride per conv; empty means stride 2 everywhere.
    #[serde(default)]
    pub strides: Vec<usize>,
    /// `(epoch, learning rate)` pairs.
    pub lr: LrSchedule,
    pub seed: u64,
}

impl PhaseConfig {
    pub fn stride_of(&self, layer: usize) -> usize {
        self.strides.get(layer).copied().unwrap_or(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Extra {
    /// Soft-label triangle half-width in months.
    pub soft_width: usize,
}

impl Default for Phase1Extra {
    fn default() -> Self {
        Self { soft_width: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase2Extra {
    /// Side of the square region crops stacked as input channels.
    pub crop_size: usize,
    /// Width of the rectified gender embedding.
    pub gender_width: usize,
    /// `expectation` (distribution head + expectation regression) or `l1`
    /// (plain scalar regression head).
    pub head: Phase2Head,
}

impl Default for Phase2Extra {
    fn default() -> Self {
        Self {
            crop_size: 32,
            gender_width: 32,
            head: Phase2Head::Expectation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_val: 500,
            n_test: 500,
            seed: 99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    /// Channels fed to Phase II, in this order.
    pub regions: Vec<RegionChannel>,
    #[serde(default)]
    pub localization: LocalizationConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub phase1: PhaseConfig,
    #[serde(default)]
    pub phase1_extra: Phase1Extra,
    pub phase2: PhaseConfig,
    #[serde(default)]
    pub phase2_extra: Phase2Extra,
    #[serde(default)]
    pub split: SplitConfig,
    /// Base seed for per-image erasure noise.
    #[serde(default = "default_erase_seed")]
    pub erase_seed: u64,
}

fn default_erase_seed() -> u64 {
    4242
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig {
                path: None,
                gen: Some(GenSpec::default()),
                n: 3000,
            },
            regions: vec![RegionChannel::Hand, RegionChannel::Region1],
            localization: LocalizationConfig::default(),
            loss: LossConfig::default(),
            phase1: PhaseConfig {
                epochs: 40,
                batch: 16,
                channels: vec![8, 16, 16],
                strides: vec![2, 2, 1],
                lr: vec![(0, 3e-4), (28, 1e-4)],
                seed: 1,
            },
            phase1_extra: Phase1Extra::default(),
            phase2: PhaseConfig {
                epochs: 60,
                batch: 16,
                channels: vec![8, 12, 16],
                strides: vec![],
                lr: vec![(0, 3e-4), (30, 1e-4), (45, 1e-5)],
                seed: 1,
            },
            phase2_extra: Phase2Extra::default(),
            split: SplitConfig::default(),
            erase_seed: 4242,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.regions.is_empty() {
            return Err(PipelineError::Config("region set is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for r in &self.regions {
            if !seen.insert(*r) {
                return Err(PipelineError::Config(format!(
                    "duplicate region channel {r}"
                )));
            }
        }
        if self.data.path.is_none() && self.data.gen.is_none() {
            return Err(PipelineError::Config(
                "data needs either a path or an inline generator spec".into(),
            ));
        }
        if let Some(g) = &self.data.gen {
            g.validate()?;
            if g.age_max > self.loss.t_max {
                return Err(PipelineError::Config(format!(
                    "generator age_max {} exceeds t_max {}",
                    g.age_max, self.loss.t_max
                )));
            }
            if self.data.n <= self.split.n_val + self.split.n_test {
                return Err(PipelineError::Config(format!(
                    "n = {} leaves no training data after {}+{} val/test",
                    self.data.n, self.split.n_val, self.split.n_test
                )));
            }
        }
        self.loss
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        for (name, p) in [("phase1", &self.phase1), ("phase2", &self.phase2)] {
            if p.epochs == 0 || p.batch == 0 || p.channels.is_empty() || p.lr.is_empty() {
                return Err(PipelineError::Config(format!(
                    "{name}: epochs, batch, channels and lr must be non-empty/positive"
                )));
            }
            if !p.strides.is_empty() && p.strides.len() != p.channels.len() {
                return Err(PipelineError::Config(format!(
                    "{name}: strides must be empty or match channels in length"
                )));
            }
            if p.strides.iter().any(|&s| s == 0) {
                return Err(PipelineError::Config(format!("{name}: strides must be positive")));
            }
        }
        if self.phase2_extra.crop_size < 8 {
            return Err(PipelineError::Config("crop size must be >= 8".into()));
        }
        if self.phase1_extra.soft_width == 0 {
            return Err(PipelineError::Config("soft width must be >= 1".into()));
        }
        Ok(())
    }

    /// Phase-1 models needed to build the configured channels.
    pub fn needed_phase1_modes(&self) -> Vec<Phase1Mode> {
        let mut modes = Vec::new();
        let wants = |c: RegionChannel| self.regions.contains(&c);
        if wants(RegionChannel::Hand) {
            modes.push(Phase1Mode::Hand);
        }
        if wants(RegionChannel::Region1)
            || wants(RegionChannel::Region2)
            || wants(RegionChannel::Erased)
        {
            modes.push(Phase1Mode::Region1);
        }
        if wants(RegionChannel::Region2) {
            modes.push(Phase1Mode::Erased);
        }
        modes
    }

    fn hash_of(value: &impl Serialize) -> String {
        let json = serde_json::to_string(value).expect("fingerprint serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let out = h.finalize();
        hex_prefix(&out, 16)
    }

    /// Fingerprint of everything that affects a Phase-1 training run.
    pub fn phase1_fingerprint(&self, mode: Phase1Mode) -> String {
        Self::hash_of(&(
            "phase1",
            mode.name(),
            &self.data,
            &self.phase1,
            &self.phase1_extra,
            &self.split,
            self.loss.t_max,
            match mode {
                Phase1Mode::Hand => self.localization.hand_input,
                _ => self.localization.full_input,
            },
            // erased-mode inputs depend on Region-1 localization
            match mode {
                Phase1Mode::Erased => Some((
                    self.localization.tau_region1,
                    self.localization.normalize,
                    self.erase_seed,
                    self.phase1_fingerprint(Phase1Mode::Region1),
                )),
                _ => None,
            },
        ))
    }

    /// Fingerprint of the extraction stage (boxes and crops).
    pub fn extraction_fingerprint(&self) -> String {
        let p1: Vec<String> = self
            .needed_phase1_modes()
            .iter()
            .map(|m| self.phase1_fingerprint(*m))
            .collect();
        Self::hash_of(&(
            "extract",
            &self.data,
            &self.regions,
            &self.localization,
            self.phase2_extra.crop_size,
            self.erase_seed,
            p1,
        ))
    }

    /// Fingerprint of a Phase-2 training run.
    pub fn phase2_fingerprint(&self) -> String {
        Self::hash_of(&(
            "phase2",
            self.extraction_fingerprint(),
            &self.phase2,
            &self.phase2_extra,
            &self.loss,
            &self.split,
        ))
    }
}

fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes
        .iter()
        .take(n)
        .map(|b| format!("{b:02x}"))
        .collect::<String>()
}

/// An exclusively held experiment directory. The lock file is removed when
/// the handle drops.
pub struct ExperimentDir {
    root: PathBuf,
    lock: PathBuf,
}

impl ExperimentDir {
    pub fn open(root: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(root)?;
        let lock = root.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(Self {
                root: root.to_path_buf(),
                lock,
            }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(root.to_path_buf()))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn crops_dir(&self, channel: RegionChannel) -> PathBuf {
        self.root.join("crops").join(channel.dir_name())
    }

    pub fn localization_csv(&self) -> PathBuf {
        self.root.join("localization.csv")
    }

    pub fn report_dir(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweeps")
    }

    /// Stage marker: present with a matching fingerprint means "done".
    pub fn marker_path(&self, stage: &str) -> PathBuf {
        self.root.join(format!(".{stage}.done"))
    }

    pub fn stage_is_done(&self, stage: &str, fingerprint: &str) -> bool {
        fs::read_to_string(self.marker_path(stage))
            .map(|s| s.trim() == fingerprint)
            .unwrap_or(false)
    }

    pub fn mark_stage_done(&self, stage: &str, fingerprint: &str) -> Result<(), PipelineError> {
        fs::write(self.marker_path(stage), format!("{fingerprint}\n"))?;
        Ok(())
    }

    pub fn clear_stage(&self, stage: &str) -> Result<(), PipelineError> {
        let p = self.marker_path(stage);
        if p.exists() {
            fs::remove_file(p)?;
        }
        Ok(())
    }
}

impl Drop for ExperimentDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Stable per-image seed for erasure noise.
pub fn erase_seed_for(base: u64, id: &str) -> u64 {
    // FNV-1a over the id, mixed with the base seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn validation_rejects_empty_and_duplicate_regions() {
        let mut cfg = ExperimentConfig::default();
        cfg.regions.clear();
        assert!(cfg.validate().is_err());
        cfg.regions = vec![RegionChannel::Hand, RegionChannel::Hand];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn needed_modes_track_the_region_set() {
        let mut cfg = ExperimentConfig::default();
        cfg.regions = vec![RegionChannel::Original];
        assert!(cfg.needed_phase1_modes().is_empty());
        cfg.regions = vec![RegionChannel::Region2];
        assert_eq!(
            cfg.needed_phase1_modes(),
            vec![Phase1Mode::Region1, Phase1Mode::Erased]
        );
        cfg.regions = vec![RegionChannel::Erased];
        assert_eq!(cfg.needed_phase1_modes(), vec![Phase1Mode::Region1]);
    }

    #[test]
    fn fingerprints_isolate_phases() {
        let base = ExperimentConfig::default();
        let mut lam = base.clone();
        lam.loss.lambda = 5.0;
        // lambda affects phase 2 but not phase 1 or extraction
        assert_eq!(
            base.phase1_fingerprint(Phase1Mode::Region1),
            lam.phase1_fingerprint(Phase1Mode::Region1)
        );
        assert_eq!(base.extraction_fingerprint(), lam.extraction_fingerprint());
        assert_ne!(base.phase2_fingerprint(), lam.phase2_fingerprint());

        let mut tau = base.clone();
        tau.localization.tau_region1 = 70.0;
        // tau affects extraction and the erased model, not the r1 model
        assert_eq!(
            base.phase1_fingerprint(Phase1Mode::Region1),
            tau.phase1_fingerprint(Phase1Mode::Region1)
        );
        assert_ne!(
            base.phase1_fingerprint(Phase1Mode::Erased),
            tau.phase1_fingerprint(Phase1Mode::Erased)
        );
        assert_ne!(base.extraction_fingerprint(), tau.extraction_fingerprint());
    }

    #[test]
    fn lock_file_guards_concurrent_writers() {
        let dir = tempfile::tempdir().unwrap();
        let a = ExperimentDir::open(dir.path()).unwrap();
        assert!(matches!(
            ExperimentDir::open(dir.path()),
            Err(PipelineError::Locked(_))
        ));
        drop(a);
        let _b = ExperimentDir::open(dir.path()).unwrap();
    }

    #[test]
    fn stage_markers_track_fingerprints() {
        let dir = tempfile::tempdir().unwrap();
        let exp = ExperimentDir::open(dir.path()).unwrap();
        assert!(!exp.stage_is_done("phase1-region1", "abc"));
        exp.mark_stage_done("phase1-region1", "abc").unwrap();
        assert!(exp.stage_is_done("phase1-region1", "abc"));
        assert!(!exp.stage_is_done("phase1-region1", "def"));
        exp.clear_stage("phase1-region1").unwrap();
        assert!(!exp.stage_is_done("phase1-region1", "abc"));
    }

    #[test]
    fn erase_seeds_differ_per_image() {
        let a = erase_seed_for(7, "s00001");
        let b = erase_seed_for(7, "s00002");
        assert_ne!(a, b);
        assert_eq!(a, erase_seed_for(7, "s00001"));
    }
}
