//! Run orchestration: training, evaluation, reconstruction, ablation, and
//! the end-to-end reproduction chain, all driven by one declarative
//! [`RunConfig`].
//!
//! A config is validated before any side effect, and the fully resolved
//! copy is persisted next to the run outputs so results remain
//! attributable. Checkpoints embed a hash of the model-defining slice of
//! the config; every consumer re-derives that hash and refuses mismatched
//! weights.

mod ablate;
mod eval;
mod recon;
#[cfg(test)]
pub(crate) mod testutil;
mod train;

pub use ablate::{ablate, repro, AblationReport, AblationRow, ReproOptions, ReproReport};
pub use eval::{
    evaluate, render_text_table, score_point_sets, BackgroundEval, BackgroundRow, CategoryStat,
    EvalRow, MetricsReport, ReportProvenance,
};
pub use recon::{
    export_reconstruction, reconstruct, BoxSource, InstanceRecon, SceneReconstruction,
};
pub use train::{train, EpochStats, TrainReport};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::background::BackgroundConfig;
use crate::checkpoint::{config_hash, CheckpointHeader};
use crate::features::{EncoderConfig, GlobalSource};
use crate::instpifu::{Ablation, ObjectConfig};
use crate::metrics::CdConvention;
use crate::{Error, Result};

/// What a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TrainTarget {
    /// The per-instance occupancy model.
    #[default]
    Objects,
    /// The whole-room background field.
    Background,
}

/// Optimizer and schedule settings. Epoch numbers are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Multiplier applied to the rate at each epoch in `decay_epochs`.
    pub decay_factor: f64,
    /// Epochs at whose start the rate decays, ascending.
    pub decay_epochs: Vec<usize>,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Extra epochs after which a checkpoint is written; the final epoch
    /// always gets one.
    pub checkpoint_epochs: Vec<usize>,
    /// Seed for data order and query sampling.
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            decay_factor: 0.2,
            decay_epochs: vec![15, 24],
            batch_size: 8,
            epochs: 30,
            checkpoint_epochs: Vec::new(),
            seed: 0,
        }
    }
}

impl OptimConfig {
    /// Full-scale schedule.
    pub fn paper() -> Self {
        OptimConfig {
            lr: 1e-4,
            decay_epochs: vec![50, 80],
            batch_size: 16,
            epochs: 100,
            ..OptimConfig::default()
        }
    }

    /// Learning rate in force during a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.lr * self.decay_factor.powi(hits as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch size and epoch count must be positive".into(),
            ));
        }
        for w in self.decay_epochs.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Config(format!(
                    "decay epochs must be strictly ascending, got {:?}",
                    self.decay_epochs
                )));
            }
        }
        for &e in self.decay_epochs.iter().chain(&self.checkpoint_epochs) {
            if e == 0 || e > self.epochs {
                return Err(Error::Config(format!(
                    "schedule epoch {e} outside 1..={}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }
}

/// Metric conventions, stamped into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub cd: CdConvention,
    /// Reported chamfer values are `cd * cd_scale`.
    pub cd_scale: f64,
    pub fscore_tau: f64,
    /// Surface samples per mesh when scoring.
    pub eval_points: usize,
    pub icp_iters: usize,
    pub icp_tol: f64,
    /// Seed for evaluation-time surface sampling.
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            cd: CdConvention::SquaredSum,
            cd_scale: 1000.0,
            fscore_tau: 0.05,
            eval_points: 10_000,
            icp_iters: 30,
            icp_tol: 1e-7,
            seed: 4242,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fscore_tau > 0.0) {
            return Err(Error::Config(format!(
                "fscore tau must be > 0, got {}",
                self.fscore_tau
            )));
        }
        if !(self.cd_scale > 0.0) {
            return Err(Error::Config(format!(
                "cd scale must be > 0, got {}",
                self.cd_scale
            )));
        }
        if self.eval_points == 0 || self.icp_iters == 0 {
            return Err(Error::Config(
                "eval points and icp iterations must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Human-readable convention stamp, e.g. `squared-sum x1000, f-score
    /// tau 0.05`.
    pub fn convention_label(&self) -> String {
        let conv = match self.cd {
            CdConvention::SquaredSum => "squared-sum",
            CdConvention::SquaredMean => "squared-mean",
            CdConvention::AbsoluteSum => "absolute-sum",
            CdConvention::AbsoluteMean => "absolute-mean",
        };
        format!(
            "{conv} x{}, f-score tau {}",
            self.cd_scale, self.fscore_tau
        )
    }
}

/// One declarative description of a run: dataset, model, schedule, and
/// metric conventions. The default is the desk-scale preset; [`RunConfig::paper`]
/// is the full-scale one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Corpus root directory.
    pub dataset: PathBuf,
    /// Output directory for checkpoints, logs, and reports.
    pub out: PathBuf,
    /// Optional dataset adapter id (see the corpus registry).
    pub adapter: Option<String>,
    pub target: TrainTarget,
    pub ablation: Ablation,
    pub encoder: EncoderConfig,
    pub object: ObjectConfig,
    pub background: BackgroundConfig,
    pub optim: OptimConfig,
    pub metrics: MetricConfig,
    pub train_split: String,
    pub eval_split: String,
    /// Occupancy queries drawn per instance per epoch (even).
    pub points_per_instance: usize,
    /// Surface jitter for instance queries, canonical units.
    pub sample_sigma: f64,
    /// Occupancy queries drawn per room per epoch (even).
    pub background_points: usize,
    /// Surface jitter for room queries, meters.
    pub background_sigma: f64,
    /// Marching-cubes resolution for instance reconstruction.
    pub mc_res: usize,
    /// Marching-cubes resolution over the room frustum.
    pub background_mc_res: usize,
    /// Trained instance model consumed by evaluation and reconstruction.
    pub object_checkpoint: Option<PathBuf>,
    /// Trained background model.
    pub background_checkpoint: Option<PathBuf>,
    /// Directory for cached per-scene feature maps; unset disables caching.
    pub feature_cache: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::new(),
            out: PathBuf::new(),
            adapter: None,
            target: TrainTarget::Objects,
            ablation: Ablation::Full,
            encoder: EncoderConfig {
                l_c: 32,
                stacks: 1,
                d_g: 32,
                crop_res: 16,
                global_source: GlobalSource::PooledRoi,
                seed: 1071,
                ..EncoderConfig::default()
            },
            object: ObjectConfig {
                roi: 8,
                hidden: 64,
                gate_hidden: 48,
                seed: 2042,
                ..ObjectConfig::default()
            },
            background: BackgroundConfig {
                hidden: 64,
                seed: 3033,
                ..BackgroundConfig::default()
            },
            optim: OptimConfig::default(),
            metrics: MetricConfig::default(),
            train_split: "train".into(),
            eval_split: "test".into(),
            points_per_instance: 64,
            sample_sigma: 0.05,
            background_points: 256,
            background_sigma: 0.15,
            mc_res: 64,
            background_mc_res: 96,
            object_checkpoint: None,
            background_checkpoint: None,
            feature_cache: None,
        }
    }
}

impl RunConfig {
    /// Desk-scale preset: 64x64 scenes, batches of 8 for 30 epochs, rate
    /// decay 0.2 at epochs 15 and 24.
    pub fn desk(dataset: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        RunConfig {
            dataset: dataset.into(),
            out: out.into(),
            ..RunConfig::default()
        }
    }

    /// Full-scale preset: 256-channel features, batches of 16 for 100
    /// epochs at rate 1e-4, decay 0.2 at epochs 50 and 80.
    pub fn paper(dataset: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        RunConfig {
            dataset: dataset.into(),
            out: out.into(),
            encoder: EncoderConfig {
                seed: 1071,
                ..EncoderConfig::paper_scale()
            },
            object: ObjectConfig {
                roi: 64,
                seed: 2042,
                ..ObjectConfig::default()
            },
            background: BackgroundConfig {
                scene_h: 256,
                scene_w: 256,
                seed: 3033,
                ..BackgroundConfig::default()
            },
            optim: OptimConfig::paper(),
            points_per_instance: 2048,
            background_points: 2048,
            mc_res: 256,
            background_mc_res: 256,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.as_os_str().is_empty() {
            return Err(Error::Config("dataset directory is not set".into()));
        }
        if self.out.as_os_str().is_empty() {
            return Err(Error::Config("output directory is not set".into()));
        }
        self.encoder.validate()?;
        self.object.validate()?;
        self.background.validate()?;
        self.optim.validate()?;
        self.metrics.validate()?;
        for (what, n) in [
            ("points_per_instance", self.points_per_instance),
            ("background_points", self.background_points),
        ] {
            if n < 2 || n % 2 != 0 {
                return Err(Error::Config(format!(
                    "{what} must be even and >= 2, got {n}"
                )));
            }
        }
        if self.mc_res < 8 || self.background_mc_res < 8 {
            return Err(Error::Config(format!(
                "marching-cubes resolutions must be >= 8, got {} and {}",
                self.mc_res, self.background_mc_res
            )));
        }
        if self.train_split.is_empty() || self.eval_split.is_empty() {
            return Err(Error::Config("split names must be non-empty".into()));
        }
        Ok(())
    }

    /// Validates and returns the fully resolved copy: the run-level
    /// ablation is the single source of truth and overwrites the object
    /// net's own field.
    pub fn resolved(&self) -> Result<RunConfig> {
        let mut cfg = self.clone();
        cfg.object.ablation = cfg.ablation;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Persists the resolved config as `config.json` inside `dir`.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        fs::write(dir.join("config.json"), bytes)?;
        Ok(())
    }

    /// Reads a config file, rejecting unknown keys.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let bytes = fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// The model-defining slice of a config. Its hash ties checkpoints to
/// configs; schedule and dataset fields deliberately stay out.
pub fn model_stamp(cfg: &RunConfig) -> serde_json::Value {
    match cfg.target {
        TrainTarget::Objects => serde_json::json!({
            "target": cfg.target,
            "ablation": cfg.ablation,
            "encoder": cfg.encoder,
            "object": cfg.object,
        }),
        TrainTarget::Background => serde_json::json!({
            "target": cfg.target,
            "encoder": cfg.encoder,
            "background": cfg.background,
        }),
    }
}

/// Refuses a checkpoint whose embedded model hash differs from the one the
/// config resolves to.
pub fn check_stamp(header: &CheckpointHeader, cfg: &RunConfig) -> Result<()> {
    let want = config_hash(&model_stamp(cfg));
    let got = header.config_hash();
    if want != got {
        return Err(Error::Config(format!(
            "checkpoint was trained under a different model config: \
             expected hash {want}, checkpoint carries {got}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_preset_matches_the_documented_schedule() {
        let cfg = RunConfig::desk("data", "out");
        assert_eq!(cfg.optim.lr, 1e-3);
        assert_eq!(cfg.optim.decay_factor, 0.2);
        assert_eq!(cfg.optim.decay_epochs, vec![15, 24]);
        assert_eq!(cfg.optim.batch_size, 8);
        assert_eq!(cfg.optim.epochs, 30);
        assert_eq!(cfg.background.scene_w, 64);
        assert_eq!(cfg.mc_res, 64);
        cfg.validate().unwrap();
    }

    #[test]
    fn paper_preset_echoes_the_reference_schedule() {
        let cfg = RunConfig::paper("data", "out");
        assert_eq!(cfg.optim.lr, 1e-4);
        assert_eq!(cfg.optim.decay_factor, 0.2);
        assert_eq!(cfg.optim.decay_epochs, vec![50, 80]);
        assert_eq!(cfg.optim.batch_size, 16);
        assert_eq!(cfg.optim.epochs, 100);
        assert_eq!(cfg.encoder.l_c, 256);
        assert_eq!(cfg.mc_res, 256);
        cfg.validate().unwrap();
    }

    #[test]
    fn learning_rate_decays_at_the_configured_epochs() {
        let optim = OptimConfig::default();
        assert_eq!(optim.lr_at(1), 1e-3);
        assert_eq!(optim.lr_at(14), 1e-3);
        assert!((optim.lr_at(15) - 2e-4).abs() < 1e-12);
        assert!((optim.lr_at(23) - 2e-4).abs() < 1e-12);
        assert!((optim.lr_at(24) - 4e-5).abs() < 1e-12);
        assert!((optim.lr_at(30) - 4e-5).abs() < 1e-12);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(
            r#"{"dataset": "d", "out": "o", "momentum": 0.9}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("momentum"), "{err}");
        let err = serde_json::from_str::<RunConfig>(
            r#"{"dataset": "d", "out": "o", "optim": {"lr": 0.001, "nesterov": true}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("nesterov"), "{err}");
    }

    #[test]
    fn validation_rejects_broken_schedules_before_any_side_effect() {
        let mut cfg = RunConfig::desk("data", "out");
        cfg.optim.decay_epochs = vec![24, 15];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::desk("data", "out");
        cfg.optim.decay_epochs = vec![15, 99];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::desk("data", "out");
        cfg.points_per_instance = 63;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::desk("data", "out");
        cfg.mc_res = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let cfg = RunConfig::default();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn resolving_syncs_the_ablation_into_the_object_net() {
        let mut cfg = RunConfig::desk("data", "out");
        cfg.ablation = Ablation::C1;
        let resolved = cfg.resolved().unwrap();
        assert_eq!(resolved.object.ablation, Ablation::C1);
    }

    #[test]
    fn persisted_configs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::desk("data", "out").resolved().unwrap();
        cfg.persist(dir.path()).unwrap();
        let back = RunConfig::load(&dir.path().join("config.json")).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn model_stamps_separate_targets_and_ignore_schedules() {
        let cfg = RunConfig::desk("data", "out");
        let mut bg = cfg.clone();
        bg.target = TrainTarget::Background;
        assert_ne!(
            config_hash(&model_stamp(&cfg)),
            config_hash(&model_stamp(&bg))
        );

        let mut retimed = cfg.clone();
        retimed.optim.seed = 77;
        retimed.dataset = "elsewhere".into();
        assert_eq!(
            config_hash(&model_stamp(&cfg)),
            config_hash(&model_stamp(&retimed))
        );

        let mut wider = cfg.clone();
        wider.encoder.l_c = 64;
        assert_ne!(
            config_hash(&model_stamp(&cfg)),
            config_hash(&model_stamp(&wider))
        );
    }
}
