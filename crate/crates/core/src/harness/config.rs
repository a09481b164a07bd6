use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{DetectConfig, DetectorConfig, FusionMode, LossConfig};
use crate::error::{Error, Result};
use crate::synth::{SceneSpec, TimeOfDay};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Pedestrian,
    Multiclass,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pedestrian" => Ok(Preset::Pedestrian),
            "multiclass" => Ok(Preset::Multiclass),
            _ => Err(Error::Config(format!("unknown preset {s:?} (pedestrian or multiclass)"))),
        }
    }
}

/// Everything a command needs. Flat on purpose: one TOML key per field, and
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// `cfr:N`, `baseline:average|max|concat_conv`, `visible_only` or
    /// `thermal_only`.
    pub fusion: String,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,

    // dataset
    pub data_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_height: f64,
    pub max_object_height: f64,
    pub p_both: f64,
    pub p_visible_only: f64,
    pub p_thermal_only: f64,
    pub clutter: f64,
    pub noise_sigma: f64,
    /// `day`, `night` or `mixed:P`.
    pub time_of_day: String,

    // training
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seg_weight: f64,
    pub augment: bool,
    pub shared_bn_stats: bool,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,

    // evaluation
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub timing_iterations: usize,

    // ablation
    pub ablate_loops: Vec<usize>,
    pub ablate_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneSpec::pedestrian();
        let det = DetectConfig::default();
        Self {
            preset: Preset::Pedestrian,
            fusion: "cfr:3".into(),
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            data_seed: 2024,
            n_train: 400,
            n_test: 100,
            min_objects: scene.min_objects,
            max_objects: scene.max_objects,
            min_object_height: scene.min_object_height,
            max_object_height: scene.max_object_height,
            p_both: scene.p_both,
            p_visible_only: scene.p_visible_only,
            p_thermal_only: scene.p_thermal_only,
            clutter: scene.clutter,
            noise_sigma: scene.noise_sigma,
            time_of_day: scene.time_of_day.to_string(),
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 20,
            batch_size: 8,
            seg_weight: LossConfig::default().seg_weight,
            augment: true,
            shared_bn_stats: true,
            checkpoint_every: 5,
            conf_threshold: det.conf_threshold,
            nms_iou: det.nms_iou,
            timing_iterations: 50,
            ablate_loops: vec![0, 1, 2, 3, 4],
            ablate_seeds: 5,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_spec()?.validate()?;
        self.detector_config()?.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("need lr > 0, momentum in [0, 1) and weight_decay >= 0".into()));
        }
        if !(self.seg_weight >= 0.0) {
            return Err(Error::Config("seg_weight must be >= 0".into()));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be positive".into()));
        }
        Ok(())
    }

    pub fn fusion_mode(&self) -> Result<FusionMode> {
        match self.fusion.parse()? {
            FusionMode::Cfr { loops: 0 } => Ok(FusionMode::from_loops(0)),
            m => Ok(m),
        }
    }

    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let base = match self.preset {
            Preset::Pedestrian => SceneSpec::pedestrian(),
            Preset::Multiclass => SceneSpec::multiclass(),
        };
        Ok(SceneSpec {
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            min_object_height: self.min_object_height,
            max_object_height: self.max_object_height,
            p_both: self.p_both,
            p_visible_only: self.p_visible_only,
            p_thermal_only: self.p_thermal_only,
            clutter: self.clutter,
            noise_sigma: self.noise_sigma,
            time_of_day: self.time_of_day.parse::<TimeOfDay>()?,
            ..base
        })
    }

    pub fn detector_config(&self) -> Result<DetectorConfig> {
        let fusion = self.fusion_mode()?;
        let mut cfg = match self.preset {
            Preset::Pedestrian => DetectorConfig::pedestrian(fusion),
            Preset::Multiclass => DetectorConfig::multiclass(fusion),
        };
        cfg.shared_bn_stats = self.shared_bn_stats;
        Ok(cfg)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            seg_weight: self.seg_weight,
            ..LossConfig::default()
        }
    }

    pub fn detect_config(&self) -> DetectConfig {
        DetectConfig {
            conf_threshold: self.conf_threshold,
            nms_iou: self.nms_iou,
            ..DetectConfig::default()
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        match self.preset {
            Preset::Pedestrian => SceneSpec::pedestrian(),
            Preset::Multiclass => SceneSpec::multiclass(),
        }
        .classes
        .into_iter()
        .map(|c| c.name)
        .collect()
    }

    /// Copy with a different fusion mode, loop count 0 meaning the average
    /// baseline.
    pub fn with_loops(&self, loops: usize) -> Self {
        Self {
            fusion: FusionMode::from_loops(loops).to_string(),
            ..self.clone()
        }
    }
}
