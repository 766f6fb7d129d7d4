//! Run configuration: one TOML file covering dataset layout, patching,
//! defect synthesis, architecture, training, inspection and the early-exit
//! policy. Every knob has a documented default; `FMRNET_SEED` overrides all
//! seeds.

use crate::imaging::Colorspace;
use crate::inspection::InspectionConfig;
use crate::networks::ArchConfig;
use crate::synth::{ShapeFamily, SourcePool, SynthConfig};
use crate::training::{LossWeights, TrainingSchedule};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown architecture preset {0:?} (expected \"full\" or \"desk\")")]
    UnknownPreset(String),
    #[error("synth.source_dir {0} has no readable images")]
    EmptySourceDir(PathBuf),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    /// MVTec-style dataset root (train/good, test/<type>, ground_truth/<type>).
    pub root: PathBuf,
    /// Working size images are resized to on load; 0 disables resizing.
    pub working_height: usize,
    pub working_width: usize,
    pub colorspace: Colorspace,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            root: PathBuf::from("data"),
            working_height: 512,
            working_width: 512,
            colorspace: Colorspace::Grayscale,
        }
    }
}

impl DatasetSection {
    pub fn working_size(&self) -> Option<(usize, usize)> {
        (self.working_height > 0 && self.working_width > 0)
            .then_some((self.working_height, self.working_width))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSection {
    pub size: usize,
    /// Test-time sliding-window stride; defaults to the patch size
    /// (non-overlapping).
    pub stride: usize,
}

impl Default for PatchSection {
    fn default() -> Self {
        PatchSection { size: 64, stride: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub lambda_min: f32,
    pub lambda_max: f32,
    pub mask_shapes: Vec<ShapeFamily>,
    pub mask_count_min: usize,
    pub mask_count_max: usize,
    pub mask_area_min: f32,
    pub mask_area_max: f32,
    pub occlusion_prob: f32,
    pub destructive_prob: f32,
    /// Optional directory of natural anomaly-source images; the bundled
    /// procedural generator is used when unset.
    pub source_dir: Option<PathBuf>,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        SynthSection {
            lambda_min: d.lambda_range.0,
            lambda_max: d.lambda_range.1,
            mask_shapes: d.mask_shapes,
            mask_count_min: d.mask_count_range.0,
            mask_count_max: d.mask_count_range.1,
            mask_area_min: d.mask_area_range.0,
            mask_area_max: d.mask_area_range.1,
            occlusion_prob: d.mode_probs.0,
            destructive_prob: d.mode_probs.1,
            source_dir: None,
        }
    }
}

impl SynthSection {
    pub fn to_synth_config(&self) -> SynthConfig {
        SynthConfig {
            lambda_range: (self.lambda_min, self.lambda_max),
            mask_shapes: self.mask_shapes.clone(),
            mask_count_range: (self.mask_count_min, self.mask_count_max),
            mask_area_range: (self.mask_area_min, self.mask_area_max),
            mode_probs: (self.occlusion_prob, self.destructive_prob),
        }
    }

    /// Loads the anomaly-source pool (external directory or procedural).
    pub fn load_pool(&self, working: Option<(usize, usize)>, cs: Colorspace) -> Result<SourcePool, ConfigError> {
        match &self.source_dir {
            None => Ok(SourcePool::Procedural),
            Some(dir) => {
                let mut images = Vec::new();
                let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                    .map_err(|e| ConfigError::Io { path: dir.clone(), source: e })?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.is_file())
                    .collect();
                paths.sort();
                for p in paths {
                    if let Ok(img) = crate::imaging::load_image(&p, working, cs) {
                        images.push(img);
                    }
                }
                if images.is_empty() {
                    return Err(ConfigError::EmptySourceDir(dir.clone()));
                }
                Ok(SourcePool::Images(images))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchSection {
    /// Base preset: "full" (5 blocks, 64x64) or "desk" (3 blocks, 32x32).
    pub preset: String,
    pub in_channels: Option<usize>,
    pub patch: Option<usize>,
    pub blocks: Option<usize>,
    pub base_channels: Option<usize>,
    pub max_channels: Option<usize>,
    pub leaky_slope: Option<f64>,
    pub ca_widths: Option<Vec<usize>>,
    pub an_hidden: Option<usize>,
    pub memory_entries: Option<usize>,
    pub texton_size: Option<usize>,
    pub gfrm_levels: Option<Vec<usize>>,
    pub perceptual_blocks: Option<Vec<usize>>,
    pub psi: Option<f64>,
    pub gfrm_trainable_smoothing: Option<bool>,
}

impl Default for ArchSection {
    fn default() -> Self {
        ArchSection {
            preset: "full".into(),
            in_channels: None,
            patch: None,
            blocks: None,
            base_channels: None,
            max_channels: None,
            leaky_slope: None,
            ca_widths: None,
            an_hidden: None,
            memory_entries: None,
            texton_size: None,
            gfrm_levels: None,
            perceptual_blocks: None,
            psi: None,
            gfrm_trainable_smoothing: None,
        }
    }
}

impl ArchSection {
    pub fn to_arch_config(&self) -> Result<ArchConfig, ConfigError> {
        let mut cfg = match self.preset.as_str() {
            "full" => ArchConfig::full(),
            "desk" => ArchConfig::desk(),
            other => return Err(ConfigError::UnknownPreset(other.to_string())),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        apply!(
            in_channels,
            patch,
            blocks,
            base_channels,
            max_channels,
            leaky_slope,
            ca_widths,
            an_hidden,
            memory_entries,
            texton_size,
            gfrm_levels,
            perceptual_blocks,
            psi,
            gfrm_trainable_smoothing
        );
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub t1: u64,
    pub t2: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub saturating_gan: bool,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub weights: LossWeights,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainingSchedule::default();
        TrainSection {
            t1: d.t1,
            t2: d.t2,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            seed: d.seed,
            grad_clip: d.grad_clip.unwrap_or(0.0),
            saturating_gan: d.saturating_gan,
            checkpoint_every: 0,
            log_every: d.log_every,
            weights: LossWeights::default(),
        }
    }
}

impl TrainSection {
    /// Schedule with the `FMRNET_SEED` override applied.
    pub fn to_schedule(&self) -> TrainingSchedule {
        TrainingSchedule {
            t1: self.t1,
            t2: self.t2,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: crate::env_seed_override().unwrap_or(self.seed),
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            saturating_gan: self.saturating_gan,
            checkpoint_every: (self.checkpoint_every > 0).then_some(self.checkpoint_every),
            log_every: self.log_every,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MemorySection {
    pub seed: u64,
    /// Early-exit threshold = max training patch score * (1 + margin).
    pub calibration_margin: f32,
}

impl Default for MemorySection {
    fn default() -> Self {
        MemorySection { seed: 0, calibration_margin: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitMode {
    AlwaysPatch,
    AlwaysPixel,
    Threshold,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExitSection {
    pub mode: ExitMode,
    /// Explicit threshold override; the checkpoint calibration is used when
    /// unset.
    pub threshold: Option<f32>,
}

impl Default for ExitSection {
    fn default() -> Self {
        ExitSection { mode: ExitMode::Threshold, threshold: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InspectSection {
    #[serde(flatten)]
    pub maps: InspectionConfig,
    /// Probabilistic speckle replacement applied to inputs before
    /// inference (robustness experiments); 0 disables.
    pub noise_p: f32,
    pub noise_seed: u64,
}

impl Default for InspectSection {
    fn default() -> Self {
        InspectSection { maps: InspectionConfig::default(), noise_p: 0.0, noise_seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SmokeSection {
    pub train_images: usize,
    pub holdout_images: usize,
    pub image_size: usize,
    pub seed: u64,
    pub t1: u64,
    pub t2: u64,
    pub batch_size: usize,
    pub stripe_period: f32,
    pub stripe_angle: f32,
    pub defect_area_min: f32,
    pub defect_area_max: f32,
}

impl Default for SmokeSection {
    fn default() -> Self {
        SmokeSection {
            train_images: 200,
            holdout_images: 50,
            image_size: 64,
            seed: 7,
            t1: 2000,
            t2: 1000,
            batch_size: 16,
            stripe_period: 8.0,
            stripe_angle: 0.5,
            defect_area_min: 0.05,
            defect_area_max: 0.20,
        }
    }
}

/// Whole run configuration (one TOML file).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub dataset: DatasetSection,
    pub patch: PatchSection,
    pub synth: SynthSection,
    pub arch: ArchSection,
    pub train: TrainSection,
    pub memory: MemorySection,
    pub exit: ExitSection,
    pub inspect: InspectSection,
    pub smoke: SmokeSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.to_path_buf(), source: e })?;
        Ok(toml::from_str(&text)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn memory_seed(&self) -> u64 {
        crate::env_seed_override().unwrap_or(self.memory.seed)
    }
}
