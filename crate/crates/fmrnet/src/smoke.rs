//! Desk-scale end-to-end run on a procedural striped-texture corpus:
//! generate data, train both phases on a tiny preset, then measure pixel-
//! and patch-level detection quality plus per-level latency on held-out
//! images with injected destructive defects.

use crate::config::SmokeSection;
use crate::imaging::{Colorspace, Image};
use crate::inspection::{self, InspectionConfig};
use crate::networks::ArchConfig;
use crate::pipeline::{self, InferencePayload};
use crate::synth::{
    composite, random_mask, sample_anomaly_source, DefectMode, MaskSpec, ShapeFamily, SourcePool,
    SynthConfig, SyntheticDefectSpec,
};
use crate::training::{establish_memory, LossWeights, Model, TrainCorpus, Trainer, TrainingSchedule};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SmokeError {
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
    #[error(transparent)]
    Network(#[from] crate::networks::NetworkError),
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error(transparent)]
    Imaging(#[from] crate::imaging::ImagingError),
    #[error("degenerate evaluation: {0}")]
    Degenerate(&'static str),
}

/// One striped-texture image: fixed orientation and period, per-image phase
/// jitter and light pixel noise.
pub fn striped_image(size: usize, period: f32, angle: f32, rng: &mut ChaCha12Rng) -> Image {
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let (ct, st) = (angle.cos(), angle.sin());
    let px = Array3::from_shape_fn((size, size, 1), |(i, j, _)| {
        let x = (j as f32 * ct + i as f32 * st) / period * std::f32::consts::TAU;
        let stripe = 0.5 + 0.25 * (x + phase).sin();
        stripe + rng.random_range(-0.02f32..0.02)
    });
    Image::from_clamped(px, Colorspace::Grayscale)
}

pub fn generate_striped_corpus(cfg: &SmokeSection, n: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| striped_image(cfg.image_size, cfg.stripe_period, cfg.stripe_angle, &mut rng))
        .collect()
}

/// A held-out image with one injected destructive defect and its mask.
pub fn defective_holdout(
    cfg: &SmokeSection,
    base: &Image,
    seed: u64,
) -> Result<(Image, Array2<bool>), SmokeError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (h, w, c) = base.shape();
    let mask = random_mask(
        &MaskSpec {
            shape_families: vec![ShapeFamily::Ellipse, ShapeFamily::Polygon, ShapeFamily::Brushstroke],
            count: 1,
            area_fraction_range: (cfg.defect_area_min, cfg.defect_area_max),
            seed: rng.random(),
        },
        (h, w),
    )?;
    let source = sample_anomaly_source(&SourcePool::Procedural, (h, w, c), rng.random())?;
    let spec = SyntheticDefectSpec {
        lambda: 1.0,
        mask: mask.clone(),
        anomaly_source: source,
        mode: DefectMode::Destructive,
    };
    let defective = composite(base, &spec)?;
    Ok((defective, mask))
}

#[derive(Debug, serde::Serialize)]
pub struct SmokeReport {
    pub pixel_auc: f64,
    pub patch_auc: f64,
    /// Patch-level faster than pixel-level on every holdout image.
    pub latency_ordering_holds: bool,
    pub mean_patch_ms: f64,
    pub mean_pixel_ms: f64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub final_phase1_loss: f64,
    pub final_phase2_loss: f64,
}

/// Architecture used by the smoke run: the desk preset sized to the corpus.
pub fn smoke_arch(cfg: &SmokeSection) -> ArchConfig {
    let mut arch = ArchConfig::desk();
    // Keep the memory bank well below the training patch count.
    let grid = (cfg.image_size / arch.patch).max(1);
    let patches = cfg.train_images * grid * grid;
    arch.memory_entries = arch.memory_entries.min(patches / 4).max(4);
    arch
}

/// Runs the whole desk-scale pipeline; `progress` receives one-line status
/// updates.
pub fn run_smoke(
    cfg: &SmokeSection,
    icfg: &InspectionConfig,
    mut progress: impl FnMut(&str),
) -> Result<(SmokeReport, Model), SmokeError> {
    let seed = crate::env_seed_override().unwrap_or(cfg.seed);
    let arch = smoke_arch(cfg);
    let patch = arch.patch;

    progress(&format!(
        "generating corpus: {} train + {} holdout {}x{} striped images",
        cfg.train_images, cfg.holdout_images, cfg.image_size, cfg.image_size
    ));
    let train_images = generate_striped_corpus(cfg, cfg.train_images, seed);
    let holdout_bases = generate_striped_corpus(cfg, cfg.holdout_images, seed ^ 0x5eed_0001);
    let corpus = TrainCorpus {
        images: train_images,
        synth: SynthConfig {
            mask_area_range: (cfg.defect_area_min, cfg.defect_area_max),
            ..SynthConfig::default()
        },
        pool: SourcePool::Procedural,
    };

    let t_train = std::time::Instant::now();
    let model = Model::init(arch, seed)?;
    let sched = TrainingSchedule {
        t1: cfg.t1,
        t2: cfg.t2,
        batch_size: cfg.batch_size,
        seed,
        log_every: 50,
        ..TrainingSchedule::default()
    };
    let mut trainer = Trainer::new(model, LossWeights::default(), sched);
    progress(&format!("phase 1: {} iterations", cfg.t1));
    trainer.train_phase1(&corpus)?;
    let final_phase1_loss = trainer.log.iter().rev().find(|r| r.phase == 1).map_or(0.0, |r| r.total);
    progress("establishing memory bank (k-means over training latents)");
    establish_memory(&mut trainer.model, &corpus, seed ^ 0x5eed_0002, 0.1)?;
    progress(&format!("phase 2: {} iterations", cfg.t2));
    trainer.train_phase2(&corpus)?;
    let final_phase2_loss = trainer.log.iter().rev().find(|r| r.phase == 2).map_or(0.0, |r| r.total);
    let train_seconds = t_train.elapsed().as_secs_f64();
    let model = trainer.model;

    progress("evaluating holdout images (patch + pixel level)");
    let t_eval = std::time::Instant::now();
    let mut pixel_scores: Vec<f64> = Vec::new();
    let mut pixel_labels: Vec<bool> = Vec::new();
    let mut patch_scores: Vec<f64> = Vec::new();
    let mut patch_labels: Vec<bool> = Vec::new();
    let mut ordering = true;
    let mut sum_patch_ms = 0.0;
    let mut sum_pixel_ms = 0.0;
    for (i, base) in holdout_bases.iter().enumerate() {
        let (defective, mask) = defective_holdout(cfg, base, seed ^ (0x1000 + i as u64))?;

        let patch_res = pipeline::infer_patch_level(&model, &defective, patch, patch)?;
        let pixel_res = pipeline::infer_pixel(&model, &defective, patch, patch, icfg)?;
        sum_patch_ms += patch_res.timings.total_ms;
        sum_pixel_ms += pixel_res.timings.total_ms;
        if patch_res.timings.total_ms >= pixel_res.timings.total_ms {
            ordering = false;
        }

        let InferencePayload::Patch { scores, coords } = &patch_res.payload else { unreachable!() };
        for (score, &(r, c)) in scores.iter().zip(coords) {
            let defect_pixels = mask
                .slice(ndarray::s![r..r + patch, c..c + patch])
                .iter()
                .filter(|&&v| v)
                .count();
            patch_scores.push(*score as f64);
            patch_labels.push(defect_pixels > 0);
        }

        let InferencePayload::Pixel { maps, .. } = &pixel_res.payload else { unreachable!() };
        for (s, t) in maps.fused.iter().zip(mask.iter()) {
            pixel_scores.push(*s as f64);
            pixel_labels.push(*t);
        }
    }
    let eval_seconds = t_eval.elapsed().as_secs_f64();

    let pixel_auc =
        inspection::auc_roc(&pixel_scores, &pixel_labels).ok_or(SmokeError::Degenerate("pixel labels"))?;
    let patch_auc =
        inspection::auc_roc(&patch_scores, &patch_labels).ok_or(SmokeError::Degenerate("patch labels"))?;
    let n = cfg.holdout_images.max(1) as f64;
    let report = SmokeReport {
        pixel_auc,
        patch_auc,
        latency_ordering_holds: ordering,
        mean_patch_ms: sum_patch_ms / n,
        mean_pixel_ms: sum_pixel_ms / n,
        train_seconds,
        eval_seconds,
        final_phase1_loss,
        final_phase2_loss,
    };
    progress(&format!(
        "smoke summary: pixel AUC {:.4}, patch AUC {:.4}, patch {:.2} ms vs pixel {:.2} ms",
        report.pixel_auc, report.patch_auc, report.mean_patch_ms, report.mean_pixel_ms
    ));
    Ok((report, model))
}
