//! Artificial synthetic defect generation.
//!
//! A defect-free image `I_o`, a random binary mask `I_m` and an anomalous
//! source image `I_d` are composited into a synthetic defective image
//! `I_s = lambda * [(1 - I_m) .* I_o + I_m .* I_d] + (1 - lambda) * I_d`.
//! The masked region is always replaced by the source; `lambda < 1`
//! additionally blends a translucent film of the source over the remainder
//! (occlusion defects), while `lambda = 1` leaves the background untouched
//! (destructive defects).

use crate::imaging::{Colorspace, Image};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("transparency must lie in (0,1], got {0}")]
    BadLambda(f32),
    #[error("shape mismatch: image {img:?} vs {other} {got:?}")]
    ShapeMismatch { img: Vec<usize>, other: &'static str, got: Vec<usize> },
    #[error("mask area range {0:?} is unsatisfiable")]
    BadAreaRange((f32, f32)),
    #[error("could not generate a mask inside the area range after {0} attempts")]
    MaskRetriesExhausted(usize),
    #[error("anomaly source pool is empty and no procedural fallback is configured")]
    EmptyPool,
    #[error(transparent)]
    Imaging(#[from] crate::imaging::ImagingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectMode {
    Occlusion,
    Destructive,
}

/// Inputs of one compositing operation.
#[derive(Debug, Clone)]
pub struct SyntheticDefectSpec {
    pub lambda: f32,
    pub mask: Array2<bool>,
    pub anomaly_source: Image,
    pub mode: DefectMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Ellipse,
    Polygon,
    Brushstroke,
}

/// Random binary mask generator parameters.
#[derive(Debug, Clone)]
pub struct MaskSpec {
    pub shape_families: Vec<ShapeFamily>,
    pub count: usize,
    pub area_fraction_range: (f32, f32),
    pub seed: u64,
}

const MASK_ATTEMPTS: usize = 64;

/// Evaluates the compositing equation elementwise and clips to `[0, 1]`.
pub fn composite(i_o: &Image, spec: &SyntheticDefectSpec) -> Result<Image, SynthError> {
    if !(spec.lambda > 0.0 && spec.lambda <= 1.0) {
        return Err(SynthError::BadLambda(spec.lambda));
    }
    let (h, w, c) = i_o.shape();
    if spec.anomaly_source.shape() != (h, w, c) {
        return Err(SynthError::ShapeMismatch {
            img: vec![h, w, c],
            other: "anomaly source",
            got: vec![
                spec.anomaly_source.shape().0,
                spec.anomaly_source.shape().1,
                spec.anomaly_source.shape().2,
            ],
        });
    }
    if spec.mask.dim() != (h, w) {
        return Err(SynthError::ShapeMismatch {
            img: vec![h, w, c],
            other: "mask",
            got: spec.mask.shape().to_vec(),
        });
    }
    let lam = spec.lambda;
    let io = i_o.pixels();
    let id = spec.anomaly_source.pixels();
    let out = Array3::from_shape_fn((h, w, c), |(i, j, k)| {
        let m = if spec.mask[[i, j]] { 1.0 } else { 0.0 };
        let blended = (1.0 - m) * io[[i, j, k]] + m * id[[i, j, k]];
        lam * blended + (1.0 - lam) * id[[i, j, k]]
    });
    Ok(Image::from_clamped(out, i_o.colorspace()))
}

fn fill_ellipse(mask: &mut Array2<bool>, rng: &mut ChaCha12Rng, target_px: f32) {
    let (h, w) = mask.dim();
    let aspect = rng.random_range(0.4f32..2.5);
    let a = (target_px * aspect / std::f32::consts::PI).sqrt().max(1.0);
    let b = (target_px / (aspect * std::f32::consts::PI)).sqrt().max(1.0);
    let cx = rng.random_range(0.0..w as f32);
    let cy = rng.random_range(0.0..h as f32);
    let theta = rng.random_range(0.0..std::f32::consts::PI);
    let (ct, st) = (theta.cos(), theta.sin());
    for i in 0..h {
        for j in 0..w {
            let dx = j as f32 + 0.5 - cx;
            let dy = i as f32 + 0.5 - cy;
            let u = dx * ct + dy * st;
            let v = -dx * st + dy * ct;
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                mask[[i, j]] = true;
            }
        }
    }
}

fn fill_polygon(mask: &mut Array2<bool>, rng: &mut ChaCha12Rng, target_px: f32) {
    let (h, w) = mask.dim();
    let n = rng.random_range(3..=8usize);
    let r0 = (target_px / std::f32::consts::PI).sqrt().max(1.5);
    let cx = rng.random_range(0.0..w as f32);
    let cy = rng.random_range(0.0..h as f32);
    let mut pts: Vec<(f32, f32)> = Vec::with_capacity(n);
    for k in 0..n {
        let ang = (k as f32 / n as f32) * std::f32::consts::TAU + rng.random_range(-0.3..0.3);
        let r = r0 * rng.random_range(0.6..1.4);
        pts.push((cx + r * ang.cos(), cy + r * ang.sin()));
    }
    // Even-odd rule inside the polygon's bounding box.
    let min_i = pts.iter().map(|p| p.1).fold(f32::INFINITY, f32::min).floor().max(0.0) as usize;
    let max_i = (pts.iter().map(|p| p.1).fold(0.0f32, f32::max).ceil() as usize).min(h);
    let min_j = pts.iter().map(|p| p.0).fold(f32::INFINITY, f32::min).floor().max(0.0) as usize;
    let max_j = (pts.iter().map(|p| p.0).fold(0.0f32, f32::max).ceil() as usize).min(w);
    for i in min_i..max_i {
        for j in min_j..max_j {
            let (px, py) = (j as f32 + 0.5, i as f32 + 0.5);
            let mut inside = false;
            for k in 0..n {
                let (x1, y1) = pts[k];
                let (x2, y2) = pts[(k + 1) % n];
                if ((y1 > py) != (y2 > py))
                    && px < (x2 - x1) * (py - y1) / (y2 - y1) + x1
                {
                    inside = !inside;
                }
            }
            if inside {
                mask[[i, j]] = true;
            }
        }
    }
}

fn fill_brushstroke(mask: &mut Array2<bool>, rng: &mut ChaCha12Rng, target_px: f32) {
    let (h, w) = mask.dim();
    let rad = (target_px.sqrt() / 6.0).max(1.0);
    let len = (target_px / (2.0 * rad)).max(4.0) as usize;
    let mut x = rng.random_range(0.0..w as f32);
    let mut y = rng.random_range(0.0..h as f32);
    let mut dir = rng.random_range(0.0..std::f32::consts::TAU);
    for _ in 0..len {
        let r_i = rad.ceil() as isize;
        let (yc, xc) = (y.round() as isize, x.round() as isize);
        for di in -r_i..=r_i {
            for dj in -r_i..=r_i {
                let (ii, jj) = (yc + di, xc + dj);
                if ii >= 0
                    && jj >= 0
                    && (ii as usize) < h
                    && (jj as usize) < w
                    && (di * di + dj * dj) as f32 <= rad * rad
                {
                    mask[[ii as usize, jj as usize]] = true;
                }
            }
        }
        dir += rng.random_range(-0.5..0.5);
        x = (x + dir.cos()).clamp(0.0, w as f32 - 1.0);
        y = (y + dir.sin()).clamp(0.0, h as f32 - 1.0);
    }
}

pub fn mask_fraction(mask: &Array2<bool>) -> f32 {
    mask.iter().filter(|&&v| v).count() as f32 / mask.len() as f32
}

/// Draws a random binary mask whose area fraction lands inside the spec's
/// range (within 10% relative slack), deterministic under the spec seed.
pub fn random_mask(spec: &MaskSpec, shape: (usize, usize)) -> Result<Array2<bool>, SynthError> {
    let (lo, hi) = spec.area_fraction_range;
    if !(lo > 0.0 && hi > lo && hi < 1.0) && !(lo > 0.0 && (hi - lo).abs() < f32::EPSILON && hi < 1.0)
    {
        return Err(SynthError::BadAreaRange(spec.area_fraction_range));
    }
    if spec.shape_families.is_empty() || spec.count == 0 {
        return Err(SynthError::BadAreaRange(spec.area_fraction_range));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let total_px = (shape.0 * shape.1) as f32;
    for _ in 0..MASK_ATTEMPTS {
        let mut mask = Array2::from_elem(shape, false);
        let target = rng.random_range(lo..=hi);
        let per_shape = target * total_px / spec.count as f32;
        for _ in 0..spec.count {
            let fam = spec.shape_families[rng.random_range(0..spec.shape_families.len())];
            match fam {
                ShapeFamily::Ellipse => fill_ellipse(&mut mask, &mut rng, per_shape),
                ShapeFamily::Polygon => fill_polygon(&mut mask, &mut rng, per_shape),
                ShapeFamily::Brushstroke => fill_brushstroke(&mut mask, &mut rng, per_shape),
            }
        }
        let frac = mask_fraction(&mask);
        if frac >= lo * 0.9 && frac <= hi * 1.1 && frac > 0.0 {
            return Ok(mask);
        }
    }
    Err(SynthError::MaskRetriesExhausted(MASK_ATTEMPTS))
}

/// Where anomalous source images come from.
pub enum SourcePool {
    /// External natural images (optional `synth.source_dir` config).
    Images(Vec<Image>),
    /// Bundled procedural texture generator (default; self-contained).
    Procedural,
}

fn procedural_texture(shape: (usize, usize, usize), rng: &mut ChaCha12Rng) -> Image {
    let (h, w, c) = shape;
    let kind = rng.random_range(0..3u32);
    let mut base = Array2::<f32>::zeros((h, w));
    match kind {
        0 => {
            // Value-noise blotches: random coarse grid, bilinear upsample.
            let cells = rng.random_range(3..8usize);
            let grid =
                Array2::from_shape_fn((cells + 1, cells + 1), |_| rng.random_range(0.0f32..1.0));
            for i in 0..h {
                for j in 0..w {
                    let gy = i as f32 / h as f32 * cells as f32;
                    let gx = j as f32 / w as f32 * cells as f32;
                    let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
                    let (fy, fx) = (gy - y0 as f32, gx - x0 as f32);
                    let v = grid[[y0, x0]] * (1.0 - fy) * (1.0 - fx)
                        + grid[[y0 + 1, x0]] * fy * (1.0 - fx)
                        + grid[[y0, x0 + 1]] * (1.0 - fy) * fx
                        + grid[[y0 + 1, x0 + 1]] * fy * fx;
                    base[[i, j]] = v;
                }
            }
        }
        1 => {
            // Linear gradient at a random angle.
            let theta = rng.random_range(0.0..std::f32::consts::TAU);
            let (a, b) = (rng.random_range(0.0f32..1.0), rng.random_range(0.0f32..1.0));
            let (ct, st) = (theta.cos(), theta.sin());
            let denom = (h as f32 + w as f32).max(1.0);
            for i in 0..h {
                for j in 0..w {
                    let t = ((i as f32 * st + j as f32 * ct) / denom + 1.0) / 2.0;
                    base[[i, j]] = a + (b - a) * t.clamp(0.0, 1.0);
                }
            }
        }
        _ => {
            // Sinusoidal stripes with random orientation and period.
            let theta = rng.random_range(0.0..std::f32::consts::PI);
            let period = rng.random_range(3.0f32..16.0);
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let amp = rng.random_range(0.2f32..0.5);
            let off = rng.random_range(amp..1.0 - amp);
            let (ct, st) = (theta.cos(), theta.sin());
            for i in 0..h {
                for j in 0..w {
                    let x = (i as f32 * st + j as f32 * ct) / period * std::f32::consts::TAU;
                    base[[i, j]] = off + amp * (x + phase).sin();
                }
            }
        }
    }
    let shift: Vec<f32> = (0..c).map(|_| rng.random_range(-0.15f32..0.15)).collect();
    let px = Array3::from_shape_fn((h, w, c), |(i, j, k)| base[[i, j]] + shift[k]);
    let cs = if c == 1 { Colorspace::Grayscale } else { Colorspace::Rgb };
    Image::from_clamped(px, cs)
}

/// Picks (and crops/resizes) an anomaly source image for the target shape,
/// deterministic under the seed.
pub fn sample_anomaly_source(
    pool: &SourcePool,
    shape: (usize, usize, usize),
    seed: u64,
) -> Result<Image, SynthError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    match pool {
        SourcePool::Procedural => Ok(procedural_texture(shape, &mut rng)),
        SourcePool::Images(images) => {
            if images.is_empty() {
                return Err(SynthError::EmptyPool);
            }
            let img = &images[rng.random_range(0..images.len())];
            let (sh, sw, sc) = img.shape();
            let (h, w, c) = shape;
            // Random crop when the source is large enough, else wrap-tile.
            let (oi, oj) = (
                if sh > h { rng.random_range(0..=sh - h) } else { 0 },
                if sw > w { rng.random_range(0..=sw - w) } else { 0 },
            );
            let px = Array3::from_shape_fn((h, w, c), |(i, j, k)| {
                img.pixels()[[(oi + i) % sh, (oj + j) % sw, k % sc]]
            });
            Ok(Image::from_clamped(px, if c == 1 { Colorspace::Grayscale } else { Colorspace::Rgb }))
        }
    }
}

/// Knobs for [`make_training_pair`].
#[derive(Debug, Clone)]
pub struct SynthConfig {
    /// Transparency range for occlusion defects; destructive uses 1.
    pub lambda_range: (f32, f32),
    pub mask_shapes: Vec<ShapeFamily>,
    pub mask_count_range: (usize, usize),
    pub mask_area_range: (f32, f32),
    /// (occlusion, destructive) selection weights.
    pub mode_probs: (f32, f32),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            lambda_range: (0.3, 0.9),
            mask_shapes: vec![ShapeFamily::Ellipse, ShapeFamily::Polygon, ShapeFamily::Brushstroke],
            mask_count_range: (1, 3),
            mask_area_range: (0.02, 0.25),
            mode_probs: (0.5, 0.5),
        }
    }
}

/// One synthetic training sample: the defective input, its clean target and
/// the generating mask (kept for diagnostics).
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub synthetic: Image,
    pub clean: Image,
    pub mask: Array2<bool>,
    pub mode: DefectMode,
}

pub fn make_training_pair(
    i_o: &Image,
    cfg: &SynthConfig,
    pool: &SourcePool,
    seed: u64,
) -> Result<TrainingPair, SynthError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (h, w, c) = i_o.shape();
    let p_occl = cfg.mode_probs.0 / (cfg.mode_probs.0 + cfg.mode_probs.1).max(f32::MIN_POSITIVE);
    let mode = if rng.random::<f32>() < p_occl { DefectMode::Occlusion } else { DefectMode::Destructive };
    let lambda = match mode {
        DefectMode::Occlusion => rng.random_range(cfg.lambda_range.0..=cfg.lambda_range.1),
        DefectMode::Destructive => 1.0,
    };
    let count = rng.random_range(cfg.mask_count_range.0..=cfg.mask_count_range.1.max(cfg.mask_count_range.0));
    let mask = random_mask(
        &MaskSpec {
            shape_families: cfg.mask_shapes.clone(),
            count,
            area_fraction_range: cfg.mask_area_range,
            seed: rng.random(),
        },
        (h, w),
    )?;
    let anomaly_source = sample_anomaly_source(pool, (h, w, c), rng.random())?;
    let spec = SyntheticDefectSpec { lambda, mask: mask.clone(), anomaly_source, mode };
    let synthetic = composite(i_o, &spec)?;
    Ok(TrainingPair { synthetic, clean: i_o.clone(), mask, mode })
}
