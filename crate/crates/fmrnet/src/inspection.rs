//! Multimodal anomaly maps and evaluation metrics.
//!
//! Three modalities compare a candidate image against its reconstruction:
//! gradient-magnitude similarity (Prewitt-based), local SSIM and the
//! per-pixel residual. The fused map is their elementwise product, optionally
//! median-smoothed and min-max normalized per modality first. Map arithmetic
//! runs in f64 internally and is returned as f32.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InspectError {
    #[error("stability constants must be > 0")]
    BadConstant,
    #[error("median kernel must be odd and >= 1, got {0}")]
    BadMedianKernel(usize),
    #[error("ssim window must be odd and >= 3, got {0}")]
    BadSsimWindow(usize),
    #[error("map shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
}

/// Constants and knobs for the multimodal inspection stage.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct InspectionConfig {
    /// GMS stability constant.
    pub c0: f64,
    /// SSIM luminance stability constant.
    pub c1: f64,
    /// SSIM contrast stability constant.
    pub c2: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    /// Odd median kernel applied per modality before fusion.
    pub median_kernel: usize,
    pub apply_median: bool,
    pub k_sigma: f64,
    /// Min-max normalize each modality before fusing.
    pub normalize_maps: bool,
    /// Reproduce the printed SSIM form (sigma product in the numerator)
    /// instead of the standard covariance form.
    pub strict_sigma_product: bool,
}

impl Default for InspectionConfig {
    fn default() -> Self {
        InspectionConfig {
            c0: 1e-4,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
            ssim_window: 11,
            ssim_sigma: 1.5,
            median_kernel: 3,
            apply_median: true,
            k_sigma: 3.0,
            normalize_maps: true,
            strict_sigma_product: false,
        }
    }
}

impl InspectionConfig {
    pub fn validate(&self) -> Result<(), InspectError> {
        if self.c0 <= 0.0 || self.c1 <= 0.0 || self.c2 <= 0.0 {
            return Err(InspectError::BadConstant);
        }
        if self.median_kernel.is_multiple_of(2) {
            return Err(InspectError::BadMedianKernel(self.median_kernel));
        }
        if self.ssim_window.is_multiple_of(2) || self.ssim_window < 3 {
            return Err(InspectError::BadSsimWindow(self.ssim_window));
        }
        Ok(())
    }
}

/// The three modality maps and their fused result.
#[derive(Debug, Clone)]
pub struct AnomalyMapSet {
    pub a_m1: Array2<f32>,
    pub a_m2: Array2<f32>,
    pub a_m3: Array2<f32>,
    pub fused: Array2<f32>,
}

/// Mirror-without-edge index reflection (…2 1 0 | 0' is excluded … ).
fn reflect(idx: isize, n: usize) -> usize {
    debug_assert!(n >= 1);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = idx.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

fn correlate3x3(img: &Array2<f64>, k: &[[f64; 3]; 3]) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut acc = 0.0;
        for (di, krow) in k.iter().enumerate() {
            for (dj, &kv) in krow.iter().enumerate() {
                let ii = reflect(i as isize + di as isize - 1, h);
                let jj = reflect(j as isize + dj as isize - 1, w);
                acc += kv * img[[ii, jj]];
            }
        }
        acc
    })
}

fn to_f64(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(|v| v as f64)
}

fn to_f32(a: &Array2<f64>) -> Array2<f32> {
    a.mapv(|v| v as f32)
}

/// Prewitt gradient magnitude with reflective padding.
pub fn gradient_magnitude(img: &Array2<f32>) -> Array2<f32> {
    let img = to_f64(img);
    let px = [[-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0]];
    let py = [[-1.0, -1.0, -1.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];
    let gx = correlate3x3(&img, &px);
    let gy = correlate3x3(&img, &py);
    to_f32(&Array2::from_shape_fn(img.dim(), |(i, j)| {
        (gx[[i, j]] * gx[[i, j]] + gy[[i, j]] * gy[[i, j]]).sqrt()
    }))
}

/// Gradient-magnitude similarity map, values in `(0, 1]`.
pub fn gms_map(img: &Array2<f32>, rec: &Array2<f32>, c0: f64) -> Result<Array2<f32>, InspectError> {
    if img.dim() != rec.dim() {
        return Err(InspectError::ShapeMismatch(img.shape().to_vec(), rec.shape().to_vec()));
    }
    let gi = to_f64(&gradient_magnitude(img));
    let gr = to_f64(&gradient_magnitude(rec));
    Ok(to_f32(&Array2::from_shape_fn(img.dim(), |(i, j)| {
        let a = gi[[i, j]];
        let b = gr[[i, j]];
        (2.0 * a * b + c0) / (a * a + b * b + c0)
    })))
}

fn gaussian_weights(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut w: Vec<f64> = (-half..=half)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

fn gaussian_filter(img: &Array2<f64>, size: usize, sigma: f64) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = gaussian_weights(size, sigma);
    let half = (size / 2) as isize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let jj = reflect(j as isize + t as isize - half, w);
                acc += kv * img[[i, jj]];
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let ii = reflect(i as isize + t as isize - half, h);
                acc += kv * tmp[[ii, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Local SSIM map over Gaussian windows. The default uses the covariance
/// form; `strict_sigma_product` substitutes the sigma product.
pub fn ssim_map(
    img: &Array2<f32>,
    rec: &Array2<f32>,
    cfg: &InspectionConfig,
) -> Result<Array2<f32>, InspectError> {
    if img.dim() != rec.dim() {
        return Err(InspectError::ShapeMismatch(img.shape().to_vec(), rec.shape().to_vec()));
    }
    cfg.validate()?;
    let x = to_f64(img);
    let y = to_f64(rec);
    let (size, sigma) = (cfg.ssim_window, cfg.ssim_sigma);
    let mu_x = gaussian_filter(&x, size, sigma);
    let mu_y = gaussian_filter(&y, size, sigma);
    let xx = gaussian_filter(&(&x * &x), size, sigma);
    let yy = gaussian_filter(&(&y * &y), size, sigma);
    let xy = gaussian_filter(&(&x * &y), size, sigma);
    let (c1, c2) = (cfg.c1, cfg.c2);
    Ok(to_f32(&Array2::from_shape_fn(x.dim(), |(i, j)| {
        let mx = mu_x[[i, j]];
        let my = mu_y[[i, j]];
        let vx = (xx[[i, j]] - mx * mx).max(0.0);
        let vy = (yy[[i, j]] - my * my).max(0.0);
        let lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        let structure = if cfg.strict_sigma_product {
            (2.0 * vx.sqrt() * vy.sqrt() + c2) / (vx + vy + c2)
        } else {
            let cov = xy[[i, j]] - mx * my;
            (2.0 * cov + c2) / (vx + vy + c2)
        };
        lum * structure
    })))
}

/// Per-pixel absolute difference (channel-mean handled by the caller).
pub fn residual_map(img: &Array2<f32>, rec: &Array2<f32>) -> Result<Array2<f32>, InspectError> {
    if img.dim() != rec.dim() {
        return Err(InspectError::ShapeMismatch(img.shape().to_vec(), rec.shape().to_vec()));
    }
    Ok(Array2::from_shape_fn(img.dim(), |(i, j)| (img[[i, j]] - rec[[i, j]]).abs()))
}

/// Modality-1 anomaly map `1 - GMS`.
pub fn anomaly_m1(img: &Array2<f32>, rec: &Array2<f32>, c0: f64) -> Result<Array2<f32>, InspectError> {
    Ok(gms_map(img, rec, c0)?.mapv(|v| 1.0 - v))
}

/// Modality-2 anomaly map `1 - SSIM` (can reach 2 for negative SSIM; not
/// clipped, only fusion-input normalization rescales).
pub fn anomaly_m2(
    img: &Array2<f32>,
    rec: &Array2<f32>,
    cfg: &InspectionConfig,
) -> Result<Array2<f32>, InspectError> {
    Ok(ssim_map(img, rec, cfg)?.mapv(|v| 1.0 - v))
}

pub fn median_filter(map: &Array2<f32>, kernel: usize) -> Result<Array2<f32>, InspectError> {
    if kernel.is_multiple_of(2) || kernel == 0 {
        return Err(InspectError::BadMedianKernel(kernel));
    }
    let (h, w) = map.dim();
    let half = (kernel / 2) as isize;
    let mut buf = Vec::with_capacity(kernel * kernel);
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        buf.clear();
        for di in -half..=half {
            for dj in -half..=half {
                buf.push(map[[reflect(i as isize + di, h), reflect(j as isize + dj, w)]]);
            }
        }
        buf.sort_by(|a, b| a.partial_cmp(b).expect("non-finite map value"));
        buf[buf.len() / 2]
    }))
}

pub fn minmax_normalize(map: &Array2<f32>) -> Array2<f32> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in map.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo <= f32::EPSILON {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| (v - lo) / (hi - lo))
}

/// Fuses the three modality maps by elementwise product, after optional
/// per-modality median filtering and min-max normalization.
pub fn fuse(
    a_m1: &Array2<f32>,
    a_m2: &Array2<f32>,
    a_m3: &Array2<f32>,
    cfg: &InspectionConfig,
) -> Result<AnomalyMapSet, InspectError> {
    if a_m1.dim() != a_m2.dim() || a_m1.dim() != a_m3.dim() {
        return Err(InspectError::ShapeMismatch(a_m1.shape().to_vec(), a_m3.shape().to_vec()));
    }
    cfg.validate()?;
    let prep = |m: &Array2<f32>| -> Result<Array2<f32>, InspectError> {
        let m = if cfg.apply_median { median_filter(m, cfg.median_kernel)? } else { m.clone() };
        Ok(if cfg.normalize_maps { minmax_normalize(&m) } else { m })
    };
    let m1 = prep(a_m1)?;
    let m2 = prep(a_m2)?;
    let m3 = prep(a_m3)?;
    let fused = &(&m1 * &m2) * &m3;
    Ok(AnomalyMapSet { a_m1: m1, a_m2: m2, a_m3: m3, fused })
}

/// Thresholds at `mean + k * std` (population std).
pub fn binarize_ksigma(map: &Array2<f32>, k: f64) -> Array2<bool> {
    let n = map.len() as f64;
    let mean = map.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = map.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let thr = mean + k * var.sqrt();
    map.mapv(|v| v as f64 > thr)
}

/// Rank-based AUC ROC with midrank tie handling. `None` when either class
/// is absent.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores/labels length mismatch");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("non-finite score"));
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(l, _)| **l)
        .map(|(_, r)| *r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Pixelwise precision / recall / F1 against a ground-truth mask.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct PrfReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    /// Set when a zero denominator forced a metric to 0.
    pub zero_division: bool,
}

pub fn prf(mask: &Array2<bool>, truth: &Array2<bool>) -> Result<PrfReport, InspectError> {
    if mask.dim() != truth.dim() {
        return Err(InspectError::ShapeMismatch(mask.shape().to_vec(), truth.shape().to_vec()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for (&m, &t) in mask.iter().zip(truth.iter()) {
        match (m, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let mut zero_division = false;
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        zero_division = true;
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        zero_division = true;
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        zero_division = true;
        0.0
    };
    Ok(PrfReport { precision, recall, f1, tp, fp, tn, fn_, zero_division })
}

/// Whole-dataset evaluation record emitted by the `evaluate` pipeline.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub auc_roc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub zero_division: bool,
}
