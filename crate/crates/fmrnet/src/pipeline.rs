//! End-to-end orchestration: pixel-level inference, early-exit patch-level
//! inference, and edge/cloud split execution over a bit-exact feature
//! interchange format.
//!
//! The split boundary sits after the encoder: the edge head slices the
//! image, encodes every patch and computes patch anomaly scores; the cloud
//! tail substitutes latents through the memory, decodes with rearranged
//! skips and produces the multimodal maps. Monolithic pixel inference runs
//! the exact same two stages in-process, so split and monolithic results
//! are bit-identical once the interchange round-trips.

use crate::cmfm;
use crate::config::ExitMode;
use crate::imaging::{self, Image, PatchGrid};
use crate::inspection::{self, AnomalyMapSet, InspectionConfig};
use crate::networks::{addressing, decode, encode, ForwardCtx, NetworkError, RunMode};
use crate::tensor::Tape;
use crate::training::Model;
use ndarray::{Array2, Array3, Array4, ArrayD};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("model has no memory bank; a phase-2 checkpoint is required")]
    MissingBank,
    #[error("exit policy in threshold mode requires a calibrated threshold")]
    UncalibratedThreshold,
    #[error("interchange decode: {0}")]
    InterchangeFormat(String),
    #[error("interchange version {0} unsupported (expected {1})")]
    InterchangeVersion(u16, u16),
    #[error("encoder fingerprint mismatch: interchange {interchange:#x} vs model {model:#x}")]
    FingerprintMismatch { interchange: u64, model: u64 },
    #[error(transparent)]
    Imaging(#[from] imaging::ImagingError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Inspect(#[from] inspection::InspectError),
    #[error(transparent)]
    Cmfm(#[from] crate::cmfm::CmfmError),
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct StageTimings {
    pub slice_ms: f64,
    pub encode_ms: f64,
    pub score_ms: f64,
    pub decode_ms: f64,
    pub maps_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceLevel {
    Patch,
    Pixel,
}

/// Exactly one payload per level.
#[allow(clippy::large_enum_variant)]
pub enum InferencePayload {
    Patch { scores: Vec<f32>, coords: Vec<(usize, usize)> },
    Pixel { maps: AnomalyMapSet, reconstruction: Array3<f32> },
}

pub struct InferenceResult {
    pub payload: InferencePayload,
    pub timings: StageTimings,
}

impl InferenceResult {
    pub fn level(&self) -> InferenceLevel {
        match self.payload {
            InferencePayload::Patch { .. } => InferenceLevel::Patch,
            InferencePayload::Pixel { .. } => InferenceLevel::Pixel,
        }
    }
}

/// Everything the edge head produces: inputs, latents, retained skip maps,
/// patch scores and grid metadata.
pub struct EdgeArtifacts {
    pub patches: Array4<f32>,
    pub latents: Array2<f32>,
    /// `(level, [N, C, H, W])` for each rearrangement level.
    pub skips: Vec<(usize, ArrayD<f32>)>,
    pub scores: Vec<f32>,
    pub coords: Vec<(usize, usize)>,
    pub source_shape: (usize, usize),
    pub channels: usize,
    pub patch: usize,
    pub stride: usize,
    pub encoder_fingerprint: u64,
}

fn grid_to_batch(grid: &PatchGrid) -> Array4<f32> {
    let n = grid.patches.len();
    let (c, p) = (grid.channels, grid.patch);
    let mut batch = Array4::<f32>::zeros((n, c, p, p));
    for (i, patch) in grid.patches.iter().enumerate() {
        for k in 0..c {
            for r in 0..p {
                for cc in 0..p {
                    batch[[i, k, r, cc]] = patch[[r, cc, k]];
                }
            }
        }
    }
    batch
}

/// Edge head: slice, encode (eval mode), score each patch against the bank.
pub fn encode_stage(
    model: &Model,
    image: &Image,
    patch: usize,
    stride: usize,
) -> Result<(EdgeArtifacts, StageTimings), PipelineError> {
    let bank = model.bank.as_ref().ok_or(PipelineError::MissingBank)?;
    let t0 = Instant::now();
    let grid = imaging::slice_patches(image, patch, stride)?;
    let batch = grid_to_batch(&grid);
    let slice_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t1 = Instant::now();
    let mut tape = Tape::new(false);
    let mut ctx = ForwardCtx::new(&model.store, &[], RunMode::Eval);
    let x = tape.leaf(batch.clone().into_dyn(), false);
    let enc = encode(&mut tape, &mut ctx, &model.cfg, x)?;
    let latents = crate::tensor::to2(tape.value(enc.latent)).to_owned();
    let mut skips = Vec::new();
    for &level in &model.cfg.gfrm_levels {
        skips.push((level, tape.value(enc.feats[level - 1]).clone()));
    }
    skips.sort_by_key(|(l, _)| *l);
    let encode_ms = t1.elapsed().as_secs_f64() * 1e3;

    let t2 = Instant::now();
    let scores: Vec<f32> = cmfm::patch_anomaly_scores(&latents, bank)?;
    let score_ms = t2.elapsed().as_secs_f64() * 1e3;

    let timings = StageTimings {
        slice_ms,
        encode_ms,
        score_ms,
        total_ms: t0.elapsed().as_secs_f64() * 1e3,
        ..Default::default()
    };
    Ok((
        EdgeArtifacts {
            patches: batch,
            latents,
            skips,
            scores,
            coords: grid.origin_coords.clone(),
            source_shape: grid.source_shape,
            channels: grid.channels,
            patch,
            stride,
            encoder_fingerprint: model.encoder_digest(),
        },
        timings,
    ))
}

/// Cloud tail: substitute latents through the memory, decode with
/// rearranged skips, compute per-patch modality maps, reassemble and fuse.
pub fn pixel_stage(
    model: &Model,
    art: &EdgeArtifacts,
    icfg: &InspectionConfig,
    mut timings: StageTimings,
) -> Result<InferenceResult, PipelineError> {
    let bank = model.bank.as_ref().ok_or(PipelineError::MissingBank)?;
    if bank.len() != model.cfg.memory_entries {
        return Err(PipelineError::Cmfm(crate::cmfm::CmfmError::LengthMismatch {
            bank: bank.len(),
            query: model.cfg.memory_entries,
        }));
    }
    let t0 = Instant::now();
    let mut tape = Tape::new(false);
    let mut ctx = ForwardCtx::new(&model.store, &[], RunMode::Eval);
    let z = tape.leaf(art.latents.clone().into_dyn(), false);
    let q = addressing(&mut tape, &mut ctx, &model.cfg, z);
    let m = tape.constant(bank.entries().clone().into_dyn());
    let zhat = cmfm::substitute_graph(&mut tape, q, m);
    let mut skips: Vec<Option<crate::tensor::TensorId>> = vec![None; model.cfg.blocks];
    for (level, map) in &art.skips {
        skips[level - 1] = Some(tape.leaf(map.clone(), false));
    }
    let dec = decode(&mut tape, &mut ctx, &model.cfg, zhat, &skips)?;
    let recon = crate::tensor::to4(tape.value(dec.recon)).to_owned();
    timings.decode_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t1 = Instant::now();
    let n = art.patches.dim().0;
    let p = art.patch;
    let chan_mean = |b: &Array4<f32>, i: usize| -> Array2<f32> {
        let c = b.dim().1;
        Array2::from_shape_fn((p, p), |(r, cc)| {
            (0..c).map(|k| b[[i, k, r, cc]]).sum::<f32>() / c as f32
        })
    };
    let mut m1 = Vec::with_capacity(n);
    let mut m2 = Vec::with_capacity(n);
    let mut m3 = Vec::with_capacity(n);
    let mut rec_patches = Vec::with_capacity(n);
    for i in 0..n {
        let gi = chan_mean(&art.patches, i);
        let gr = chan_mean(&recon, i);
        m1.push(inspection::anomaly_m1(&gi, &gr, icfg.c0)?);
        m2.push(inspection::anomaly_m2(&gi, &gr, icfg)?);
        m3.push(inspection::residual_map(&gi, &gr)?);
        let c = recon.dim().1;
        rec_patches.push(Array3::from_shape_fn((p, p, c), |(r, cc, k)| recon[[i, k, r, cc]]));
    }
    let grid = PatchGrid {
        patches: rec_patches.clone(),
        origin_coords: art.coords.clone(),
        source_shape: art.source_shape,
        channels: art.channels,
        patch: art.patch,
        stride: art.stride,
    };
    let a1 = imaging::reassemble(&grid, &m1)?;
    let a2 = imaging::reassemble(&grid, &m2)?;
    let a3 = imaging::reassemble(&grid, &m3)?;
    let maps = inspection::fuse(&a1, &a2, &a3, icfg)?;
    let reconstruction = imaging::reassemble_channels(&grid, &rec_patches)?;
    timings.maps_ms = t1.elapsed().as_secs_f64() * 1e3;
    timings.total_ms += timings.decode_ms + timings.maps_ms;

    Ok(InferenceResult {
        payload: InferencePayload::Pixel { maps, reconstruction },
        timings,
    })
}

/// Full pixel-level inference (monolithic: edge head + cloud tail in-process).
pub fn infer_pixel(
    model: &Model,
    image: &Image,
    patch: usize,
    stride: usize,
    icfg: &InspectionConfig,
) -> Result<InferenceResult, PipelineError> {
    let (art, timings) = encode_stage(model, image, patch, stride)?;
    pixel_stage(model, &art, icfg, timings)
}

/// Early-exit patch-level inference: encoder and memory distances only, no
/// decoding.
pub fn infer_patch_level(
    model: &Model,
    image: &Image,
    patch: usize,
    stride: usize,
) -> Result<InferenceResult, PipelineError> {
    let (art, timings) = encode_stage(model, image, patch, stride)?;
    Ok(InferenceResult {
        payload: InferencePayload::Patch { scores: art.scores, coords: art.coords },
        timings,
    })
}

/// Early-exit policy.
#[derive(Debug, Clone)]
pub struct ExitPolicy {
    pub mode: ExitMode,
    pub patch_score_threshold: Option<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitDecision {
    ExitEarly,
    Continue,
}

/// Threshold mode continues to pixel level iff any patch score exceeds the
/// calibrated threshold.
pub fn decide_exit(policy: &ExitPolicy, scores: &[f32]) -> Result<ExitDecision, PipelineError> {
    match policy.mode {
        ExitMode::AlwaysPatch => Ok(ExitDecision::ExitEarly),
        ExitMode::AlwaysPixel => Ok(ExitDecision::Continue),
        ExitMode::Threshold => {
            let thr = policy.patch_score_threshold.ok_or(PipelineError::UncalibratedThreshold)?;
            if scores.iter().any(|&s| s > thr) {
                Ok(ExitDecision::Continue)
            } else {
                Ok(ExitDecision::ExitEarly)
            }
        }
    }
}

/// Multilevel inference under an exit policy.
pub fn infer_auto(
    model: &Model,
    image: &Image,
    patch: usize,
    stride: usize,
    icfg: &InspectionConfig,
    policy: &ExitPolicy,
) -> Result<InferenceResult, PipelineError> {
    let (art, timings) = encode_stage(model, image, patch, stride)?;
    match decide_exit(policy, &art.scores)? {
        ExitDecision::ExitEarly => Ok(InferenceResult {
            payload: InferencePayload::Patch { scores: art.scores, coords: art.coords },
            timings,
        }),
        ExitDecision::Continue => pixel_stage(model, &art, icfg, timings),
    }
}

// ---- feature interchange format ---------------------------------------------

pub const INTERCHANGE_MAGIC: &[u8; 4] = b"FMRX";
pub const INTERCHANGE_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        put_u32(out, d as u32);
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the edge artifacts: header (magic, version, dtype, encoder
/// fingerprint, grid metadata, tensor count) followed by named row-major
/// little-endian f32 tensors.
pub fn serialize_interchange(art: &EdgeArtifacts) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(INTERCHANGE_MAGIC);
    out.extend_from_slice(&INTERCHANGE_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&art.encoder_fingerprint.to_le_bytes());
    put_u32(&mut out, art.source_shape.0 as u32);
    put_u32(&mut out, art.source_shape.1 as u32);
    put_u32(&mut out, art.channels as u32);
    put_u32(&mut out, art.patch as u32);
    put_u32(&mut out, art.stride as u32);
    let tensor_count = 4 + art.skips.len() as u32;
    put_u32(&mut out, tensor_count);

    let patches_std = art.patches.as_standard_layout();
    put_tensor(&mut out, "patches", art.patches.shape(), patches_std.as_slice().unwrap());
    let lat_std = art.latents.as_standard_layout();
    put_tensor(&mut out, "latents", art.latents.shape(), lat_std.as_slice().unwrap());
    for (level, map) in &art.skips {
        let std = map.as_standard_layout();
        put_tensor(&mut out, &format!("skip_l{level}"), map.shape(), std.as_slice().unwrap());
    }
    put_tensor(&mut out, "scores", &[art.scores.len()], &art.scores);
    let coords: Vec<f32> = art
        .coords
        .iter()
        .flat_map(|&(r, c)| [r as f32, c as f32])
        .collect();
    put_tensor(&mut out, "coords", &[art.coords.len(), 2], &coords);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        if self.pos + n > self.buf.len() {
            return Err(PipelineError::InterchangeFormat(format!(
                "truncated payload at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, PipelineError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, PipelineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PipelineError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, PipelineError> {
        Ok(self.take(1)?[0])
    }
}

/// Parses interchange bytes back into edge artifacts, rejecting corrupted
/// magic, unsupported versions and truncated payloads.
pub fn deserialize_interchange(bytes: &[u8]) -> Result<EdgeArtifacts, PipelineError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4)? != INTERCHANGE_MAGIC {
        return Err(PipelineError::InterchangeFormat("bad magic".into()));
    }
    let version = cur.u16()?;
    if version != INTERCHANGE_VERSION {
        return Err(PipelineError::InterchangeVersion(version, INTERCHANGE_VERSION));
    }
    let dtype = cur.u8()?;
    if dtype != DTYPE_F32 {
        return Err(PipelineError::InterchangeFormat(format!("unknown dtype code {dtype}")));
    }
    let fingerprint = cur.u64()?;
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let channels = cur.u32()? as usize;
    let patch = cur.u32()? as usize;
    let stride = cur.u32()? as usize;
    let count = cur.u32()? as usize;

    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| PipelineError::InterchangeFormat("non-utf8 tensor name".into()))?;
        let ndim = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, data));
    }
    if cur.pos != bytes.len() {
        return Err(PipelineError::InterchangeFormat("trailing bytes".into()));
    }

    let find = |name: &str| -> Result<(Vec<usize>, Vec<f32>), PipelineError> {
        tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.clone(), d.clone()))
            .ok_or_else(|| PipelineError::InterchangeFormat(format!("missing tensor {name}")))
    };
    let (pshape, pdata) = find("patches")?;
    if pshape.len() != 4 {
        return Err(PipelineError::InterchangeFormat("patches must be 4-d".into()));
    }
    let patches = Array4::from_shape_vec((pshape[0], pshape[1], pshape[2], pshape[3]), pdata)
        .map_err(|e| PipelineError::InterchangeFormat(e.to_string()))?;
    let (lshape, ldata) = find("latents")?;
    let latents = Array2::from_shape_vec((lshape[0], lshape[1]), ldata)
        .map_err(|e| PipelineError::InterchangeFormat(e.to_string()))?;
    let (sshape, sdata) = find("scores")?;
    if sshape.len() != 1 {
        return Err(PipelineError::InterchangeFormat("scores must be 1-d".into()));
    }
    let (cshape, cdata) = find("coords")?;
    if cshape.len() != 2 || cshape[1] != 2 {
        return Err(PipelineError::InterchangeFormat("coords must be [N,2]".into()));
    }
    let coords: Vec<(usize, usize)> = cdata
        .chunks_exact(2)
        .map(|p| (p[0] as usize, p[1] as usize))
        .collect();
    let mut skips = Vec::new();
    for (name, shape, data) in &tensors {
        if let Some(level) = name.strip_prefix("skip_l").and_then(|s| s.parse::<usize>().ok()) {
            let arr = ArrayD::from_shape_vec(ndarray::IxDyn(shape), data.clone())
                .map_err(|e| PipelineError::InterchangeFormat(e.to_string()))?;
            skips.push((level, arr));
        }
    }
    skips.sort_by_key(|(l, _)| *l);

    Ok(EdgeArtifacts {
        patches,
        latents,
        skips,
        scores: sdata,
        coords,
        source_shape: (h, w),
        channels,
        patch,
        stride,
        encoder_fingerprint: fingerprint,
    })
}

/// Runs the edge head and serializes everything the cloud tail needs.
pub fn split_export(
    model: &Model,
    image: &Image,
    patch: usize,
    stride: usize,
) -> Result<Vec<u8>, PipelineError> {
    let (art, _) = encode_stage(model, image, patch, stride)?;
    Ok(serialize_interchange(&art))
}

/// Resumes pixel-level inference from interchange bytes, refusing stale
/// encoder fingerprints.
pub fn split_resume(
    model: &Model,
    bytes: &[u8],
    icfg: &InspectionConfig,
) -> Result<InferenceResult, PipelineError> {
    let art = deserialize_interchange(bytes)?;
    let model_fp = model.encoder_digest();
    if art.encoder_fingerprint != model_fp {
        return Err(PipelineError::FingerprintMismatch {
            interchange: art.encoder_fingerprint,
            model: model_fp,
        });
    }
    pixel_stage(model, &art, icfg, StageTimings::default())
}

/// Per-image record produced by dataset evaluation.
#[derive(Debug, serde::Serialize)]
pub struct ImageEval {
    pub path: String,
    pub label: imaging::Label,
    pub has_mask: bool,
    pub max_fused: f32,
    pub prf: Option<inspection::PrfReport>,
    pub timings: StageTimings,
}

/// Dataset-level evaluation: pooled pixel AUC over masked test images plus
/// k-sigma precision/recall/F1 (micro-averaged over pixels).
pub fn evaluate(
    model: &Model,
    index: &imaging::DatasetIndex,
    patch: usize,
    stride: usize,
    icfg: &InspectionConfig,
    noise: Option<(f32, u64)>,
) -> Result<(inspection::EvalReport, Vec<ImageEval>), PipelineError> {
    let mut scores: Vec<f64> = Vec::new();
    let mut labels: Vec<bool> = Vec::new();
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    let mut per_image = Vec::new();
    for entry in &index.test {
        let mut img =
            imaging::load_image(&entry.image_path, index.working_size, index.colorspace)?;
        if let Some((p, seed)) = noise {
            if p > 0.0 {
                img = imaging::inject_speckle(&img, p, seed)?;
            }
        }
        let result = infer_pixel(model, &img, patch, stride, icfg)?;
        let InferencePayload::Pixel { maps, .. } = &result.payload else { unreachable!() };
        let truth: Option<Array2<bool>> = match (&entry.mask_path, entry.label) {
            (Some(mask), _) => Some(imaging::load_mask(mask, index.working_size)?),
            (None, imaging::Label::Good) => Some(Array2::from_elem(maps.fused.dim(), false)),
            (None, imaging::Label::Defective) => None, // mask-absent: skip pixel metrics
        };
        let mut prf_report = None;
        if let Some(truth) = &truth {
            for (s, t) in maps.fused.iter().zip(truth.iter()) {
                scores.push(*s as f64);
                labels.push(*t);
            }
            let mask = inspection::binarize_ksigma(&maps.fused, icfg.k_sigma);
            let r = inspection::prf(&mask, truth)?;
            tp += r.tp;
            fp += r.fp;
            tn += r.tn;
            fn_ += r.fn_;
            prf_report = Some(r);
        }
        per_image.push(ImageEval {
            path: entry.image_path.display().to_string(),
            label: entry.label,
            has_mask: truth.is_some(),
            max_fused: maps.fused.iter().cloned().fold(f32::NEG_INFINITY, f32::max),
            prf: prf_report,
            timings: result.timings,
        });
    }
    let auc = inspection::auc_roc(&scores, &labels);
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
    Ok((
        inspection::EvalReport {
            auc_roc: auc,
            precision,
            recall,
            f1,
            threshold: icfg.k_sigma,
            tp,
            fp,
            tn,
            fn_,
            zero_division,
        },
        per_image,
    ))
}

/// Writes an anomaly map as a 16-bit PNG (values clamped to `[0, 1]`).
pub fn save_map_png16(map: &Array2<f32>, path: &std::path::Path) -> Result<(), PipelineError> {
    let (h, w) = map.dim();
    let mut buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let v = map[[y as usize, x as usize]].clamp(0.0, 1.0);
        *px = image::Luma([(v * 65535.0).round() as u16]);
    }
    buf.save(path)
        .map_err(|e| PipelineError::InterchangeFormat(format!("png save: {e}")))?;
    Ok(())
}

/// Writes a binary mask as an 8-bit PNG.
pub fn save_mask_png(mask: &Array2<bool>, path: &std::path::Path) -> Result<(), PipelineError> {
    let (h, w) = mask.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        *px = image::Luma([if mask[[y as usize, x as usize]] { 255u8 } else { 0 }]);
    }
    buf.save(path)
        .map_err(|e| PipelineError::InterchangeFormat(format!("png save: {e}")))?;
    Ok(())
}

/// Writes an image (grayscale or RGB, `[H, W, C]` in `[0,1]`) as 8-bit PNG.
pub fn save_image_png(img: &Array3<f32>, path: &std::path::Path) -> Result<(), PipelineError> {
    let (h, w, c) = img.dim();
    let to8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let res = if c == 1 {
        let mut buf = image::GrayImage::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            *px = image::Luma([to8(img[[y as usize, x as usize, 0]])]);
        }
        buf.save(path)
    } else {
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            let (yy, xx) = (y as usize, x as usize);
            *px = image::Rgb([to8(img[[yy, xx, 0]]), to8(img[[yy, xx, 1]]), to8(img[[yy, xx, 2]])]);
        }
        buf.save(path)
    };
    res.map_err(|e| PipelineError::InterchangeFormat(format!("png save: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmfm::MemoryBank;
    use crate::imaging::Colorspace;
    use crate::networks::ArchConfig;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn test_model(seed: u64) -> Model {
        let cfg = ArchConfig::desk();
        let mut model = Model::init(cfg, seed).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xabc);
        let entries = Array2::from_shape_fn((model.cfg.memory_entries, model.cfg.latent_dim()), |_| {
            rng.random_range(-0.5f32..0.5)
        });
        model.bank = Some(MemoryBank::from_entries(entries, model.encoder_digest()));
        model.patch_threshold = Some(10.0);
        model
    }

    fn test_image(seed: u64) -> Image {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Image::new(
            ndarray::Array3::from_shape_fn((64, 64, 1), |_| rng.random_range(0.0f32..1.0)),
            Colorspace::Grayscale,
        )
        .unwrap()
    }

    #[test]
    fn pixel_inference_shapes_and_missing_bank() {
        let mut model = test_model(1);
        let img = test_image(2);
        let icfg = InspectionConfig::default();
        let res = infer_pixel(&model, &img, 32, 32, &icfg).unwrap();
        let InferencePayload::Pixel { maps, reconstruction } = &res.payload else {
            panic!("expected pixel payload")
        };
        assert_eq!(maps.fused.dim(), (64, 64));
        assert_eq!(reconstruction.dim(), (64, 64, 1));
        assert_eq!(res.level(), InferenceLevel::Pixel);

        model.bank = None;
        assert!(matches!(
            infer_pixel(&model, &img, 32, 32, &icfg),
            Err(PipelineError::MissingBank)
        ));
    }

    #[test]
    fn patch_level_skips_decoder_and_is_faster() {
        let model = test_model(3);
        let img = test_image(4);
        let icfg = InspectionConfig::default();
        let patch = infer_patch_level(&model, &img, 32, 32).unwrap();
        let InferencePayload::Patch { scores, coords } = &patch.payload else {
            panic!("expected patch payload")
        };
        assert_eq!(scores.len(), 4);
        assert_eq!(coords.len(), 4);
        assert_eq!(patch.timings.decode_ms, 0.0);
        let pixel = infer_pixel(&model, &img, 32, 32, &icfg).unwrap();
        assert!(patch.timings.total_ms < pixel.timings.total_ms);
    }

    #[test]
    fn interchange_roundtrip_is_bit_identical() {
        let model = test_model(5);
        let img = test_image(6);
        let bytes = split_export(&model, &img, 32, 32).unwrap();
        let art = deserialize_interchange(&bytes).unwrap();
        let bytes2 = serialize_interchange(&art);
        assert_eq!(bytes, bytes2);
        // Exported scores equal the patch-level inference scores.
        let patch = infer_patch_level(&model, &img, 32, 32).unwrap();
        let InferencePayload::Patch { scores, .. } = &patch.payload else { unreachable!() };
        assert_eq!(&art.scores, scores);
    }

    #[test]
    fn split_equals_monolithic() {
        let model = test_model(7);
        let icfg = InspectionConfig::default();
        for seed in 0..3 {
            let img = test_image(100 + seed);
            let mono = infer_pixel(&model, &img, 32, 32, &icfg).unwrap();
            let bytes = split_export(&model, &img, 32, 32).unwrap();
            let split = split_resume(&model, &bytes, &icfg).unwrap();
            let (InferencePayload::Pixel { maps: m1, .. }, InferencePayload::Pixel { maps: m2, .. }) =
                (&mono.payload, &split.payload)
            else {
                panic!("expected pixel payloads")
            };
            let max_diff = m1
                .fused
                .iter()
                .zip(m2.fused.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_diff <= 1e-6, "split diverged by {max_diff}");
        }
    }

    #[test]
    fn interchange_rejects_corruption() {
        let model = test_model(8);
        let img = test_image(9);
        let bytes = split_export(&model, &img, 32, 32).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'Z';
        assert!(matches!(
            deserialize_interchange(&bad_magic),
            Err(PipelineError::InterchangeFormat(_))
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 99;
        assert!(matches!(
            deserialize_interchange(&bad_version),
            Err(PipelineError::InterchangeVersion(99, _))
        ));

        let truncated = &bytes[..bytes.len() - 7];
        assert!(matches!(
            deserialize_interchange(truncated),
            Err(PipelineError::InterchangeFormat(_))
        ));
    }

    #[test]
    fn stale_fingerprint_is_refused() {
        let model = test_model(10);
        let img = test_image(11);
        let bytes = split_export(&model, &img, 32, 32).unwrap();
        let other = test_model(999); // different encoder parameters
        assert!(matches!(
            split_resume(&other, &bytes, &InspectionConfig::default()),
            Err(PipelineError::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn patch_level_never_touches_decoder_parameters() {
        // Strip everything but the encoder from the store: the early-exit
        // path must still run, proving it reads no decoder/GFRM/classifier
        // parameters (any access would abort on the missing name).
        let model = test_model(20);
        let mut pruned = crate::tensor::optim::ParamStore::new();
        for (name, p) in model.store.iter() {
            if name.starts_with("enc.") {
                pruned.insert(name.clone(), p.kind, (*p.value).clone());
            }
        }
        let stripped = Model {
            cfg: model.cfg.clone(),
            store: pruned,
            bank: model.bank.clone(),
            phase: model.phase,
            iteration: 0,
            patch_threshold: model.patch_threshold,
        };
        let img = test_image(21);
        let res = infer_patch_level(&stripped, &img, 32, 32).unwrap();
        assert_eq!(res.level(), InferenceLevel::Patch);
    }

    #[test]
    fn inference_is_reproducible() {
        let model = test_model(22);
        let img = test_image(23);
        let icfg = InspectionConfig::default();
        let a = infer_pixel(&model, &img, 32, 32, &icfg).unwrap();
        let b = infer_pixel(&model, &img, 32, 32, &icfg).unwrap();
        let (InferencePayload::Pixel { maps: ma, .. }, InferencePayload::Pixel { maps: mb, .. }) =
            (&a.payload, &b.payload)
        else {
            panic!("expected pixel payloads")
        };
        assert_eq!(ma.fused, mb.fused);
    }

    #[test]
    fn exit_policy_decisions() {
        let thresh = ExitPolicy { mode: ExitMode::Threshold, patch_score_threshold: Some(1.0) };
        assert_eq!(decide_exit(&thresh, &[0.0, 0.0]).unwrap(), ExitDecision::ExitEarly);
        assert_eq!(decide_exit(&thresh, &[0.2, 1.5]).unwrap(), ExitDecision::Continue);
        let pixel = ExitPolicy { mode: ExitMode::AlwaysPixel, patch_score_threshold: None };
        assert_eq!(decide_exit(&pixel, &[0.0]).unwrap(), ExitDecision::Continue);
        let patch = ExitPolicy { mode: ExitMode::AlwaysPatch, patch_score_threshold: None };
        assert_eq!(decide_exit(&patch, &[9.9]).unwrap(), ExitDecision::ExitEarly);
        let uncal = ExitPolicy { mode: ExitMode::Threshold, patch_score_threshold: None };
        assert!(matches!(decide_exit(&uncal, &[0.0]), Err(PipelineError::UncalibratedThreshold)));
    }
}
