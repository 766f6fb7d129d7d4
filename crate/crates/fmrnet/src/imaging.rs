//! Image I/O, dataset ingestion, sliding-window patching and reassembly.
//!
//! Images are `[H, W, C]` arrays of `f32` intensities in `[0, 1]`; 8-bit
//! files are divided by 255 on load and optionally resized (bilinear) to a
//! configured working size.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("dataset root has no train/good directory: {0}")]
    MissingTrainGood(PathBuf),
    #[error("no training images under {0}")]
    NoTrainingImages(PathBuf),
    #[error("patch size {patch} exceeds image dimensions {h}x{w}")]
    PatchTooLarge { patch: usize, h: usize, w: usize },
    #[error("stride must be >= 1")]
    ZeroStride,
    #[error("expected {expected} per-patch maps, got {got}")]
    MapCountMismatch { expected: usize, got: usize },
    #[error("per-patch map shape {got:?} does not match patch size {patch}")]
    MapShapeMismatch { got: Vec<usize>, patch: usize },
    #[error("pixel intensities must lie in [0,1]")]
    IntensityOutOfRange,
    #[error("channel count {0} unsupported (expected 1 or 3)")]
    BadChannelCount(usize),
    #[error("probability must lie in [0,1], got {0}")]
    BadProbability(f32),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image decode error on {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colorspace {
    Grayscale,
    Rgb,
}

impl Colorspace {
    pub fn channels(self) -> usize {
        match self {
            Colorspace::Grayscale => 1,
            Colorspace::Rgb => 3,
        }
    }
}

/// Raster data normalized to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Image {
    pixels: Array3<f32>,
    colorspace: Colorspace,
}

impl Image {
    pub fn new(pixels: Array3<f32>, colorspace: Colorspace) -> Result<Self, ImagingError> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(ImagingError::PatchTooLarge { patch: 0, h, w });
        }
        if c != colorspace.channels() {
            return Err(ImagingError::BadChannelCount(c));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ImagingError::IntensityOutOfRange);
        }
        Ok(Image { pixels, colorspace })
    }

    /// Builds an image, clamping intensities into `[0, 1]`.
    pub fn from_clamped(mut pixels: Array3<f32>, colorspace: Colorspace) -> Self {
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Image::new(pixels, colorspace).expect("clamped pixels are in range")
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn colorspace(&self) -> Colorspace {
        self.colorspace
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.pixels.dim()
    }

    /// Channel-mean single-plane view of the image.
    pub fn to_gray(&self) -> Array2<f32> {
        let (h, w, c) = self.pixels.dim();
        Array2::from_shape_fn((h, w), |(i, j)| {
            (0..c).map(|k| self.pixels[[i, j, k]]).sum::<f32>() / c as f32
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Good,
    Defective,
}

#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub image_path: PathBuf,
    pub label: Label,
    pub mask_path: Option<PathBuf>,
    pub defect_type: Option<String>,
}

impl DatasetEntry {
    /// True for defective test entries with no paired ground-truth mask.
    pub fn mask_absent(&self) -> bool {
        self.label == Label::Defective && self.mask_path.is_none()
    }
}

/// Enumeration of an MVTec-style dataset tree with deterministic
/// (lexicographic) ordering and stem-paired ground-truth masks.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub train: Vec<DatasetEntry>,
    pub test: Vec<DatasetEntry>,
    /// Unreadable files skipped during indexing, with the failure text.
    pub skipped: Vec<(PathBuf, String)>,
    /// Working size (height, width) every image is resized to on load.
    pub working_size: Option<(usize, usize)>,
    pub colorspace: Colorspace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetLayout {
    MvtecLike,
}

const IMAGE_EXTS: [&str; 4] = ["png", "bmp", "jpg", "jpeg"];

fn list_images(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_file()
            && p.extension()
                .and_then(|e| e.to_str())
                .map(|e| IMAGE_EXTS.iter().any(|x| x.eq_ignore_ascii_case(e)))
                .unwrap_or(false)
        {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn list_subdirs(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn readable(path: &Path) -> Result<(), String> {
    image::ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .into_dimensions()
        .map_err(|e| e.to_string())
        .map(|_| ())
}

/// Indexes `<root>/train/good`, `<root>/test/<defect_type>` and
/// `<root>/ground_truth/<defect_type>/<stem>_mask.png`.
pub fn load_dataset(
    root: &Path,
    _layout: DatasetLayout,
    working_size: Option<(usize, usize)>,
    colorspace: Colorspace,
) -> Result<DatasetIndex, ImagingError> {
    let io_err = |path: &Path, source| ImagingError::Io { path: path.to_path_buf(), source };
    let train_good = root.join("train").join("good");
    if !train_good.is_dir() {
        return Err(ImagingError::MissingTrainGood(root.to_path_buf()));
    }
    let mut skipped = Vec::new();
    let mut train = Vec::new();
    for p in list_images(&train_good).map_err(|e| io_err(&train_good, e))? {
        match readable(&p) {
            Ok(()) => train.push(DatasetEntry {
                image_path: p,
                label: Label::Good,
                mask_path: None,
                defect_type: None,
            }),
            Err(msg) => {
                eprintln!("warning: skipping unreadable image {}: {msg}", p.display());
                skipped.push((p, msg));
            }
        }
    }
    if train.is_empty() {
        return Err(ImagingError::NoTrainingImages(root.to_path_buf()));
    }

    let mut test = Vec::new();
    let test_dir = root.join("test");
    for sub in list_subdirs(&test_dir).map_err(|e| io_err(&test_dir, e))? {
        let defect_type = sub.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
        let label = if defect_type == "good" { Label::Good } else { Label::Defective };
        for p in list_images(&sub).map_err(|e| io_err(&sub, e))? {
            if let Err(msg) = readable(&p) {
                eprintln!("warning: skipping unreadable image {}: {msg}", p.display());
                skipped.push((p, msg));
                continue;
            }
            let mask_path = if label == Label::Defective {
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
                let cand = root
                    .join("ground_truth")
                    .join(&defect_type)
                    .join(format!("{stem}_mask.png"));
                cand.is_file().then_some(cand)
            } else {
                None
            };
            test.push(DatasetEntry {
                image_path: p,
                label,
                mask_path,
                defect_type: Some(defect_type.clone()),
            });
        }
    }

    Ok(DatasetIndex { root: root.to_path_buf(), train, test, skipped, working_size, colorspace })
}

/// Loads and normalizes one image, resizing to the index working size.
pub fn load_image(
    path: &Path,
    working_size: Option<(usize, usize)>,
    colorspace: Colorspace,
) -> Result<Image, ImagingError> {
    let img = image::open(path)
        .map_err(|e| ImagingError::Decode { path: path.to_path_buf(), source: e })?;
    let img = match working_size {
        Some((h, w)) => image::imageops::resize(
            &img.to_rgb8(),
            w as u32,
            h as u32,
            image::imageops::FilterType::Triangle,
        ),
        None => img.to_rgb8(),
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = match colorspace {
        Colorspace::Rgb => Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
            img.get_pixel(j as u32, i as u32).0[c] as f32 / 255.0
        }),
        Colorspace::Grayscale => Array3::from_shape_fn((h, w, 1), |(i, j, _)| {
            let p = img.get_pixel(j as u32, i as u32).0;
            (p[0] as f32 + p[1] as f32 + p[2] as f32) / (3.0 * 255.0)
        }),
    };
    Image::new(pixels, colorspace)
}

/// Loads a binary ground-truth mask (nonzero = defective), nearest-neighbor
/// resized to the working size.
pub fn load_mask(
    path: &Path,
    working_size: Option<(usize, usize)>,
) -> Result<Array2<bool>, ImagingError> {
    let img = image::open(path)
        .map_err(|e| ImagingError::Decode { path: path.to_path_buf(), source: e })?;
    let gray = match working_size {
        Some((h, w)) => image::imageops::resize(
            &img.to_luma8(),
            w as u32,
            h as u32,
            image::imageops::FilterType::Nearest,
        ),
        None => img.to_luma8(),
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(i, j)| gray.get_pixel(j as u32, i as u32).0[0] != 0))
}

/// Sliding-window decomposition of an image with reassembly bookkeeping.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub patches: Vec<Array3<f32>>,
    pub origin_coords: Vec<(usize, usize)>,
    pub source_shape: (usize, usize),
    pub channels: usize,
    pub patch: usize,
    pub stride: usize,
}

/// Window start offsets along one axis: multiples of `stride`, with a final
/// window clamped flush to the border when the length is not covered.
pub fn window_offsets(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut offs = Vec::new();
    let last = len - patch;
    let mut o = 0;
    loop {
        offs.push(o.min(last));
        if o >= last {
            break;
        }
        o += stride;
    }
    offs.dedup();
    offs
}

/// Closed-form window count along one axis (for property checks).
pub fn window_count(len: usize, patch: usize, stride: usize) -> usize {
    let last = len - patch;
    last / stride + 1 + usize::from(!last.is_multiple_of(stride))
}

pub fn slice_patches(img: &Image, patch: usize, stride: usize) -> Result<PatchGrid, ImagingError> {
    let (h, w, c) = img.shape();
    if stride == 0 {
        return Err(ImagingError::ZeroStride);
    }
    if patch > h || patch > w || patch == 0 {
        return Err(ImagingError::PatchTooLarge { patch, h, w });
    }
    let rows = window_offsets(h, patch, stride);
    let cols = window_offsets(w, patch, stride);
    let mut patches = Vec::with_capacity(rows.len() * cols.len());
    let mut origin_coords = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &cc in &cols {
            patches.push(
                img.pixels()
                    .slice(ndarray::s![r..r + patch, cc..cc + patch, ..])
                    .to_owned(),
            );
            origin_coords.push((r, cc));
        }
    }
    Ok(PatchGrid { patches, origin_coords, source_shape: (h, w), channels: c, patch, stride })
}

/// Stitches one scalar map per patch back to source resolution, averaging
/// overlapping contributions by per-pixel coverage count.
pub fn reassemble(grid: &PatchGrid, per_patch_maps: &[Array2<f32>]) -> Result<Array2<f32>, ImagingError> {
    if per_patch_maps.len() != grid.origin_coords.len() {
        return Err(ImagingError::MapCountMismatch {
            expected: grid.origin_coords.len(),
            got: per_patch_maps.len(),
        });
    }
    let (h, w) = grid.source_shape;
    let p = grid.patch;
    let mut acc = Array2::<f32>::zeros((h, w));
    let mut cover = Array2::<f32>::zeros((h, w));
    for (map, &(r, c)) in per_patch_maps.iter().zip(&grid.origin_coords) {
        if map.dim() != (p, p) {
            return Err(ImagingError::MapShapeMismatch { got: map.shape().to_vec(), patch: p });
        }
        let mut acc_win = acc.slice_mut(ndarray::s![r..r + p, c..c + p]);
        acc_win += map;
        let mut cov_win = cover.slice_mut(ndarray::s![r..r + p, c..c + p]);
        cov_win += 1.0;
    }
    debug_assert!(cover.iter().all(|&v| v >= 1.0), "grid does not cover the image");
    Ok(acc / &cover)
}

/// Multichannel variant of [`reassemble`] for stitching reconstructed patches.
pub fn reassemble_channels(
    grid: &PatchGrid,
    per_patch: &[Array3<f32>],
) -> Result<Array3<f32>, ImagingError> {
    if per_patch.len() != grid.origin_coords.len() {
        return Err(ImagingError::MapCountMismatch {
            expected: grid.origin_coords.len(),
            got: per_patch.len(),
        });
    }
    let (h, w) = grid.source_shape;
    let p = grid.patch;
    let c = grid.channels;
    let mut acc = Array3::<f32>::zeros((h, w, c));
    let mut cover = Array3::<f32>::zeros((h, w, c));
    for (map, &(r, cc)) in per_patch.iter().zip(&grid.origin_coords) {
        if map.dim() != (p, p, c) {
            return Err(ImagingError::MapShapeMismatch { got: map.shape().to_vec(), patch: p });
        }
        let mut acc_win = acc.slice_mut(ndarray::s![r..r + p, cc..cc + p, ..]);
        acc_win += map;
        let mut cov_win = cover.slice_mut(ndarray::s![r..r + p, cc..cc + p, ..]);
        cov_win += 1.0;
    }
    Ok(acc / &cover)
}

/// Replaces each pixel independently with a `Uniform[0,1]` draw with
/// probability `p`. Bit-reproducible under a fixed seed.
pub fn inject_speckle(img: &Image, p: f32, seed: u64) -> Result<Image, ImagingError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(ImagingError::BadProbability(p));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (h, w, c) = img.shape();
    let mut out = img.pixels().clone();
    for i in 0..h {
        for j in 0..w {
            if rng.random::<f32>() < p {
                for k in 0..c {
                    out[[i, j, k]] = rng.random::<f32>();
                }
            }
        }
    }
    Image::new(out, img.colorspace())
}
