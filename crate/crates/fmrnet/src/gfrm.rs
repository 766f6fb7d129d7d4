//! Global feature rearrangement on the skip pathways.
//!
//! A memory-generated feature map is decomposed into non-overlapping K x K x C
//! textons; each stride-K window of the skip feature map is matched against
//! all textons by softmax-normalized cosine similarity; the similarity maps
//! are spatially smoothed; and the textons are reused as stride-K
//! deconvolution filters to assemble the edited map. Every output block is a
//! convex combination of textons, so defective skip features are rewritten
//! in terms of normal-texture primitives.

use crate::tensor::{Scalar, Tape, TensorId};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GfrmError {
    #[error("feature map {h}x{w} not divisible by texton size {k}")]
    IndivisibleShape { h: usize, w: usize, k: usize },
    #[error("channel mismatch: skip map has {skip}, textons have {bank}")]
    ChannelMismatch { skip: usize, bank: usize },
    #[error("similarity stack shape {got:?} inconsistent with bank of {n} textons")]
    ShapeInconsistent { got: Vec<usize>, n: usize },
}

/// Norm below which a window or texton is treated as zero (cosine 0).
pub const NORM_GUARD: f64 = 1e-8;

/// Textons cut from one memory-generated feature map, stored as rows of a
/// `[N, C*K*K]` matrix in row-major grid order.
#[derive(Debug, Clone)]
pub struct TextonBank<T: Scalar> {
    rows: Array2<T>,
    channels: usize,
    k: usize,
    source_shape: (usize, usize),
}

impl<T: Scalar> TextonBank<T> {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn source_shape(&self) -> (usize, usize) {
        self.source_shape
    }

    pub fn rows(&self) -> &Array2<T> {
        &self.rows
    }

    /// The `i`th texton as a `[C, K, K]` block.
    pub fn texton(&self, i: usize) -> Array3<T> {
        let k = self.k;
        let row = self.rows.row(i);
        Array3::from_shape_fn((self.channels, k, k), |(c, ki, kj)| row[(c * k + ki) * k + kj])
    }

    /// Writes the textons back in grid order, reproducing the source map.
    pub fn reassemble(&self) -> Array3<T> {
        let (h, w) = self.source_shape;
        let k = self.k;
        let gw = w / k;
        let mut out = Array3::<T>::zeros((self.channels, h, w));
        for (i, row) in self.rows.rows().into_iter().enumerate() {
            let (gi, gj) = (i / gw, i % gw);
            for c in 0..self.channels {
                for ki in 0..k {
                    for kj in 0..k {
                        out[[c, gi * k + ki, gj * k + kj]] = row[(c * k + ki) * k + kj];
                    }
                }
            }
        }
        out
    }
}

/// Per-texton similarity maps over the stride-K window grid; each grid
/// location holds a probability vector across textons.
#[derive(Debug, Clone)]
pub struct SimilarityStack<T: Scalar> {
    /// `[L, N]`: row per grid location, column per texton.
    pub s: Array2<T>,
    pub grid: (usize, usize),
}

impl<T: Scalar> SimilarityStack<T> {
    /// The similarity map of texton `i`, shaped over the window grid.
    pub fn map(&self, i: usize) -> Array2<T> {
        let (gh, gw) = self.grid;
        Array2::from_shape_fn((gh, gw), |(p, q)| self.s[[p * gw + q, i]])
    }
}

/// Splits `[C, H, W]` into non-overlapping `K x K x C` textons in row-major
/// grid order.
pub fn decompose_textons<T: Scalar>(f: &Array3<T>, k: usize) -> Result<TextonBank<T>, GfrmError> {
    let (c, h, w) = f.dim();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(GfrmError::IndivisibleShape { h, w, k });
    }
    let mut tape = Tape::new(false);
    let id = tape.leaf(f.clone().into_dyn(), false);
    let rows = tape.patches_matrix(id, k, k);
    let rows = crate::tensor::to2(tape.value(rows)).to_owned();
    Ok(TextonBank { rows, channels: c, k, source_shape: (h, w) })
}

/// Shared graph implementation: decompose -> cosine similarity -> softmax ->
/// smoothing -> texton reassembly. `smooth_kernel` is a `[3,3]` node;
/// `renorm` divides by the in-bounds kernel mass (fixed-kernel mode).
#[allow(clippy::too_many_arguments)]
pub fn gfrm_graph<T: Scalar>(
    tape: &mut Tape<T>,
    f_skip: TensorId,
    f_mem: TensorId,
    k: usize,
    smooth_kernel: TensorId,
    renorm: bool,
) -> TensorId {
    let shape = tape.shape(f_skip).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    debug_assert_eq!(tape.shape(f_mem), &[c, h, w], "gfrm: map shape mismatch");
    let (gh, gw) = (h / k, w / k);
    let guard = T::from_f64(NORM_GUARD);
    let textons = tape.patches_matrix(f_mem, k, k); // [N, C*k*k]
    let windows = tape.patches_matrix(f_skip, k, k); // [L, C*k*k]
    let tn = tape.row_normalize(textons, guard);
    let wn = tape.row_normalize(windows, guard);
    let tnt = tape.transpose2(tn);
    let d = tape.matmul(wn, tnt); // cosine similarities [L, N]
    let s = tape.softmax_rows(d);
    let s_star = tape.conv3x3_cols(s, smooth_kernel, gh, gw, renorm);
    let blocks = tape.matmul(s_star, textons); // [L, C*k*k]
    tape.assemble_blocks(blocks, c, h, w, k)
}

fn uniform_kernel<T: Scalar>() -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(&[3, 3]), T::from_f64(1.0 / 9.0))
}

/// Softmax-normalized cosine similarity of every stride-K window of `f_skip`
/// against the bank's textons.
pub fn similarity<T: Scalar>(
    f_skip: &Array3<T>,
    bank: &TextonBank<T>,
) -> Result<SimilarityStack<T>, GfrmError> {
    let (c, h, w) = f_skip.dim();
    if c != bank.channels {
        return Err(GfrmError::ChannelMismatch { skip: c, bank: bank.channels });
    }
    let k = bank.k;
    if h % k != 0 || w % k != 0 {
        return Err(GfrmError::IndivisibleShape { h, w, k });
    }
    let guard = T::from_f64(NORM_GUARD);
    let mut tape = Tape::new(false);
    let windows = tape.leaf(f_skip.clone().into_dyn(), false);
    let windows = tape.patches_matrix(windows, k, k);
    let wn = tape.row_normalize(windows, guard);
    let textons = tape.leaf(bank.rows.clone().into_dyn(), false);
    let tn = tape.row_normalize(textons, guard);
    let tnt = tape.transpose2(tn);
    let d = tape.matmul(wn, tnt);
    let s = tape.softmax_rows(d);
    Ok(SimilarityStack { s: crate::tensor::to2(tape.value(s)).to_owned(), grid: (h / k, w / k) })
}

/// Smooths each similarity map with the fixed normalized 3x3 kernel
/// (footprint-renormalized at borders, so constants pass through unchanged).
pub fn smooth_similarity<T: Scalar>(stack: &SimilarityStack<T>) -> SimilarityStack<T> {
    let mut tape = Tape::new(false);
    let s = tape.leaf(stack.s.clone().into_dyn(), false);
    let kern = tape.constant(uniform_kernel());
    let sm = tape.conv3x3_cols(s, kern, stack.grid.0, stack.grid.1, true);
    SimilarityStack { s: crate::tensor::to2(tape.value(sm)).to_owned(), grid: stack.grid }
}

/// Reassembles an edited map from smoothed similarities: stride-K
/// deconvolution of each map by its texton, summed.
pub fn rearrange<T: Scalar>(
    stack: &SimilarityStack<T>,
    bank: &TextonBank<T>,
) -> Result<Array3<T>, GfrmError> {
    if stack.s.ncols() != bank.len() {
        return Err(GfrmError::ShapeInconsistent { got: stack.s.shape().to_vec(), n: bank.len() });
    }
    let (h, w) = (stack.grid.0 * bank.k, stack.grid.1 * bank.k);
    let mut tape = Tape::new(false);
    let s = tape.leaf(stack.s.clone().into_dyn(), false);
    let t = tape.leaf(bank.rows.clone().into_dyn(), false);
    let blocks = tape.matmul(s, t);
    let g = tape.assemble_blocks(blocks, bank.channels, h, w, bank.k);
    let v = tape.value(g);
    Ok(Array3::from_shape_fn((bank.channels, h, w), |(c, i, j)| v[[c, i, j]]))
}

/// Whole module on plain arrays: decompose `f_mem`, match `f_skip`, smooth,
/// reassemble.
pub fn gfrm_forward<T: Scalar>(
    f_skip: &Array3<T>,
    f_mem: &Array3<T>,
    k: usize,
) -> Result<Array3<T>, GfrmError> {
    let (c, h, w) = f_skip.dim();
    let (cm, hm, wm) = f_mem.dim();
    if c != cm {
        return Err(GfrmError::ChannelMismatch { skip: c, bank: cm });
    }
    if h != hm || w != wm || k == 0 || h % k != 0 || w % k != 0 {
        return Err(GfrmError::IndivisibleShape { h, w, k });
    }
    let mut tape = Tape::new(false);
    let fs = tape.leaf(f_skip.clone().into_dyn(), false);
    let fm = tape.leaf(f_mem.clone().into_dyn(), false);
    let kern = tape.constant(uniform_kernel());
    let g = gfrm_graph(&mut tape, fs, fm, k, kern, true);
    let v = tape.value(g);
    Ok(Array3::from_shape_fn((c, h, w), |(ci, i, j)| v[[ci, i, j]]))
}
