//! Convolution, batch normalization and block/texton ops for the tape.

use super::{Scalar, Tape, TensorId};
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, ArrayView4, Axis, Ix1, Ix2, Ix4};
use std::sync::Arc;

/// Unfolds `[N, C, H, W]` into `[N*oh*ow, C*k*k]` rows (zero padding `p`,
/// stride `s`). Returns the output grid `(oh, ow)` alongside.
pub fn im2col<T: Scalar>(x: &ArrayView4<T>, k: usize, s: usize, p: usize) -> (Array2<T>, usize, usize) {
    let (n, c, h, w) = x.dim();
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let mut rows = Array2::<T>::zeros((n * oh * ow, c * k * k));
    for ni in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let r = (ni * oh + oi) * ow + oj;
                let mut row = rows.row_mut(r);
                for ci in 0..c {
                    for ki in 0..k {
                        let ii = (oi * s + ki) as isize - p as isize;
                        if ii < 0 || ii as usize >= h {
                            continue;
                        }
                        for kj in 0..k {
                            let jj = (oj * s + kj) as isize - p as isize;
                            if jj < 0 || jj as usize >= w {
                                continue;
                            }
                            row[(ci * k + ki) * k + kj] = x[[ni, ci, ii as usize, jj as usize]];
                        }
                    }
                }
            }
        }
    }
    (rows, oh, ow)
}

/// Adjoint of [`im2col`]: scatter-adds `[N*gh*gw, C*k*k]` rows into an
/// `[N, C, H, W]` tensor over the window grid `(gh, gw)`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    rows: &ArrayView2<T>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    gh: usize,
    gw: usize,
) -> Array4<T> {
    let mut x = Array4::<T>::zeros((n, c, h, w));
    for ni in 0..n {
        for oi in 0..gh {
            for oj in 0..gw {
                let r = (ni * gh + oi) * gw + oj;
                let row = rows.row(r);
                for ci in 0..c {
                    for ki in 0..k {
                        let ii = (oi * s + ki) as isize - p as isize;
                        if ii < 0 || ii as usize >= h {
                            continue;
                        }
                        for kj in 0..k {
                            let jj = (oj * s + kj) as isize - p as isize;
                            if jj < 0 || jj as usize >= w {
                                continue;
                            }
                            x[[ni, ci, ii as usize, jj as usize]] += row[(ci * k + ki) * k + kj];
                        }
                    }
                }
            }
        }
    }
    x
}

fn rows_to_nchw<T: Scalar>(rows: &ArrayView2<T>, n: usize, c: usize, h: usize, w: usize) -> Array4<T> {
    Array4::from_shape_fn((n, c, h, w), |(ni, ci, i, j)| rows[[(ni * h + i) * w + j, ci]])
}

fn nchw_to_rows<T: Scalar>(x: &ArrayView4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    Array2::from_shape_fn((n * h * w, c), |(r, ci)| {
        let j = r % w;
        let i = (r / w) % h;
        let ni = r / (h * w);
        x[[ni, ci, i, j]]
    })
}

impl<T: Scalar> Tape<T> {
    /// 2-D convolution of `[N, C, H, W]` with weights `[OC, C, k, k]` and a
    /// per-channel bias `[OC]`.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize) -> TensorId {
        let vx = self.arc(x);
        let vw = self.arc(w);
        let vb = self.arc(b);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("conv2d input 4d");
        let (n, c, h, win) = x4.dim();
        let wd = vw.view().into_dimensionality::<Ix4>().expect("conv2d weight 4d");
        let (oc, wc, k, k2) = wd.dim();
        assert_eq!(wc, c, "conv2d: channel mismatch");
        assert_eq!(k, k2, "conv2d: non-square kernel");
        let (rows, oh, ow) = im2col(&x4, k, stride, pad);
        let wmat = wd
            .to_owned()
            .into_shape_with_order((oc, c * k * k))
            .expect("conv2d weight reshape");
        let out_rows = rows.dot(&wmat.t()); // [n*oh*ow, oc]
        let mut y = rows_to_nchw(&out_rows.view(), n, oc, oh, ow);
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("conv2d bias 1d");
        for ci in 0..oc {
            let mut lane = y.index_axis_mut(Axis(1), ci);
            lane += b1[ci];
        }
        let rows = Arc::new(rows);
        self.record(&[x, w, b], y.into_dyn(), move |g, sink| {
            let g4 = g.view().into_dimensionality::<Ix4>().expect("conv2d grad 4d");
            let g_rows = Array2::from_shape_fn((n * oh * ow, oc), |(r, ci)| {
                let j = r % ow;
                let i = (r / ow) % oh;
                let ni = r / (oh * ow);
                g4[[ni, ci, i, j]]
            });
            let dw = g_rows
                .t()
                .dot(&*rows)
                .into_shape_with_order((oc, c, k, k))
                .expect("conv2d dw reshape");
            let dcols = g_rows.dot(&wmat);
            let dx = col2im(&dcols.view(), n, c, h, win, k, stride, pad, oh, ow);
            let db: Array1<T> =
                Array1::from_iter((0..oc).map(|ci| g4.index_axis(Axis(1), ci).sum()));
            sink(x, dx.into_dyn());
            sink(w, dw.into_dyn());
            sink(b, db.into_dyn());
        })
    }

    /// Transposed 2-D convolution of `[N, IC, H, W]` with weights
    /// `[IC, OC, k, k]` and bias `[OC]`. Output spatial size is
    /// `(H-1)*stride - 2*pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let vx = self.arc(x);
        let vw = self.arc(w);
        let vb = self.arc(b);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("convT input 4d");
        let (n, ic, h, win) = x4.dim();
        let wd = vw.view().into_dimensionality::<Ix4>().expect("convT weight 4d");
        let (wic, oc, k, k2) = wd.dim();
        assert_eq!(wic, ic, "convT: channel mismatch");
        assert_eq!(k, k2, "convT: non-square kernel");
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (win - 1) * stride + k - 2 * pad;
        let x_rows = Arc::new(nchw_to_rows(&x4)); // [n*h*w, ic]
        let wmat = wd
            .to_owned()
            .into_shape_with_order((ic, oc * k * k))
            .expect("convT weight reshape");
        let cols = x_rows.dot(&wmat); // [n*h*w, oc*k*k]
        let mut y = col2im(&cols.view(), n, oc, oh, ow, k, stride, pad, h, win);
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("convT bias 1d");
        for ci in 0..oc {
            let mut lane = y.index_axis_mut(Axis(1), ci);
            lane += b1[ci];
        }
        self.record(&[x, w, b], y.into_dyn(), move |g, sink| {
            let g4 = g.view().into_dimensionality::<Ix4>().expect("convT grad 4d");
            let (g_cols, gh, gw) = im2col(&g4, k, stride, pad);
            debug_assert_eq!((gh, gw), (h, win));
            let dx_rows = g_cols.dot(&wmat.t()); // [n*h*w, ic]
            let dx = rows_to_nchw(&dx_rows.view(), n, ic, h, win);
            let dw = x_rows
                .t()
                .dot(&g_cols)
                .into_shape_with_order((ic, oc, k, k))
                .expect("convT dw reshape");
            let db: Array1<T> =
                Array1::from_iter((0..oc).map(|ci| g4.index_axis(Axis(1), ci).sum()));
            sink(x, dx.into_dyn());
            sink(w, dw.into_dyn());
            sink(b, db.into_dyn());
        })
    }

    /// Batch normalization over `(N, H, W)` per channel, training mode:
    /// normalizes by batch statistics and returns them so the caller can
    /// update running buffers.
    pub fn batchnorm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: T,
    ) -> (TensorId, Array1<T>, Array1<T>) {
        let vx = self.arc(x);
        let vg = self.arc(gamma);
        let vb = self.arc(beta);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("bn input 4d");
        let (n, c, h, w) = x4.dim();
        let cnt = T::from_f64((n * h * w) as f64);
        let g1 = vg.view().into_dimensionality::<Ix1>().expect("bn gamma 1d");
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("bn beta 1d");
        let mut mean = Array1::<T>::zeros(c);
        let mut var = Array1::<T>::zeros(c);
        for ci in 0..c {
            let lane = x4.index_axis(Axis(1), ci);
            let m = lane.sum() / cnt;
            mean[ci] = m;
            var[ci] = lane.mapv(|v| (v - m) * (v - m)).sum() / cnt;
        }
        let invstd: Array1<T> =
            Array1::from_iter((0..c).map(|ci| T::one() / (var[ci] + eps).sqrt()));
        let mut xhat = x4.to_owned();
        for ci in 0..c {
            let m = mean[ci];
            let is = invstd[ci];
            xhat.index_axis_mut(Axis(1), ci).mapv_inplace(|v| (v - m) * is);
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let ga = g1[ci];
            let be = b1[ci];
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * ga + be);
        }
        let xhat = Arc::new(xhat);
        let id = self.record(&[x, gamma, beta], y.into_dyn(), {
            let invstd = invstd.clone();
            move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().expect("bn grad 4d");
                let g1v = vg.view().into_dimensionality::<Ix1>().expect("bn gamma 1d");
                let mut dgamma = Array1::<T>::zeros(c);
                let mut dbeta = Array1::<T>::zeros(c);
                let mut dx = Array4::<T>::zeros((n, c, h, w));
                for ci in 0..c {
                    let glane = g4.index_axis(Axis(1), ci);
                    let xh = xhat.index_axis(Axis(1), ci);
                    let sum_g = glane.sum();
                    let sum_gx = (&glane * &xh).sum();
                    dbeta[ci] = sum_g;
                    dgamma[ci] = sum_gx;
                    let coef = g1v[ci] * invstd[ci];
                    let mg = sum_g / cnt;
                    let mgx = sum_gx / cnt;
                    let mut dl = dx.index_axis_mut(Axis(1), ci);
                    ndarray::Zip::from(&mut dl).and(&glane).and(&xh).for_each(|d, &gv, &xv| {
                        *d = coef * (gv - mg - xv * mgx);
                    });
                }
                sink(x, dx.into_dyn());
                sink(gamma, dgamma.into_dyn());
                sink(beta, dbeta.into_dyn());
            }
        });
        (id, mean, var)
    }

    /// Per-channel affine map `y = a_c * x + b_c` with constant coefficients;
    /// evaluation-mode batch norm folds its frozen statistics into this.
    pub fn channel_affine(&mut self, x: TensorId, a: Array1<T>, b: Array1<T>) -> TensorId {
        let vx = self.arc(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("affine input 4d");
        let c = x4.dim().1;
        assert_eq!(a.len(), c, "channel_affine coefficient length");
        let mut y = x4.to_owned();
        for ci in 0..c {
            let av = a[ci];
            let bv = b[ci];
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * av + bv);
        }
        self.record(&[x], y.into_dyn(), move |g, sink| {
            let g4 = g.view().into_dimensionality::<Ix4>().expect("affine grad 4d");
            let mut dx = g4.to_owned();
            for ci in 0..c {
                let av = a[ci];
                dx.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * av);
            }
            sink(x, dx.into_dyn());
        })
    }

    /// Unfolds a single `[C, H, W]` map into full `k`-windows at the given
    /// stride, one row per grid location (row-major), `[L, C*k*k]`.
    pub fn patches_matrix(&mut self, x: TensorId, k: usize, stride: usize) -> TensorId {
        let vx = self.arc(x);
        let shape: Vec<usize> = vx.shape().to_vec();
        assert_eq!(shape.len(), 3, "patches_matrix expects [C, H, W]");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        assert!(k <= h && k <= w, "patches_matrix: window larger than map");
        let gh = (h - k) / stride + 1;
        let gw = (w - k) / stride + 1;
        let mut rows = Array2::<T>::zeros((gh * gw, c * k * k));
        for gi in 0..gh {
            for gj in 0..gw {
                let mut row = rows.row_mut(gi * gw + gj);
                for ci in 0..c {
                    for ki in 0..k {
                        for kj in 0..k {
                            row[(ci * k + ki) * k + kj] =
                                vx[[ci, gi * stride + ki, gj * stride + kj]];
                        }
                    }
                }
            }
        }
        self.record(&[x], rows.into_dyn(), move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("patches grad 2d");
            let mut dx = ArrayD::<T>::zeros(ndarray::IxDyn(&[c, h, w]));
            for gi in 0..gh {
                for gj in 0..gw {
                    let row = g2.row(gi * gw + gj);
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let idx = [ci, gi * stride + ki, gj * stride + kj];
                                dx[idx.as_slice()] =
                                    dx[idx.as_slice()] + row[(ci * k + ki) * k + kj];
                            }
                        }
                    }
                }
            }
            sink(x, dx);
        })
    }

    /// Inverse of [`Tape::patches_matrix`] for stride = k: writes `[L, C*k*k]`
    /// block rows back into a `[C, H, W]` map (non-overlapping tiling).
    pub fn assemble_blocks(&mut self, rows: TensorId, c: usize, h: usize, w: usize, k: usize) -> TensorId {
        let vr = self.arc(rows);
        let r2 = vr.view().into_dimensionality::<Ix2>().expect("assemble rows 2d");
        let (gh, gw) = (h / k, w / k);
        assert_eq!(r2.nrows(), gh * gw, "assemble_blocks: row count mismatch");
        assert_eq!(r2.ncols(), c * k * k, "assemble_blocks: row width mismatch");
        let mut y = ArrayD::<T>::zeros(ndarray::IxDyn(&[c, h, w]));
        for gi in 0..gh {
            for gj in 0..gw {
                let row = r2.row(gi * gw + gj);
                for ci in 0..c {
                    for ki in 0..k {
                        for kj in 0..k {
                            y[[ci, gi * k + ki, gj * k + kj]] = row[(ci * k + ki) * k + kj];
                        }
                    }
                }
            }
        }
        self.record(&[rows], y, move |g, sink| {
            let mut dr = Array2::<T>::zeros((gh * gw, c * k * k));
            for gi in 0..gh {
                for gj in 0..gw {
                    let mut row = dr.row_mut(gi * gw + gj);
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                row[(ci * k + ki) * k + kj] = g[[ci, gi * k + ki, gj * k + kj]];
                            }
                        }
                    }
                }
            }
            sink(rows, dr.into_dyn());
        })
    }

    /// 3x3 spatial convolution applied independently to each column of a
    /// `[L, M]` matrix whose rows enumerate a `gh x gw` grid row-major.
    ///
    /// `renorm` divides each output by the sum of in-bounds kernel taps so a
    /// normalized kernel leaves constant maps unchanged at borders; it is
    /// only supported for constant kernels.
    pub fn conv3x3_cols(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        gh: usize,
        gw: usize,
        renorm: bool,
    ) -> TensorId {
        let vx = self.arc(x);
        let vk = self.arc(kernel);
        assert!(
            !(renorm && self.needs_grad(kernel)),
            "conv3x3_cols: renorm only supported for constant kernels"
        );
        let x2 = vx.view().into_dimensionality::<Ix2>().expect("conv3x3 input 2d");
        let (l, m) = x2.dim();
        assert_eq!(l, gh * gw, "conv3x3_cols: grid size mismatch");
        let k2 = vk.view().into_dimensionality::<Ix2>().expect("conv3x3 kernel 2d");
        assert_eq!(k2.dim(), (3, 3), "conv3x3_cols: kernel must be 3x3");
        let norm = |i: usize, j: usize| -> T {
            if !renorm {
                return T::one();
            }
            let mut s = T::zero();
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let ii = i as i64 + di;
                    let jj = j as i64 + dj;
                    if ii >= 0 && jj >= 0 && (ii as usize) < gh && (jj as usize) < gw {
                        s += k2[[(di + 1) as usize, (dj + 1) as usize]];
                    }
                }
            }
            s
        };
        let mut y = Array2::<T>::zeros((l, m));
        for i in 0..gh {
            for j in 0..gw {
                let nrm = norm(i, j);
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let ii = i as i64 + di;
                        let jj = j as i64 + dj;
                        if ii < 0 || jj < 0 || ii as usize >= gh || jj as usize >= gw {
                            continue;
                        }
                        let kv = k2[[(di + 1) as usize, (dj + 1) as usize]] / nrm;
                        let src = x2.row(ii as usize * gw + jj as usize);
                        let mut dst = y.row_mut(i * gw + j);
                        for col in 0..m {
                            dst[col] += kv * src[col];
                        }
                    }
                }
            }
        }
        self.record(&[x, kernel], y.into_dyn(), move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("conv3x3 grad 2d");
            let k2 = vk.view().into_dimensionality::<Ix2>().expect("conv3x3 kernel 2d");
            let x2 = vx.view().into_dimensionality::<Ix2>().expect("conv3x3 input 2d");
            let norm = |i: usize, j: usize| -> T {
                if !renorm {
                    return T::one();
                }
                let mut s = T::zero();
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let ii = i as i64 + di;
                        let jj = j as i64 + dj;
                        if ii >= 0 && jj >= 0 && (ii as usize) < gh && (jj as usize) < gw {
                            s += k2[[(di + 1) as usize, (dj + 1) as usize]];
                        }
                    }
                }
                s
            };
            let mut dx = Array2::<T>::zeros((l, m));
            let mut dk = Array2::<T>::zeros((3, 3));
            for i in 0..gh {
                for j in 0..gw {
                    let nrm = norm(i, j);
                    let grow = g2.row(i * gw + j);
                    for di in -1i64..=1 {
                        for dj in -1i64..=1 {
                            let ii = i as i64 + di;
                            let jj = j as i64 + dj;
                            if ii < 0 || jj < 0 || ii as usize >= gh || jj as usize >= gw {
                                continue;
                            }
                            let tap = [(di + 1) as usize, (dj + 1) as usize];
                            let kv = k2[tap] / nrm;
                            let src = ii as usize * gw + jj as usize;
                            {
                                let mut drow = dx.row_mut(src);
                                for col in 0..m {
                                    drow[col] += kv * grow[col];
                                }
                            }
                            let xrow = x2.row(src);
                            let mut acc = T::zero();
                            for col in 0..m {
                                acc += grow[col] * xrow[col];
                            }
                            dk[tap] += acc / nrm;
                        }
                    }
                }
            }
            sink(x, dx.into_dyn());
            sink(kernel, dk.into_dyn());
        })
    }
}
