//! A small reverse-mode automatic differentiation engine over dynamically
//! shaped `ndarray` tensors.
//!
//! Every forward operation records a backward closure on a [`Tape`]; calling
//! [`Tape::backward`] on a scalar node propagates gradients to every leaf
//! created with `needs_grad = true`. The engine is generic over `f32`/`f64`:
//! the pipeline runs in `f32`, while gradient-verification tests instantiate
//! the exact same code at `f64` for central finite differences.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};
use std::fmt;
use std::sync::Arc;

mod nn;
pub mod optim;

pub use nn::{col2im, im2col};

/// Scalar element type the engine is generic over.
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TensorId(pub(crate) usize);

type BackFn<T> = Box<dyn Fn(&ArrayD<T>, &mut dyn FnMut(TensorId, ArrayD<T>))>;

struct Node<T: Scalar> {
    value: Arc<ArrayD<T>>,
    back: Option<BackFn<T>>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`]. Only leaves retain entries;
/// interior gradients are consumed during the reverse sweep.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: TensorId) -> Option<&ArrayD<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<ArrayD<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Records a computation graph for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new(grad_enabled: bool) -> Self {
        Tape { nodes: Vec::new(), grad_enabled }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf node. Gradients are retained for it when
    /// `needs_grad` is set and the tape records gradients at all.
    pub fn leaf(&mut self, value: ArrayD<T>, needs_grad: bool) -> TensorId {
        self.leaf_arc(Arc::new(value), needs_grad)
    }

    pub fn leaf_arc(&mut self, value: Arc<ArrayD<T>>, needs_grad: bool) -> TensorId {
        let needs = needs_grad && self.grad_enabled;
        self.nodes.push(Node { value, back: None, needs_grad: needs });
        TensorId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: ArrayD<T>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &ArrayD<T> {
        &self.nodes[id.0].value
    }

    pub fn arc(&self, id: TensorId) -> Arc<ArrayD<T>> {
        Arc::clone(&self.nodes[id.0].value)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn needs_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Extracts the value of a 0-dim (scalar) node.
    pub fn scalar(&self, id: TensorId) -> T {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        *v.iter().next().expect("empty node value")
    }

    fn record(
        &mut self,
        inputs: &[TensorId],
        value: ArrayD<T>,
        back: impl Fn(&ArrayD<T>, &mut dyn FnMut(TensorId, ArrayD<T>)) + 'static,
    ) -> TensorId {
        let needs = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i.0].needs_grad);
        let back = if needs { Some(Box::new(back) as BackFn<T>) } else { None };
        self.nodes.push(Node { value: Arc::new(value), back, needs_grad: needs });
        TensorId(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar node. Returns gradients for every leaf
    /// with `needs_grad` reached by the sweep.
    pub fn backward(&self, loss: TensorId) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward() expects a scalar loss");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(self.value(loss).raw_dim()));
        for i in (0..=loss.0).rev() {
            if self.nodes[i].back.is_none() {
                continue; // leaf: keep the accumulated gradient
            }
            let Some(g) = grads[i].take() else { continue };
            let back = self.nodes[i].back.as_ref().expect("checked above");
            back(&g, &mut |pid: TensorId, contrib: ArrayD<T>| {
                debug_assert_eq!(
                    contrib.shape(),
                    self.nodes[pid.0].value.shape(),
                    "gradient shape mismatch"
                );
                if !self.nodes[pid.0].needs_grad {
                    return;
                }
                match &mut grads[pid.0] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            });
        }
        Gradients { grads }
    }

    // ---- elementwise arithmetic -------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = &*self.arc(a) + &*self.arc(b);
        self.record(&[a, b], v, move |g, sink| {
            sink(a, g.clone());
            sink(b, g.clone());
        })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = &*self.arc(a) - &*self.arc(b);
        self.record(&[a, b], v, move |g, sink| {
            sink(a, g.clone());
            sink(b, g.mapv(|x| -x));
        })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let va = self.arc(a);
        let vb = self.arc(b);
        let v = &*va * &*vb;
        self.record(&[a, b], v, move |g, sink| {
            sink(a, g * &*vb);
            sink(b, g * &*va);
        })
    }

    pub fn scale(&mut self, a: TensorId, c: T) -> TensorId {
        let v = self.value(a) * c;
        self.record(&[a], v, move |g, sink| sink(a, g * c))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: T) -> TensorId {
        let v = self.value(a) + c;
        self.record(&[a], v, move |g, sink| sink(a, g.clone()))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.scale(a, T::from_f64(-1.0))
    }

    // ---- activations ------------------------------------------------------

    pub fn leaky_relu(&mut self, a: TensorId, slope: T) -> TensorId {
        let va = self.arc(a);
        let v = va.mapv(|x| if x > T::zero() { x } else { x * slope });
        self.record(&[a], v, move |g, sink| {
            let mut dx = g.clone();
            ndarray::Zip::from(&mut dx).and(&*va).for_each(|d, &x| {
                if x <= T::zero() {
                    *d *= slope;
                }
            });
            sink(a, dx);
        })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(|x| T::one() / (T::one() + (-x).exp()));
        let vy = Arc::new(v.clone());
        self.record(&[a], v, move |g, sink| {
            let mut dx = g.clone();
            ndarray::Zip::from(&mut dx).and(&*vy).for_each(|d, &y| {
                *d = *d * y * (T::one() - y);
            });
            sink(a, dx);
        })
    }

    /// Numerically stable `ln(1 + e^x)`. Its derivative is the sigmoid, so
    /// `-softplus(-x)` is a stable `ln(sigmoid(x))`.
    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        let va = self.arc(a);
        let v = va.mapv(|x| {
            if x > T::zero() {
                x + (-x).exp().ln_1p()
            } else {
                x.exp().ln_1p()
            }
        });
        self.record(&[a], v, move |g, sink| {
            let mut dx = g.clone();
            ndarray::Zip::from(&mut dx).and(&*va).for_each(|d, &x| {
                *d *= T::one() / (T::one() + (-x).exp());
            });
            sink(a, dx);
        })
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let va = self.arc(a);
        let v = va.mapv(|x| x.abs());
        self.record(&[a], v, move |g, sink| {
            let mut dx = g.clone();
            ndarray::Zip::from(&mut dx).and(&*va).for_each(|d, &x| {
                *d *= if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
            });
            sink(a, dx);
        })
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let shape = self.value(a).raw_dim();
        let s = self.value(a).sum();
        let v = ArrayD::from_elem(IxDyn(&[]), s);
        self.record(&[a], v, move |g, sink| {
            let gs = *g.iter().next().expect("scalar grad");
            sink(a, ArrayD::from_elem(shape.clone(), gs));
        })
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = T::from_f64(self.value(a).len() as f64);
        let s = self.sum_all(a);
        self.scale(s, T::one() / n)
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> TensorId {
        let old_shape: Vec<usize> = self.shape(a).to_vec();
        let v = self
            .value(a)
            .to_owned()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.record(&[a], v, move |g, sink| {
            let back = g
                .to_owned()
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(&old_shape))
                .expect("reshape backward");
            sink(a, back);
        })
    }

    pub fn transpose2(&mut self, a: TensorId) -> TensorId {
        let v2 = self.view2(a).t().to_owned().into_dyn();
        self.record(&[a], v2, move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("transpose2 grad");
            sink(a, g2.t().to_owned().into_dyn());
        })
    }

    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let va = self.arc(a);
        let vb = self.arc(b);
        let a4 = va.view().into_dimensionality::<Ix4>().expect("concat lhs 4d");
        let b4 = vb.view().into_dimensionality::<Ix4>().expect("concat rhs 4d");
        let c_a = a4.dim().1;
        let v = ndarray::concatenate(Axis(1), &[a4.view(), b4.view()])
            .expect("concat_channels shape mismatch")
            .into_dyn();
        self.record(&[a, b], v, move |g, sink| {
            let g4 = g.view().into_dimensionality::<Ix4>().expect("concat grad 4d");
            sink(a, g4.slice(ndarray::s![.., ..c_a, .., ..]).to_owned().into_dyn());
            sink(b, g4.slice(ndarray::s![.., c_a.., .., ..]).to_owned().into_dyn());
        })
    }

    /// Stacks per-sample `[C, H, W]` nodes into one `[N, C, H, W]` batch.
    pub fn stack_samples(&mut self, ids: &[TensorId]) -> TensorId {
        assert!(!ids.is_empty(), "stack_samples: empty input");
        let views: Vec<Arc<ArrayD<T>>> = ids.iter().map(|&i| self.arc(i)).collect();
        let mut shape = vec![ids.len()];
        shape.extend_from_slice(views[0].shape());
        let mut v = ArrayD::<T>::zeros(IxDyn(&shape));
        for (i, s) in views.iter().enumerate() {
            v.index_axis_mut(Axis(0), i).assign(s);
        }
        let ids_own: Vec<TensorId> = ids.to_vec();
        self.record(ids, v, move |g, sink| {
            for (i, &id) in ids_own.iter().enumerate() {
                sink(id, g.index_axis(Axis(0), i).to_owned());
            }
        })
    }

    /// Extracts sample `n` from a `[N, ...]` batch node.
    pub fn take_sample(&mut self, a: TensorId, n: usize) -> TensorId {
        let full_shape = self.value(a).raw_dim();
        let v = self.value(a).index_axis(Axis(0), n).to_owned();
        self.record(&[a], v, move |g, sink| {
            let mut dx = ArrayD::zeros(full_shape.clone());
            dx.index_axis_mut(Axis(0), n).assign(g);
            sink(a, dx);
        })
    }

    // ---- linear algebra ---------------------------------------------------

    fn view2(&self, id: TensorId) -> ndarray::ArrayView2<'_, T> {
        self.value(id).view().into_dimensionality::<Ix2>().expect("expected 2-d node")
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let va = self.arc(a);
        let vb = self.arc(b);
        let a2 = va.view().into_dimensionality::<Ix2>().expect("matmul lhs 2d");
        let b2 = vb.view().into_dimensionality::<Ix2>().expect("matmul rhs 2d");
        let v = a2.dot(&b2).into_dyn();
        self.record(&[a, b], v, move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("matmul grad 2d");
            let a2 = va.view().into_dimensionality::<Ix2>().expect("matmul lhs 2d");
            let b2 = vb.view().into_dimensionality::<Ix2>().expect("matmul rhs 2d");
            sink(a, g2.dot(&b2.t()).into_dyn());
            sink(b, a2.t().dot(&g2).into_dyn());
        })
    }

    /// Adds a per-column bias to a `[R, F]` matrix.
    pub fn add_bias_cols(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let vb = self.arc(b);
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("bias 1d");
        let v = (&self.view2(a) + &b1).into_dyn();
        self.record(&[a, b], v, move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("bias grad 2d");
            sink(a, g.clone());
            sink(b, g2.sum_axis(Axis(0)).into_dyn());
        })
    }

    /// Adds a per-channel bias to a `[N, C, H, W]` map.
    pub fn add_bias_channels(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let vb = self.arc(b);
        let va = self.arc(a);
        let a4 = va.view().into_dimensionality::<Ix4>().expect("bias input 4d");
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("bias 1d");
        let c = a4.dim().1;
        assert_eq!(b1.len(), c, "channel bias length mismatch");
        let mut v = a4.to_owned();
        for ci in 0..c {
            let mut lane = v.index_axis_mut(Axis(1), ci);
            lane += b1[ci];
        }
        self.record(&[a, b], v.into_dyn(), move |g, sink| {
            let g4 = g.view().into_dimensionality::<Ix4>().expect("bias grad 4d");
            let db: Array1<T> =
                Array1::from_iter((0..c).map(|ci| g4.index_axis(Axis(1), ci).sum()));
            sink(a, g.clone());
            sink(b, db.into_dyn());
        })
    }

    // ---- row-wise ops (latent vectors, similarity matrices) ---------------

    /// Per-row Euclidean norms of a `[R, F]` matrix, yielding `[R]`.
    /// Rows with norm below `1e-12` get zero gradient.
    pub fn row_l2_norms(&mut self, a: TensorId) -> TensorId {
        let va = self.arc(a);
        let a2 = va.view().into_dimensionality::<Ix2>().expect("row norms 2d");
        let norms: Array1<T> =
            Array1::from_iter(a2.rows().into_iter().map(|r| r.dot(&r).sqrt()));
        let v = norms.clone().into_dyn();
        self.record(&[a], v, move |g, sink| {
            let a2 = va.view().into_dimensionality::<Ix2>().expect("row norms 2d");
            let g1 = g.view().into_dimensionality::<Ix1>().expect("row norms grad 1d");
            let tiny = T::from_f64(1e-12);
            let mut dx = Array2::<T>::zeros(a2.raw_dim());
            for (i, row) in a2.rows().into_iter().enumerate() {
                let n = norms[i];
                if n > tiny {
                    let coef = g1[i] / n;
                    dx.row_mut(i).assign(&row.mapv(|x| x * coef));
                }
            }
            sink(a, dx.into_dyn());
        })
    }

    /// Frobenius norm of an arbitrary tensor (scalar output).
    pub fn frobenius_norm(&mut self, a: TensorId) -> TensorId {
        let va = self.arc(a);
        let n: T = va.iter().map(|&x| x * x).sum::<T>().sqrt();
        let v = ArrayD::from_elem(IxDyn(&[]), n);
        self.record(&[a], v, move |g, sink| {
            let gs = *g.iter().next().expect("scalar grad");
            let tiny = T::from_f64(1e-12);
            let coef = if n > tiny { gs / n } else { T::zero() };
            sink(a, va.mapv(|x| x * coef));
        })
    }

    /// Normalizes each row of a `[R, F]` matrix to unit Euclidean norm.
    /// Rows with norm below `norm_guard` map to zero (degenerate-window
    /// guard for the cosine similarity).
    pub fn row_normalize(&mut self, a: TensorId, norm_guard: T) -> TensorId {
        let va = self.arc(a);
        let a2 = va.view().into_dimensionality::<Ix2>().expect("row_normalize 2d");
        let norms: Array1<T> =
            Array1::from_iter(a2.rows().into_iter().map(|r| r.dot(&r).sqrt()));
        let mut y = Array2::<T>::zeros(a2.raw_dim());
        for (i, row) in a2.rows().into_iter().enumerate() {
            if norms[i] >= norm_guard {
                let inv = T::one() / norms[i];
                y.row_mut(i).assign(&row.mapv(|x| x * inv));
            }
        }
        let vy = Arc::new(y.clone());
        self.record(&[a], y.into_dyn(), move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("row_normalize grad");
            let mut dx = Array2::<T>::zeros(g2.raw_dim());
            for i in 0..g2.nrows() {
                if norms[i] < norm_guard {
                    continue;
                }
                let yrow = vy.row(i);
                let grow = g2.row(i);
                let dot = grow.dot(&yrow);
                let inv = T::one() / norms[i];
                let mut out = dx.row_mut(i);
                for j in 0..out.len() {
                    out[j] = (grow[j] - dot * yrow[j]) * inv;
                }
            }
            sink(a, dx.into_dyn());
        })
    }

    /// Row-wise softmax of a `[R, F]` matrix (stable).
    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let a2 = self.view2(a).to_owned();
        let mut y = a2;
        for mut row in y.rows_mut() {
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s: T = row.iter().cloned().sum();
            row.mapv_inplace(|x| x / s);
        }
        let vy = Arc::new(y.clone());
        self.record(&[a], y.into_dyn(), move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("softmax grad 2d");
            let mut dx = Array2::<T>::zeros(g2.raw_dim());
            for i in 0..g2.nrows() {
                let yrow = vy.row(i);
                let grow = g2.row(i);
                let dot = grow.dot(&yrow);
                let mut out = dx.row_mut(i);
                for j in 0..out.len() {
                    out[j] = yrow[j] * (grow[j] - dot);
                }
            }
            sink(a, dx.into_dyn());
        })
    }
}

/// Convenience constructors for dynamic arrays used throughout the crate.
pub fn arr0<T: Scalar>(v: T) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

pub fn to4<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView4<'_, T> {
    a.view().into_dimensionality::<Ix4>().expect("expected 4-d tensor")
}

pub fn to2<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d tensor")
}

pub fn owned4<T: Scalar>(a: Array4<T>) -> ArrayD<T> {
    a.into_dyn()
}
