//! Named parameter storage and the Adam optimizer.

use super::{Scalar, Tape, TensorId};
use crate::fnv1a64;
use indexmap::IndexMap;
use ndarray::ArrayD;
use std::collections::HashMap;
use std::sync::Arc;

/// Role of a stored tensor; the loss regularizer targets `Weight` matrices
/// and the optimizer never touches `Buffer`s (batch-norm running stats).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Buffer,
}

pub struct Param<T: Scalar> {
    pub value: Arc<ArrayD<T>>,
    pub kind: ParamKind,
}

/// Ordered, named parameter set for one model. Insertion order is fixed so
/// digests and checkpoints are deterministic.
pub struct ParamStore<T: Scalar> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: ArrayD<T>) {
        let name = name.into();
        let prev = self.params.insert(name.clone(), Param { value: Arc::new(value), kind });
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Param<T> {
        self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn arc(&self, name: &str) -> Arc<ArrayD<T>> {
        Arc::clone(&self.get(name).value)
    }

    pub fn set_value(&mut self, name: &str, value: ArrayD<T>) {
        let p = self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(p.value.shape(), value.shape(), "set_value shape mismatch for {name}");
        p.value = Arc::new(value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Applies `f` in place to one parameter value (used by the optimizer;
    /// copy-on-write only if a tape still holds the value).
    pub fn update_in_place(&mut self, name: &str, f: impl FnOnce(&mut ArrayD<T>)) {
        let p = self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        f(Arc::make_mut(&mut p.value));
    }

    /// FNV-1a digest over names, shapes and exact value bits of every
    /// parameter whose name starts with one of the prefixes. Detects any
    /// parameter or buffer mutation.
    pub fn digest(&self, prefixes: &[&str]) -> u64 {
        let mut bytes: Vec<u8> = Vec::new();
        for (name, p) in &self.params {
            if !prefixes.iter().any(|pre| name.starts_with(pre)) {
                continue;
            }
            bytes.extend_from_slice(name.as_bytes());
            for d in p.value.shape() {
                bytes.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in p.value.iter() {
                bytes.extend_from_slice(&Scalar::to_f64(*v).to_bits().to_le_bytes());
            }
        }
        fnv1a64(bytes)
    }
}

/// Per-iteration binding of store parameters onto a tape; memoized so every
/// parameter becomes exactly one leaf.
pub struct Binder {
    ids: HashMap<String, TensorId>,
    grad_prefixes: Vec<String>,
}

impl Binder {
    /// `grad_prefixes` name the modules that receive gradients this pass;
    /// everything else binds as a constant.
    pub fn new(grad_prefixes: &[&str]) -> Self {
        Binder {
            ids: HashMap::new(),
            grad_prefixes: grad_prefixes.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn wants_grad(&self, name: &str) -> bool {
        self.grad_prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn param<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        name: &str,
    ) -> TensorId {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let p = store.get(name);
        let needs = self.wants_grad(name) && p.kind != ParamKind::Buffer;
        let id = tape.leaf_arc(Arc::clone(&p.value), needs);
        self.ids.insert(name.to_string(), id);
        id
    }

    /// All (name, id) pairs that were bound with gradients enabled.
    pub fn grad_bindings(&self) -> impl Iterator<Item = (&String, TensorId)> {
        self.ids.iter().filter(|(n, _)| self.wants_grad(n)).map(|(n, &id)| (n, id))
    }
}

/// Adam with per-parameter moment state and optional global-norm clipping.
pub struct Adam<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    state: HashMap<String, AdamSlot<T>>,
}

struct AdamSlot<T: Scalar> {
    m: ArrayD<T>,
    v: ArrayD<T>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Adam {
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            state: HashMap::new(),
        }
    }

    /// Applies one update to the named parameters. `clip` rescales the whole
    /// gradient set when its global L2 norm exceeds the bound.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &mut Vec<(String, ArrayD<T>)>,
        clip: Option<T>,
    ) {
        if let Some(bound) = clip {
            let mut sq = T::zero();
            for (_, g) in grads.iter() {
                sq += g.iter().map(|&x| x * x).sum::<T>();
            }
            let norm = sq.sqrt();
            if norm > bound {
                let scale = bound / norm;
                for (_, g) in grads.iter_mut() {
                    g.mapv_inplace(|x| x * scale);
                }
            }
        }
        for (name, g) in grads.iter() {
            let slot = self.state.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: ArrayD::zeros(g.raw_dim()),
                v: ArrayD::zeros(g.raw_dim()),
                t: 0,
            });
            slot.t += 1;
            let b1 = self.beta1;
            let b2 = self.beta2;
            ndarray::Zip::from(&mut slot.m).and(g).for_each(|m, &gv| {
                *m = b1 * *m + (T::one() - b1) * gv;
            });
            ndarray::Zip::from(&mut slot.v).and(g).for_each(|v, &gv| {
                *v = b2 * *v + (T::one() - b2) * gv * gv;
            });
            let bc1 = T::one() - b1.powi(slot.t as i32);
            let bc2 = T::one() - b2.powi(slot.t as i32);
            let lr = self.lr;
            let eps = self.eps;
            let m = &slot.m;
            let v = &slot.v;
            store.update_in_place(name, |value| {
                ndarray::Zip::from(value).and(m).and(v).for_each(|p, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
            });
        }
    }
}
