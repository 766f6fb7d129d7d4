//! Contrastive-learning-based memory feature module: the latent loss that
//! makes encodings discriminative, the k-means memory bank of normal-texture
//! prototypes, affinity-based substitution and the patch-level anomaly score.

use crate::tensor::{Scalar, Tape, TensorId};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CmfmError {
    #[error("latent dimensionality mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("memory bank has {bank} entries but the query has {query}")]
    LengthMismatch { bank: usize, query: usize },
    #[error("{have} latent vectors cannot fill {want} memory entries; use a smaller bank")]
    TooFewSamples { have: usize, want: usize },
    #[error("classifier output is not finite")]
    NonFiniteClassifier,
    #[error("affinity query is not a probability vector (sum {0})")]
    NotSimplex(f64),
}

/// Mean binary cross entropy of sigmoid logits against a constant target
/// (0 or 1), in the numerically stable softplus form.
pub fn bce_with_logits_mean<T: Scalar>(tape: &mut Tape<T>, logits: TensorId, target_one: bool) -> TensorId {
    // BCE(sigmoid(x), 1) = softplus(-x); BCE(sigmoid(x), 0) = softplus(x).
    let arg = if target_one { tape.neg(logits) } else { logits };
    let sp = tape.softplus(arg);
    tape.mean_all(sp)
}

/// Triplet latent loss: the BCE of the auxiliary classifications
/// `[C_A(R+), C_A(R-)]` against `[1, 0]` (averaged over the two
/// classifications) plus the Euclidean distance between `R+` and `R0`,
/// batch-meaned. Inputs are `[N, D]` latents and `[N, 1]` classifier logits.
pub fn latent_loss_batch<T: Scalar>(
    tape: &mut Tape<T>,
    r0: TensorId,
    rplus: TensorId,
    logit_plus: TensorId,
    logit_minus: TensorId,
) -> TensorId {
    let bce_p = bce_with_logits_mean(tape, logit_plus, true);
    let bce_m = bce_with_logits_mean(tape, logit_minus, false);
    let bce_sum = tape.add(bce_p, bce_m);
    let bce = tape.scale(bce_sum, T::from_f64(0.5));
    let diff = tape.sub(rplus, r0);
    let norms = tape.row_l2_norms(diff);
    let dist = tape.mean_all(norms);
    tape.add(bce, dist)
}

/// Array-level evaluation of the triplet loss, checking classifier
/// finiteness. `prob_*` are classifier outputs in (0,1).
pub fn latent_loss_value<T: Scalar>(
    r0: &Array2<T>,
    rplus: &Array2<T>,
    prob_plus: &Array1<T>,
    prob_minus: &Array1<T>,
) -> Result<T, CmfmError> {
    if r0.dim() != rplus.dim() {
        return Err(CmfmError::DimMismatch(r0.ncols(), rplus.ncols()));
    }
    if prob_plus.iter().chain(prob_minus.iter()).any(|v| !v.is_finite()) {
        return Err(CmfmError::NonFiniteClassifier);
    }
    let logit = |p: T| {
        let p = p.to_f64().clamp(1e-12, 1.0 - 1e-12);
        T::from_f64((p / (1.0 - p)).ln())
    };
    let mut tape = Tape::new(false);
    let r0i = tape.leaf(r0.clone().into_dyn(), false);
    let rpi = tape.leaf(rplus.clone().into_dyn(), false);
    let n = prob_plus.len();
    let lp = tape.leaf(
        Array2::from_shape_fn((n, 1), |(i, _)| logit(prob_plus[i])).into_dyn(),
        false,
    );
    let lm = tape.leaf(
        Array2::from_shape_fn((n, 1), |(i, _)| logit(prob_minus[i])).into_dyn(),
        false,
    );
    let loss = latent_loss_batch(&mut tape, r0i, rpi, lp, lm);
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(CmfmError::NonFiniteClassifier);
    }
    Ok(v)
}

/// L stored prototype vectors of normal-texture latents. Content-immutable
/// after establishment; the fingerprint ties it to the encoder state that
/// produced it.
#[derive(Debug, Clone)]
pub struct MemoryBank<T: Scalar> {
    entries: Array2<T>,
    encoder_fingerprint: u64,
}

impl<T: Scalar> MemoryBank<T> {
    /// Runs k-means over training latents and stores the centroids.
    pub fn establish(
        latents: &Array2<T>,
        l: usize,
        seed: u64,
        encoder_fingerprint: u64,
    ) -> Result<Self, CmfmError> {
        let centroids = kmeans(latents, l, seed, 100)?;
        Ok(MemoryBank { entries: centroids, encoder_fingerprint })
    }

    /// Wraps previously stored centroids (checkpoint load path).
    pub fn from_entries(entries: Array2<T>, encoder_fingerprint: u64) -> Self {
        MemoryBank { entries, encoder_fingerprint }
    }

    pub fn entries(&self) -> &Array2<T> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn encoder_fingerprint(&self) -> u64 {
        self.encoder_fingerprint
    }

    /// Digest over exact value bits (phase-2 immutability checks).
    pub fn digest(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.entries.len() * 8 + 8);
        bytes.extend_from_slice(&self.encoder_fingerprint.to_le_bytes());
        for v in self.entries.iter() {
            bytes.extend_from_slice(&Scalar::to_f64(*v).to_bits().to_le_bytes());
        }
        crate::fnv1a64(bytes)
    }
}

fn sq_dist<T: Scalar>(a: ndarray::ArrayView1<T>, b: ndarray::ArrayView1<T>) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x - *y;
        s += d * d;
    }
    s
}

/// Lloyd's algorithm with k-means++ initialization, an iteration cap, and
/// empty clusters reseeded to the farthest point.
pub fn kmeans<T: Scalar>(
    data: &Array2<T>,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<Array2<T>, CmfmError> {
    let (n, d) = data.dim();
    if n < k || k == 0 {
        return Err(CmfmError::TooFewSamples { have: n, want: k });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids = Array2::<T>::zeros((k, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| Scalar::to_f64(sq_dist(data.row(i), centroids.row(0))))
        .collect();
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut t = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                if t < w {
                    idx = i;
                    break;
                }
                t -= w;
            }
            idx
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, slot) in min_d2.iter_mut().enumerate() {
            let d2 = Scalar::to_f64(sq_dist(data.row(i), centroids.row(c)));
            if d2 < *slot {
                *slot = d2;
            }
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, slot) in assign.iter_mut().enumerate() {
            let mut best = 0usize;
            let mut best_d = T::infinity();
            for c in 0..k {
                let d2 = sq_dist(data.row(i), centroids.row(c));
                if d2 < best_d {
                    best_d = d2;
                    best = c;
                }
            }
            if *slot != best {
                *slot = best;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<T>::zeros((k, d));
        for i in 0..n {
            counts[assign[i]] += 1;
            let mut row = sums.row_mut(assign[i]);
            row += &data.row(i);
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed to the point farthest from its current centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = Scalar::to_f64(sq_dist(data.row(a), centroids.row(assign[a])));
                        let db = Scalar::to_f64(sq_dist(data.row(b), centroids.row(assign[b])));
                        da.partial_cmp(&db).expect("finite distances")
                    })
                    .expect("nonempty data");
                centroids.row_mut(c).assign(&data.row(far));
                changed = true;
            } else {
                let inv = T::from_f64(1.0 / counts[c] as f64);
                let mut row = centroids.row_mut(c);
                for j in 0..d {
                    row[j] = sums[[c, j]] * inv;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(centroids)
}

/// Validates that an affinity query row is a probability vector.
pub fn validate_affinity<T: Scalar>(q: &Array1<T>) -> Result<(), CmfmError> {
    if q.iter().any(|v| *v < T::zero()) {
        return Err(CmfmError::NotSimplex(f64::NAN));
    }
    let sum = Scalar::to_f64(q.iter().cloned().sum::<T>());
    if (sum - 1.0).abs() > 1e-6 {
        return Err(CmfmError::NotSimplex(sum));
    }
    Ok(())
}

/// Restores a latent as the query-weighted convex combination of memory
/// entries.
pub fn substitute<T: Scalar>(q: &Array1<T>, bank: &MemoryBank<T>) -> Result<Array1<T>, CmfmError> {
    if q.len() != bank.len() {
        return Err(CmfmError::LengthMismatch { bank: bank.len(), query: q.len() });
    }
    Ok(q.dot(bank.entries()))
}

/// Batched substitution on the tape: `z_hat = Q M` (`Q` is `[N, L]`).
pub fn substitute_graph<T: Scalar>(tape: &mut Tape<T>, q: TensorId, bank_entries: TensorId) -> TensorId {
    tape.matmul(q, bank_entries)
}

/// Euclidean distance to the nearest memory entry.
pub fn patch_anomaly_score<T: Scalar>(z: ndarray::ArrayView1<T>, bank: &MemoryBank<T>) -> Result<T, CmfmError> {
    if z.len() != bank.dim() {
        return Err(CmfmError::DimMismatch(z.len(), bank.dim()));
    }
    let mut best = T::infinity();
    for row in bank.entries().rows() {
        let d2 = sq_dist(z, row);
        if d2 < best {
            best = d2;
        }
    }
    Ok(best.sqrt())
}

/// Scores for a batch of `[N, D]` latents.
pub fn patch_anomaly_scores<T: Scalar>(z: &Array2<T>, bank: &MemoryBank<T>) -> Result<Vec<T>, CmfmError> {
    z.rows().into_iter().map(|row| patch_anomaly_score(row, bank)).collect()
}
