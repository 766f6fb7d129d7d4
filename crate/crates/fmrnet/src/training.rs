//! Loss stack and the two-phase optimization procedure.
//!
//! Phase 1 learns background reconstruction and discriminative latents on
//! defect-free patches (updating encoder, decoder, classifier and
//! discriminator); the memory bank is then established by k-means over all
//! training latents. Phase 2 freezes the encoder and bank and trains the
//! decoder and addressing network to restore synthetic defects to their
//! clean sources, with the discriminator alternating 1:1 throughout.

use crate::cmfm::{self, MemoryBank};
use crate::imaging::Image;
use crate::networks::{
    self, addressing, aux_classifier, decode, discriminate, encode, ArchConfig, CheckpointMeta,
    DiscriminatorOut, ForwardCtx, NetworkError, PhaseMarker, RunMode,
};
use crate::synth::{make_training_pair, SourcePool, SynthConfig, SynthError};
use crate::tensor::optim::{Adam, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tape, TensorId};
use ndarray::{Array1, Array4, ArrayD};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at iteration {iteration}: {terms}")]
    NonFiniteLoss { iteration: u64, terms: String },
    #[error("phase 2 requires an established memory bank")]
    MissingBank,
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Cmfm(#[from] crate::cmfm::CmfmError),
    #[error(transparent)]
    Imaging(#[from] crate::imaging::ImagingError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Loss weights; phase 1 uses `(w_rec1, w_adv1, w_lat1)`, phase 2 uses
/// `(w_rec2, w_adv2)`. `epsilon` scales the Frobenius-norm weight penalty.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_rec1: f64,
    pub w_adv1: f64,
    pub w_lat1: f64,
    pub w_rec2: f64,
    pub w_adv2: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_rec1: 100.0, w_adv1: 1.0, w_lat1: 1.0, w_rec2: 100.0, w_adv2: 1.0, epsilon: 1e-5 }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainingSchedule {
    pub t1: u64,
    pub t2: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Global-norm gradient clip; `None` disables.
    pub grad_clip: Option<f64>,
    /// Use the literal saturating generator objective instead of the
    /// non-saturating default.
    pub saturating_gan: bool,
    pub checkpoint_every: Option<u64>,
    pub log_every: u64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            t1: 200_000,
            t2: 100_000,
            learning_rate: 1e-3,
            batch_size: 16,
            seed: 0,
            grad_clip: Some(10.0),
            saturating_gan: false,
            checkpoint_every: None,
            log_every: 100,
        }
    }
}

// ---- loss builders ----------------------------------------------------------

/// Batch-mean squared error plus `epsilon` times the summed Frobenius norms
/// of the given weight matrices.
pub fn loss_rec<T: Scalar>(
    tape: &mut Tape<T>,
    recon: TensorId,
    target: TensorId,
    reg_weights: &[TensorId],
    epsilon: f64,
) -> TensorId {
    let diff = tape.sub(recon, target);
    let sq = tape.mul(diff, diff);
    let mut total = tape.mean_all(sq);
    if epsilon > 0.0 && !reg_weights.is_empty() {
        let mut reg: Option<TensorId> = None;
        for &w in reg_weights {
            let n = tape.frobenius_norm(w);
            reg = Some(match reg {
                Some(acc) => tape.add(acc, n),
                None => n,
            });
        }
        let reg = tape.scale(reg.expect("nonempty"), T::from_f64(epsilon));
        total = tape.add(total, reg);
    }
    total
}

/// Adversarial log terms from discriminator logits. The discriminator term
/// is the negated value it maximizes; the generator term is non-saturating
/// by default (`-E[log D(fake)]`), or the literal `E[log(1 - D(fake))]`
/// when `saturating` is set.
pub fn gan_terms<T: Scalar>(
    tape: &mut Tape<T>,
    logit_real: TensorId,
    logit_fake: TensorId,
    saturating: bool,
) -> (TensorId, TensorId) {
    // log D(x) = -softplus(-logit); log(1 - D(x)) = -softplus(logit).
    let neg_real = tape.neg(logit_real);
    let sp_real = tape.softplus(neg_real);
    let m_real = tape.mean_all(sp_real); // -E[log D(real)]
    let sp_fake = tape.softplus(logit_fake);
    let m_fake = tape.mean_all(sp_fake); // -E[log(1-D(fake))]
    let dis = tape.add(m_real, m_fake);
    let gen = if saturating {
        let neg = tape.neg(m_fake); // E[log(1-D(fake))], minimized
        neg
    } else {
        let neg_fake = tape.neg(logit_fake);
        let sp = tape.softplus(neg_fake);
        tape.mean_all(sp) // -E[log D(fake)], minimized
    };
    (gen, dis)
}

/// Weighted L1 distance between discriminator activations, summed per
/// sample over the configured blocks then batch-meaned.
pub fn loss_perceptual<T: Scalar>(
    tape: &mut Tape<T>,
    feats_real: &[(usize, TensorId)],
    feats_fake: &[(usize, TensorId)],
    psi: f64,
) -> TensorId {
    assert_eq!(feats_real.len(), feats_fake.len());
    let mut total: Option<TensorId> = None;
    for ((_, fr), (_, ff)) in feats_real.iter().zip(feats_fake.iter()) {
        let n = tape.shape(*fr)[0] as f64;
        let diff = tape.sub(*fr, *ff);
        let l1 = tape.abs(diff);
        let s = tape.sum_all(l1);
        let term = tape.scale(s, T::from_f64(psi / n));
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    total.expect("at least one perceptual block")
}

/// Both discriminator passes plus the adversarial log terms.
pub struct GanOutputs {
    pub real: DiscriminatorOut,
    pub fake: DiscriminatorOut,
    pub generator_term: TensorId,
    pub discriminator_term: TensorId,
}

/// Runs the discriminator on real and reconstructed batches and returns the
/// (generator, discriminator) adversarial terms.
pub fn loss_gan<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut ForwardCtx<'_, T>,
    cfg: &ArchConfig,
    real: TensorId,
    fake: TensorId,
    saturating: bool,
) -> GanOutputs {
    let d_real = discriminate(tape, ctx, cfg, real);
    let d_fake = discriminate(tape, ctx, cfg, fake);
    let (generator_term, discriminator_term) =
        gan_terms(tape, d_real.logit, d_fake.logit, saturating);
    GanOutputs { real: d_real, fake: d_fake, generator_term, discriminator_term }
}

/// Generator-side adversarial loss: the gan term plus the perceptual term
/// over the discriminator's configured feature blocks.
pub fn loss_adv<T: Scalar>(tape: &mut Tape<T>, gan: &GanOutputs, psi: f64) -> TensorId {
    let per = loss_perceptual(tape, &gan.real.feats, &gan.fake.feats, psi);
    tape.add(gan.generator_term, per)
}

/// Names of the weight matrices entering the Frobenius regularizer (the
/// generator-side modules; biases and batch-norm affines excluded).
fn reg_weight_names<T: Scalar>(store: &ParamStore<T>) -> Vec<String> {
    store
        .iter()
        .filter(|(name, p)| {
            p.kind == ParamKind::Weight
                && (name.starts_with("enc.")
                    || name.starts_with("dec.")
                    || name.starts_with("ca.")
                    || name.starts_with("an."))
        })
        .map(|(name, _)| name.clone())
        .collect()
}

// ---- data plumbing ----------------------------------------------------------

/// In-memory training corpus with its synthesis configuration.
pub struct TrainCorpus {
    pub images: Vec<Image>,
    pub synth: SynthConfig,
    pub pool: SourcePool,
}

pub struct TripletBatch {
    pub p0: ArrayD<f32>,
    pub pplus: ArrayD<f32>,
    pub pminus: ArrayD<f32>,
}

pub struct PairBatch {
    pub clean: ArrayD<f32>,
    pub synthetic: ArrayD<f32>,
}

/// Copies an `[H, W, C]` window into a `[C, P, P]` patch.
pub fn patch_chw(img: &Image, r: usize, c: usize, p: usize) -> ndarray::Array3<f32> {
    let px = img.pixels();
    ndarray::Array3::from_shape_fn((img.shape().2, p, p), |(k, i, j)| px[[r + i, c + j, k]])
}

fn rand_offset(rng: &mut ChaCha12Rng, len: usize, p: usize) -> usize {
    if len > p {
        rng.random_range(0..=len - p)
    } else {
        0
    }
}

impl TrainCorpus {
    /// (P0, P+, P-) triplets: two distinct random windows of one defect-free
    /// image and one window of its synthetic counterpart.
    pub fn sample_triplets(
        &self,
        patch: usize,
        n: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<TripletBatch, TrainError> {
        if self.images.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let c = self.images[0].shape().2;
        let mut p0 = Array4::<f32>::zeros((n, c, patch, patch));
        let mut pplus = Array4::<f32>::zeros((n, c, patch, patch));
        let mut pminus = Array4::<f32>::zeros((n, c, patch, patch));
        for i in 0..n {
            let img = &self.images[rng.random_range(0..self.images.len())];
            let (h, w, _) = img.shape();
            let (r0, c0) = (rand_offset(rng, h, patch), rand_offset(rng, w, patch));
            let (mut rp, mut cp) = (rand_offset(rng, h, patch), rand_offset(rng, w, patch));
            // Distinct P+ window whenever more than one position exists.
            for _ in 0..8 {
                if (rp, cp) != (r0, c0) || (h <= patch && w <= patch) {
                    break;
                }
                rp = rand_offset(rng, h, patch);
                cp = rand_offset(rng, w, patch);
            }
            let pair = make_training_pair(img, &self.synth, &self.pool, rng.random())?;
            let (rm, cm) = (rand_offset(rng, h, patch), rand_offset(rng, w, patch));
            p0.index_axis_mut(ndarray::Axis(0), i).assign(&patch_chw(img, r0, c0, patch));
            pplus.index_axis_mut(ndarray::Axis(0), i).assign(&patch_chw(img, rp, cp, patch));
            pminus
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&patch_chw(&pair.synthetic, rm, cm, patch));
        }
        Ok(TripletBatch { p0: p0.into_dyn(), pplus: pplus.into_dyn(), pminus: pminus.into_dyn() })
    }

    /// Aligned (clean, synthetic) windows at identical coordinates.
    pub fn sample_pairs(
        &self,
        patch: usize,
        n: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<PairBatch, TrainError> {
        if self.images.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let c = self.images[0].shape().2;
        let mut clean = Array4::<f32>::zeros((n, c, patch, patch));
        let mut synthetic = Array4::<f32>::zeros((n, c, patch, patch));
        for i in 0..n {
            let img = &self.images[rng.random_range(0..self.images.len())];
            let (h, w, _) = img.shape();
            let pair = make_training_pair(img, &self.synth, &self.pool, rng.random())?;
            let (r, cc) = (rand_offset(rng, h, patch), rand_offset(rng, w, patch));
            clean.index_axis_mut(ndarray::Axis(0), i).assign(&patch_chw(img, r, cc, patch));
            synthetic
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&patch_chw(&pair.synthetic, r, cc, patch));
        }
        Ok(PairBatch { clean: clean.into_dyn(), synthetic: synthetic.into_dyn() })
    }

    /// All grid-aligned (stride = patch) windows of every image, as latents
    /// input `[M, C, P, P]` batches of bounded size.
    pub fn grid_patches(&self, patch: usize) -> Result<Vec<ndarray::Array3<f32>>, TrainError> {
        let mut out = Vec::new();
        for img in &self.images {
            let grid = crate::imaging::slice_patches(img, patch, patch)?;
            for (p3, _) in grid.patches.iter().zip(&grid.origin_coords) {
                let (ph, pw, pc) = p3.dim();
                out.push(ndarray::Array3::from_shape_fn((pc, ph, pw), |(k, i, j)| p3[[i, j, k]]));
            }
        }
        Ok(out)
    }
}

// ---- model + trainer --------------------------------------------------------

/// A trained (or training) model: parameters, architecture, optional memory
/// bank and calibration state.
pub struct Model {
    pub cfg: ArchConfig,
    pub store: ParamStore<f32>,
    pub bank: Option<MemoryBank<f32>>,
    pub phase: PhaseMarker,
    pub iteration: u64,
    pub patch_threshold: Option<f32>,
}

impl Model {
    pub fn init(cfg: ArchConfig, seed: u64) -> Result<Self, NetworkError> {
        let store = networks::init_params(&cfg, seed)?;
        Ok(Model { cfg, store, bank: None, phase: PhaseMarker::Phase1, iteration: 0, patch_threshold: None })
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            version: networks::CHECKPOINT_VERSION,
            phase: self.phase,
            iteration: self.iteration,
            config_hash: self.cfg.config_hash(),
            arch: self.cfg.clone(),
            encoder_fingerprint: self.bank.as_ref().map(|b| b.encoder_fingerprint()),
            patch_threshold: self.patch_threshold,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), NetworkError> {
        networks::save_checkpoint(path, &self.meta(), &self.store, self.bank.as_ref())
    }

    pub fn load(path: &std::path::Path, expect: Option<&ArchConfig>) -> Result<Self, NetworkError> {
        let (meta, store, bank) = networks::load_checkpoint(path, expect)?;
        Ok(Model {
            cfg: meta.arch.clone(),
            store,
            bank,
            phase: meta.phase,
            iteration: meta.iteration,
            patch_threshold: meta.patch_threshold,
        })
    }

    /// Digest of the encoder parameters and buffers.
    pub fn encoder_digest(&self) -> u64 {
        self.store.digest(&["enc."])
    }

    /// Encodes a `[N, C, P, P]` batch to latents in evaluation mode.
    pub fn encode_eval(&self, batch: &ArrayD<f32>) -> Result<ndarray::Array2<f32>, NetworkError> {
        let mut tape = Tape::new(false);
        let mut ctx = ForwardCtx::new(&self.store, &[], RunMode::Eval);
        let x = tape.leaf(batch.clone(), false);
        let out = encode(&mut tape, &mut ctx, &self.cfg, x)?;
        Ok(crate::tensor::to2(tape.value(out.latent)).to_owned())
    }
}

/// One CSV row of the scalar loss log.
#[derive(Debug, Clone, Copy)]
pub struct LossRow {
    pub iteration: u64,
    pub phase: u8,
    pub total: f64,
    pub rec: f64,
    pub adv: f64,
    pub lat: f64,
    pub dis: f64,
}

pub struct Trainer {
    pub model: Model,
    pub weights: LossWeights,
    pub sched: TrainingSchedule,
    pub log: Vec<LossRow>,
    pub checkpoint_dir: Option<PathBuf>,
    adam: Adam<f32>,
    rng: ChaCha12Rng,
}

fn apply_bn_updates(
    store: &mut ParamStore<f32>,
    updates: &[(String, Array1<f32>, Array1<f32>)],
    momentum: f64,
) {
    let m = momentum as f32;
    for (prefix, mean, var) in updates {
        store.update_in_place(&format!("{prefix}.rm"), |rm| {
            for (r, &b) in rm.iter_mut().zip(mean.iter()) {
                *r = (1.0 - m) * *r + m * b;
            }
        });
        store.update_in_place(&format!("{prefix}.rv"), |rv| {
            for (r, &b) in rv.iter_mut().zip(var.iter()) {
                *r = (1.0 - m) * *r + m * b;
            }
        });
    }
}

impl Trainer {
    pub fn new(model: Model, weights: LossWeights, sched: TrainingSchedule) -> Self {
        let lr = sched.learning_rate as f32;
        let seed = sched.seed;
        Trainer {
            model,
            weights,
            sched,
            log: Vec::new(),
            checkpoint_dir: None,
            adam: Adam::new(lr),
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    fn collect_and_step(
        &mut self,
        tape: &Tape<f32>,
        loss: TensorId,
        bindings: Vec<(String, TensorId)>,
        bn_updates: Vec<(String, Array1<f32>, Array1<f32>)>,
    ) -> Result<(), TrainError> {
        let grads_all = tape.backward(loss);
        let mut grads: Vec<(String, ArrayD<f32>)> = Vec::new();
        for (name, id) in bindings {
            if let Some(g) = grads_all.get(id) {
                grads.push((name, g.clone()));
            }
        }
        grads.sort_by(|a, b| a.0.cmp(&b.0));
        let clip = self.sched.grad_clip.map(|c| c as f32);
        drop(grads_all);
        self.adam.step(&mut self.model.store, &mut grads, clip);
        apply_bn_updates(&mut self.model.store, &bn_updates, self.model.cfg.bn_momentum);
        Ok(())
    }

    fn check_finite(&self, iteration: u64, terms: &[(&str, f64)]) -> Result<(), TrainError> {
        if terms.iter().any(|(_, v)| !v.is_finite()) {
            let dump = terms.iter().map(|(n, v)| format!("{n}={v}")).collect::<Vec<_>>().join(", ");
            return Err(TrainError::NonFiniteLoss { iteration, terms: dump });
        }
        Ok(())
    }

    fn discriminator_step(
        &mut self,
        real: &ArrayD<f32>,
        fake: &ArrayD<f32>,
        iteration: u64,
    ) -> Result<f64, TrainError> {
        let cfg = self.model.cfg.clone();
        let mut tape = Tape::new(true);
        let mut ctx = ForwardCtx::new(&self.model.store, &["dis."], RunMode::Train);
        let real_id = tape.constant(real.clone());
        let fake_id = tape.constant(fake.clone());
        let pass = loss_gan(&mut tape, &mut ctx, &cfg, real_id, fake_id, self.sched.saturating_gan);
        let dis_loss = tape.scalar(pass.discriminator_term) as f64;
        self.check_finite(iteration, &[("dis", dis_loss)])?;
        let bindings: Vec<(String, TensorId)> =
            ctx.binder.grad_bindings().map(|(n, id)| (n.clone(), id)).collect();
        let bn_updates = std::mem::take(&mut ctx.bn_updates);
        drop(ctx);
        self.collect_and_step(&tape, pass.discriminator_term, bindings, bn_updates)?;
        Ok(dis_loss)
    }

    /// One phase-1 iteration; returns the logged loss terms.
    pub fn step_phase1(&mut self, corpus: &TrainCorpus) -> Result<LossRow, TrainError> {
        let cfg = self.model.cfg.clone();
        let w = self.weights.clone();
        let batch = corpus.sample_triplets(cfg.patch, self.sched.batch_size, &mut self.rng)?;
        let iteration = self.model.iteration;

        let mut grad_prefixes: Vec<&str> = vec!["enc.", "dec.", "ca."];
        if cfg.gfrm_trainable_smoothing {
            grad_prefixes.push("gfrm.");
        }
        let mut tape = Tape::new(true);
        let mut ctx = ForwardCtx::new(&self.model.store, &grad_prefixes, RunMode::Train);

        let x0 = tape.constant(batch.p0.clone());
        let xp = tape.constant(batch.pplus.clone());
        let xm = tape.constant(batch.pminus.clone());
        let enc0 = encode(&mut tape, &mut ctx, &cfg, x0)?;
        let dec = decode(&mut tape, &mut ctx, &cfg, enc0.latent, &enc0.skips())?;
        let encp = encode(&mut tape, &mut ctx, &cfg, xp)?;
        let encm = encode(&mut tape, &mut ctx, &cfg, xm)?;
        let (logit_p, _) = aux_classifier(&mut tape, &mut ctx, &cfg, encp.latent);
        let (logit_m, _) = aux_classifier(&mut tape, &mut ctx, &cfg, encm.latent);
        let l_lat = cmfm::latent_loss_batch(&mut tape, enc0.latent, encp.latent, logit_p, logit_m);

        let reg_names = reg_weight_names(&self.model.store);
        let reg_ids: Vec<TensorId> =
            reg_names.iter().map(|n| ctx.binder.param(&mut tape, &self.model.store, n)).collect();
        let l_rec = loss_rec(&mut tape, dec.recon, x0, &reg_ids, w.epsilon);

        let gan = loss_gan(&mut tape, &mut ctx, &cfg, x0, dec.recon, self.sched.saturating_gan);
        let l_adv = loss_adv(&mut tape, &gan, cfg.psi);

        let rec_t = tape.scale(l_rec, w.w_rec1 as f32);
        let adv_t = tape.scale(l_adv, w.w_adv1 as f32);
        let lat_t = tape.scale(l_lat, w.w_lat1 as f32);
        let partial = tape.add(rec_t, adv_t);
        let total = tape.add(partial, lat_t);

        let row = LossRow {
            iteration,
            phase: 1,
            total: tape.scalar(total) as f64,
            rec: tape.scalar(l_rec) as f64,
            adv: tape.scalar(l_adv) as f64,
            lat: tape.scalar(l_lat) as f64,
            dis: 0.0,
        };
        self.check_finite(iteration, &[("total", row.total), ("rec", row.rec), ("adv", row.adv), ("lat", row.lat)])?;

        let recon_value = tape.value(dec.recon).clone();
        let bindings: Vec<(String, TensorId)> =
            ctx.binder.grad_bindings().map(|(n, id)| (n.clone(), id)).collect();
        let bn_updates = std::mem::take(&mut ctx.bn_updates);
        drop(ctx);
        self.collect_and_step(&tape, total, bindings, bn_updates)?;
        drop(tape);

        let dis = self.discriminator_step(&batch.p0, &recon_value, iteration)?;
        let row = LossRow { dis, ..row };
        self.model.iteration += 1;
        Ok(row)
    }

    /// One phase-2 iteration: encoder and bank frozen, decoder and
    /// addressing network trained on (synthetic -> clean) restoration.
    pub fn step_phase2(&mut self, corpus: &TrainCorpus) -> Result<LossRow, TrainError> {
        let bank = self.model.bank.as_ref().ok_or(TrainError::MissingBank)?;
        let bank_entries = bank.entries().clone().into_dyn();
        let cfg = self.model.cfg.clone();
        let w = self.weights.clone();
        let batch = corpus.sample_pairs(cfg.patch, self.sched.batch_size, &mut self.rng)?;
        let iteration = self.model.iteration;

        let mut grad_prefixes: Vec<&str> = vec!["dec.", "an."];
        if cfg.gfrm_trainable_smoothing {
            grad_prefixes.push("gfrm.");
        }
        let mut tape = Tape::new(true);
        // Frozen encoder runs in evaluation mode so its normalization
        // buffers stay bit-identical across phase 2.
        let mut ctx_enc = ForwardCtx::new(&self.model.store, &[], RunMode::Eval);
        let mut ctx = ForwardCtx::new(&self.model.store, &grad_prefixes, RunMode::Train);

        let x_clean = tape.constant(batch.clean.clone());
        let x_syn = tape.constant(batch.synthetic.clone());
        let enc = encode(&mut tape, &mut ctx_enc, &cfg, x_syn)?;
        let q = addressing(&mut tape, &mut ctx, &cfg, enc.latent);
        let m = tape.constant(bank_entries);
        let zhat = cmfm::substitute_graph(&mut tape, q, m);
        let dec = decode(&mut tape, &mut ctx, &cfg, zhat, &enc.skips())?;

        let reg_names = reg_weight_names(&self.model.store);
        let reg_ids: Vec<TensorId> =
            reg_names.iter().map(|n| ctx.binder.param(&mut tape, &self.model.store, n)).collect();
        let l_rec = loss_rec(&mut tape, dec.recon, x_clean, &reg_ids, w.epsilon);

        let gan = loss_gan(&mut tape, &mut ctx, &cfg, x_clean, dec.recon, self.sched.saturating_gan);
        let l_adv = loss_adv(&mut tape, &gan, cfg.psi);

        let rec_t = tape.scale(l_rec, w.w_rec2 as f32);
        let adv_t = tape.scale(l_adv, w.w_adv2 as f32);
        let total = tape.add(rec_t, adv_t);

        let row = LossRow {
            iteration,
            phase: 2,
            total: tape.scalar(total) as f64,
            rec: tape.scalar(l_rec) as f64,
            adv: tape.scalar(l_adv) as f64,
            lat: 0.0,
            dis: 0.0,
        };
        self.check_finite(iteration, &[("total", row.total), ("rec", row.rec), ("adv", row.adv)])?;

        let recon_value = tape.value(dec.recon).clone();
        let bindings: Vec<(String, TensorId)> =
            ctx.binder.grad_bindings().map(|(n, id)| (n.clone(), id)).collect();
        let bn_updates = std::mem::take(&mut ctx.bn_updates);
        drop(ctx);
        self.collect_and_step(&tape, total, bindings, bn_updates)?;
        drop(tape);

        let dis = self.discriminator_step(&batch.clean, &recon_value, iteration)?;
        let row = LossRow { dis, ..row };
        self.model.iteration += 1;
        Ok(row)
    }

    fn maybe_checkpoint(&self) -> Result<(), TrainError> {
        if let (Some(every), Some(dir)) = (self.sched.checkpoint_every, &self.checkpoint_dir) {
            if every > 0 && self.model.iteration.is_multiple_of(every) {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("ckpt_{:08}.fmrc", self.model.iteration));
                self.model.save(&path)?;
            }
        }
        Ok(())
    }

    pub fn train_phase1(&mut self, corpus: &TrainCorpus) -> Result<(), TrainError> {
        self.model.phase = PhaseMarker::Phase1;
        for _ in 0..self.sched.t1 {
            let row = self.step_phase1(corpus)?;
            if self.sched.log_every > 0 && row.iteration % self.sched.log_every == 0 {
                self.log.push(row);
            }
            self.maybe_checkpoint()?;
        }
        Ok(())
    }

    pub fn train_phase2(&mut self, corpus: &TrainCorpus) -> Result<(), TrainError> {
        if self.model.bank.is_none() {
            return Err(TrainError::MissingBank);
        }
        self.model.phase = PhaseMarker::Phase2;
        for _ in 0..self.sched.t2 {
            let row = self.step_phase2(corpus)?;
            if self.sched.log_every > 0 && row.iteration % self.sched.log_every == 0 {
                self.log.push(row);
            }
            self.maybe_checkpoint()?;
        }
        Ok(())
    }

    /// Writes the scalar loss log as CSV.
    pub fn write_log_csv(&self, path: &std::path::Path) -> Result<(), TrainError> {
        let mut out = String::from("iteration,phase,total,rec,adv,lat,dis\n");
        for r in &self.log {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.iteration, r.phase, r.total, r.rec, r.adv, r.lat, r.dis
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Encodes every grid-aligned training patch with the frozen encoder, runs
/// k-means and installs the memory bank (plus the patch-score calibration
/// used by the early-exit policy).
pub fn establish_memory(
    model: &mut Model,
    corpus: &TrainCorpus,
    seed: u64,
    calibration_margin: f32,
) -> Result<(), TrainError> {
    let patches = corpus.grid_patches(model.cfg.patch)?;
    if patches.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let c = patches[0].dim().0;
    let p = model.cfg.patch;
    let mut latents = ndarray::Array2::<f32>::zeros((patches.len(), model.cfg.latent_dim()));
    let chunk = 64;
    for (start, group) in patches.chunks(chunk).enumerate().map(|(i, g)| (i * chunk, g)) {
        let mut batch = Array4::<f32>::zeros((group.len(), c, p, p));
        for (i, pt) in group.iter().enumerate() {
            batch.index_axis_mut(ndarray::Axis(0), i).assign(pt);
        }
        let z = model.encode_eval(&batch.into_dyn())?;
        latents.slice_mut(ndarray::s![start..start + group.len(), ..]).assign(&z);
    }
    let fingerprint = model.encoder_digest();
    let bank = MemoryBank::establish(&latents, model.cfg.memory_entries, seed, fingerprint)?;
    let mut max_score = 0.0f32;
    for row in latents.rows() {
        let s = cmfm::patch_anomaly_score(row, &bank)?;
        if s > max_score {
            max_score = s;
        }
    }
    model.patch_threshold = Some(max_score * (1.0 + calibration_margin));
    model.bank = Some(bank);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{Colorspace, Image};
    use crate::tensor::testutil::{fd_check, rand_arr};
    use ndarray::Array3;

    fn micro_cfg() -> ArchConfig {
        ArchConfig {
            in_channels: 1,
            patch: 8,
            blocks: 2,
            base_channels: 4,
            max_channels: 64,
            ca_widths: vec![8, 1],
            an_hidden: 8,
            memory_entries: 4,
            gfrm_levels: vec![1],
            perceptual_blocks: vec![1, 2],
            ..ArchConfig::full()
        }
    }

    fn constant_corpus(n: usize, v: f32) -> TrainCorpus {
        let images = (0..n)
            .map(|_| Image::new(Array3::from_elem((8, 8, 1), v), Colorspace::Grayscale).unwrap())
            .collect();
        TrainCorpus { images, synth: SynthConfig::default(), pool: SourcePool::Procedural }
    }

    fn micro_trainer(weights: LossWeights, seed: u64) -> Trainer {
        let model = Model::init(micro_cfg(), seed).unwrap();
        let sched = TrainingSchedule {
            t1: 1,
            t2: 1,
            batch_size: 4,
            seed,
            log_every: 1,
            ..TrainingSchedule::default()
        };
        Trainer::new(model, weights, sched)
    }

    #[test]
    fn loss_rec_hand_cases() {
        // Identical tensors, zero weights -> 0; single-pixel case -> 0.16.
        let mut tape = Tape::<f64>::new(false);
        let a = tape.constant(crate::tensor::arr0(0.2));
        let b = tape.constant(crate::tensor::arr0(0.6));
        let l = loss_rec(&mut tape, a, b, &[], 0.0);
        assert!((tape.scalar(l) - 0.16).abs() < 1e-12);
        let l0 = loss_rec(&mut tape, a, a, &[], 0.0);
        assert_eq!(tape.scalar(l0), 0.0);
    }

    #[test]
    fn loss_rec_regularizer_matches_hand_sum() {
        let mut tape = Tape::<f64>::new(false);
        let a = tape.constant(crate::tensor::arr0(1.0));
        let w1 = tape.constant(ndarray::array![[3.0, 4.0]].into_dyn()); // frob 5
        let w2 = tape.constant(ndarray::array![[1.0, 2.0], [2.0, 0.0]].into_dyn()); // frob 3
        let l = loss_rec(&mut tape, a, a, &[w1, w2], 0.5);
        assert!((tape.scalar(l) - 0.5 * (5.0 + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn gan_terms_hand_cases() {
        // D = 0.5 on both: each log term is ln 0.5, dis = -2 ln 0.5 = 2 ln 2.
        let mut tape = Tape::<f64>::new(false);
        let zero = tape.constant(ndarray::array![[0.0]].into_dyn()); // sigmoid(0) = 0.5
        let (gen, dis) = gan_terms(&mut tape, zero, zero, false);
        assert!((tape.scalar(dis) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((tape.scalar(gen) - std::f64::consts::LN_2).abs() < 1e-12);
        // Perfect discriminator: dis objective approaches 0 from above
        // (negated maximization).
        let big = tape.constant(ndarray::array![[30.0]].into_dyn());
        let small = tape.constant(ndarray::array![[-30.0]].into_dyn());
        let (_, dis) = gan_terms(&mut tape, big, small, false);
        assert!(tape.scalar(dis) < 1e-9);
        // Saturating generator term: E[log(1 - D(fake))].
        let (gen_sat, _) = gan_terms(&mut tape, zero, zero, true);
        assert!((tape.scalar(gen_sat) + std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perceptual_hand_case_and_reference() {
        // Constant difference 1 over 8 elements, psi = 1/2 -> 4.
        let mut tape = Tape::<f64>::new(false);
        let a = tape.constant(ArrayD::zeros(ndarray::IxDyn(&[1, 2, 2, 2])));
        let b = tape.constant(ArrayD::ones(ndarray::IxDyn(&[1, 2, 2, 2])));
        let l = loss_perceptual(&mut tape, &[(3, a)], &[(3, b)], 0.5);
        assert!((tape.scalar(l) - 4.0).abs() < 1e-12);

        // Random tensors against a brute-force loop.
        let fa = rand_arr(&[2, 3, 2, 2], 41);
        let fb = rand_arr(&[2, 3, 2, 2], 42);
        let ga = rand_arr(&[2, 2, 1, 1], 43);
        let gb = rand_arr(&[2, 2, 1, 1], 44);
        let mut want = 0.0;
        for (x, y) in fa.iter().zip(fb.iter()) {
            want += 0.5 * (x - y).abs() / 2.0;
        }
        for (x, y) in ga.iter().zip(gb.iter()) {
            want += 0.5 * (x - y).abs() / 2.0;
        }
        let ia = tape.constant(fa);
        let ib = tape.constant(fb);
        let ja = tape.constant(ga);
        let jb = tape.constant(gb);
        let l = loss_perceptual(&mut tape, &[(3, ia), (4, ja)], &[(3, ib), (4, jb)], 0.5);
        assert!((tape.scalar(l) - want).abs() < 1e-9);
    }

    #[test]
    fn loss_gradients_match_fd() {
        // L_rec with the Frobenius penalty.
        let recon = rand_arr(&[2, 6], 45);
        let target = rand_arr(&[2, 6], 46);
        let wmat = rand_arr(&[3, 2], 47);
        fd_check(&[recon, target.clone(), wmat], 1e-5, |t, ids| {
            loss_rec(t, ids[0], ids[1], &[ids[2]], 0.3)
        });
        // Perceptual.
        let fr = rand_arr(&[2, 2, 2, 2], 48);
        let ff = rand_arr(&[2, 2, 2, 2], 49);
        fd_check(&[fr, ff], 1e-5, |t, ids| {
            loss_perceptual(t, &[(3, ids[0])], &[(3, ids[1])], 0.5)
        });
        // GAN terms.
        let lr = rand_arr(&[3, 1], 50);
        let lf = rand_arr(&[3, 1], 51);
        fd_check(&[lr.clone(), lf.clone()], 1e-6, |t, ids| {
            let (_, dis) = gan_terms(t, ids[0], ids[1], false);
            dis
        });
        fd_check(&[lr, lf], 1e-6, |t, ids| {
            let (gen, _) = gan_terms(t, ids[0], ids[1], false);
            gen
        });
    }

    #[test]
    fn first_iteration_is_seed_reproducible() {
        let corpus = constant_corpus(4, 0.5);
        let mut a = micro_trainer(LossWeights::default(), 7);
        let mut b = micro_trainer(LossWeights::default(), 7);
        let ra = a.step_phase1(&corpus).unwrap();
        let rb = b.step_phase1(&corpus).unwrap();
        assert_eq!(ra.total.to_bits(), rb.total.to_bits());
        assert_eq!(ra.dis.to_bits(), rb.dis.to_bits());
    }

    #[test]
    fn phase1_loss_decreases_on_constant_corpus() {
        let corpus = constant_corpus(4, 0.5);
        let mut tr = micro_trainer(LossWeights::default(), 1);
        let first = tr.step_phase1(&corpus).unwrap().total;
        let mut last = first;
        for _ in 0..199 {
            last = tr.step_phase1(&corpus).unwrap().total;
        }
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn pure_reconstruction_reaches_low_mse() {
        let corpus = constant_corpus(4, 0.5);
        let weights = LossWeights { w_adv1: 0.0, w_lat1: 0.0, epsilon: 0.0, ..LossWeights::default() };
        let mut tr = micro_trainer(weights, 2);
        let mut rec = f64::INFINITY;
        for _ in 0..2000 {
            rec = tr.step_phase1(&corpus).unwrap().rec;
            if rec < 1e-3 {
                break;
            }
        }
        assert!(rec < 1e-3, "reconstruction MSE stayed at {rec}");
    }

    #[test]
    fn phase2_freezes_encoder_and_bank() {
        let corpus = constant_corpus(4, 0.5);
        let mut tr = micro_trainer(LossWeights::default(), 3);
        for _ in 0..3 {
            tr.step_phase1(&corpus).unwrap();
        }
        establish_memory(&mut tr.model, &corpus, 0, 0.1).unwrap();
        let enc_digest = tr.model.encoder_digest();
        let bank_digest = tr.model.bank.as_ref().unwrap().digest();
        let ca_digest = tr.model.store.digest(&["ca."]);
        let dec_digest = tr.model.store.digest(&["dec."]);
        for _ in 0..5 {
            tr.step_phase2(&corpus).unwrap();
        }
        assert_eq!(enc_digest, tr.model.encoder_digest(), "encoder changed in phase 2");
        assert_eq!(bank_digest, tr.model.bank.as_ref().unwrap().digest(), "bank changed");
        assert_eq!(ca_digest, tr.model.store.digest(&["ca."]), "classifier changed in phase 2");
        assert_ne!(dec_digest, tr.model.store.digest(&["dec."]), "decoder did not train");
    }

    #[test]
    fn phase1_updates_exactly_its_module_set() {
        let corpus = constant_corpus(4, 0.5);
        let mut tr = micro_trainer(LossWeights::default(), 4);
        let an_digest = tr.model.store.digest(&["an."]);
        let enc_digest = tr.model.encoder_digest();
        let dis_digest = tr.model.store.digest(&["dis."]);
        tr.step_phase1(&corpus).unwrap();
        assert_eq!(an_digest, tr.model.store.digest(&["an."]), "addressing net touched in phase 1");
        assert_ne!(enc_digest, tr.model.encoder_digest());
        assert_ne!(dis_digest, tr.model.store.digest(&["dis."]));
    }

    #[test]
    fn adversarial_gradients_reach_generator_only_through_reconstruction() {
        // With the reconstruction and latent weights zeroed, the only path
        // from the phase-1 loss into the generator is the adversarial term
        // through I_rec; the classifier sees zero gradient.
        let corpus = constant_corpus(4, 0.5);
        let weights = LossWeights { w_rec1: 0.0, w_lat1: 0.0, epsilon: 0.0, ..LossWeights::default() };
        let mut tr = micro_trainer(weights, 8);
        let dec = tr.model.store.digest(&["dec."]);
        let enc = tr.model.encoder_digest();
        let ca = tr.model.store.digest(&["ca."]);
        tr.step_phase1(&corpus).unwrap();
        assert_ne!(dec, tr.model.store.digest(&["dec."]), "no gradient reached the decoder");
        assert_ne!(enc, tr.model.encoder_digest(), "no gradient reached the encoder");
        assert_eq!(ca, tr.model.store.digest(&["ca."]), "classifier moved without latent loss");
    }

    #[test]
    fn phase2_restoration_error_decreases() {
        let corpus = constant_corpus(4, 0.5);
        let mut tr = micro_trainer(LossWeights::default(), 9);
        for _ in 0..5 {
            tr.step_phase1(&corpus).unwrap();
        }
        establish_memory(&mut tr.model, &corpus, 0, 0.1).unwrap();
        let mut first = 0.0;
        let mut last = 0.0;
        for i in 0..60 {
            let row = tr.step_phase2(&corpus).unwrap();
            if i < 5 {
                first += row.rec / 5.0;
            }
            if i >= 55 {
                last += row.rec / 5.0;
            }
        }
        assert!(last < first, "phase-2 reconstruction error did not decrease: {first} -> {last}");
    }

    #[test]
    fn periodic_checkpoints_are_emitted() {
        let corpus = constant_corpus(2, 0.5);
        let dir = tempfile::tempdir().unwrap();
        let model = Model::init(micro_cfg(), 10).unwrap();
        let sched = TrainingSchedule {
            t1: 4,
            batch_size: 2,
            seed: 10,
            log_every: 1,
            checkpoint_every: Some(2),
            ..TrainingSchedule::default()
        };
        let mut tr = Trainer::new(model, LossWeights::default(), sched);
        tr.checkpoint_dir = Some(dir.path().to_path_buf());
        tr.train_phase1(&corpus).unwrap();
        let count = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(count, 2, "expected checkpoints at iterations 2 and 4");
        let ckpt = dir.path().join("ckpt_00000002.fmrc");
        let loaded = Model::load(&ckpt, Some(&micro_cfg())).unwrap();
        assert_eq!(loaded.iteration, 2);
    }

    #[test]
    fn phase2_without_bank_errors() {
        let corpus = constant_corpus(2, 0.5);
        let mut tr = micro_trainer(LossWeights::default(), 5);
        assert!(matches!(tr.step_phase2(&corpus), Err(TrainError::MissingBank)));
    }

    #[test]
    fn memory_establishment_calibrates_threshold() {
        let corpus = constant_corpus(8, 0.5);
        let mut tr = micro_trainer(LossWeights::default(), 6);
        tr.step_phase1(&corpus).unwrap();
        establish_memory(&mut tr.model, &corpus, 0, 0.1).unwrap();
        let bank = tr.model.bank.as_ref().unwrap();
        assert_eq!(bank.len(), 4);
        assert_eq!(bank.encoder_fingerprint(), tr.model.encoder_digest());
        assert!(tr.model.patch_threshold.is_some());
    }
}
