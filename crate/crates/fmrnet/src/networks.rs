//! The five trainable subnetworks as layer graphs: encoder, decoder,
//! discriminator, auxiliary classifier and addressing network, plus
//! checkpoint persistence.
//!
//! Every downsampling block is conv(4x4, stride 2, pad 1) -> batch norm ->
//! leaky ReLU(0.2); upsampling blocks mirror it with transposed convolutions.
//! The discriminator shares the encoder topology and adds a global sigmoid
//! head. The classifier and addressing network are small fully connected
//! stacks on the flattened per-patch latent vector.

use crate::cmfm::MemoryBank;
use crate::gfrm;
use crate::tensor::optim::{Binder, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tape, TensorId};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("patch side {patch} with {blocks} blocks leaves latent side {latent_side} (need an integer >= 2)")]
    BadPatchShape { patch: usize, blocks: usize, latent_side: usize },
    #[error("invalid architecture: {0}")]
    BadConfig(String),
    #[error("input shape {got:?} does not match configured {want:?}")]
    BadInputShape { got: Vec<usize>, want: Vec<usize> },
    #[error("decoder is missing the skip feature map for level {level}")]
    MissingSkip { level: usize },
    #[error("checkpoint config hash {found:#x} does not match expected {expected:#x}")]
    ConfigMismatch { expected: u64, found: u64 },
    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters shared by every subnetwork.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub in_channels: usize,
    /// Square patch side fed to the encoder.
    pub patch: usize,
    pub blocks: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Fully connected widths of the auxiliary classifier (last must be 1).
    pub ca_widths: Vec<usize>,
    /// Hidden width of the addressing network (output width is `memory_entries`).
    pub an_hidden: usize,
    /// Memory bank size L.
    pub memory_entries: usize,
    /// Texton side K.
    pub texton_size: usize,
    /// Encoder/decoder skip levels carrying a rearrangement module.
    pub gfrm_levels: Vec<usize>,
    /// Discriminator blocks whose activations feed the perceptual loss.
    pub perceptual_blocks: Vec<usize>,
    /// Per-layer perceptual weight.
    pub psi: f64,
    /// Train the 3x3 smoothing kernels instead of fixing them.
    pub gfrm_trainable_smoothing: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig::full()
    }
}

impl ArchConfig {
    /// Full-scale preset: five blocks on 64x64 patches, 512-entry memory.
    pub fn full() -> Self {
        ArchConfig {
            in_channels: 1,
            patch: 64,
            blocks: 5,
            base_channels: 64,
            max_channels: 512,
            kernel: 4,
            stride: 2,
            leaky_slope: 0.2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            ca_widths: vec![512, 256, 1],
            an_hidden: 256,
            memory_entries: 512,
            texton_size: 2,
            gfrm_levels: vec![3, 4],
            perceptual_blocks: vec![3, 4],
            psi: 0.5,
            gfrm_trainable_smoothing: false,
        }
    }

    /// Desk-scale preset: three blocks on 32x32 patches, small widths; fast
    /// enough for end-to-end tests on a laptop CPU.
    pub fn desk() -> Self {
        ArchConfig {
            in_channels: 1,
            patch: 32,
            blocks: 3,
            base_channels: 16,
            max_channels: 512,
            ca_widths: vec![128, 64, 1],
            an_hidden: 128,
            memory_entries: 64,
            gfrm_levels: vec![1, 2],
            perceptual_blocks: vec![2, 3],
            ..ArchConfig::full()
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let down = 1usize << self.blocks;
        if !self.patch.is_multiple_of(down) || self.patch / down < 2 {
            return Err(NetworkError::BadPatchShape {
                patch: self.patch,
                blocks: self.blocks,
                latent_side: self.patch / down,
            });
        }
        if self.blocks < 2 {
            return Err(NetworkError::BadConfig("need at least 2 blocks".into()));
        }
        if self.ca_widths.last() != Some(&1) {
            return Err(NetworkError::BadConfig("classifier output width must be 1".into()));
        }
        if self.gfrm_levels.iter().any(|&l| l == 0 || l >= self.blocks) {
            return Err(NetworkError::BadConfig(format!(
                "gfrm levels {:?} must lie in 1..{}",
                self.gfrm_levels, self.blocks
            )));
        }
        if self.perceptual_blocks.iter().any(|&l| l == 0 || l > self.blocks) {
            return Err(NetworkError::BadConfig(format!(
                "perceptual blocks {:?} must lie in 1..={}",
                self.perceptual_blocks, self.blocks
            )));
        }
        for &l in &self.gfrm_levels {
            let side = self.patch >> l;
            if !side.is_multiple_of(self.texton_size) {
                return Err(NetworkError::BadConfig(format!(
                    "skip level {l} side {side} not divisible by texton size {}",
                    self.texton_size
                )));
            }
        }
        Ok(())
    }

    /// Output channels of encoder block `l` (1-indexed).
    pub fn enc_channels(&self, l: usize) -> usize {
        (self.base_channels << (l - 1)).min(self.max_channels)
    }

    pub fn latent_side(&self) -> usize {
        self.patch >> self.blocks
    }

    pub fn latent_channels(&self) -> usize {
        self.enc_channels(self.blocks)
    }

    /// Flattened per-patch latent vector length.
    pub fn latent_dim(&self) -> usize {
        self.latent_channels() * self.latent_side() * self.latent_side()
    }

    fn has_gfrm(&self, level: usize) -> bool {
        self.gfrm_levels.contains(&level)
    }

    /// Input channels of decoder upblock `u` (consumes the level-`u` map,
    /// doubled when a rearranged map is concatenated).
    pub fn dec_in_channels(&self, u: usize) -> usize {
        let base = self.enc_channels(u);
        if self.has_gfrm(u) {
            base * 2
        } else {
            base
        }
    }

    /// Output channels of decoder upblock `u`.
    pub fn dec_out_channels(&self, u: usize) -> usize {
        if u >= 2 {
            self.enc_channels(u - 1)
        } else {
            self.in_channels
        }
    }

    /// Fingerprint of the canonical JSON form; checkpoints refuse to load
    /// under a different hash.
    pub fn config_hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::fnv1a64(json.into_bytes())
    }
}

fn normal_draw<T: Scalar>(rng: &mut ChaCha12Rng, std: f64) -> T {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    T::from_f64((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std)
}

fn normal_tensor<T: Scalar>(rng: &mut ChaCha12Rng, shape: &[usize], std: f64) -> ArrayD<T> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal_draw(rng, std))
}

const INIT_STD: f64 = 0.02;

fn insert_bn<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.g"), ParamKind::Norm, ArrayD::ones(IxDyn(&[c])));
    store.insert(format!("{prefix}.b"), ParamKind::Norm, ArrayD::zeros(IxDyn(&[c])));
    store.insert(format!("{prefix}.rm"), ParamKind::Buffer, ArrayD::zeros(IxDyn(&[c])));
    store.insert(format!("{prefix}.rv"), ParamKind::Buffer, ArrayD::ones(IxDyn(&[c])));
}

/// Fresh parameter set: conv and FC weights ~ N(0, 0.02), zero biases, unit
/// batch-norm scale. Deterministic under the seed.
pub fn init_params<T: Scalar>(cfg: &ArchConfig, seed: u64) -> Result<ParamStore<T>, NetworkError> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let k = cfg.kernel;

    for module in ["enc", "dis"] {
        let mut in_c = cfg.in_channels;
        for l in 1..=cfg.blocks {
            let out_c = cfg.enc_channels(l);
            store.insert(
                format!("{module}.b{l}.conv.w"),
                ParamKind::Weight,
                normal_tensor(&mut rng, &[out_c, in_c, k, k], INIT_STD),
            );
            store.insert(
                format!("{module}.b{l}.conv.b"),
                ParamKind::Bias,
                ArrayD::zeros(IxDyn(&[out_c])),
            );
            insert_bn(&mut store, &format!("{module}.b{l}.bn"), out_c);
            in_c = out_c;
        }
    }
    store.insert(
        "dis.head.w",
        ParamKind::Weight,
        normal_tensor(&mut rng, &[cfg.latent_dim(), 1], INIT_STD),
    );
    store.insert("dis.head.b", ParamKind::Bias, ArrayD::zeros(IxDyn(&[1])));

    for u in (1..=cfg.blocks).rev() {
        let in_c = cfg.dec_in_channels(u);
        let out_c = cfg.dec_out_channels(u);
        store.insert(
            format!("dec.b{u}.conv.w"),
            ParamKind::Weight,
            normal_tensor(&mut rng, &[in_c, out_c, k, k], INIT_STD),
        );
        store.insert(format!("dec.b{u}.conv.b"), ParamKind::Bias, ArrayD::zeros(IxDyn(&[out_c])));
        if u >= 2 {
            insert_bn(&mut store, &format!("dec.b{u}.bn"), out_c);
        }
    }

    let mut prev = cfg.latent_dim();
    for (i, &width) in cfg.ca_widths.iter().enumerate() {
        store.insert(
            format!("ca.l{i}.w"),
            ParamKind::Weight,
            normal_tensor(&mut rng, &[prev, width], INIT_STD),
        );
        store.insert(format!("ca.l{i}.b"), ParamKind::Bias, ArrayD::zeros(IxDyn(&[width])));
        prev = width;
    }

    store.insert(
        "an.l0.w",
        ParamKind::Weight,
        normal_tensor(&mut rng, &[cfg.latent_dim(), cfg.an_hidden], INIT_STD),
    );
    store.insert("an.l0.b", ParamKind::Bias, ArrayD::zeros(IxDyn(&[cfg.an_hidden])));
    store.insert(
        "an.l1.w",
        ParamKind::Weight,
        normal_tensor(&mut rng, &[cfg.an_hidden, cfg.memory_entries], INIT_STD),
    );
    store.insert("an.l1.b", ParamKind::Bias, ArrayD::zeros(IxDyn(&[cfg.memory_entries])));

    if cfg.gfrm_trainable_smoothing {
        for &l in &cfg.gfrm_levels {
            store.insert(
                format!("gfrm.l{l}.smooth.w"),
                ParamKind::Weight,
                ArrayD::from_elem(IxDyn(&[3, 3]), T::from_f64(1.0 / 9.0)),
            );
        }
    }

    Ok(store)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Eval,
}

/// Per-pass context: parameter bindings, run mode and collected batch-norm
/// statistics (to be folded into the running buffers by the trainer).
pub struct ForwardCtx<'a, T: Scalar> {
    pub store: &'a ParamStore<T>,
    pub binder: Binder,
    pub mode: RunMode,
    pub bn_updates: Vec<(String, Array1<T>, Array1<T>)>,
}

impl<'a, T: Scalar> ForwardCtx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, grad_prefixes: &[&str], mode: RunMode) -> Self {
        ForwardCtx { store, binder: Binder::new(grad_prefixes), mode, bn_updates: Vec::new() }
    }

    fn param(&mut self, tape: &mut Tape<T>, name: &str) -> TensorId {
        self.binder.param(tape, self.store, name)
    }

    fn buffer1(&self, name: &str) -> Array1<T> {
        self.store
            .get(name)
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("buffer is 1-d")
            .to_owned()
    }

    fn batchnorm(&mut self, tape: &mut Tape<T>, x: TensorId, prefix: &str, eps: f64) -> TensorId {
        match self.mode {
            RunMode::Train => {
                let g = self.param(tape, &format!("{prefix}.g"));
                let b = self.param(tape, &format!("{prefix}.b"));
                let (y, mean, var) = tape.batchnorm_train(x, g, b, T::from_f64(eps));
                self.bn_updates.push((prefix.to_string(), mean, var));
                y
            }
            RunMode::Eval => {
                let gamma = self.buffer1(&format!("{prefix}.g"));
                let beta = self.buffer1(&format!("{prefix}.b"));
                let rm = self.buffer1(&format!("{prefix}.rm"));
                let rv = self.buffer1(&format!("{prefix}.rv"));
                let eps = T::from_f64(eps);
                let a = Array1::from_shape_fn(gamma.len(), |i| gamma[i] / (rv[i] + eps).sqrt());
                let b = Array1::from_shape_fn(gamma.len(), |i| beta[i] - rm[i] * a[i]);
                tape.channel_affine(x, a, b)
            }
        }
    }
}

/// Latent code plus the per-block activation maps retained for skip
/// pathways and the rearrangement modules.
pub struct EncoderOut {
    /// `[N, latent_dim]` flattened per-patch codes.
    pub latent: TensorId,
    /// Post-activation map of each block, `feats[l-1]` for block `l`.
    pub feats: Vec<TensorId>,
}

impl EncoderOut {
    /// Skip maps in the `Option` form the decoder consumes.
    pub fn skips(&self) -> Vec<Option<TensorId>> {
        self.feats.iter().map(|&f| Some(f)).collect()
    }
}

fn backbone<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut ForwardCtx<'_, T>,
    cfg: &ArchConfig,
    x: TensorId,
    module: &str,
) -> EncoderOut {
    let mut cur = x;
    let mut feats = Vec::with_capacity(cfg.blocks);
    for l in 1..=cfg.blocks {
        let w = ctx.param(tape, &format!("{module}.b{l}.conv.w"));
        let b = ctx.param(tape, &format!("{module}.b{l}.conv.b"));
        let conv = tape.conv2d(cur, w, b, cfg.stride, 1);
        let normed = ctx.batchnorm(tape, conv, &format!("{module}.b{l}.bn"), cfg.bn_eps);
        cur = tape.leaky_relu(normed, T::from_f64(cfg.leaky_slope));
        feats.push(cur);
    }
    let n = tape.shape(x)[0];
    let latent = tape.reshape(cur, &[n, cfg.latent_dim()]);
    EncoderOut { latent, feats }
}

/// Encoder forward over a `[N, C, P, P]` batch.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut ForwardCtx<'_, T>,
    cfg: &ArchConfig,
    x: TensorId,
) -> Result<EncoderOut, NetworkError> {
    cfg.validate()?;
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != cfg.in_channels || shape[2] != cfg.patch || shape[3] != cfg.patch
    {
        return Err(NetworkError::BadInputShape {
            got: shape,
            want: vec![0, cfg.in_channels, cfg.patch, cfg.patch],
        });
    }
    Ok(backbone(tape, ctx, cfg, x, "enc"))
}

/// Decoder output: the reconstruction and the memory-generated intermediate
/// maps that fed each rearrangement module.
pub struct DecoderOut {
    /// `[N, C, P, P]`, sigmoid-squashed to `[0, 1]`.
    pub recon: TensorId,
    /// `(level, map)` pairs for the configured rearrangement levels.
    pub mem_maps: Vec<(usize, TensorId)>,
}

/// Decodes latents `[N, latent_dim]` into patches, editing each configured
/// skip level through the rearrangement module before concatenation.
/// `skips[l-1]` holds the level-`l` encoder map; only the rearrangement
/// levels need to be present.
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut ForwardCtx<'_, T>,
    cfg: &ArchConfig,
    z: TensorId,
    skips: &[Option<TensorId>],
) -> Result<DecoderOut, NetworkError> {
    let n = tape.shape(z)[0];
    let side = cfg.latent_side();
    let mut cur = tape.reshape(z, &[n, cfg.latent_channels(), side, side]);
    let mut mem_maps = Vec::new();
    for u in (1..=cfg.blocks).rev() {
        let mut input = cur;
        if cfg.has_gfrm(u) {
            let skip = skips
                .get(u - 1)
                .copied()
                .flatten()
                .ok_or(NetworkError::MissingSkip { level: u })?;
            mem_maps.push((u, cur));
            let (kern, renorm) = if cfg.gfrm_trainable_smoothing {
                (ctx.param(tape, &format!("gfrm.l{u}.smooth.w")), false)
            } else {
                (
                    tape.constant(ArrayD::from_elem(IxDyn(&[3, 3]), T::from_f64(1.0 / 9.0))),
                    true,
                )
            };
            let mut edited = Vec::with_capacity(n);
            for i in 0..n {
                let skip_i = tape.take_sample(skip, i);
                let mem_i = tape.take_sample(cur, i);
                edited.push(gfrm::gfrm_graph(tape, skip_i, mem_i, cfg.texton_size, kern, renorm));
            }
            let g = tape.stack_samples(&edited);
            input = tape.concat_channels(cur, g);
        }
        let w = ctx.param(tape, &format!("dec.b{u}.conv.w"));
        let b = ctx.param(tape, &format!("dec.b{u}.conv.b"));
        let convt = tape.conv_transpose2d(input, w, b, cfg.stride, 1);
        cur = if u >= 2 {
            let normed = ctx.batchnorm(tape, convt, &format!("dec.b{u}.bn"), cfg.bn_eps);
            tape.leaky_relu(normed, T::from_f64(cfg.leaky_slope))
        } else {
            tape.sigmoid(convt)
        };
    }
    Ok(DecoderOut { recon: cur, mem_maps })
}

/// Discriminator output: sigmoid score, pre-sigmoid logit and the
/// activation maps of the configured perceptual blocks.
pub struct DiscriminatorOut {
    pub score: TensorId,
    pub logit: TensorId,
    /// `(block, activation map)` pairs.
    pub feats: Vec<(usize, TensorId)>,
}

pub fn discriminate<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut ForwardCtx<'_, T>,
    cfg: &ArchConfig,
    x: TensorId,
) -> DiscriminatorOut {
    let out = backbone(tape, ctx, cfg, x, "dis");
    let w = ctx.param(tape, "dis.head.w");
    let b = ctx.param(tape, "dis.head.b");
    let logit = tape.matmul(out.latent, w);
    let logit = tape.add_bias_cols(logit, b);
    let score = tape.sigmoid(logit);
    let feats = cfg
        .perceptual_blocks
        .iter()
        .map(|&l| (l, out.feats[l - 1]))
        .collect();
    DiscriminatorOut { score, logit, feats }
}

/// Auxiliary classifier on flattened latents; returns `(logit, probability)`.
pub fn aux_classifier<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut ForwardCtx<'_, T>,
    cfg: &ArchConfig,
    z: TensorId,
) -> (TensorId, TensorId) {
    let mut cur = z;
    for i in 0..cfg.ca_widths.len() {
        let w = ctx.param(tape, &format!("ca.l{i}.w"));
        let b = ctx.param(tape, &format!("ca.l{i}.b"));
        cur = tape.matmul(cur, w);
        cur = tape.add_bias_cols(cur, b);
        if i + 1 < cfg.ca_widths.len() {
            cur = tape.leaky_relu(cur, T::from_f64(cfg.leaky_slope));
        }
    }
    let prob = tape.sigmoid(cur);
    (cur, prob)
}

/// Addressing network: affinity queries over the memory entries (softmax
/// rows, length L).
pub fn addressing<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut ForwardCtx<'_, T>,
    cfg: &ArchConfig,
    z: TensorId,
) -> TensorId {
    let w0 = ctx.param(tape, "an.l0.w");
    let b0 = ctx.param(tape, "an.l0.b");
    let h = tape.matmul(z, w0);
    let h = tape.add_bias_cols(h, b0);
    let h = tape.leaky_relu(h, T::from_f64(cfg.leaky_slope));
    let w1 = ctx.param(tape, "an.l1.w");
    let b1 = ctx.param(tape, "an.l1.b");
    let q = tape.matmul(h, w1);
    let q = tape.add_bias_cols(q, b1);
    tape.softmax_rows(q)
}

// ---- checkpoint container --------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseMarker {
    Phase1,
    Phase2,
}

/// JSON metadata block stored inside the checkpoint container.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub phase: PhaseMarker,
    pub iteration: u64,
    pub config_hash: u64,
    pub arch: ArchConfig,
    /// Digest of the encoder parameters the memory bank corresponds to.
    pub encoder_fingerprint: Option<u64>,
    /// Calibrated patch-level early-exit threshold.
    pub patch_threshold: Option<f32>,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMRC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Serializes all parameters (f32, little-endian) plus the metadata block
/// and optional memory bank. `load(save(x))` is bit-exact.
pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    store: &ParamStore<f32>,
    bank: Option<&MemoryBank<f32>>,
) -> Result<(), NetworkError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut f, CHECKPOINT_VERSION)?;
    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| NetworkError::CheckpointFormat(format!("meta encode: {e}")))?;
    write_u32(&mut f, meta_json.len() as u32)?;
    f.write_all(&meta_json)?;
    write_u32(&mut f, store.len() as u32)?;
    for (name, p) in store.iter() {
        let bytes = name.as_bytes();
        f.write_all(&(bytes.len() as u16).to_le_bytes())?;
        f.write_all(bytes)?;
        let kind = match p.kind {
            ParamKind::Weight => 0u8,
            ParamKind::Bias => 1,
            ParamKind::Norm => 2,
            ParamKind::Buffer => 3,
        };
        f.write_all(&[kind, p.value.ndim() as u8])?;
        for d in p.value.shape() {
            write_u32(&mut f, *d as u32)?;
        }
        for v in p.value.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    match bank {
        Some(b) => {
            f.write_all(&[1u8])?;
            f.write_all(&b.encoder_fingerprint().to_le_bytes())?;
            write_u32(&mut f, b.len() as u32)?;
            write_u32(&mut f, b.dim() as u32)?;
            for v in b.entries().iter() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        None => f.write_all(&[0u8])?,
    }
    Ok(())
}

/// Checkpoint contents: metadata, parameters and the optional memory bank.
pub type CheckpointContents = (CheckpointMeta, ParamStore<f32>, Option<MemoryBank<f32>>);

/// Loads a checkpoint, refusing on magic/version problems or (when an
/// expected configuration is supplied) on a config-hash mismatch.
pub fn load_checkpoint(
    path: &Path,
    expect: Option<&ArchConfig>,
) -> Result<CheckpointContents, NetworkError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NetworkError::CheckpointFormat("bad magic".into()));
    }
    let version = read_u32(&mut f)?;
    if version != CHECKPOINT_VERSION {
        return Err(NetworkError::CheckpointFormat(format!("unsupported version {version}")));
    }
    let meta_len = read_u32(&mut f)? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    f.read_exact(&mut meta_buf)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)
        .map_err(|e| NetworkError::CheckpointFormat(format!("meta decode: {e}")))?;
    if let Some(cfg) = expect {
        let expected = cfg.config_hash();
        if expected != meta.config_hash {
            return Err(NetworkError::ConfigMismatch { expected, found: meta.config_hash });
        }
    }
    let count = read_u32(&mut f)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let mut len_b = [0u8; 2];
        f.read_exact(&mut len_b)?;
        let mut name_b = vec![0u8; u16::from_le_bytes(len_b) as usize];
        f.read_exact(&mut name_b)?;
        let name = String::from_utf8(name_b)
            .map_err(|_| NetworkError::CheckpointFormat("non-utf8 name".into()))?;
        let mut kb = [0u8; 2];
        f.read_exact(&mut kb)?;
        let kind = match kb[0] {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::Norm,
            3 => ParamKind::Buffer,
            other => {
                return Err(NetworkError::CheckpointFormat(format!("bad kind {other}")));
            }
        };
        let ndim = kb[1] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(&mut f)? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = vec![0f32; numel];
        for v in &mut data {
            let mut b = [0u8; 4];
            f.read_exact(&mut b)?;
            *v = f32::from_le_bytes(b);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| NetworkError::CheckpointFormat(format!("tensor shape: {e}")))?;
        store.insert(name, kind, arr);
    }
    let mut flag = [0u8; 1];
    f.read_exact(&mut flag)?;
    let bank = if flag[0] == 1 {
        let mut fp = [0u8; 8];
        f.read_exact(&mut fp)?;
        let l = read_u32(&mut f)? as usize;
        let k = read_u32(&mut f)? as usize;
        let mut data = vec![0f32; l * k];
        for v in &mut data {
            let mut b = [0u8; 4];
            f.read_exact(&mut b)?;
            *v = f32::from_le_bytes(b);
        }
        let entries = ndarray::Array2::from_shape_vec((l, k), data)
            .map_err(|e| NetworkError::CheckpointFormat(format!("bank shape: {e}")))?;
        Some(MemoryBank::from_entries(entries, u64::from_le_bytes(fp)))
    } else {
        None
    };
    Ok((meta, store, bank))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, ArrayD};

    fn zeros_batch(cfg: &ArchConfig, n: usize) -> ArrayD<f32> {
        Array4::<f32>::zeros((n, cfg.in_channels, cfg.patch, cfg.patch)).into_dyn()
    }

    fn rand_batch(cfg: &ArchConfig, n: usize, seed: u64) -> ArrayD<f32> {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, cfg.in_channels, cfg.patch, cfg.patch), |_| {
            rng.random_range(0.0f32..1.0)
        })
        .into_dyn()
    }

    #[test]
    fn full_preset_latent_is_2x2() {
        let cfg = ArchConfig::full();
        assert_eq!(cfg.latent_side(), 2);
        assert_eq!(cfg.latent_channels(), 512);
        assert_eq!(cfg.latent_dim(), 2048);
        let store = init_params::<f32>(&cfg, 0).unwrap();
        let mut tape = Tape::new(false);
        let mut ctx = ForwardCtx::new(&store, &[], RunMode::Eval);
        let x = tape.leaf(rand_batch(&cfg, 1, 1), false);
        let out = encode(&mut tape, &mut ctx, &cfg, x).unwrap();
        assert_eq!(tape.shape(out.latent), &[1, 2048]);
        assert_eq!(tape.shape(out.feats[cfg.blocks - 1]), &[1, 512, 2, 2]);
    }

    #[test]
    fn indivisible_patch_is_an_error() {
        // 32x32 with 5 blocks leaves a 1x1 latent, below the 2x2 minimum.
        let cfg = ArchConfig { patch: 32, ..ArchConfig::full() };
        assert!(matches!(cfg.validate(), Err(NetworkError::BadPatchShape { latent_side: 1, .. })));
        let cfg = ArchConfig { patch: 48, ..ArchConfig::full() };
        assert!(matches!(cfg.validate(), Err(NetworkError::BadPatchShape { .. })));
    }

    #[test]
    fn zero_input_stays_finite() {
        let cfg = ArchConfig::desk();
        let store = init_params::<f32>(&cfg, 3).unwrap();
        let mut tape = Tape::new(false);
        let mut ctx = ForwardCtx::new(&store, &[], RunMode::Eval);
        let x = tape.leaf(zeros_batch(&cfg, 2), false);
        let out = encode(&mut tape, &mut ctx, &cfg, x).unwrap();
        assert!(tape.value(out.latent).iter().all(|v| v.is_finite()));
        let dec = decode(&mut tape, &mut ctx, &cfg, out.latent, &out.skips()).unwrap();
        assert!(tape.value(dec.recon).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn decode_inverts_encode_shape() {
        for cfg in [ArchConfig::desk(), ArchConfig { patch: 64, ..ArchConfig::desk() }] {
            let store = init_params::<f32>(&cfg, 4).unwrap();
            let mut tape = Tape::new(false);
            let mut ctx = ForwardCtx::new(&store, &[], RunMode::Eval);
            let xv = rand_batch(&cfg, 2, 5);
            let x = tape.leaf(xv.clone(), false);
            let enc = encode(&mut tape, &mut ctx, &cfg, x).unwrap();
            let dec = decode(&mut tape, &mut ctx, &cfg, enc.latent, &enc.skips()).unwrap();
            assert_eq!(tape.shape(dec.recon), xv.shape());
            // Output is sigmoid-squashed into [0,1].
            assert!(tape.value(dec.recon).iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(dec.mem_maps.len(), cfg.gfrm_levels.len());
        }
    }

    #[test]
    fn decode_without_required_skip_errors() {
        let cfg = ArchConfig::desk();
        let store = init_params::<f32>(&cfg, 20).unwrap();
        let mut tape = Tape::new(false);
        let mut ctx = ForwardCtx::new(&store, &[], RunMode::Eval);
        let x = tape.leaf(rand_batch(&cfg, 1, 21), false);
        let enc = encode(&mut tape, &mut ctx, &cfg, x).unwrap();
        let mut skips = enc.skips();
        skips[1] = None; // level 2 carries a rearrangement module
        assert!(matches!(
            decode(&mut tape, &mut ctx, &cfg, enc.latent, &skips),
            Err(NetworkError::MissingSkip { level: 2 })
        ));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = ArchConfig::desk();
        let store = init_params::<f32>(&cfg, 6).unwrap();
        let xv = rand_batch(&cfg, 1, 7);
        let run = |store: &ParamStore<f32>| {
            let mut tape = Tape::new(false);
            let mut ctx = ForwardCtx::new(store, &[], RunMode::Eval);
            let x = tape.leaf(xv.clone(), false);
            let d = discriminate(&mut tape, &mut ctx, &cfg, x);
            (
                tape.value(d.score).iter().cloned().collect::<Vec<f32>>(),
                d.feats
                    .iter()
                    .map(|(_, f)| tape.value(*f).iter().cloned().collect::<Vec<f32>>())
                    .collect::<Vec<_>>(),
            )
        };
        let (s1, f1) = run(&store);
        let (s2, f2) = run(&store);
        assert_eq!(s1, s2);
        assert_eq!(f1, f2);
        assert!(s1[0] > 0.0 && s1[0] < 1.0);
    }

    #[test]
    fn discriminator_exposes_configured_blocks() {
        let cfg = ArchConfig::full();
        let store = init_params::<f32>(&cfg, 8).unwrap();
        let mut tape = Tape::new(false);
        let mut ctx = ForwardCtx::new(&store, &[], RunMode::Eval);
        let x = tape.leaf(rand_batch(&cfg, 1, 9), false);
        let d = discriminate(&mut tape, &mut ctx, &cfg, x);
        let blocks: Vec<usize> = d.feats.iter().map(|(l, _)| *l).collect();
        assert_eq!(blocks, vec![3, 4]);
        assert_eq!(tape.shape(d.feats[0].1), &[1, 256, 8, 8]);
        assert_eq!(tape.shape(d.feats[1].1), &[1, 512, 4, 4]);
    }

    #[test]
    fn full_preset_memory_width_is_512() {
        let cfg = ArchConfig::full();
        assert_eq!(cfg.memory_entries, 512);
        assert_eq!(cfg.ca_widths, vec![512, 256, 1]);
    }

    #[test]
    fn classifier_and_addressing_shapes() {
        let cfg = ArchConfig::desk();
        let store = init_params::<f32>(&cfg, 10).unwrap();
        let mut tape = Tape::new(false);
        let mut ctx = ForwardCtx::new(&store, &[], RunMode::Eval);
        let z = tape.leaf(crate::tensor::testutil::rand_arr_f32(&[3, cfg.latent_dim()], 11), false);
        let (logit, prob) = aux_classifier(&mut tape, &mut ctx, &cfg, z);
        assert_eq!(tape.shape(logit), &[3, 1]);
        assert!(tape.value(prob).iter().all(|&v| v > 0.0 && v < 1.0));
        let q = addressing(&mut tape, &mut ctx, &cfg, z);
        assert_eq!(tape.shape(q), &[3, cfg.memory_entries]);
        for row in crate::tensor::to2(tape.value(q)).rows() {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        // Identical latents produce identical queries.
        let q2 = addressing(&mut tape, &mut ctx, &cfg, z);
        assert_eq!(tape.value(q), tape.value(q2));
    }

    #[test]
    fn bn_train_mode_collects_stats() {
        let cfg = ArchConfig::desk();
        let store = init_params::<f32>(&cfg, 12).unwrap();
        let mut tape = Tape::new(true);
        let mut ctx = ForwardCtx::new(&store, &["enc."], RunMode::Train);
        let x = tape.leaf(rand_batch(&cfg, 4, 13), false);
        let _ = encode(&mut tape, &mut ctx, &cfg, x).unwrap();
        assert_eq!(ctx.bn_updates.len(), cfg.blocks);
        assert!(ctx.bn_updates.iter().all(|(n, _, _)| n.starts_with("enc.")));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = ArchConfig::desk();
        let store = init_params::<f32>(&cfg, 14).unwrap();
        let bank = MemoryBank::from_entries(
            ndarray::Array2::from_shape_fn((4, cfg.latent_dim()), |(i, j)| {
                (i * 31 + j) as f32 * 0.01
            }),
            0xfeed,
        );
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            phase: PhaseMarker::Phase2,
            iteration: 123,
            config_hash: cfg.config_hash(),
            arch: cfg.clone(),
            encoder_fingerprint: Some(0xfeed),
            patch_threshold: Some(1.5),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fmrc");
        save_checkpoint(&path, &meta, &store, Some(&bank)).unwrap();
        let (meta2, store2, bank2) = load_checkpoint(&path, Some(&cfg)).unwrap();
        assert_eq!(meta2.phase, PhaseMarker::Phase2);
        assert_eq!(meta2.iteration, 123);
        assert_eq!(store.digest(&[""]), store2.digest(&[""]));
        let bank2 = bank2.unwrap();
        assert_eq!(bank.digest(), bank2.digest());
        assert_eq!(bank2.encoder_fingerprint(), 0xfeed);

        // Altered config must be refused.
        let other = ArchConfig { base_channels: 32, ..cfg.clone() };
        assert!(matches!(
            load_checkpoint(&path, Some(&other)),
            Err(NetworkError::ConfigMismatch { .. })
        ));
    }
}
