//! Unsupervised visual inspection of textured surfaces.
//!
//! The pipeline reconstructs a defect-free version of its input and localizes
//! defects by comparing the input against the reconstruction:
//!
//! * [`imaging`] — image I/O, dataset ingestion, sliding-window patching.
//! * [`synth`] — artificial synthetic defect generation (occlusion/destructive).
//! * [`tensor`] — a small reverse-mode autodiff engine the networks run on.
//! * [`networks`] — encoder/decoder/discriminator/classifier/addressing nets
//!   plus checkpoint persistence.
//! * [`cmfm`] — contrastive latent loss, k-means memory bank, affinity
//!   substitution and patch-level anomaly scores.
//! * [`gfrm`] — texton decomposition and global feature rearrangement on the
//!   skip pathways.
//! * [`training`] — the loss stack and the two-phase optimization procedure.
//! * [`inspection`] — multimodal anomaly maps (gradient-magnitude similarity,
//!   SSIM, residual), fusion, thresholding and evaluation metrics.
//! * [`pipeline`] — end-to-end inference, early-exit patch scoring and the
//!   edge/cloud split-execution interchange format.

pub mod cmfm;
pub mod config;
pub mod gfrm;
pub mod imaging;
pub mod inspection;
pub mod networks;
pub mod pipeline;
pub mod smoke;
pub mod synth;
pub mod tensor;
pub mod training;

pub use config::Config;

/// FNV-1a 64-bit over a byte stream. Used for config and parameter
/// fingerprints (mismatch detection, not cryptographic integrity).
pub fn fnv1a64(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Reads the `FMRNET_SEED` environment variable, which overrides every
/// configured seed when set.
pub fn env_seed_override() -> Option<u64> {
    std::env::var("FMRNET_SEED").ok().and_then(|s| s.trim().parse().ok())
}
