//! Attention-state memory.
//!
//! A long, fixed prefix is replaced at inference time by a per-layer dictionary of
//! precomputed attention states. Offline, calibration queries and their prefix states
//! `(a, log Z)` are clustered into `K` entries per layer and KV group. Online, each query
//! retrieves the entry whose key is most cosine-similar and merges its state into the
//! query's own self-attention with the log-sum-exp merge, which is exact for disjoint
//! key blocks.
//!
//! Modules:
//! - [`tensorstore`]: the `ASMTENS` binary container and calibration trace schema
//! - [`attention`]: attention states, the merge operator, rotary embedding
//! - [`calibration`]: lookup keys, whitening, spherical k-means, bank construction
//! - [`memory_bank`]: entries, flat and two-level retrieval, bank files
//! - [`inference`]: query-time retrieval and merge
//! - [`accounting`]: prefix-traffic formulas and the retrieval-cost benchmark
//! - [`synth`]: planted-cluster workloads with exact full-attention oracles
//! - [`verify`]: the invariant suite behind `asmem verify`

pub mod accounting;
pub mod attention;
pub mod calibration;
pub mod config;
pub mod error;
pub mod inference;
pub mod memory_bank;
pub mod synth;
pub mod tensorstore;
pub mod verify;

pub use error::{Error, Result};

/// Mixes a base seed with two stream ids (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03).rotate_left(29);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
