//! Lookup-key construction: RoPE handling, per-head whitening, and GQA grouping.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{apply_rope, RopeConfig};
use crate::error::{Error, Result};
use crate::tensorstore::{ModelGeometry, TraceRecord};

pub const DEFAULT_EPSILON_SCALE: f64 = 1e-5;
pub const DEFAULT_WHITENING_SUBSAMPLE: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RopeMode {
    /// Query projection before rotary embedding.
    PreRope,
    /// Query rotated to a shared virtual position.
    RopeUnified,
}

impl fmt::Display for RopeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RopeMode::PreRope => "pre_rope",
            RopeMode::RopeUnified => "rope_unified",
        })
    }
}

impl FromStr for RopeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre_rope" | "pre" => Ok(RopeMode::PreRope),
            "rope_unified" | "unified" => Ok(RopeMode::RopeUnified),
            other => Err(Error::InvalidParameter(format!("unknown key mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyMode {
    pub rope: RopeMode,
    pub whitening: bool,
    /// Rotation target for [`RopeMode::RopeUnified`]; ignored otherwise.
    pub virtual_position: u64,
}

impl Default for KeyMode {
    fn default() -> Self {
        Self { rope: RopeMode::PreRope, whitening: false, virtual_position: 0 }
    }
}

/// Whether KV groups are clustered separately or as one concatenated key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CentroidOrg {
    #[default]
    Individual,
    Joint,
}

impl fmt::Display for CentroidOrg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CentroidOrg::Individual => "individual",
            CentroidOrg::Joint => "joint",
        })
    }
}

impl FromStr for CentroidOrg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "individual" => Ok(CentroidOrg::Individual),
            "joint" => Ok(CentroidOrg::Joint),
            other => Err(Error::InvalidParameter(format!("unknown centroid organization {other:?}"))),
        }
    }
}

/// How a layer's query heads map onto clustering units ("slots") and key chunks.
///
/// Individual: one slot per KV group, keys of width `d'`, states over the group's `G` heads.
/// Joint: one slot per layer, keys of width `H_kv * d'`, states over all `H_q` heads.
/// Either way each token yields `chunks = G * d_h / d'` keys per slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotLayout {
    pub n_slots: usize,
    pub heads_per_slot: usize,
    pub key_dim: usize,
    pub chunks: usize,
}

impl SlotLayout {
    pub fn new(geometry: &ModelGeometry, org: CentroidOrg, d_prime: usize) -> Result<Self> {
        let group_width = geometry.group_size() * geometry.d_h;
        if d_prime == 0 || !group_width.is_multiple_of(d_prime) {
            return Err(Error::InvalidParameter(format!(
                "d' = {d_prime} must divide G * d_h = {group_width}"
            )));
        }
        let chunks = group_width / d_prime;
        Ok(match org {
            CentroidOrg::Individual => Self {
                n_slots: geometry.h_kv,
                heads_per_slot: geometry.group_size(),
                key_dim: d_prime,
                chunks,
            },
            CentroidOrg::Joint => Self {
                n_slots: 1,
                heads_per_slot: geometry.h_q,
                key_dim: geometry.h_kv * d_prime,
                chunks,
            },
        })
    }
}

/// Symmetric `d x d` matrix approximating `Sigma^{-1/2}` for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningMatrix {
    d: usize,
    m: Vec<f32>,
}

impl WhiteningMatrix {
    pub fn as_slice(&self) -> &[f32] {
        &self.m
    }

    pub fn apply(&self, x: &[f32], out: &mut [f32]) {
        for (o, row) in out.iter_mut().zip(self.m.chunks_exact(self.d)) {
            *o = row.iter().zip(x).map(|(&w, &v)| w as f64 * v as f64).sum::<f64>() as f32;
        }
    }
}

/// Fits `(Sigma + eps I)^{-1/2}` to `n x d` row-major `queries`, with
/// `eps = epsilon_scale * trace(Sigma) / d`.
pub fn fit_whitening(queries: &[f32], d: usize, epsilon_scale: f64) -> Result<WhiteningMatrix> {
    if d == 0 || !queries.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch(format!("{} values for dim {d}", queries.len())));
    }
    let n = queries.len() / d;
    if n < 2 {
        return Err(Error::InvalidParameter(format!("whitening needs at least 2 samples, got {n}")));
    }
    if !queries.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("whitening input".into()));
    }
    let mut mean = vec![0.0f64; d];
    for row in queries.chunks_exact(d) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0f64; d];
    for row in queries.chunks_exact(d) {
        for ((c, &x), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = x as f64 - m;
        }
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let mut eps = epsilon_scale * cov.trace() / d as f64;
    if !(eps > 0.0) || !eps.is_finite() {
        eps = 1e-12;
    }
    let eig = SymmetricEigen::new(cov);
    let scales = eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + eps).sqrt());
    let w = &eig.eigenvectors * DMatrix::from_diagonal(&scales) * eig.eigenvectors.transpose();
    let mut m = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            m.push((0.5 * (w[(i, j)] + w[(j, i)])) as f32);
        }
    }
    Ok(WhiteningMatrix { d, m })
}

/// Per-layer, per-head whitening matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    n_layers: usize,
    h_q: usize,
    d_h: usize,
    heads: Vec<WhiteningMatrix>,
}

impl WhiteningTransform {
    pub fn new(n_layers: usize, h_q: usize, d_h: usize, heads: Vec<WhiteningMatrix>) -> Result<Self> {
        if heads.len() != n_layers * h_q || heads.iter().any(|m| m.d != d_h) {
            return Err(Error::DimensionMismatch("whitening matrices do not match geometry".into()));
        }
        Ok(Self { n_layers, h_q, d_h, heads })
    }

    /// From `n_layers x h_q x d_h x d_h` row-major values.
    pub fn from_matrices(n_layers: usize, h_q: usize, d_h: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n_layers * h_q * d_h * d_h {
            return Err(Error::DimensionMismatch("whitening tensor size".into()));
        }
        if !values.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("whitening tensor".into()));
        }
        let heads = values
            .chunks_exact(d_h * d_h)
            .map(|c| WhiteningMatrix { d: d_h, m: c.to_vec() })
            .collect();
        Self::new(n_layers, h_q, d_h, heads)
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn h_q(&self) -> usize {
        self.h_q
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn matrix(&self, layer: usize, head: usize) -> &WhiteningMatrix {
        &self.heads[layer * self.h_q + head]
    }

    /// The layer's matrices concatenated head-major.
    pub fn layer_matrices(&self, layer: usize) -> Vec<f32> {
        self.heads[layer * self.h_q..(layer + 1) * self.h_q]
            .iter()
            .flat_map(|m| m.m.iter().copied())
            .collect()
    }
}

/// Token indices used to fit whitening: all of them when `n <= max`, else a seeded sorted sample.
pub fn whitening_subsample(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, max).into_vec();
    idx.sort_unstable();
    idx
}

/// One clustering sample: a lookup key and the attention state of its slot's heads.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibSample {
    pub slot: usize,
    pub key: Vec<f32>,
    /// `heads_per_slot x d_h`.
    pub a: Vec<f32>,
    pub log_z: Vec<f64>,
}

/// The lookup-key pipeline shared by calibration and inference.
#[derive(Debug, Clone, Copy)]
pub struct KeyPipeline<'a> {
    pub geometry: ModelGeometry,
    pub mode: KeyMode,
    pub whitening: Option<&'a WhiteningTransform>,
    pub layout: SlotLayout,
    pub d_prime: usize,
}

impl<'a> KeyPipeline<'a> {
    pub fn new(
        geometry: ModelGeometry,
        mode: KeyMode,
        whitening: Option<&'a WhiteningTransform>,
        org: CentroidOrg,
        d_prime: usize,
    ) -> Result<Self> {
        if mode.whitening != whitening.is_some() {
            return Err(Error::InvalidParameter(
                "a whitening transform is required exactly when the key mode whitens".into(),
            ));
        }
        if mode.rope == RopeMode::RopeUnified && !geometry.d_h.is_multiple_of(2) {
            return Err(Error::InvalidParameter("rope_unified keys need an even d_h".into()));
        }
        let layout = SlotLayout::new(&geometry, org, d_prime)?;
        Ok(Self { geometry, mode, whitening, layout, d_prime })
    }

    /// The RoPE-mode representation of one token's `H_q x d_h` pre-RoPE query.
    pub fn mode_query(&self, pre_rope_q: &[f32]) -> Result<Vec<f32>> {
        match self.mode.rope {
            RopeMode::PreRope => Ok(pre_rope_q.to_vec()),
            RopeMode::RopeUnified => apply_rope(
                pre_rope_q,
                self.geometry.d_h,
                self.mode.virtual_position,
                &RopeConfig { virtual_position: self.mode.virtual_position, ..RopeConfig::default() },
            ),
        }
    }

    /// All lookup keys of one token at one layer: `keys[slot]` holds `chunks x key_dim` values.
    pub fn keys(&self, layer: usize, pre_rope_q: &[f32]) -> Result<Vec<Vec<f32>>> {
        let g = &self.geometry;
        if pre_rope_q.len() != g.query_width() {
            return Err(Error::DimensionMismatch(format!(
                "query width {} vs H_q * d_h = {}",
                pre_rope_q.len(),
                g.query_width()
            )));
        }
        let mut q = self.mode_query(pre_rope_q)?;
        if let Some(w) = self.whitening {
            let mut out = vec![0.0f32; g.d_h];
            for (h, head) in q.chunks_exact_mut(g.d_h).enumerate() {
                w.matrix(layer, h).apply(head, &mut out);
                head.copy_from_slice(&out);
            }
        }
        let group_width = g.group_size() * g.d_h;
        Ok(match self.layout.n_slots {
            n if n == g.h_kv && self.layout.key_dim == self.d_prime => {
                q.chunks_exact(group_width).map(<[f32]>::to_vec).collect()
            }
            _ => {
                // joint: chunk c of every group, concatenated
                let mut key = Vec::with_capacity(q.len());
                for c in 0..self.layout.chunks {
                    for group in q.chunks_exact(group_width) {
                        key.extend_from_slice(&group[c * self.d_prime..(c + 1) * self.d_prime]);
                    }
                }
                vec![key]
            }
        })
    }

    /// The key used at inference: the first chunk of each slot.
    pub fn lookup_keys(&self, layer: usize, pre_rope_q: &[f32]) -> Result<Vec<Vec<f32>>> {
        let key_dim = self.layout.key_dim;
        Ok(self
            .keys(layer, pre_rope_q)?
            .into_iter()
            .map(|mut k| {
                k.truncate(key_dim);
                k
            })
            .collect())
    }

    /// Head range `(first, count)` covered by a slot.
    pub fn slot_heads(&self, slot: usize) -> (usize, usize) {
        (slot * self.layout.heads_per_slot, self.layout.heads_per_slot)
    }
}

/// Turns one trace record into keyed samples, `chunks` per slot, each paired with its slot's state.
pub fn make_lookup_key(record: &TraceRecord<'_>, layer: usize, pipeline: &KeyPipeline<'_>) -> Result<Vec<CalibSample>> {
    let d_h = pipeline.geometry.d_h;
    let key_dim = pipeline.layout.key_dim;
    let keys = pipeline.keys(layer, record.pre_rope_q)?;
    let mut out = Vec::with_capacity(keys.len() * pipeline.layout.chunks);
    for (slot, slot_keys) in keys.iter().enumerate() {
        let (first, count) = pipeline.slot_heads(slot);
        let a = &record.attn_out[first * d_h..(first + count) * d_h];
        let log_z = &record.log_z[first..first + count];
        for key in slot_keys.chunks_exact(key_dim) {
            out.push(CalibSample { slot, key: key.to_vec(), a: a.to_vec(), log_z: log_z.to_vec() });
        }
    }
    Ok(out)
}
