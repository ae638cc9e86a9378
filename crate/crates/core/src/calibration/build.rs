//! Memory-bank construction from calibration traces.

use rayon::prelude::*;

use super::keys::{
    fit_whitening, make_lookup_key, whitening_subsample, CalibSample, KeyMode, KeyPipeline, WhiteningTransform,
    DEFAULT_EPSILON_SCALE, DEFAULT_WHITENING_SUBSAMPLE,
};
use super::kmeans::{minibatch_kmeans, ClusterSpec};
use crate::attention::{logsumexp, merge_into};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::memory_bank::{MemoryBank, MemoryEntry, SlotEntries};
use crate::tensorstore::{LayerTrace, TraceSet};

/// Stream id that separates whitening subsample seeds from clustering seeds.
const WHITENING_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    /// Largest tolerated fraction of clusters that end empty.
    pub max_empty_fraction: f64,
    pub epsilon_scale: f64,
    pub whitening_subsample: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            max_empty_fraction: 0.5,
            epsilon_scale: DEFAULT_EPSILON_SCALE,
            whitening_subsample: DEFAULT_WHITENING_SUBSAMPLE,
        }
    }
}

/// Per layer, per slot: entries kept and empty clusters dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub entries: Vec<Vec<usize>>,
    pub dropped: Vec<Vec<usize>>,
}

impl BuildReport {
    pub fn total_dropped(&self) -> usize {
        self.dropped.iter().flatten().sum()
    }
}

/// Attention-aware aggregation of one cluster.
///
/// Key: arithmetic mean of member keys. Per head: `Z = mean(Z_i)` and
/// `a = sum(Z_i a_i) / sum(Z_i)`, evaluated in the log domain.
pub fn aggregate_cluster(members: &[&CalibSample]) -> Result<MemoryEntry> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidParameter("cannot aggregate an empty cluster".into()))?;
    let key_dim = first.key.len();
    let heads = first.log_z.len();
    if heads == 0 || first.a.len() % heads != 0 {
        return Err(Error::DimensionMismatch("sample state shape".into()));
    }
    let d = first.a.len() / heads;
    if members
        .iter()
        .any(|m| m.key.len() != key_dim || m.log_z.len() != heads || m.a.len() != heads * d)
    {
        return Err(Error::DimensionMismatch("cluster members disagree on shape".into()));
    }
    let n = members.len() as f64;

    let mut key = vec![0.0f64; key_dim];
    for m in members {
        for (s, &v) in key.iter_mut().zip(&m.key) {
            *s += v as f64;
        }
    }
    let key: Vec<f32> = key.into_iter().map(|s| (s / n) as f32).collect();

    let mut a = vec![0.0f32; heads * d];
    let mut log_z = vec![f64::NEG_INFINITY; heads];
    for h in 0..heads {
        let total = logsumexp(members.iter().map(|m| m.log_z[h]));
        if total == f64::NEG_INFINITY {
            continue;
        }
        let mut acc = vec![0.0f64; d];
        for m in members {
            let w = (m.log_z[h] - total).exp();
            for (o, &v) in acc.iter_mut().zip(&m.a[h * d..(h + 1) * d]) {
                *o += w * v as f64;
            }
        }
        for (o, v) in a[h * d..(h + 1) * d].iter_mut().zip(acc) {
            *o = v as f32;
        }
        log_z[h] = total - n.ln();
    }
    MemoryEntry::new(key, a, log_z)
}

fn fit_bank_whitening(traces: &TraceSet, mode: KeyMode, seed: u64, opts: &BuildOptions) -> Result<WhiteningTransform> {
    let g = *traces.geometry();
    let plain = KeyMode { whitening: false, ..mode };
    let pipeline = KeyPipeline::new(g, plain, None, Default::default(), g.group_size() * g.d_h)?;
    let per_layer = (0..g.n_layers)
        .into_par_iter()
        .map(|layer| {
            let rows = whitening_subsample(
                traces.n_tokens(),
                opts.whitening_subsample,
                derive_seed(seed, layer as u64, WHITENING_STREAM),
            );
            let mut per_head = vec![Vec::with_capacity(rows.len() * g.d_h); g.h_q];
            for &t in &rows {
                let q = pipeline.mode_query(traces.record(layer, t).pre_rope_q)?;
                for (h, head) in q.chunks_exact(g.d_h).enumerate() {
                    per_head[h].extend_from_slice(head);
                }
            }
            per_head
                .iter()
                .map(|x| fit_whitening(x, g.d_h, opts.epsilon_scale))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    WhiteningTransform::new(g.n_layers, g.h_q, g.d_h, per_layer.into_iter().flatten().collect())
}

/// Builds a bank with default [`BuildOptions`].
pub fn build_bank(traces: &TraceSet, mode: KeyMode, spec: &ClusterSpec, d_prime: usize) -> Result<MemoryBank> {
    build_bank_with(traces, mode, spec, d_prime, &BuildOptions::default()).map(|(bank, _)| bank)
}

/// Per layer and slot: whitening fit (if enabled), key construction, spherical k-means,
/// attention-aware aggregation. Layers and slots run in parallel with per-slot seeds, so
/// the result does not depend on the thread count.
pub fn build_bank_with(
    traces: &TraceSet,
    mode: KeyMode,
    spec: &ClusterSpec,
    d_prime: usize,
    opts: &BuildOptions,
) -> Result<(MemoryBank, BuildReport)> {
    spec.validate()?;
    let g = *traces.geometry();
    if traces.n_tokens() == 0 {
        return Err(Error::InsufficientData("trace set has no tokens".into()));
    }
    let whitening = if mode.whitening {
        Some(fit_bank_whitening(traces, mode, spec.seed, opts)?)
    } else {
        None
    };
    let pipeline = KeyPipeline::new(g, mode, whitening.as_ref(), spec.centroid_org, d_prime)?;
    let layout = pipeline.layout;

    let layers = (0..g.n_layers)
        .into_par_iter()
        .map(|layer| {
            let mut by_slot: Vec<Vec<CalibSample>> =
                vec![Vec::with_capacity(traces.n_tokens() * layout.chunks); layout.n_slots];
            for t in 0..traces.n_tokens() {
                for s in make_lookup_key(&traces.record(layer, t), layer, &pipeline)? {
                    by_slot[s.slot].push(s);
                }
            }
            by_slot
                .into_par_iter()
                .enumerate()
                .map(|(slot, samples)| build_slot(layer, slot, &samples, layout.key_dim, spec, opts))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = BuildReport::default();
    let mut bank_layers = Vec::with_capacity(layers.len());
    for layer in layers {
        report.entries.push(layer.iter().map(|(s, _)| s.entries.len()).collect());
        report.dropped.push(layer.iter().map(|(_, d)| *d).collect());
        bank_layers.push(layer.into_iter().map(|(s, _)| s).collect());
    }
    let bank = MemoryBank {
        geometry: g,
        prefix_len: traces.prefix_len(),
        mode,
        whitening,
        d_prime,
        spec: *spec,
        layers: bank_layers,
    };
    Ok((bank, report))
}

fn build_slot(
    layer: usize,
    slot: usize,
    samples: &[CalibSample],
    key_dim: usize,
    spec: &ClusterSpec,
    opts: &BuildOptions,
) -> Result<(SlotEntries, usize)> {
    let keys: Vec<f32> = samples.iter().flat_map(|s| s.key.iter().copied()).collect();
    let slot_spec = ClusterSpec { seed: derive_seed(spec.seed, layer as u64, slot as u64), ..*spec };
    let clustering = minibatch_kmeans(&keys, key_dim, &slot_spec)?;
    let dropped = clustering.dropped_empty;
    if dropped as f64 > opts.max_empty_fraction * spec.k as f64 {
        return Err(Error::InsufficientData(format!(
            "layer {layer} slot {slot}: {dropped} of {} clusters empty ({} samples)",
            spec.k,
            samples.len()
        )));
    }
    let entries = clustering
        .members
        .iter()
        .map(|m| aggregate_cluster(&m.iter().map(|&i| &samples[i]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    Ok((SlotEntries::new(entries), dropped))
}

/// Combines traces recorded over disjoint prefix chunks into the trace over the whole prefix.
///
/// All chunks must share geometry and carry the same response-token queries.
pub fn merge_chunk_traces(chunks: &[TraceSet]) -> Result<TraceSet> {
    let first = chunks
        .first()
        .ok_or_else(|| Error::InvalidParameter("no chunk traces given".into()))?;
    let g = *first.geometry();
    for (i, c) in chunks.iter().enumerate().skip(1) {
        if *c.geometry() != g {
            return Err(Error::Geometry(format!("chunk {i} geometry differs from chunk 0")));
        }
        if c.n_tokens() != first.n_tokens() {
            return Err(Error::Geometry(format!(
                "chunk {i} has {} tokens, chunk 0 has {}",
                c.n_tokens(),
                first.n_tokens()
            )));
        }
        if c.layers().iter().zip(first.layers()).any(|(a, b)| a.pre_rope_q != b.pre_rope_q) {
            return Err(Error::Geometry(format!("chunk {i} queries are not aligned with chunk 0")));
        }
    }
    let d = g.d_h;
    let layers = (0..g.n_layers)
        .map(|l| {
            let base = first.layer(l);
            let mut attn_out = base.attn_out.clone();
            let mut log_z = base.log_z.clone();
            let mut scratch = vec![0.0f32; d];
            for c in &chunks[1..] {
                let other = c.layer(l);
                for (h, lz) in log_z.iter_mut().enumerate() {
                    let a = &mut attn_out[h * d..(h + 1) * d];
                    *lz = merge_into(a, *lz, &other.attn_out[h * d..(h + 1) * d], other.log_z[h], &mut scratch);
                    a.copy_from_slice(&scratch);
                }
            }
            LayerTrace {
                pre_rope_q: base.pre_rope_q.clone(),
                rope_q: base.rope_q.clone(),
                attn_out,
                log_z,
            }
        })
        .collect();
    TraceSet::new(g, chunks.iter().map(TraceSet::prefix_len).sum(), layers)
}

/// Merges chunk states per token, then runs the standard build.
pub fn build_bank_chunked(chunks: &[TraceSet], mode: KeyMode, spec: &ClusterSpec, d_prime: usize) -> Result<MemoryBank> {
    build_bank(&merge_chunk_traces(chunks)?, mode, spec, d_prime)
}
