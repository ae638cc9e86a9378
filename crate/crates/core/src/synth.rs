//! Planted-cluster workloads with exact oracles.
//!
//! Prefix keys and values are i.i.d. `N(0, 1/d_h)` per component. Query cluster centers
//! are uniform on the unit sphere, one independent direction per (cluster, layer, head);
//! members are rotated away from their center by an angle of roughly `spread` radians.
//! Every query sits at position `prefix_len`, right after the prefix, and is scaled to
//! norm `d_h` so attention logits against the prefix have unit variance.
//!
//! Trace states are computed by the same attention kernel the rest of the crate uses,
//! over the whole prefix (and over each chunk for the chunked variant). A short local
//! context of Gaussian keys and values stands in for the non-prefix tokens; token `t`
//! sees the first `t % (local_len + 1)` of them.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::attention::{apply_rope, attend_unchecked, RopeConfig};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::inference::{kv_head_block, InferenceRequest, PrefixKv, RequestLayer};
use crate::tensorstore::{read_tensor_file, LayerTrace, Metadata, ModelGeometry, Tensor, TensorFile, TraceSet};

pub const DEFAULT_LOCAL_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub geometry: ModelGeometry,
    pub prefix_len: usize,
    pub n_clusters: usize,
    pub queries_per_cluster: usize,
    /// Angular standard deviation of members around their center, in radians.
    pub spread: f64,
    pub seed: u64,
    pub n_chunks: usize,
    pub local_len: usize,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if !self.geometry.d_h.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!("d_h must be even for rotary positions, got {}", self.geometry.d_h)));
        }
        if self.prefix_len == 0 {
            return Err(Error::InvalidParameter("prefix must be nonempty".into()));
        }
        if self.n_clusters == 0 || self.queries_per_cluster == 0 {
            return Err(Error::InvalidParameter("clusters and queries per cluster must be >= 1".into()));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(Error::InvalidParameter(format!("spread must be finite and >= 0, got {}", self.spread)));
        }
        if self.n_chunks == 0 || !self.prefix_len.is_multiple_of(self.n_chunks) {
            return Err(Error::InvalidParameter(format!(
                "chunks must divide prefix ({} chunks, prefix {})",
                self.n_chunks, self.prefix_len
            )));
        }
        Ok(())
    }

    pub fn n_queries(&self) -> usize {
        self.n_clusters * self.queries_per_cluster
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub spec: SynthSpec,
    /// States over the whole prefix.
    pub traces: TraceSet,
    /// States over each chunk alone; empty when `n_chunks == 1`.
    pub chunks: Vec<TraceSet>,
    pub prefix: PrefixKv,
    /// Planted cluster of each token.
    pub labels: Vec<u32>,
    /// The same queries with their local context.
    pub request: InferenceRequest,
}

// Independent RNG streams.
const STREAM_PREFIX: u64 = 0;
const STREAM_CENTERS: u64 = 1;
const STREAM_MEMBERS: u64 = 2;
const STREAM_ORDER: u64 = 3;
const STREAM_LOCAL: u64 = 4;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// A uniformly random unit vector.
pub fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, d, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Rotates unit vector `center` toward a random tangent direction by an angle whose
/// RMS is `spread`.
pub fn perturb(center: &[f64], spread: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = center.len();
    if spread == 0.0 || d < 2 {
        return center.to_vec();
    }
    let mut t = gaussian(rng, d, spread / ((d - 1) as f64).sqrt());
    let along: f64 = t.iter().zip(center).map(|(a, b)| a * b).sum();
    t.iter_mut().zip(center).for_each(|(x, c)| *x -= along * c);
    let angle = t.iter().map(|x| x * x).sum::<f64>().sqrt();
    if angle == 0.0 {
        return center.to_vec();
    }
    let (s, c) = angle.sin_cos();
    center.iter().zip(&t).map(|(ci, ti)| c * ci + s * ti / angle).collect()
}

/// `centers * per_center` points on the unit sphere in `dim` dimensions, with labels.
/// Point order is shuffled.
pub fn planted_directions(centers: usize, per_center: usize, dim: usize, spread: f64, seed: u64) -> (Vec<f32>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(centers * per_center);
    for c in 0..centers {
        let center = random_unit(&mut rng, dim);
        for _ in 0..per_center {
            points.push((c as u32, perturb(&center, spread, &mut rng)));
        }
    }
    points.shuffle(&mut rng);
    let labels = points.iter().map(|p| p.0).collect();
    let flat = points.iter().flat_map(|p| p.1.iter().map(|&x| x as f32)).collect();
    (flat, labels)
}

/// Agreement between an assignment and planted labels under the best one-to-one matching
/// found greedily from the largest co-occurrence counts down.
pub fn matched_label_agreement(assigned: &[usize], labels: &[u32]) -> f64 {
    if assigned.is_empty() {
        return 1.0;
    }
    let mut counts = std::collections::BTreeMap::<(usize, u32), usize>::new();
    for (&a, &l) in assigned.iter().zip(labels) {
        *counts.entry((a, l)).or_default() += 1;
    }
    let mut pairs: Vec<_> = counts.into_iter().collect();
    pairs.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
    let mut used_a = std::collections::BTreeSet::new();
    let mut used_l = std::collections::BTreeSet::new();
    let mut matched = 0;
    for ((a, l), n) in pairs {
        if !used_a.contains(&a) && !used_l.contains(&l) {
            used_a.insert(a);
            used_l.insert(l);
            matched += n;
        }
    }
    matched as f64 / assigned.len() as f64
}

/// Attention states of every token against `[start, end)` of the prefix, in trace layout.
fn prefix_states(
    g: &ModelGeometry,
    queries: &[Vec<f32>],
    prefix: &PrefixKv,
    start: usize,
    end: usize,
) -> Vec<(Vec<f32>, Vec<f64>)> {
    let d = g.d_h;
    let qw = g.query_width();
    (0..g.n_layers)
        .into_par_iter()
        .map(|l| {
            let blocks: Vec<(Vec<f32>, Vec<f32>)> = (0..g.h_kv)
                .map(|kvh| {
                    let k = kv_head_block(&prefix.keys[l], g.h_kv, d, kvh);
                    let v = kv_head_block(&prefix.values[l], g.h_kv, d, kvh);
                    (k[start * d..end * d].to_vec(), v[start * d..end * d].to_vec())
                })
                .collect();
            let n = queries[l].len() / qw;
            let mut attn_out = vec![0.0f32; n * qw];
            let mut log_z = vec![0.0f64; n * g.h_q];
            attn_out.par_chunks_mut(qw).zip(log_z.par_chunks_mut(g.h_q)).enumerate().for_each(|(t, (a, lz))| {
                for h in 0..g.h_q {
                    let (k, v) = &blocks[g.kv_head_of(h)];
                    let q = &queries[l][t * qw + h * d..t * qw + (h + 1) * d];
                    let s = attend_unchecked(q, k, v);
                    a[h * d..(h + 1) * d].copy_from_slice(&s.a);
                    lz[h] = s.log_z;
                }
            });
            (attn_out, log_z)
        })
        .collect()
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let g = spec.geometry;
    let (d, qw, kw) = (g.d_h, g.query_width(), g.h_kv * g.d_h);
    let n = spec.n_queries();
    let stream = |s: u64, l: usize| ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, s, l as u64));
    let kv_scale = 1.0 / (d as f64).sqrt();
    let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();

    let mut prefix = PrefixKv { prefix_len: spec.prefix_len, keys: Vec::new(), values: Vec::new() };
    for l in 0..g.n_layers {
        let mut rng = stream(STREAM_PREFIX, l);
        prefix.keys.push(to_f32(gaussian(&mut rng, spec.prefix_len * kw, kv_scale)));
        prefix.values.push(to_f32(gaussian(&mut rng, spec.prefix_len * kw, kv_scale)));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(STREAM_ORDER, 0));
    let labels: Vec<u32> = order.iter().map(|&i| (i / spec.queries_per_cluster) as u32).collect();

    let rope = RopeConfig::default();
    let position = spec.prefix_len as u64;
    let mut pre_rope = Vec::with_capacity(g.n_layers);
    let mut rope_q = Vec::with_capacity(g.n_layers);
    for l in 0..g.n_layers {
        let mut rng = stream(STREAM_CENTERS, l);
        let centers: Vec<Vec<f64>> = (0..spec.n_clusters * g.h_q).map(|_| random_unit(&mut rng, d)).collect();
        let mut rng = stream(STREAM_MEMBERS, l);
        // members in planted order, then placed by `order`
        let mut planted = vec![0.0f32; n * qw];
        for (i, row) in planted.chunks_exact_mut(qw).enumerate() {
            let c = i / spec.queries_per_cluster;
            for h in 0..g.h_q {
                let dir = perturb(&centers[c * g.h_q + h], spec.spread, &mut rng);
                for (o, x) in row[h * d..(h + 1) * d].iter_mut().zip(dir) {
                    *o = (x * d as f64) as f32;
                }
            }
        }
        let q: Vec<f32> = order.iter().flat_map(|&i| planted[i * qw..(i + 1) * qw].iter().copied()).collect();
        rope_q.push(apply_rope(&q, d, position, &rope)?);
        pre_rope.push(q);
    }

    let build_trace = |start: usize, end: usize| -> Result<TraceSet> {
        let layers = prefix_states(&g, &rope_q, &prefix, start, end)
            .into_iter()
            .enumerate()
            .map(|(l, (attn_out, log_z))| LayerTrace {
                pre_rope_q: pre_rope[l].clone(),
                rope_q: rope_q[l].clone(),
                attn_out,
                log_z,
            })
            .collect();
        TraceSet::new(g, end - start, layers)
    };
    let traces = build_trace(0, spec.prefix_len)?;
    let chunks = if spec.n_chunks > 1 {
        let step = spec.prefix_len / spec.n_chunks;
        (0..spec.n_chunks).map(|c| build_trace(c * step, (c + 1) * step)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let visible: Vec<u32> = (0..n).map(|t| (t % (spec.local_len + 1)) as u32).collect();
    let layers = (0..g.n_layers)
        .map(|l| {
            let mut rng = stream(STREAM_LOCAL, l);
            RequestLayer {
                pre_rope_q: pre_rope[l].clone(),
                rope_q: rope_q[l].clone(),
                local_k: to_f32(gaussian(&mut rng, spec.local_len * kw, kv_scale)),
                local_v: to_f32(gaussian(&mut rng, spec.local_len * kw, kv_scale)),
            }
        })
        .collect();
    let request = InferenceRequest::new(g, spec.local_len, visible, layers)?;
    Ok(SynthOutput { spec: *spec, traces, chunks, prefix, labels, request })
}

/// The oracle file: prefix keys/values, labels and the request tensors.
pub fn oracle_file(out: &SynthOutput) -> Result<TensorFile> {
    let s = &out.spec;
    let mut meta = Metadata::new();
    s.geometry.write_metadata(&mut meta);
    meta.insert("kind".into(), "oracle".into());
    meta.insert("prefix_len".into(), s.prefix_len.to_string());
    meta.insert("n_clusters".into(), s.n_clusters.to_string());
    meta.insert("queries_per_cluster".into(), s.queries_per_cluster.to_string());
    meta.insert("spread".into(), s.spread.to_string());
    meta.insert("seed".into(), s.seed.to_string());
    meta.insert("n_chunks".into(), s.n_chunks.to_string());
    meta.insert("local_len".into(), s.local_len.to_string());
    let mut tensors = Vec::new();
    out.prefix.write_tensors(&s.geometry, &mut tensors)?;
    tensors.push(Tensor::u32("labels", &[out.labels.len()], out.labels.clone())?);
    out.request.write_tensors(&mut tensors)?;
    TensorFile::new(tensors, meta)
}

/// Paths written by [`write_synth`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthPaths {
    pub traces: PathBuf,
    pub oracle: PathBuf,
    pub chunks: Vec<PathBuf>,
}

pub fn synth_paths(dir: &Path, n_chunks: usize) -> SynthPaths {
    SynthPaths {
        traces: dir.join("traces.asmt"),
        oracle: dir.join("oracle.asmt"),
        chunks: if n_chunks > 1 {
            (0..n_chunks).map(|i| dir.join(format!("traces.chunk{i}.asmt"))).collect()
        } else {
            Vec::new()
        },
    }
}

/// Writes `traces.asmt`, `oracle.asmt` and, for chunked specs, `traces.chunk{i}.asmt`.
pub fn write_synth(out: &SynthOutput, dir: &Path) -> Result<SynthPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = synth_paths(dir, out.chunks.len().max(1));
    out.traces.save(&paths.traces)?;
    std::fs::write(&paths.oracle, oracle_file(out)?.to_bytes()?)?;
    for (c, p) in out.chunks.iter().zip(&paths.chunks) {
        c.save(p)?;
    }
    Ok(paths)
}

/// Prefix, labels and request read back from an oracle file.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub prefix: PrefixKv,
    pub labels: Vec<u32>,
    pub request: InferenceRequest,
}

impl Oracle {
    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let request = InferenceRequest::from_tensor_file(file)?;
        let labels = file.require_u32("labels", &[request.n_tokens()])?.to_vec();
        Ok(Self { prefix: PrefixKv::from_tensor_file(file)?, labels, request })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_file(&read_tensor_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(spread: f64, n_chunks: usize) -> SynthSpec {
        SynthSpec {
            geometry: ModelGeometry::new(2, 4, 2, 8).unwrap(),
            prefix_len: 64,
            n_clusters: 3,
            queries_per_cluster: 5,
            spread,
            seed: 11,
            n_chunks,
            local_len: 4,
        }
    }

    #[test]
    fn validation() {
        assert!(SynthSpec { prefix_len: 10, n_chunks: 3, ..spec(0.1, 1) }.validate().is_err());
        assert!(SynthSpec { n_clusters: 0, ..spec(0.1, 1) }.validate().is_err());
        assert!(spec(-0.1, 1).validate().is_err());
        assert!(spec(0.1, 4).validate().is_ok());
    }

    #[test]
    fn shapes_labels_and_determinism() {
        let a = generate(&spec(0.1, 2)).unwrap();
        let b = generate(&spec(0.1, 2)).unwrap();
        assert_eq!(a.traces, b.traces);
        assert_eq!(a.traces.n_tokens(), 15);
        assert_eq!(a.chunks.len(), 2);
        assert_eq!(a.chunks[0].prefix_len(), 32);
        let mut counts = [0; 3];
        a.labels.iter().for_each(|&l| counts[l as usize] += 1);
        assert_eq!(counts, [5, 5, 5]);
        assert_eq!(oracle_file(&a).unwrap().to_bytes().unwrap(), oracle_file(&b).unwrap().to_bytes().unwrap());
    }

    #[test]
    fn zero_spread_gives_identical_cluster_states() {
        let out = generate(&spec(0.0, 1)).unwrap();
        let g = out.traces.geometry();
        let (qw, lab) = (g.query_width(), &out.labels);
        for l in 0..g.n_layers {
            let layer = out.traces.layer(l);
            for i in 0..lab.len() {
                for j in 0..lab.len() {
                    if lab[i] == lab[j] {
                        assert_eq!(layer.attn_out[i * qw..(i + 1) * qw], layer.attn_out[j * qw..(j + 1) * qw]);
                    }
                }
            }
        }
    }

    #[test]
    fn query_norm_and_perturbation_angle() {
        let out = generate(&spec(0.05, 1)).unwrap();
        let d = 8;
        for head in out.traces.layer(0).pre_rope_q.chunks_exact(d) {
            let n = head.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - d as f64).abs() < 1e-4);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_unit(&mut rng, 64);
        let mut mean_sq = 0.0;
        for _ in 0..2000 {
            let p = perturb(&c, 0.05, &mut rng);
            let cos: f64 = p.iter().zip(&c).map(|(a, b)| a * b).sum();
            mean_sq += cos.clamp(-1.0, 1.0).acos().powi(2) / 2000.0;
        }
        assert!((mean_sq.sqrt() - 0.05).abs() < 0.003, "rms angle {}", mean_sq.sqrt());
    }

    #[test]
    fn oracle_round_trip() {
        let out = generate(&spec(0.1, 1)).unwrap();
        let file = TensorFile::from_bytes(&oracle_file(&out).unwrap().to_bytes().unwrap()).unwrap();
        let back = Oracle::from_tensor_file(&file).unwrap();
        assert_eq!(back.labels, out.labels);
        assert_eq!(back.prefix, out.prefix);
        assert_eq!(back.request, out.request);
    }

    #[test]
    fn matched_agreement() {
        assert_eq!(matched_label_agreement(&[2, 2, 0, 0], &[0, 0, 1, 1]), 1.0);
        assert_eq!(matched_label_agreement(&[0, 0, 0, 0], &[0, 0, 1, 1]), 0.5);
    }
}
