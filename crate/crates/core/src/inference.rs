//! Query-time path: build the lookup key, retrieve an entry per layer and slot, and
//! merge its prefix state into the query's self-attention over non-prefix tokens.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::attention::{attend_unchecked, merge_into};
use crate::calibration::KeyPipeline;
use crate::error::{Error, Result};
use crate::memory_bank::MemoryBank;
use crate::tensorstore::{read_tensor_file, Metadata, ModelGeometry, Tensor, TensorFile};

/// Queries for one layer plus the layer's local (non-prefix) keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestLayer {
    /// `n_tokens x h_q x d_h`.
    pub pre_rope_q: Vec<f32>,
    /// `n_tokens x h_q x d_h`; the query used for attention scores.
    pub rope_q: Vec<f32>,
    /// `n_local x h_kv x d_h`.
    pub local_k: Vec<f32>,
    pub local_v: Vec<f32>,
}

/// Query tokens and their local context. Token `t` attends to the first `visible[t]`
/// local positions (causal order).
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRequest {
    geometry: ModelGeometry,
    n_tokens: usize,
    n_local: usize,
    visible: Vec<u32>,
    layers: Vec<RequestLayer>,
}

impl InferenceRequest {
    pub fn new(geometry: ModelGeometry, n_local: usize, visible: Vec<u32>, layers: Vec<RequestLayer>) -> Result<Self> {
        geometry.validate()?;
        let n_tokens = visible.len();
        if layers.len() != geometry.n_layers {
            return Err(Error::Geometry(format!("request has {} layers", layers.len())));
        }
        let qw = geometry.query_width();
        let kw = geometry.h_kv * geometry.d_h;
        for (i, l) in layers.iter().enumerate() {
            if l.pre_rope_q.len() != n_tokens * qw
                || l.rope_q.len() != n_tokens * qw
                || l.local_k.len() != n_local * kw
                || l.local_v.len() != n_local * kw
            {
                return Err(Error::Geometry(format!("request layer {i} tensor sizes are inconsistent")));
            }
            let finite = l.pre_rope_q.iter().chain(&l.rope_q).chain(&l.local_k).chain(&l.local_v).all(|x| x.is_finite());
            if !finite {
                return Err(Error::NonFinite(format!("request layer {i}")));
            }
        }
        if let Some(&v) = visible.iter().find(|&&v| v as usize > n_local) {
            return Err(Error::Geometry(format!("visible count {v} exceeds {n_local} local tokens")));
        }
        Ok(Self { geometry, n_tokens, n_local, visible, layers })
    }

    pub fn geometry(&self) -> &ModelGeometry {
        &self.geometry
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_local(&self) -> usize {
        self.n_local
    }

    pub fn visible(&self) -> &[u32] {
        &self.visible
    }

    pub fn layers(&self) -> &[RequestLayer] {
        &self.layers
    }

    pub fn write_tensors(&self, tensors: &mut Vec<Tensor>) -> Result<()> {
        let g = &self.geometry;
        let qshape = [self.n_tokens, g.h_q, g.d_h];
        let kshape = [self.n_local, g.h_kv, g.d_h];
        for (i, l) in self.layers.iter().enumerate() {
            tensors.push(Tensor::f32(format!("layer{i}.pre_rope_q"), &qshape, l.pre_rope_q.clone())?);
            tensors.push(Tensor::f32(format!("layer{i}.rope_q"), &qshape, l.rope_q.clone())?);
            tensors.push(Tensor::f32(format!("layer{i}.local_k"), &kshape, l.local_k.clone())?);
            tensors.push(Tensor::f32(format!("layer{i}.local_v"), &kshape, l.local_v.clone())?);
        }
        tensors.push(Tensor::u32("visible", &[self.n_tokens], self.visible.clone())?);
        Ok(())
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut meta = Metadata::new();
        self.geometry.write_metadata(&mut meta);
        meta.insert("kind".into(), "request".into());
        let mut tensors = Vec::new();
        self.write_tensors(&mut tensors)?;
        TensorFile::new(tensors, meta)
    }

    /// Reads the request tensors; other tensors in the file are ignored.
    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let geometry = ModelGeometry::from_file(file)?;
        let visible_t = file.require("visible")?;
        let n_tokens = match visible_t.shape() {
            [n] => usize::try_from(*n).map_err(|_| Error::DimsOverflow)?,
            other => return Err(Error::Schema(format!("visible has shape {other:?}"))),
        };
        let visible = file.require_u32("visible", &[n_tokens])?.to_vec();
        let n_local = match file.require("layer0.local_k")?.shape() {
            [n, _, _] => usize::try_from(*n).map_err(|_| Error::DimsOverflow)?,
            other => return Err(Error::Schema(format!("layer0.local_k has shape {other:?}"))),
        };
        let qshape = [n_tokens, geometry.h_q, geometry.d_h];
        let kshape = [n_local, geometry.h_kv, geometry.d_h];
        let layers = (0..geometry.n_layers)
            .map(|i| {
                Ok(RequestLayer {
                    pre_rope_q: file.require_f32(&format!("layer{i}.pre_rope_q"), &qshape)?.to_vec(),
                    rope_q: file.require_f32(&format!("layer{i}.rope_q"), &qshape)?.to_vec(),
                    local_k: file.require_f32(&format!("layer{i}.local_k"), &kshape)?.to_vec(),
                    local_v: file.require_f32(&format!("layer{i}.local_v"), &kshape)?.to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(geometry, n_local, visible, layers)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_file(&read_tensor_file(path)?)
    }
}

/// Prefix keys and values, `prefix_len x h_kv x d_h` per layer; the ground truth that
/// the memory replaces.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixKv {
    pub prefix_len: usize,
    pub keys: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
}

impl PrefixKv {
    pub fn write_tensors(&self, geometry: &ModelGeometry, tensors: &mut Vec<Tensor>) -> Result<()> {
        let shape = [self.prefix_len, geometry.h_kv, geometry.d_h];
        for (i, (k, v)) in self.keys.iter().zip(&self.values).enumerate() {
            tensors.push(Tensor::f32(format!("layer{i}.prefix_k"), &shape, k.clone())?);
            tensors.push(Tensor::f32(format!("layer{i}.prefix_v"), &shape, v.clone())?);
        }
        Ok(())
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let g = ModelGeometry::from_file(file)?;
        let prefix_len: usize = file.meta_parse("prefix_len")?;
        let shape = [prefix_len, g.h_kv, g.d_h];
        let mut keys = Vec::with_capacity(g.n_layers);
        let mut values = Vec::with_capacity(g.n_layers);
        for i in 0..g.n_layers {
            let k = file.require_f32(&format!("layer{i}.prefix_k"), &shape)?;
            let v = file.require_f32(&format!("layer{i}.prefix_v"), &shape)?;
            if !k.iter().chain(v).all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} prefix")));
            }
            keys.push(k.to_vec());
            values.push(v.to_vec());
        }
        Ok(Self { prefix_len, keys, values })
    }
}

/// Gathers KV head `kvh` of a `n x h_kv x d_h` buffer into a contiguous `n x d_h` block.
pub(crate) fn kv_head_block(buf: &[f32], h_kv: usize, d_h: usize, kvh: usize) -> Vec<f32> {
    buf.chunks_exact(h_kv * d_h)
        .flat_map(|row| row[kvh * d_h..(kvh + 1) * d_h].iter().copied())
        .collect()
}

/// Retrieval outcome for one (token, layer, slot).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeRecord {
    pub token: usize,
    pub layer: usize,
    pub slot: usize,
    pub entry: usize,
    pub similarity: f64,
    pub ops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeReport {
    pub geometry: ModelGeometry,
    pub n_tokens: usize,
    pub n_slots: usize,
    /// Ordered by token, then layer, then slot.
    pub records: Vec<MergeRecord>,
    /// Per layer, `n_tokens x h_q x d_h`.
    pub merged_a: Vec<Vec<f32>>,
    /// Per layer, `n_tokens x h_q`.
    pub merged_log_z: Vec<Vec<f64>>,
    /// Per layer, `n_tokens x h_q`: log mass of the self-attention part alone.
    pub self_log_z: Vec<Vec<f64>>,
}

struct TokenResult {
    records: Vec<MergeRecord>,
    a: Vec<Vec<f32>>,
    log_z: Vec<Vec<f64>>,
    self_log_z: Vec<Vec<f64>>,
}

/// Runs retrieval and merge for every token, layer and slot of `request`.
pub fn infer_merge(request: &InferenceRequest, bank: &MemoryBank, use_hier: bool) -> Result<MergeReport> {
    let g = bank.geometry;
    if *request.geometry() != g {
        return Err(Error::Geometry(format!(
            "request geometry {:?} does not match bank geometry {g:?}",
            request.geometry()
        )));
    }
    if use_hier && !bank.has_hier() {
        return Err(Error::InvalidParameter("bank has no hierarchical index".into()));
    }
    let pipeline = KeyPipeline::new(g, bank.mode, bank.whitening.as_ref(), bank.spec.centroid_org, bank.d_prime)?;
    let layout = pipeline.layout;
    let (d, qw) = (g.d_h, g.query_width());
    let local: Vec<Vec<(Vec<f32>, Vec<f32>)>> = request
        .layers
        .iter()
        .map(|l| {
            (0..g.h_kv)
                .map(|kvh| (kv_head_block(&l.local_k, g.h_kv, d, kvh), kv_head_block(&l.local_v, g.h_kv, d, kvh)))
                .collect()
        })
        .collect();

    let per_token = (0..request.n_tokens)
        .into_par_iter()
        .map(|t| {
            let vis = request.visible[t] as usize * d;
            let mut out = TokenResult { records: Vec::new(), a: Vec::new(), log_z: Vec::new(), self_log_z: Vec::new() };
            for (l, layer) in request.layers.iter().enumerate() {
                let keys = pipeline.lookup_keys(l, &layer.pre_rope_q[t * qw..(t + 1) * qw])?;
                let q = &layer.rope_q[t * qw..(t + 1) * qw];
                let mut a = vec![0.0f32; qw];
                let mut log_z = vec![0.0f64; g.h_q];
                let mut self_lz = vec![0.0f64; g.h_q];
                for (s, key) in keys.iter().enumerate() {
                    let hit = bank.layers[l][s].retrieve(key, use_hier)?;
                    let entry = &bank.layers[l][s].entries[hit.index];
                    let (first, count) = pipeline.slot_heads(s);
                    for (j, h) in (first..first + count).enumerate() {
                        let (lk, lv) = &local[l][g.kv_head_of(h)];
                        let own = attend_unchecked(&q[h * d..(h + 1) * d], &lk[..vis], &lv[..vis]);
                        self_lz[h] = own.log_z;
                        log_z[h] = merge_into(
                            &own.a,
                            own.log_z,
                            &entry.a()[j * d..(j + 1) * d],
                            entry.log_z()[j],
                            &mut a[h * d..(h + 1) * d],
                        );
                    }
                    out.records.push(MergeRecord {
                        token: t,
                        layer: l,
                        slot: s,
                        entry: hit.index,
                        similarity: hit.similarity,
                        ops: hit.ops,
                    });
                }
                out.a.push(a);
                out.log_z.push(log_z);
                out.self_log_z.push(self_lz);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = MergeReport {
        geometry: g,
        n_tokens: request.n_tokens,
        n_slots: layout.n_slots,
        records: Vec::with_capacity(request.n_tokens * g.n_layers * layout.n_slots),
        merged_a: vec![Vec::with_capacity(request.n_tokens * qw); g.n_layers],
        merged_log_z: vec![Vec::with_capacity(request.n_tokens * g.h_q); g.n_layers],
        self_log_z: vec![Vec::with_capacity(request.n_tokens * g.h_q); g.n_layers],
    };
    for tok in per_token {
        report.records.extend(tok.records);
        for (l, ((a, lz), slz)) in tok.a.into_iter().zip(tok.log_z).zip(tok.self_log_z).enumerate() {
            report.merged_a[l].extend(a);
            report.merged_log_z[l].extend(lz);
            report.self_log_z[l].extend(slz);
        }
    }
    Ok(report)
}

/// Relative L2 errors of merged outputs against full attention over `[prefix; local]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionErrors {
    /// One value per token, over all layers and heads.
    pub per_token: Vec<f64>,
    /// Aligned with `MergeReport::records`: over the slot's heads.
    pub per_record: Vec<f64>,
}

fn rel_l2(sq_diff: f64, sq_ref: f64) -> f64 {
    if sq_diff == 0.0 {
        0.0
    } else {
        (sq_diff / sq_ref.max(f64::MIN_POSITIVE)).sqrt()
    }
}

/// Compares an existing report against the full-attention oracle.
pub fn reconstruction_errors(report: &MergeReport, request: &InferenceRequest, prefix: &PrefixKv) -> Result<ReconstructionErrors> {
    let g = report.geometry;
    if *request.geometry() != g || prefix.keys.len() != g.n_layers || report.n_tokens != request.n_tokens {
        return Err(Error::Geometry("oracle, request and report disagree".into()));
    }
    let (d, qw) = (g.d_h, g.query_width());
    let heads_per_slot = g.h_q / report.n_slots;
    let blocks: Vec<Vec<(Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>)>> = (0..g.n_layers)
        .map(|l| {
            (0..g.h_kv)
                .map(|kvh| {
                    (
                        kv_head_block(&prefix.keys[l], g.h_kv, d, kvh),
                        kv_head_block(&prefix.values[l], g.h_kv, d, kvh),
                        kv_head_block(&request.layers[l].local_k, g.h_kv, d, kvh),
                        kv_head_block(&request.layers[l].local_v, g.h_kv, d, kvh),
                    )
                })
                .collect()
        })
        .collect();

    let rows = (0..report.n_tokens)
        .into_par_iter()
        .map(|t| {
            let vis = request.visible[t] as usize * d;
            let mut tok_diff = 0.0;
            let mut tok_ref = 0.0;
            let mut per_slot = Vec::with_capacity(g.n_layers * report.n_slots);
            for l in 0..g.n_layers {
                let q = &request.layers[l].rope_q[t * qw..(t + 1) * qw];
                let mut slot_diff = vec![0.0; report.n_slots];
                let mut slot_ref = vec![0.0; report.n_slots];
                for h in 0..g.h_q {
                    let (pk, pv, lk, lv) = &blocks[l][g.kv_head_of(h)];
                    let keys = [&pk[..], &lk[..vis]].concat();
                    let values = [&pv[..], &lv[..vis]].concat();
                    let full = attend_unchecked(&q[h * d..(h + 1) * d], &keys, &values);
                    let got = &report.merged_a[l][t * qw + h * d..t * qw + (h + 1) * d];
                    let (diff, refn) = got.iter().zip(&full.a).fold((0.0, 0.0), |(s, r), (&x, &y)| {
                        let e = x as f64 - y as f64;
                        (s + e * e, r + (y as f64) * (y as f64))
                    });
                    slot_diff[h / heads_per_slot] += diff;
                    slot_ref[h / heads_per_slot] += refn;
                    tok_diff += diff;
                    tok_ref += refn;
                }
                per_slot.extend(slot_diff.iter().zip(&slot_ref).map(|(&a, &b)| rel_l2(a, b)));
            }
            (rel_l2(tok_diff, tok_ref), per_slot)
        })
        .collect::<Vec<_>>();
    let mut out = ReconstructionErrors { per_token: Vec::with_capacity(rows.len()), per_record: Vec::new() };
    for (tok, slots) in rows {
        out.per_token.push(tok);
        out.per_record.extend(slots);
    }
    Ok(out)
}

/// Per-token relative L2 error of flat-retrieval inference against full attention.
pub fn reconstruction_error(request: &InferenceRequest, bank: &MemoryBank, prefix: &PrefixKv) -> Result<Vec<f64>> {
    let report = infer_merge(request, bank, false)?;
    Ok(reconstruction_errors(&report, request, prefix)?.per_token)
}

impl MergeReport {
    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let g = &self.geometry;
        let mut meta = Metadata::new();
        g.write_metadata(&mut meta);
        meta.insert("kind".into(), "merge_report".into());
        let shape = [self.n_tokens, g.n_layers, self.n_slots];
        let mut tensors = vec![
            Tensor::u32("entry_index", &shape, self.records.iter().map(|r| r.entry as u32).collect())?,
            Tensor::f64("similarity", &shape, self.records.iter().map(|r| r.similarity).collect())?,
            Tensor::u32("ops", &shape, self.records.iter().map(|r| r.ops as u32).collect())?,
        ];
        for l in 0..g.n_layers {
            let merged_a = self.merged_a[l].clone();
            tensors.push(Tensor::f32(format!("layer{l}.merged_a"), &[self.n_tokens, g.h_q, g.d_h], merged_a)?);
            tensors.push(Tensor::f64(format!("layer{l}.merged_log_z"), &[self.n_tokens, g.h_q], self.merged_log_z[l].clone())?);
        }
        TensorFile::new(tensors, meta)
    }

    /// `token,layer,group,entry,similarity,error`; the error column is empty without an oracle.
    pub fn to_csv(&self, errors: Option<&ReconstructionErrors>) -> String {
        let mut out = String::from("token,layer,group,entry,similarity,error\n");
        for (i, r) in self.records.iter().enumerate() {
            let err = errors.map(|e| format!("{:.6e}", e.per_record[i])).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{:.6},{}", r.token, r.layer, r.slot, r.entry, r.similarity, err);
        }
        out
    }

    pub fn mean_ops(&self) -> f64 {
        self.records.iter().map(|r| r.ops as f64).sum::<f64>() / self.records.len().max(1) as f64
    }
}
