//! The per-layer dictionary of attention-state entries, its retrieval indices,
//! and its on-disk form.

mod entry;
mod retrieval;

use std::path::Path;

pub use entry::MemoryEntry;
pub use retrieval::{
    build_hier_index, retrieve_hier, retrieve_linear, HierarchicalIndex, Retrieval, DEFAULT_TOP_M, HIER_KMEANS_ITERS,
};

use crate::calibration::{CentroidOrg, ClusterSpec, KeyMode, RopeMode, SlotLayout, WhiteningTransform};
use crate::error::{Error, Result};
use crate::tensorstore::{read_tensor_file, Metadata, ModelGeometry, Tensor, TensorFile};

/// Entries of one clustering unit (a KV group, or the whole layer under joint organization).
#[derive(Debug, Clone, PartialEq)]
pub struct SlotEntries {
    pub entries: Vec<MemoryEntry>,
    pub hier: Option<HierarchicalIndex>,
}

impl SlotEntries {
    pub fn new(entries: Vec<MemoryEntry>) -> Self {
        Self { entries, hier: None }
    }

    pub fn retrieve(&self, key: &[f32], use_hier: bool) -> Result<Retrieval> {
        match (&self.hier, use_hier) {
            (_, false) => retrieve_linear(key, &self.entries),
            (Some(index), true) => retrieve_hier(key, index, &self.entries),
            (None, true) => Err(Error::InvalidParameter("bank has no hierarchical index".into())),
        }
    }
}

/// Immutable attention-state memory over every layer of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub geometry: ModelGeometry,
    pub prefix_len: usize,
    pub mode: KeyMode,
    pub whitening: Option<WhiteningTransform>,
    pub d_prime: usize,
    pub spec: ClusterSpec,
    /// `layers[layer][slot]`.
    pub layers: Vec<Vec<SlotEntries>>,
}

impl MemoryBank {
    pub fn layout(&self) -> Result<SlotLayout> {
        SlotLayout::new(&self.geometry, self.spec.centroid_org, self.d_prime)
    }

    pub fn entry_count(&self) -> usize {
        self.layers.iter().flatten().map(|s| s.entries.len()).sum()
    }

    /// Builds a first-level index for every slot. `n_l1` is clamped to each slot's entry count.
    pub fn build_hier_indices(&mut self, n_l1: usize, top_m: usize, seed: u64) -> Result<()> {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (s, slot) in layer.iter_mut().enumerate() {
                let n = n_l1.clamp(1, slot.entries.len());
                let index = build_hier_index(&slot.entries, n, crate::derive_seed(seed, l as u64, s as u64))?;
                let m = top_m.clamp(1, index.n_l1());
                slot.hier = Some(index.with_top_m(m)?);
            }
        }
        Ok(())
    }

    pub fn set_top_m(&mut self, top_m: usize) -> Result<()> {
        for slot in self.layers.iter_mut().flatten() {
            if let Some(index) = slot.hier.as_mut() {
                index.set_top_m(top_m.clamp(1, index.n_l1()))?;
            }
        }
        Ok(())
    }

    pub fn has_hier(&self) -> bool {
        self.layers.iter().flatten().all(|s| s.hier.is_some())
    }

    fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let layout = self.layout()?;
        if self.layers.len() != self.geometry.n_layers {
            return Err(Error::Schema(format!(
                "bank has {} layers, geometry says {}",
                self.layers.len(),
                self.geometry.n_layers
            )));
        }
        if self.mode.whitening != self.whitening.is_some() {
            return Err(Error::Schema("whitening transform must be present iff the key mode whitens".into()));
        }
        if let Some(w) = &self.whitening {
            if w.n_layers() != self.geometry.n_layers || w.h_q() != self.geometry.h_q || w.d_h() != self.geometry.d_h {
                return Err(Error::Schema("whitening transform does not match geometry".into()));
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.len() != layout.n_slots {
                return Err(Error::Schema(format!("layer {l} has {} slots, expected {}", layer.len(), layout.n_slots)));
            }
            for (s, slot) in layer.iter().enumerate() {
                if slot.entries.is_empty() {
                    return Err(Error::Schema(format!("layer {l} slot {s} has no entries")));
                }
                if slot.entries.len() > self.spec.k {
                    return Err(Error::Schema(format!("layer {l} slot {s} holds more than k entries")));
                }
                for e in &slot.entries {
                    if e.key().len() != layout.key_dim
                        || e.heads() != layout.heads_per_slot
                        || e.a().len() != layout.heads_per_slot * self.geometry.d_h
                    {
                        return Err(Error::Schema(format!("layer {l} slot {s} entry shape mismatch")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        self.validate()?;
        let layout = self.layout()?;
        let mut meta = Metadata::new();
        self.geometry.write_metadata(&mut meta);
        meta.insert("kind".into(), "bank".into());
        meta.insert("prefix_len".into(), self.prefix_len.to_string());
        meta.insert("key_mode".into(), self.mode.rope.to_string());
        meta.insert("whitening".into(), self.mode.whitening.to_string());
        meta.insert("virtual_position".into(), self.mode.virtual_position.to_string());
        meta.insert("d_prime".into(), self.d_prime.to_string());
        meta.insert("k".into(), self.spec.k.to_string());
        meta.insert("iterations".into(), self.spec.iterations.to_string());
        meta.insert("batch_size".into(), self.spec.batch_size.to_string());
        meta.insert("seed".into(), self.spec.seed.to_string());
        meta.insert("centroid_org".into(), self.spec.centroid_org.to_string());
        let hier = self.layers.iter().flatten().any(|s| s.hier.is_some());
        meta.insert("hier".into(), hier.to_string());

        let d_h = self.geometry.d_h;
        let mut tensors = Vec::new();
        if let Some(w) = &self.whitening {
            for l in 0..self.geometry.n_layers {
                tensors.push(Tensor::f32(format!("layer{l}.whiten"), &[self.geometry.h_q, d_h, d_h], w.layer_matrices(l).to_vec())?);
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (s, slot) in layer.iter().enumerate() {
                let n = slot.entries.len();
                let p = format!("layer{l}.slot{s}");
                tensors.push(Tensor::f32(
                    format!("{p}.keys"),
                    &[n, layout.key_dim],
                    slot.entries.iter().flat_map(|e| e.key().iter().copied()).collect(),
                )?);
                tensors.push(Tensor::f32(
                    format!("{p}.attn_out"),
                    &[n, layout.heads_per_slot, d_h],
                    slot.entries.iter().flat_map(|e| e.a().iter().copied()).collect(),
                )?);
                tensors.push(Tensor::f64(
                    format!("{p}.log_z"),
                    &[n, layout.heads_per_slot],
                    slot.entries.iter().flat_map(|e| e.log_z().iter().copied()).collect(),
                )?);
                match (&slot.hier, hier) {
                    (Some(index), _) => {
                        let n_l1 = index.n_l1();
                        let mut offsets = Vec::with_capacity(n_l1 + 1);
                        offsets.push(0u32);
                        for b in index.buckets() {
                            offsets.push(offsets.last().unwrap() + b.len() as u32);
                        }
                        tensors.push(Tensor::f32(format!("{p}.l1_keys"), &[n_l1, layout.key_dim], index.l1_keys().to_vec())?);
                        tensors.push(Tensor::u32(format!("{p}.bucket_offsets"), &[n_l1 + 1], offsets)?);
                        tensors.push(Tensor::u32(
                            format!("{p}.bucket_members"),
                            &[n],
                            index.buckets().iter().flatten().copied().collect(),
                        )?);
                        tensors.push(Tensor::u32(format!("{p}.top_m"), &[], vec![index.top_m() as u32])?);
                    }
                    (None, true) => {
                        return Err(Error::Schema(format!("layer {l} slot {s} lacks the hierarchical index")));
                    }
                    (None, false) => {}
                }
            }
        }
        TensorFile::new(tensors, meta)
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        if file.meta("kind")? != "bank" {
            return Err(Error::Schema("not a memory bank file".into()));
        }
        let geometry = ModelGeometry::from_file(file)?;
        let rope: RopeMode = file.meta_parse("key_mode")?;
        let whitening: bool = file.meta_parse("whitening")?;
        let mode = KeyMode { rope, whitening, virtual_position: file.meta_parse("virtual_position")? };
        let spec = ClusterSpec {
            k: file.meta_parse("k")?,
            iterations: file.meta_parse("iterations")?,
            batch_size: file.meta_parse("batch_size")?,
            seed: file.meta_parse("seed")?,
            centroid_org: file.meta_parse::<CentroidOrg>("centroid_org")?,
        };
        spec.validate()?;
        let d_prime: usize = file.meta_parse("d_prime")?;
        let hier: bool = file.meta_parse("hier")?;
        let layout = SlotLayout::new(&geometry, spec.centroid_org, d_prime)?;
        let d_h = geometry.d_h;

        let whitening = if whitening {
            let mats = (0..geometry.n_layers)
                .map(|l| Ok(file.require_f32(&format!("layer{l}.whiten"), &[geometry.h_q, d_h, d_h])?.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            Some(WhiteningTransform::from_matrices(geometry.n_layers, geometry.h_q, d_h, mats.concat())?)
        } else {
            None
        };

        let mut layers = Vec::with_capacity(geometry.n_layers);
        for l in 0..geometry.n_layers {
            let mut slots = Vec::with_capacity(layout.n_slots);
            for s in 0..layout.n_slots {
                let p = format!("layer{l}.slot{s}");
                let keys_t = file.require(&format!("{p}.keys"))?;
                let n = match keys_t.shape() {
                    [n, _] => usize::try_from(*n).map_err(|_| Error::DimsOverflow)?,
                    other => return Err(Error::Schema(format!("{p}.keys has shape {other:?}"))),
                };
                let keys = file.require_f32(&format!("{p}.keys"), &[n, layout.key_dim])?;
                let a = file.require_f32(&format!("{p}.attn_out"), &[n, layout.heads_per_slot, d_h])?;
                let log_z = file.require_f64(&format!("{p}.log_z"), &[n, layout.heads_per_slot])?;
                let entries = (0..n)
                    .map(|i| {
                        let aw = layout.heads_per_slot * d_h;
                        MemoryEntry::new(
                            keys[i * layout.key_dim..(i + 1) * layout.key_dim].to_vec(),
                            a[i * aw..(i + 1) * aw].to_vec(),
                            log_z[i * layout.heads_per_slot..(i + 1) * layout.heads_per_slot].to_vec(),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let index = if hier {
                    let offsets_t = file.require(&format!("{p}.bucket_offsets"))?;
                    let n_l1 = match offsets_t.shape() {
                        [m] if *m >= 2 => usize::try_from(*m - 1).map_err(|_| Error::DimsOverflow)?,
                        other => return Err(Error::Schema(format!("{p}.bucket_offsets has shape {other:?}"))),
                    };
                    let offsets = file.require_u32(&format!("{p}.bucket_offsets"), &[n_l1 + 1])?;
                    let members = file.require_u32(&format!("{p}.bucket_members"), &[n])?;
                    let l1 = file.require_f32(&format!("{p}.l1_keys"), &[n_l1, layout.key_dim])?;
                    let top_m = file.require_u32(&format!("{p}.top_m"), &[])?[0] as usize;
                    if offsets[0] != 0 || offsets[n_l1] as usize != n || offsets.windows(2).any(|w| w[0] > w[1]) {
                        return Err(Error::Schema(format!("{p}.bucket_offsets is not a valid partition")));
                    }
                    let buckets = offsets
                        .windows(2)
                        .map(|w| members[w[0] as usize..w[1] as usize].to_vec())
                        .collect();
                    Some(HierarchicalIndex::from_parts(l1.to_vec(), layout.key_dim, buckets, top_m, n)?)
                } else {
                    None
                };
                slots.push(SlotEntries { entries, hier: index });
            }
            layers.push(slots);
        }
        let bank = Self {
            geometry,
            prefix_len: file.meta_parse("prefix_len")?,
            mode,
            whitening,
            d_prime,
            spec,
            layers,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_tensor_file()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::from_bytes(bytes)?)
    }
}

pub fn serialize_bank(bank: &MemoryBank, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, bank.to_bytes()?)?;
    Ok(())
}

pub fn deserialize_bank(path: impl AsRef<Path>) -> Result<MemoryBank> {
    MemoryBank::from_tensor_file(&read_tensor_file(path)?)
}
