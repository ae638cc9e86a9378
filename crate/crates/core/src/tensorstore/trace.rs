//! Model geometry and calibration trace sets on top of the tensor container.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensorstore::format::{read_tensor_file, Metadata, Tensor, TensorFile, FORMAT_VERSION};

/// Attention head layout of the traced model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelGeometry {
    pub n_layers: usize,
    pub h_q: usize,
    pub h_kv: usize,
    pub d_h: usize,
}

impl ModelGeometry {
    pub fn new(n_layers: usize, h_q: usize, h_kv: usize, d_h: usize) -> Result<Self> {
        let geometry = Self { n_layers, h_q, h_kv, d_h };
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.h_q == 0 || self.h_kv == 0 || self.d_h == 0 {
            return Err(Error::Geometry(format!("all counts must be >= 1: {self:?}")));
        }
        if !self.h_q.is_multiple_of(self.h_kv) {
            return Err(Error::Geometry(format!(
                "h_q = {} is not divisible by h_kv = {}",
                self.h_q, self.h_kv
            )));
        }
        Ok(())
    }

    /// Query heads per KV head, `G = H_q / H_kv`.
    pub fn group_size(&self) -> usize {
        self.h_q / self.h_kv
    }

    /// Width of one token's query block, `H_q * d_h`.
    pub fn query_width(&self) -> usize {
        self.h_q * self.d_h
    }

    pub fn kv_head_of(&self, head: usize) -> usize {
        head / self.group_size()
    }

    pub fn write_metadata(&self, meta: &mut Metadata) {
        meta.insert("n_layers".into(), self.n_layers.to_string());
        meta.insert("h_q".into(), self.h_q.to_string());
        meta.insert("h_kv".into(), self.h_kv.to_string());
        meta.insert("d_h".into(), self.d_h.to_string());
        meta.insert("format_version".into(), FORMAT_VERSION.to_string());
    }

    pub fn from_file(file: &TensorFile) -> Result<Self> {
        Self::new(
            file.meta_parse("n_layers")?,
            file.meta_parse("h_q")?,
            file.meta_parse("h_kv")?,
            file.meta_parse("d_h")?,
        )
    }
}

/// One layer of recorded response-token queries with their prefix attention states.
///
/// Buffers are token-major: `pre_rope_q`, `rope_q` and `attn_out` hold
/// `n_tokens x h_q x d_h` values, `log_z` holds `n_tokens x h_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub pre_rope_q: Vec<f32>,
    pub rope_q: Vec<f32>,
    pub attn_out: Vec<f32>,
    pub log_z: Vec<f64>,
}

/// Borrowed view of one token's record at one layer.
#[derive(Debug, Clone, Copy)]
pub struct TraceRecord<'a> {
    pub pre_rope_q: &'a [f32],
    pub rope_q: &'a [f32],
    pub attn_out: &'a [f32],
    pub log_z: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    geometry: ModelGeometry,
    prefix_len: usize,
    n_tokens: usize,
    layers: Vec<LayerTrace>,
}

impl TraceSet {
    pub fn new(geometry: ModelGeometry, prefix_len: usize, layers: Vec<LayerTrace>) -> Result<Self> {
        geometry.validate()?;
        if layers.len() != geometry.n_layers {
            return Err(Error::Geometry(format!(
                "expected {} layers, got {}",
                geometry.n_layers,
                layers.len()
            )));
        }
        let width = geometry.query_width();
        let n_tokens = layers.first().map_or(0, |l| l.log_z.len() / geometry.h_q);
        for (i, layer) in layers.iter().enumerate() {
            let ok = layer.pre_rope_q.len() == n_tokens * width
                && layer.rope_q.len() == n_tokens * width
                && layer.attn_out.len() == n_tokens * width
                && layer.log_z.len() == n_tokens * geometry.h_q;
            if !ok {
                return Err(Error::Geometry(format!(
                    "layer {i} record counts differ from layer 0 ({n_tokens} tokens)"
                )));
            }
            let finite = layer.pre_rope_q.iter().all(|x| x.is_finite())
                && layer.rope_q.iter().all(|x| x.is_finite())
                && layer.attn_out.iter().all(|x| x.is_finite())
                && layer.log_z.iter().all(|x| x.is_finite());
            if !finite {
                return Err(Error::NonFinite(format!("layer {i} trace")));
            }
        }
        Ok(Self { geometry, prefix_len, n_tokens, layers })
    }

    pub fn geometry(&self) -> &ModelGeometry {
        &self.geometry
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn layers(&self) -> &[LayerTrace] {
        &self.layers
    }

    pub fn layer(&self, layer: usize) -> &LayerTrace {
        &self.layers[layer]
    }

    pub fn record(&self, layer: usize, token: usize) -> TraceRecord<'_> {
        let w = self.geometry.query_width();
        let h = self.geometry.h_q;
        let l = &self.layers[layer];
        TraceRecord {
            pre_rope_q: &l.pre_rope_q[token * w..(token + 1) * w],
            rope_q: &l.rope_q[token * w..(token + 1) * w],
            attn_out: &l.attn_out[token * w..(token + 1) * w],
            log_z: &l.log_z[token * h..(token + 1) * h],
        }
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut meta = Metadata::new();
        self.geometry.write_metadata(&mut meta);
        meta.insert("prefix_len".into(), self.prefix_len.to_string());
        meta.insert("kind".into(), "trace".into());
        let g = &self.geometry;
        let qshape = [self.n_tokens, g.h_q, g.d_h];
        let mut tensors = Vec::with_capacity(4 * g.n_layers);
        for (i, l) in self.layers.iter().enumerate() {
            tensors.push(Tensor::f32(format!("layer{i}.pre_rope_q"), &qshape, l.pre_rope_q.clone())?);
            tensors.push(Tensor::f32(format!("layer{i}.rope_q"), &qshape, l.rope_q.clone())?);
            tensors.push(Tensor::f32(format!("layer{i}.attn_out"), &qshape, l.attn_out.clone())?);
            tensors.push(Tensor::f64(format!("layer{i}.log_z"), &[self.n_tokens, g.h_q], l.log_z.clone())?);
        }
        TensorFile::new(tensors, meta)
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let geometry = ModelGeometry::from_file(file)?;
        let prefix_len: usize = file.meta_parse("prefix_len")?;
        let first = file.require("layer0.pre_rope_q")?;
        let n_tokens = match first.shape() {
            [n, h, d] if *h == geometry.h_q as u64 && *d == geometry.d_h as u64 => {
                usize::try_from(*n).map_err(|_| Error::DimsOverflow)?
            }
            other => {
                return Err(Error::Geometry(format!(
                    "layer0.pre_rope_q has shape {other:?}, inconsistent with metadata"
                )))
            }
        };
        let qshape = [n_tokens, geometry.h_q, geometry.d_h];
        let layers = (0..geometry.n_layers)
            .map(|i| {
                Ok(LayerTrace {
                    pre_rope_q: file.require_f32(&format!("layer{i}.pre_rope_q"), &qshape)?.to_vec(),
                    rope_q: file.require_f32(&format!("layer{i}.rope_q"), &qshape)?.to_vec(),
                    attn_out: file.require_f32(&format!("layer{i}.attn_out"), &qshape)?.to_vec(),
                    log_z: file.require_f64(&format!("layer{i}.log_z"), &[n_tokens, geometry.h_q])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(geometry, prefix_len, layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_tensor_file()?.to_bytes()?)?;
        Ok(())
    }
}

pub fn load_trace_set(path: impl AsRef<Path>) -> Result<TraceSet> {
    TraceSet::from_tensor_file(&read_tensor_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> TraceSet {
        let g = ModelGeometry::new(1, 1, 1, 2).unwrap();
        let layer = LayerTrace {
            pre_rope_q: vec![1.0, 0.0],
            rope_q: vec![1.0, 0.0],
            attn_out: vec![0.5, -0.5],
            log_z: vec![0.25],
        };
        TraceSet::new(g, 3, vec![layer]).unwrap()
    }

    #[test]
    fn minimal_schema_round_trips() {
        let t = minimal();
        let back = TraceSet::from_tensor_file(&t.to_tensor_file().unwrap()).unwrap();
        assert_eq!(back.n_tokens(), 1);
        assert_eq!(back, t);
        assert_eq!(back.record(0, 0).log_z, &[0.25]);
    }

    #[test]
    fn missing_log_z_is_reported() {
        let mut file = minimal().to_tensor_file().unwrap();
        file.tensors.retain(|t| t.name() != "layer0.log_z");
        let err = TraceSet::from_tensor_file(&file).unwrap_err();
        assert!(err.to_string().starts_with("missing required tensor"), "{err}");
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let g = ModelGeometry::new(1, 1, 1, 2).unwrap();
        let layer = LayerTrace {
            pre_rope_q: vec![f32::NAN, 0.0],
            rope_q: vec![1.0, 0.0],
            attn_out: vec![0.0, 0.0],
            log_z: vec![0.0],
        };
        assert!(matches!(TraceSet::new(g, 1, vec![layer]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn geometry_validation() {
        assert!(ModelGeometry::new(1, 6, 4, 8).is_err());
        assert!(ModelGeometry::new(0, 4, 4, 8).is_err());
        let g = ModelGeometry::new(2, 8, 2, 4).unwrap();
        assert_eq!(g.group_size(), 4);
        assert_eq!(g.kv_head_of(5), 1);
    }

    #[test]
    fn metadata_geometry_must_match_tensors() {
        let mut file = minimal().to_tensor_file().unwrap();
        file.metadata.insert("d_h".into(), "4".into());
        assert!(matches!(TraceSet::from_tensor_file(&file), Err(Error::Geometry(_))));
    }
}
