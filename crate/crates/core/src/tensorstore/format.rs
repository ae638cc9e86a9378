//! The `ASMTENS` binary container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "ASMTENS\0"
//! version    u32       1
//! meta_len   u64       byte length of the metadata block
//! metadata   meta_len  UTF-8 lines "key=value\n", keys strictly ascending
//! n_tensors  u64
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   dtype    u8        0 = f32, 1 = f64, 2 = u32
//!   rank     u32, dims u64 x rank
//!   data     product(dims) x dtype size bytes, row-major
//! ```
//!
//! The encoding is canonical: any byte string accepted by [`TensorFile::from_bytes`]
//! re-encodes to exactly the same bytes.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ASMTENS\0";
pub const FORMAT_VERSION: u32 = 1;

pub type Metadata = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
        }
    }

    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U32 => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U32),
            other => Err(Error::UnknownDtype(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U32(_) => DType::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A named, shaped, row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: String,
    shape: Vec<u64>,
    data: TensorData,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<u64>, data: TensorData) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::Metadata("empty tensor name".into()));
        }
        let count = element_count(&shape)?;
        if count != data.len() as u64 {
            return Err(Error::ShapeMismatch(name));
        }
        Ok(Self { name, shape, data })
    }

    pub fn f32(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::new(name, to_dims(shape), TensorData::F32(data))
    }

    pub fn f64(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(name, to_dims(shape), TensorData::F64(data))
    }

    pub fn u32(name: impl Into<String>, shape: &[usize], data: Vec<u32>) -> Result<Self> {
        Self::new(name, to_dims(shape), TensorData::U32(data))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }
}

fn to_dims(shape: &[usize]) -> Vec<u64> {
    shape.iter().map(|&d| d as u64).collect()
}

fn element_count(shape: &[u64]) -> Result<u64> {
    shape
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::DimsOverflow)
}

/// Metadata plus an ordered list of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub metadata: Metadata,
    pub tensors: Vec<Tensor>,
}

impl TensorFile {
    pub fn new(tensors: Vec<Tensor>, metadata: Metadata) -> Result<Self> {
        let file = Self { metadata, tensors };
        file.validate()?;
        Ok(file)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn validate(&self) -> Result<()> {
        for (key, value) in &self.metadata {
            if key.is_empty() || key.contains(['=', '\n']) || value.contains('\n') {
                return Err(Error::Metadata(format!("invalid entry {key:?}={value:?}")));
            }
        }
        let mut seen = HashSet::with_capacity(self.tensors.len());
        for tensor in &self.tensors {
            if !seen.insert(tensor.name.as_str()) {
                return Err(Error::DuplicateName(tensor.name.clone()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut meta = String::new();
        for (key, value) in &self.metadata {
            meta.push_str(key);
            meta.push('=');
            meta.push_str(value);
            meta.push('\n');
        }

        let payload: usize = self
            .tensors
            .iter()
            .map(|t| t.data.len() * t.dtype().size() + t.name.len() + 16 + 8 * t.shape.len())
            .sum();
        let mut out = Vec::with_capacity(32 + meta.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for tensor in &self.tensors {
            let name_len = u32::try_from(tensor.name.len())
                .map_err(|_| Error::Metadata("tensor name too long".into()))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(tensor.name.as_bytes());
            out.push(tensor.dtype().tag());
            out.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
            for dim in &tensor.shape {
                out.extend_from_slice(&dim.to_le_bytes());
            }
            match &tensor.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).map_err(|_| Error::BadMagic)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let meta_len = r.len_u64()?;
        let metadata = parse_metadata(r.take(meta_len)?)?;

        let n_tensors = r.u64()?;
        let mut tensors = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..n_tensors {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Metadata("tensor name is not UTF-8".into()))?
                .to_owned();
            if name.is_empty() {
                return Err(Error::Metadata("empty tensor name".into()));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateName(name));
            }
            let dtype = DType::from_tag(r.u8()?)?;
            let rank = r.u32()? as usize;
            if rank.checked_mul(8).is_none_or(|n| n > r.remaining()) {
                return Err(Error::Truncated);
            }
            let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let count = element_count(&shape)?;
            let byte_len = count
                .checked_mul(dtype.size() as u64)
                .ok_or(Error::DimsOverflow)?;
            let raw = r.take(usize::try_from(byte_len).map_err(|_| Error::Truncated)?)?;
            let data = match dtype {
                DType::F32 => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::F64 => TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::U32 => TensorData::U32(
                    raw.chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            tensors.push(Tensor { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(Error::TrailingBytes);
        }
        Ok(Self { metadata, tensors })
    }

    // Typed accessors used by the schema loaders.

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.to_owned()))
    }

    pub fn require_f32(&self, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let t = self.require(name)?;
        check_shape(t, shape)?;
        match &t.data {
            TensorData::F32(v) => Ok(v),
            _ => Err(Error::Schema(format!("tensor {name:?} must be f32"))),
        }
    }

    pub fn require_u32(&self, name: &str, shape: &[usize]) -> Result<&[u32]> {
        let t = self.require(name)?;
        check_shape(t, shape)?;
        match &t.data {
            TensorData::U32(v) => Ok(v),
            _ => Err(Error::Schema(format!("tensor {name:?} must be u32"))),
        }
    }

    /// Reads an f64 tensor, widening f32 storage.
    pub fn require_f64(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let t = self.require(name)?;
        check_shape(t, shape)?;
        match &t.data {
            TensorData::F64(v) => Ok(v.clone()),
            TensorData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            TensorData::U32(_) => Err(Error::Schema(format!("tensor {name:?} must be floating point"))),
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Metadata(format!("missing key {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Metadata(format!("cannot parse {key}={raw:?}")))
    }
}

fn check_shape(t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape.len() != shape.len() || t.shape.iter().zip(shape).any(|(&a, &b)| a != b as u64) {
        return Err(Error::Schema(format!(
            "tensor {:?} has shape {:?}, expected {:?}",
            t.name, t.shape, shape
        )));
    }
    Ok(())
}

fn parse_metadata(block: &[u8]) -> Result<Metadata> {
    let text = std::str::from_utf8(block).map_err(|_| Error::Metadata("not UTF-8".into()))?;
    let mut map = Metadata::new();
    if text.is_empty() {
        return Ok(map);
    }
    let body = text
        .strip_suffix('\n')
        .ok_or_else(|| Error::Metadata("block must end with a newline".into()))?;
    let mut last: Option<&str> = None;
    for line in body.split('\n') {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Metadata(format!("line without '=': {line:?}")))?;
        if key.is_empty() {
            return Err(Error::Metadata("empty key".into()));
        }
        if last.is_some_and(|prev| prev >= key) {
            return Err(Error::Metadata(format!("keys not strictly ascending at {key:?}")));
        }
        last = Some(key);
        map.insert(key.to_owned(), value.to_owned());
    }
    Ok(map)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Truncated);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len_u64(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Truncated)
    }
}

pub fn write_tensor_file(path: impl AsRef<Path>, tensors: Vec<Tensor>, metadata: Metadata) -> Result<()> {
    let bytes = TensorFile::new(tensors, metadata)?.to_bytes()?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorFile> {
    TensorFile::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_layout() {
        let bytes = TensorFile::default().to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes.len(), 8 + 4 + 8 + 8);
        assert_eq!(TensorFile::from_bytes(&bytes).unwrap(), TensorFile::default());
    }

    #[test]
    fn zero_tensor_round_trip() {
        let t = Tensor::f32("q", &[2, 3], vec![0.0; 6]).unwrap();
        let bytes = TensorFile::new(vec![t], Metadata::new()).unwrap().to_bytes().unwrap();
        let back = TensorFile::from_bytes(&bytes).unwrap();
        let q = back.get("q").unwrap();
        assert_eq!(q.shape(), &[2, 3]);
        match q.data() {
            TensorData::F32(v) => assert_eq!(v, &vec![0.0f32; 6]),
            _ => panic!("dtype changed"),
        }
        // name_len(4) + name(1) + dtype(1) + rank(4) + dims(16) precede 24 zero data bytes
        assert!(bytes.ends_with(&[0u8; 24]));
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = TensorFile::default().to_bytes().unwrap();
        bytes[0] = b'X';
        assert_eq!(TensorFile::from_bytes(&bytes).unwrap_err().to_string(), "bad magic");
        assert!(matches!(TensorFile::from_bytes(b"ASM"), Err(Error::BadMagic)));
    }

    #[test]
    fn rejects_truncation_mid_tensor() {
        let t = Tensor::f64("z", &[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = TensorFile::new(vec![t], Metadata::new()).unwrap().to_bytes().unwrap();
        let err = TensorFile::from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        assert_eq!(err.to_string(), "truncated data");
    }

    #[test]
    fn rejects_unsupported_version() {
        let mut bytes = TensorFile::default().to_bytes().unwrap();
        bytes[8] = 2;
        assert!(matches!(TensorFile::from_bytes(&bytes), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn rejects_dims_overflow() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.push(0);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&3u64.to_le_bytes());
        assert!(matches!(TensorFile::from_bytes(&bytes), Err(Error::DimsOverflow)));
    }

    #[test]
    fn rejects_duplicates_and_mismatched_shapes() {
        let a = Tensor::u32("a", &[1], vec![1]).unwrap();
        assert!(matches!(
            TensorFile::new(vec![a.clone(), a], Metadata::new()),
            Err(Error::DuplicateName(_))
        ));
        assert!(matches!(
            Tensor::f32("b", &[2, 2], vec![0.0; 3]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn metadata_is_canonical() {
        let mut meta = Metadata::new();
        meta.insert("b".into(), "2".into());
        meta.insert("a".into(), "x=y".into());
        let bytes = TensorFile::new(vec![], meta.clone()).unwrap().to_bytes().unwrap();
        let back = TensorFile::from_bytes(&bytes).unwrap();
        assert_eq!(back.metadata, meta);

        let mut bad = Metadata::new();
        bad.insert("k".into(), "line\nbreak".into());
        assert!(TensorFile::new(vec![], bad).is_err());
    }

    #[test]
    fn scalar_tensor_has_one_element() {
        let t = Tensor::f32("s", &[], vec![1.5]).unwrap();
        let bytes = TensorFile::new(vec![t.clone()], Metadata::new()).unwrap().to_bytes().unwrap();
        assert_eq!(TensorFile::from_bytes(&bytes).unwrap().tensors, vec![t]);
    }
}
