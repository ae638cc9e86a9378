use crate::error::{Error, Result};

/// One dictionary entry: a lookup key and the aggregated attention state of its cluster.
///
/// `a` holds `heads x d_h` values and `log_z` one log mass per head. A `log_z` of
/// `-inf` means the entry carries no prefix mass for that head.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    key: Vec<f32>,
    key_norm: f64,
    a: Vec<f32>,
    log_z: Vec<f64>,
}

impl MemoryEntry {
    pub fn new(key: Vec<f32>, a: Vec<f32>, log_z: Vec<f64>) -> Result<Self> {
        if key.is_empty() || log_z.is_empty() || !a.len().is_multiple_of(log_z.len()) || a.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "entry with key dim {}, {} output values, {} masses",
                key.len(),
                a.len(),
                log_z.len()
            )));
        }
        if !key.iter().chain(&a).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("memory entry".into()));
        }
        if log_z.iter().any(|z| z.is_nan() || *z == f64::INFINITY) {
            return Err(Error::NonFinite("memory entry log mass".into()));
        }
        let key_norm = norm(&key);
        if key_norm == 0.0 {
            return Err(Error::InvalidParameter("memory entry key has zero norm".into()));
        }
        Ok(Self { key, key_norm, a, log_z })
    }

    pub fn key(&self) -> &[f32] {
        &self.key
    }

    pub fn key_norm(&self) -> f64 {
        self.key_norm
    }

    pub fn a(&self) -> &[f32] {
        &self.a
    }

    pub fn log_z(&self) -> &[f64] {
        &self.log_z
    }

    pub fn heads(&self) -> usize {
        self.log_z.len()
    }

    pub fn head_dim(&self) -> usize {
        self.a.len() / self.log_z.len()
    }
}

pub(crate) fn norm(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

#[inline]
pub(crate) fn dot(x: &[f32], y: &[f32]) -> f64 {
    x.iter().zip(y).map(|(&a, &b)| a as f64 * b as f64).sum()
}
