//! Softmax attention that reports its log-sum-exp mass, and the merge operator
//! that combines states over disjoint key blocks.
//!
//! An [`AttentionState`] `(a, log_z)` for query `q` over a block `(K, V)` holds
//! `a = softmax(q K^T / sqrt(d)) V` and `log_z = log sum_j exp(q . k_j / sqrt(d))`.
//! Two states over disjoint blocks merge into the state over their concatenation:
//!
//! ```text
//! log_z = logaddexp(log_z1, log_z2)
//! a     = exp(log_z1 - log_z) a1 + exp(log_z2 - log_z) a2
//! ```
//!
//! Inputs and outputs are `f32` or `f64`; accumulation is always `f64`.

use std::fmt::Debug;

use crate::error::{Error, Result};

/// Element type of attention inputs and outputs.
pub trait Scalar: Copy + Default + PartialEq + PartialOrd + Debug + Send + Sync + 'static {
    fn widen(self) -> f64;
    fn narrow(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
    #[inline]
    fn narrow(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn widen(self) -> f64 {
        self
    }
    #[inline]
    fn narrow(v: f64) -> Self {
        v
    }
}

/// Attention output and log mass of one query over one key/value block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState<T = f32> {
    pub a: Vec<T>,
    pub log_z: f64,
}

impl<T: Scalar> AttentionState<T> {
    /// The state of an empty block: the identity of [`merge`].
    pub fn empty(d: usize) -> Self {
        Self { a: vec![T::default(); d], log_z: f64::NEG_INFINITY }
    }

    pub fn is_empty(&self) -> bool {
        self.log_z == f64::NEG_INFINITY
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }
}

/// `log(exp(x) + exp(y))` without overflow; `-inf` acts as zero mass.
pub fn logaddexp(x: f64, y: f64) -> f64 {
    let hi = x.max(y);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    let lo = x.min(y);
    hi + (lo - hi).exp().ln_1p()
}

/// `log sum_i exp(x_i)`; `-inf` for an empty or all-`-inf` input.
pub fn logsumexp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let hi = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + xs.into_iter().map(|x| (x - hi).exp()).sum::<f64>().ln()
}

fn check_finite<T: Scalar>(xs: &[T], what: &str) -> Result<()> {
    if xs.iter().all(|x| x.widen().is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_owned()))
    }
}

/// Attention of `q` over row-major `keys`/`values` (`n x d` each).
pub fn attn_with_state<T: Scalar>(q: &[T], keys: &[T], values: &[T]) -> Result<AttentionState<T>> {
    let d = q.len();
    if d == 0 {
        return Err(Error::DimensionMismatch("query has zero dimension".into()));
    }
    if !keys.len().is_multiple_of(d) || values.len() != keys.len() {
        return Err(Error::DimensionMismatch(format!(
            "query dim {d}, {} key elements, {} value elements",
            keys.len(),
            values.len()
        )));
    }
    check_finite(q, "query")?;
    check_finite(keys, "keys")?;
    check_finite(values, "values")?;
    Ok(attend_unchecked(q, keys, values))
}

/// [`attn_with_state`] without validation; callers guarantee shapes and finiteness.
pub(crate) fn attend_unchecked<T: Scalar>(q: &[T], keys: &[T], values: &[T]) -> AttentionState<T> {
    let d = q.len();
    let n = keys.len() / d;
    if n == 0 {
        return AttentionState::empty(d);
    }
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = keys
        .chunks_exact(d)
        .map(|k| q.iter().zip(k).map(|(&x, &y)| x.widen() * y.widen()).sum::<f64>() * scale)
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut acc = vec![0.0f64; d];
    let mut total = 0.0f64;
    for (s, v) in scores.iter().zip(values.chunks_exact(d)) {
        let w = (s - max).exp();
        total += w;
        for (o, &x) in acc.iter_mut().zip(v) {
            *o += w * x.widen();
        }
    }
    AttentionState {
        a: acc.into_iter().map(|x| T::narrow(x / total)).collect(),
        log_z: max + total.ln(),
    }
}

/// Combines states of the same query over two disjoint blocks.
pub fn merge<T: Scalar>(s1: &AttentionState<T>, s2: &AttentionState<T>) -> Result<AttentionState<T>> {
    if s1.a.len() != s2.a.len() {
        return Err(Error::DimensionMismatch(format!(
            "merging states of dim {} and {}",
            s1.a.len(),
            s2.a.len()
        )));
    }
    let mut a = vec![T::default(); s1.a.len()];
    let log_z = merge_into(&s1.a, s1.log_z, &s2.a, s2.log_z, &mut a);
    Ok(AttentionState { a, log_z })
}

/// Slice form of [`merge`]: writes the merged output into `out`, returns the merged log mass.
pub(crate) fn merge_into<T: Scalar>(a1: &[T], lz1: f64, a2: &[T], lz2: f64, out: &mut [T]) -> f64 {
    if lz2 == f64::NEG_INFINITY {
        out.copy_from_slice(a1);
        return lz1;
    }
    if lz1 == f64::NEG_INFINITY {
        out.copy_from_slice(a2);
        return lz2;
    }
    let lz = logaddexp(lz1, lz2);
    let w1 = (lz1 - lz).exp();
    let w2 = (lz2 - lz).exp();
    for ((o, &x), &y) in out.iter_mut().zip(a1).zip(a2) {
        *o = T::narrow(w1 * x.widen() + w2 * y.widen());
    }
    lz
}

/// Outcome of comparing block-wise merged attention against attention over the concatenation.
#[derive(Debug, Clone)]
pub struct DecomposeReport<T = f32> {
    pub merged: AttentionState<T>,
    pub full: AttentionState<T>,
    /// `max_i |merged.a_i - full.a_i| / max_i |full.a_i|`.
    pub a_rel_err: f64,
    pub log_z_abs_err: f64,
    /// Larger of the two errors above.
    pub max_rel_err: f64,
}

/// Relative error of `x` against reference `y`, scaled by the largest reference magnitude.
pub fn max_rel_err<T: Scalar, U: Scalar>(x: &[T], y: &[U]) -> f64 {
    let scale = y.iter().map(|v| v.widen().abs()).fold(0.0, f64::max);
    let diff = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a.widen() - b.widen()).abs())
        .fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

/// Checks the block decomposition identity for one query: folds per-block states with
/// [`merge`] and compares against a single pass over the concatenated blocks.
pub fn decompose_check<T: Scalar>(q: &[T], blocks: &[(&[T], &[T])]) -> Result<DecomposeReport<T>> {
    if blocks.is_empty() {
        return Err(Error::InvalidParameter("decompose_check needs at least one block".into()));
    }
    let mut merged = AttentionState::empty(q.len());
    let mut all_keys = Vec::new();
    let mut all_values = Vec::new();
    for (keys, values) in blocks {
        let state = attn_with_state(q, keys, values)?;
        merged = merge(&merged, &state)?;
        all_keys.extend_from_slice(keys);
        all_values.extend_from_slice(values);
    }
    let full = attn_with_state(q, &all_keys, &all_values)?;
    let a_rel_err = max_rel_err(&merged.a, &full.a);
    let log_z_abs_err = if merged.log_z == full.log_z { 0.0 } else { (merged.log_z - full.log_z).abs() };
    Ok(DecomposeReport {
        max_rel_err: a_rel_err.max(log_z_abs_err),
        merged,
        full,
        a_rel_err,
        log_z_abs_err,
    })
}

/// Rotary embedding parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeConfig {
    pub theta_base: f64,
    /// Position used when rotating lookup keys to a shared frame.
    pub virtual_position: u64,
}

impl Default for RopeConfig {
    fn default() -> Self {
        Self { theta_base: 10_000.0, virtual_position: 0 }
    }
}

/// Rotates each head's coordinate pairs `(x_{2i}, x_{2i+1})` by `position * theta^(-2i/d_h)`.
///
/// `q` holds `H x d_h` values.
pub fn apply_rope<T: Scalar>(q: &[T], d_h: usize, position: u64, cfg: &RopeConfig) -> Result<Vec<T>> {
    if d_h == 0 || !d_h.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("rotary embedding needs even d_h, got {d_h}")));
    }
    if !q.len().is_multiple_of(d_h) {
        return Err(Error::DimensionMismatch(format!(
            "query length {} is not a multiple of d_h = {d_h}",
            q.len()
        )));
    }
    if !(cfg.theta_base > 0.0) {
        return Err(Error::InvalidParameter("theta_base must be positive".into()));
    }
    if position == 0 {
        return Ok(q.to_vec());
    }
    let (sin, cos): (Vec<f64>, Vec<f64>) = (0..d_h / 2)
        .map(|i| {
            let freq = cfg.theta_base.powf(-2.0 * i as f64 / d_h as f64);
            (position as f64 * freq).sin_cos()
        })
        .unzip();
    let mut out = Vec::with_capacity(q.len());
    for head in q.chunks_exact(d_h) {
        for (i, pair) in head.chunks_exact(2).enumerate() {
            let (x, y) = (pair[0].widen(), pair[1].widen());
            out.push(T::narrow(x * cos[i] - y * sin[i]));
            out.push(T::narrow(x * sin[i] + y * cos[i]));
        }
    }
    Ok(out)
}
