//! Invariant checks run by `asmem verify` and the acceptance suite.
//!
//! Each check returns a [`CheckResult`] carrying the worst measured error next to the
//! tolerance it was held to.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::accounting::{asm_traffic, gqa_traffic, TrafficModel};
use crate::attention::{decompose_check, max_rel_err, merge, AttentionState, Scalar};
use crate::calibration::{
    build_bank, build_bank_chunked, fit_whitening, merge_chunk_traces, ClusterSpec, KeyMode, KeyPipeline,
    DEFAULT_EPSILON_SCALE,
};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::memory_bank::{build_hier_index, retrieve_hier, retrieve_linear, MemoryBank, MemoryEntry};
use crate::synth::random_unit;
use crate::tensorstore::{ModelGeometry, TraceSet};

pub const DECOMPOSE_TOL_F32: f64 = 1e-5;
pub const DECOMPOSE_TOL_F64: f64 = 1e-12;
pub const ALGEBRA_TOL: f64 = 1e-6;
pub const CHUNK_STATE_TOL: f64 = 1e-5;
pub const BANK_MATCH_TOL: f64 = 1e-4;
pub const WHITENING_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::InvalidParameter(format!("unknown precision {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed error (or mismatch count / fraction, see `detail`).
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn within(name: &str, measured: f64, tolerance: f64, detail: String) -> Self {
        Self { name: name.into(), passed: measured <= tolerance, measured, tolerance, detail }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} measured={:.3e} tolerance={:.3e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.detail
        )
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn decomposition_worst<T: Scalar>(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let d = [4usize, 8, 64][rng.gen_range(0..3)];
        let n_blocks = rng.gen_range(1..=8);
        let q: Vec<T> = (0..d).map(|_| T::narrow(gauss(&mut rng))).collect();
        let blocks: Vec<(Vec<T>, Vec<T>)> = (0..n_blocks)
            .map(|_| {
                let n = rng.gen_range(1..=32);
                let k = (0..n * d).map(|_| T::narrow(gauss(&mut rng))).collect();
                let v = (0..n * d).map(|_| T::narrow(gauss(&mut rng))).collect();
                (k, v)
            })
            .collect();
        let refs: Vec<(&[T], &[T])> = blocks.iter().map(|(k, v)| (&k[..], &v[..])).collect();
        worst = worst.max(decompose_check(&q, &refs)?.max_rel_err);
    }
    Ok(worst)
}

/// Block-merged vs single-pass attention over random instances: 1-8 blocks of 1-32
/// keys, head dims 4, 8 and 64.
pub fn check_decomposition(instances: usize, precision: Precision, seed: u64) -> Result<CheckResult> {
    let (worst, tol) = match precision {
        Precision::F32 => (decomposition_worst::<f32>(instances, seed)?, DECOMPOSE_TOL_F32),
        Precision::F64 => (decomposition_worst::<f64>(instances, seed)?, DECOMPOSE_TOL_F64),
    };
    Ok(CheckResult::within(
        &format!("decomposition_{precision}"),
        worst,
        tol,
        format!("{instances} instances"),
    ))
}

fn random_state(rng: &mut ChaCha8Rng, d: usize) -> AttentionState<f32> {
    AttentionState { a: (0..d).map(|_| gauss(rng) as f32).collect(), log_z: rng.gen_range(-5.0..5.0) }
}

fn state_err(x: &AttentionState<f32>, y: &AttentionState<f32>) -> f64 {
    let lz = if x.log_z == y.log_z { 0.0 } else { (x.log_z - y.log_z).abs() };
    max_rel_err(&x.a, &y.a).max(lz)
}

/// Commutativity, associativity, identity and mass additivity of the merge over random
/// state triples.
pub fn check_merge_algebra(triples: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut comm, mut assoc, mut ident, mut mass) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..triples {
        let d = rng.gen_range(1..=64);
        let (x, y, z) = (random_state(&mut rng, d), random_state(&mut rng, d), random_state(&mut rng, d));
        comm = comm.max(state_err(&merge(&x, &y)?, &merge(&y, &x)?));
        let left = merge(&merge(&x, &y)?, &z)?;
        let right = merge(&x, &merge(&y, &z)?)?;
        assoc = assoc.max(state_err(&left, &right));
        let e = AttentionState::empty(d);
        ident = ident.max(state_err(&merge(&x, &e)?, &x)).max(state_err(&merge(&e, &x)?, &x));
        let total = x.log_z.exp() + y.log_z.exp();
        mass = mass.max((merge(&x, &y)?.log_z.exp() - total).abs() / total);
    }
    let detail = format!("{triples} triples");
    Ok(vec![
        CheckResult::within("merge_commutativity", comm, ALGEBRA_TOL, detail.clone()),
        CheckResult::within("merge_associativity", assoc, ALGEBRA_TOL, detail.clone()),
        CheckResult::within("merge_identity", ident, ALGEBRA_TOL, detail.clone()),
        CheckResult::within("merge_mass_additivity", mass, ALGEBRA_TOL, detail),
    ])
}

/// Largest relative error between two trace sets' prefix states, per token and head.
pub fn trace_state_error(a: &TraceSet, b: &TraceSet) -> Result<f64> {
    if a.geometry() != b.geometry() || a.n_tokens() != b.n_tokens() {
        return Err(Error::Geometry("trace sets have different shapes".into()));
    }
    let d = a.geometry().d_h;
    let mut worst = 0.0f64;
    for (la, lb) in a.layers().iter().zip(b.layers()) {
        for (h, (xa, xb)) in la.attn_out.chunks_exact(d).zip(lb.attn_out.chunks_exact(d)).enumerate() {
            let (za, zb) = (la.log_z[h], lb.log_z[h]);
            let lz = if za == zb { 0.0 } else { (za - zb).abs() };
            worst = worst.max(max_rel_err(xa, xb)).max(lz);
        }
    }
    Ok(worst)
}

/// Largest per-entry relative error between two banks with identical structure: keys,
/// outputs and log masses of corresponding entries.
pub fn compare_banks(a: &MemoryBank, b: &MemoryBank) -> Result<f64> {
    if a.geometry != b.geometry || a.layers.len() != b.layers.len() {
        return Err(Error::Geometry("banks have different geometry".into()));
    }
    let mut worst = 0.0f64;
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        if la.len() != lb.len() {
            return Err(Error::Geometry("banks have different slot counts".into()));
        }
        for (sa, sb) in la.iter().zip(lb) {
            if sa.entries.len() != sb.entries.len() {
                return Ok(f64::INFINITY);
            }
            for (ea, eb) in sa.entries.iter().zip(&sb.entries) {
                if ea.key().len() != eb.key().len() || ea.a().len() != eb.a().len() {
                    return Ok(f64::INFINITY);
                }
                let lz = ea
                    .log_z()
                    .iter()
                    .zip(eb.log_z())
                    .map(|(x, y)| if x == y { 0.0 } else { (x - y).abs() / y.abs().max(1.0) })
                    .fold(0.0, f64::max);
                worst = worst.max(max_rel_err(ea.key(), eb.key())).max(max_rel_err(ea.a(), eb.a())).max(lz);
            }
        }
    }
    Ok(worst)
}

/// Chunk-merged states against the monolithic trace, and the banks built from each.
pub fn check_chunked(
    chunks: &[TraceSet],
    monolithic: &TraceSet,
    mode: KeyMode,
    spec: &ClusterSpec,
    d_prime: usize,
) -> Result<Vec<CheckResult>> {
    let merged = merge_chunk_traces(chunks)?;
    let state_err = trace_state_error(&merged, monolithic)?;
    let from_chunks = build_bank_chunked(chunks, mode, spec, d_prime)?;
    let from_mono = build_bank(monolithic, mode, spec, d_prime)?;
    let bank_err = compare_banks(&from_chunks, &from_mono)?;
    let detail = format!("{} chunks, {} tokens", chunks.len(), monolithic.n_tokens());
    Ok(vec![
        CheckResult::within("chunked_states", state_err, CHUNK_STATE_TOL, detail.clone()),
        CheckResult::within("chunked_bank", bank_err, BANK_MATCH_TOL, detail),
    ])
}

/// Random unit-key entries for retrieval checks.
pub fn random_entries(k: usize, dim: usize, seed: u64) -> Result<Vec<MemoryEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            let key = random_unit(&mut rng, dim).into_iter().map(|x| x as f32).collect();
            MemoryEntry::new(key, vec![0.0], vec![0.0])
        })
        .collect()
}

/// Count of queries where two-level lookup with every bucket expanded disagrees with the
/// linear scan.
pub fn hier_exhaustive_mismatches(entries: &[MemoryEntry], queries: &[Vec<f32>], n_l1: usize, seed: u64) -> Result<usize> {
    let index = build_hier_index(entries, n_l1, seed)?;
    let n = index.n_l1();
    let index = index.with_top_m(n)?;
    let mut mismatches = 0;
    for q in queries {
        let flat = retrieve_linear(q, entries)?;
        let hier = retrieve_hier(q, &index, entries)?;
        if flat.index != hier.index {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

/// Two-level lookup at `top_m = n_l1` against the linear scan on random keys and queries.
pub fn check_hier_exhaustive(k: usize, dim: usize, n_queries: usize, seed: u64) -> Result<CheckResult> {
    let entries = random_entries(k, dim, derive_seed(seed, 0, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 1));
    let queries: Vec<Vec<f32>> =
        (0..n_queries).map(|_| (0..dim).map(|_| gauss(&mut rng) as f32).collect()).collect();
    let n_l1 = ((k as f64).sqrt().round() as usize).max(1);
    let mismatches = hier_exhaustive_mismatches(&entries, &queries, n_l1, seed)?;
    Ok(CheckResult::within(
        "hier_exhaustive_equals_flat",
        mismatches as f64,
        0.0,
        format!("K={k} n_l1={n_l1} queries={n_queries} mismatches"),
    ))
}

/// Sample covariance of `n x d` rows, centered, divided by `n - 1`.
pub fn sample_covariance(rows: &[f32], d: usize) -> Vec<f64> {
    let n = rows.len() / d;
    let mut mean = vec![0.0f64; d];
    for r in rows.chunks_exact(d) {
        mean.iter_mut().zip(r).for_each(|(m, &x)| *m += x as f64 / n as f64);
    }
    let mut cov = vec![0.0f64; d * d];
    for r in rows.chunks_exact(d) {
        for i in 0..d {
            let xi = r[i] as f64 - mean[i];
            for j in 0..d {
                cov[i * d + j] += xi * (r[j] as f64 - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    cov
}

/// `||C - I||_F / ||I||_F`.
pub fn identity_deviation(cov: &[f64], d: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            let e = cov[i * d + j] - if i == j { 1.0 } else { 0.0 };
            s += e * e;
        }
    }
    (s / d as f64).sqrt()
}

/// `n x d` Gaussian rows with a random mean and covariance `R S^2 R^T`, where `R` is a
/// random rotation and the scales `S` run from 0.3 to 3.
pub fn correlated_gaussian(n: usize, d: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = nalgebra::DMatrix::<f64>::from_fn(d, d, |_, _| gauss(&mut rng));
    let rot = g.qr().q();
    let scales: Vec<f64> = (0..d).map(|j| 0.3 + 2.7 * j as f64 / (d.max(2) - 1) as f64).collect();
    let offset: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
    let mut rows = Vec::with_capacity(n * d);
    for _ in 0..n {
        let z: Vec<f64> = scales.iter().map(|s| s * gauss(&mut rng)).collect();
        rows.extend((0..d).map(|i| (offset[i] + (0..d).map(|j| rot[(i, j)] * z[j]).sum::<f64>()) as f32));
    }
    rows
}

/// Whitened covariance of correlated Gaussian samples against the identity.
pub fn check_whitening(n: usize, d: usize, seed: u64) -> Result<CheckResult> {
    let rows = correlated_gaussian(n, d, seed);
    let w = fit_whitening(&rows, d, DEFAULT_EPSILON_SCALE)?;
    let mut white = vec![0.0f32; rows.len()];
    for (x, out) in rows.chunks_exact(d).zip(white.chunks_exact_mut(d)) {
        w.apply(x, out);
    }
    let dev = identity_deviation(&sample_covariance(&white, d), d);
    Ok(CheckResult::within("whitening_identity", dev, WHITENING_TOL, format!("n={n} d={d}")))
}

/// `asm_traffic(K = L, d' = 2 d_h) == gqa_traffic(L)` over random geometries.
pub fn check_footprint(geometries: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..geometries {
        let h_kv = rng.gen_range(1..=16);
        let group = rng.gen_range(1..=8);
        let d_h = 2 * rng.gen_range(1..=128);
        let l = rng.gen_range(0..=1 << 20);
        let geometry = ModelGeometry::new(rng.gen_range(1..=64), h_kv * group, h_kv, d_h)?;
        let m = TrafficModel { geometry, prefix_len: l, k: l, d_prime: 2 * d_h as u64 };
        if asm_traffic(&m) != gqa_traffic(&m) {
            mismatches += 1;
        }
    }
    Ok(CheckResult::within("footprint_identity", mismatches as f64, 0.0, format!("{geometries} geometries, mismatches")))
}

/// Bank-specific checks against the traces it was built from.
///
/// Rebuilding from the traces must reproduce the bank bit-exactly; calibration keys fed
/// through the inference pipeline must match the stored lookup dimension; two-level
/// lookup at full fan-out must agree with the linear scan on every calibration key.
pub fn check_bank(bank: &MemoryBank, traces: &TraceSet) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let rebuilt = {
        let mut b = build_bank(traces, bank.mode, &bank.spec, bank.d_prime)?;
        b.prefix_len = bank.prefix_len;
        b
    };
    let same_entries = rebuilt.layers.iter().zip(&bank.layers).all(|(x, y)| {
        x.len() == y.len() && x.iter().zip(y).all(|(sx, sy)| sx.entries == sy.entries)
    }) && rebuilt.whitening == bank.whitening;
    out.push(CheckResult::within(
        "bank_reproducible",
        if same_entries { 0.0 } else { 1.0 },
        0.0,
        "rebuild from traces with stored settings".into(),
    ));

    let pipeline = KeyPipeline::new(bank.geometry, bank.mode, bank.whitening.as_ref(), bank.spec.centroid_org, bank.d_prime)?;
    let mut mismatches = 0usize;
    let mut total = 0usize;
    for (l, slots) in bank.layers.iter().enumerate() {
        let keys: Vec<Vec<Vec<f32>>> = (0..traces.n_tokens())
            .map(|t| pipeline.lookup_keys(l, traces.record(l, t).pre_rope_q))
            .collect::<Result<_>>()?;
        for (s, slot) in slots.iter().enumerate() {
            let queries: Vec<Vec<f32>> = keys.iter().map(|k| k[s].clone()).collect();
            let n_l1 = ((slot.entries.len() as f64).sqrt().round() as usize).max(1);
            mismatches +=
                hier_exhaustive_mismatches(&slot.entries, &queries, n_l1, derive_seed(bank.spec.seed, l as u64, s as u64))?;
            total += queries.len();
        }
    }
    out.push(CheckResult::within(
        "bank_hier_exhaustive_equals_flat",
        mismatches as f64,
        0.0,
        format!("{total} calibration lookups, mismatches"),
    ));
    Ok(out)
}

/// The standalone suite: every check that needs no input files.
pub fn run_builtin_suite(precision: Precision, seed: u64) -> Result<Vec<CheckResult>> {
    use crate::calibration::{CentroidOrg, RopeMode};
    use crate::synth::{generate, SynthSpec};

    let mut out = vec![
        check_decomposition(1000, precision, derive_seed(seed, 1, 0))?,
    ];
    out.extend(check_merge_algebra(1000, derive_seed(seed, 2, 0))?);
    let synth = generate(&SynthSpec {
        geometry: ModelGeometry::new(2, 4, 2, 8)?,
        prefix_len: 256,
        n_clusters: 8,
        queries_per_cluster: 16,
        spread: 0.05,
        seed,
        n_chunks: 4,
        local_len: 4,
    })?;
    let spec = ClusterSpec { k: 8, iterations: 20, batch_size: 256, seed, centroid_org: CentroidOrg::Individual };
    let mode = KeyMode { rope: RopeMode::PreRope, whitening: false, virtual_position: 0 };
    out.extend(check_chunked(&synth.chunks, &synth.traces, mode, &spec, 16)?);
    out.push(check_hier_exhaustive(1024, 16, 1000, derive_seed(seed, 3, 0))?);
    out.push(check_whitening(4096, 64, derive_seed(seed, 4, 0))?);
    out.push(check_footprint(100, derive_seed(seed, 5, 0))?);
    Ok(out)
}
