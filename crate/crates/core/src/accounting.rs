//! Prefix-traffic formulas and the retrieval-cost benchmark.
//!
//! Traffic is counted in elements loaded per decoded token. The benchmark counts
//! similarity operations exactly and reports wall-clock alongside; only the counts are
//! meant to be compared across machines.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::attend_unchecked;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::memory_bank::{retrieve_hier, retrieve_linear, HierarchicalIndex, MemoryEntry, DEFAULT_TOP_M};
use crate::synth::{perturb, random_unit};
use crate::tensorstore::ModelGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrafficModel {
    pub geometry: ModelGeometry,
    pub prefix_len: u64,
    pub k: u64,
    pub d_prime: u64,
}

impl TrafficModel {
    fn query_term(&self) -> u64 {
        2 * self.geometry.h_q as u64 * self.geometry.d_h as u64
    }
}

/// `2 H_q d_h + 2 L G d_h`: query/output plus every prefix key and value of the group.
pub fn gqa_traffic(model: &TrafficModel) -> u64 {
    let g = &model.geometry;
    model.query_term() + 2 * model.prefix_len * g.group_size() as u64 * g.d_h as u64
}

/// `2 H_q d_h + K G d'`: query/output plus every entry key of the group.
pub fn asm_traffic(model: &TrafficModel) -> u64 {
    model.query_term() + model.k * model.geometry.group_size() as u64 * model.d_prime
}

/// Divisor of `k` closest to `sqrt(k)`, the smaller one on ties.
pub fn balanced_n_l1(k: usize) -> usize {
    let root = (k as f64).sqrt();
    (1..=k.max(1))
        .filter(|d| k.is_multiple_of(*d))
        .min_by(|&a, &b| (a as f64 - root).abs().total_cmp(&(b as f64 - root).abs()).then(a.cmp(&b)))
        .unwrap_or(1)
}

/// Similarity ops of one two-level lookup over `n_l1` equal buckets.
pub fn analytic_hier_ops(k: usize, n_l1: usize, top_m: usize) -> u64 {
    (n_l1 + top_m.min(n_l1) * (k / n_l1)) as u64
}

/// A bank of `k` unit keys in `n_l1` equal buckets around random centers, indexed by
/// those centers. Entries carry a single-head, one-element state.
pub fn balanced_bank(k: usize, n_l1: usize, dim: usize, spread: f64, top_m: usize, seed: u64) -> Result<(Vec<MemoryEntry>, HierarchicalIndex)> {
    if n_l1 == 0 || !k.is_multiple_of(n_l1) {
        return Err(Error::InvalidParameter(format!("n_l1 = {n_l1} does not divide K = {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = k / n_l1;
    let mut l1_keys = Vec::with_capacity(n_l1 * dim);
    let mut entries = Vec::with_capacity(k);
    let mut buckets = Vec::with_capacity(n_l1);
    for b in 0..n_l1 {
        let center = random_unit(&mut rng, dim);
        l1_keys.extend(center.iter().map(|&x| x as f32));
        for _ in 0..per {
            let key = perturb(&center, spread, &mut rng).into_iter().map(|x| x as f32).collect();
            entries.push(MemoryEntry::new(key, vec![0.0], vec![0.0])?);
        }
        buckets.push(((b * per) as u32..((b + 1) * per) as u32).collect());
    }
    let index = HierarchicalIndex::from_parts(l1_keys, dim, buckets, top_m, k)?;
    Ok((entries, index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchMode {
    /// Attention over `L = K` prefix positions: the equal-footprint baseline.
    FullAttentionSim,
    Flat,
    Hier,
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::FullAttentionSim => "full_attention_sim",
            BenchMode::Flat => "flat",
            BenchMode::Hier => "hier",
        })
    }
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "full_attention_sim" => Ok(BenchMode::FullAttentionSim),
            "flat" => Ok(BenchMode::Flat),
            "hier" => Ok(BenchMode::Hier),
            other => Err(Error::InvalidParameter(format!("unknown bench mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub ks: Vec<usize>,
    pub modes: Vec<BenchMode>,
    pub trials: usize,
    pub queries_per_trial: usize,
    pub dim: usize,
    pub top_m: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ks: vec![1024, 2048, 4096, 8192, 16384],
            modes: vec![BenchMode::FullAttentionSim, BenchMode::Flat, BenchMode::Hier],
            trials: 3,
            queries_per_trial: 64,
            dim: 64,
            top_m: DEFAULT_TOP_M,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub k: usize,
    /// Zero outside hierarchical mode.
    pub n_l1: usize,
    pub top_m: usize,
    pub ops_mean: f64,
    pub ns_per_token_mean: f64,
    pub trials: usize,
    pub seed: u64,
}

/// Runs every (K, mode) configuration sequentially. Banks are balanced; queries are
/// drawn near random entries.
pub fn run_scaling_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.trials == 0 || cfg.queries_per_trial == 0 || cfg.dim == 0 || cfg.top_m == 0 {
        return Err(Error::InvalidParameter("trials, queries, dim and top_m must be >= 1".into()));
    }
    if let Some(&k) = cfg.ks.iter().find(|&&k| k == 0) {
        return Err(Error::InvalidParameter(format!("bank size must be >= 1, got {k}")));
    }
    let mut rows = Vec::with_capacity(cfg.ks.len() * cfg.modes.len());
    for &k in &cfg.ks {
        let n_l1 = balanced_n_l1(k);
        let top_m = cfg.top_m.min(n_l1);
        let bank_seed = derive_seed(cfg.seed, k as u64, 0);
        let (entries, index) = balanced_bank(k, n_l1, cfg.dim, 0.1, top_m, bank_seed)?;
        for &mode in &cfg.modes {
            let mut ops_total = 0u64;
            let mut ns_total = 0u128;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, k as u64, 1));
            let (prefix_k, prefix_v) = match mode {
                BenchMode::FullAttentionSim => {
                    let keys: Vec<f32> = entries.iter().flat_map(|e| e.key().iter().copied()).collect();
                    let values = keys.iter().rev().copied().collect();
                    (keys, values)
                }
                _ => (Vec::new(), Vec::new()),
            };
            for _ in 0..cfg.trials {
                let queries: Vec<Vec<f32>> = (0..cfg.queries_per_trial)
                    .map(|_| {
                        let base = entries[rng.gen_range(0..k)].key().iter().map(|&x| x as f64).collect::<Vec<_>>();
                        perturb(&base, 0.05, &mut rng).into_iter().map(|x| x as f32).collect()
                    })
                    .collect();
                let start = Instant::now();
                for q in &queries {
                    ops_total += match mode {
                        BenchMode::FullAttentionSim => {
                            std::hint::black_box(attend_unchecked(q, &prefix_k, &prefix_v));
                            k as u64
                        }
                        BenchMode::Flat => std::hint::black_box(retrieve_linear(q, &entries)?).ops,
                        BenchMode::Hier => std::hint::black_box(retrieve_hier(q, &index, &entries)?).ops,
                    };
                }
                ns_total += start.elapsed().as_nanos();
            }
            let tokens = (cfg.trials * cfg.queries_per_trial) as f64;
            let hier = mode == BenchMode::Hier;
            rows.push(BenchRow {
                mode,
                k,
                n_l1: if hier { n_l1 } else { 0 },
                top_m: if hier { top_m } else { 0 },
                ops_mean: ops_total as f64 / tokens,
                ns_per_token_mean: ns_total as f64 / tokens,
                trials: cfg.trials,
                seed: cfg.seed,
            });
        }
    }
    Ok(rows)
}

pub const BENCH_CSV_HEADER: &str = "mode,K,n_l1,top_m,ops_mean,ns_per_token_mean,trials,seed";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.1},{},{}",
            r.mode, r.k, r.n_l1, r.top_m, r.ops_mean, r.ns_per_token_mean, r.trials, r.seed
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(h_q: usize, h_kv: usize, d_h: usize, l: u64, k: u64, d_prime: u64) -> TrafficModel {
        TrafficModel { geometry: ModelGeometry::new(1, h_q, h_kv, d_h).unwrap(), prefix_len: l, k, d_prime }
    }

    #[test]
    fn gqa_worked_example() {
        // 32 query heads over 8 KV heads: 4 per group
        assert_eq!(gqa_traffic(&model(32, 8, 128, 8192, 0, 256)), 8_396_800);
        assert_eq!(gqa_traffic(&model(32, 8, 128, 0, 0, 256)), 8192);
    }

    #[test]
    fn traffic_linearity() {
        let a = model(8, 2, 64, 1000, 1000, 128);
        let b = TrafficModel { prefix_len: 2000, k: 500, ..a };
        assert_eq!(gqa_traffic(&b) - 1024, 2 * (gqa_traffic(&a) - 1024));
        assert_eq!(2 * (asm_traffic(&b) - 1024), asm_traffic(&a) - 1024);
        assert_eq!(asm_traffic(&TrafficModel { k: 0, ..a }), 1024);
    }

    #[test]
    fn equal_footprint_at_k_equals_l() {
        let m = model(16, 4, 64, 4096, 4096, 128);
        assert_eq!(asm_traffic(&m), gqa_traffic(&m));
    }

    #[test]
    fn balanced_divisors() {
        assert_eq!(balanced_n_l1(16384), 128);
        assert_eq!(balanced_n_l1(1024), 32);
        assert_eq!(balanced_n_l1(2048), 32);
        assert_eq!(balanced_n_l1(12), 3);
        assert_eq!(balanced_n_l1(1), 1);
        assert_eq!(balanced_n_l1(13), 1);
    }

    #[test]
    fn measured_ops_match_model() {
        let cfg = BenchConfig {
            ks: vec![256, 1024],
            modes: vec![BenchMode::FullAttentionSim, BenchMode::Flat, BenchMode::Hier],
            trials: 2,
            queries_per_trial: 8,
            dim: 16,
            ..BenchConfig::default()
        };
        let rows = run_scaling_bench(&cfg).unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            let expected = match r.mode {
                BenchMode::Hier => analytic_hier_ops(r.k, r.n_l1, r.top_m) as f64,
                _ => r.k as f64,
            };
            assert_eq!(r.ops_mean, expected, "{r:?}");
        }
        let csv = bench_csv(&rows);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with(BENCH_CSV_HEADER));
    }

    #[test]
    fn mode_names() {
        for m in [BenchMode::FullAttentionSim, BenchMode::Flat, BenchMode::Hier] {
            assert_eq!(m.to_string().parse::<BenchMode>().unwrap(), m);
        }
        assert!("tree".parse::<BenchMode>().is_err());
    }
}
