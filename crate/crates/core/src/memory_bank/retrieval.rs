//! Flat and two-level cosine retrieval over memory entries.
//!
//! Every call reports `ops`, the number of cosine similarities it evaluated.

use std::cmp::Ordering;

use super::entry::{dot, norm, MemoryEntry};
use crate::calibration::{minibatch_kmeans, CentroidOrg, ClusterSpec};
use crate::error::{Error, Result};

/// Full-batch iterations used when clustering entry keys into first-level buckets.
pub const HIER_KMEANS_ITERS: usize = 25;
pub const DEFAULT_TOP_M: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retrieval {
    pub index: usize,
    pub similarity: f64,
    pub ops: u64,
}

fn query_norm(query: &[f32]) -> Result<f64> {
    let n = norm(query);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::InvalidParameter("lookup key has zero or non-finite norm".into()));
    }
    Ok(n)
}

/// Higher similarity wins; equal similarity goes to the lower index.
#[inline]
fn better(sim: f64, idx: usize, best_sim: f64, best_idx: usize) -> bool {
    sim > best_sim || (sim == best_sim && idx < best_idx)
}

fn scan(query: &[f32], qn: f64, entries: &[MemoryEntry], candidates: impl Iterator<Item = usize>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for i in candidates {
        let e = &entries[i];
        let sim = dot(query, e.key()) / (qn * e.key_norm());
        if best.is_none_or(|(bi, bs)| better(sim, i, bs, bi)) {
            best = Some((i, sim));
        }
    }
    best
}

fn check_dim(query: &[f32], entries: &[MemoryEntry]) -> Result<()> {
    match entries.first() {
        None => Err(Error::InvalidParameter("retrieval over an empty entry list".into())),
        Some(e) if e.key().len() != query.len() => Err(Error::DimensionMismatch(format!(
            "lookup key dim {} vs entry key dim {}",
            query.len(),
            e.key().len()
        ))),
        Some(_) => Ok(()),
    }
}

/// Linear scan: the entry with maximum cosine similarity to `query`.
pub fn retrieve_linear(query: &[f32], entries: &[MemoryEntry]) -> Result<Retrieval> {
    check_dim(query, entries)?;
    let qn = query_norm(query)?;
    let (index, similarity) = scan(query, qn, entries, 0..entries.len()).expect("nonempty");
    Ok(Retrieval { index, similarity, ops: entries.len() as u64 })
}

/// Two-level index: first-level centroids, each owning a bucket of entry indices.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalIndex {
    dim: usize,
    l1_keys: Vec<f32>,
    l1_norms: Vec<f64>,
    buckets: Vec<Vec<u32>>,
    top_m: usize,
}

impl HierarchicalIndex {
    /// Assembles an index from explicit parts; buckets must partition `0..n_entries`.
    pub fn from_parts(l1_keys: Vec<f32>, dim: usize, buckets: Vec<Vec<u32>>, top_m: usize, n_entries: usize) -> Result<Self> {
        let n_l1 = buckets.len();
        if dim == 0 || l1_keys.len() != n_l1 * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} first-level key values for {n_l1} buckets of dim {dim}",
                l1_keys.len()
            )));
        }
        if n_l1 == 0 {
            return Err(Error::InvalidParameter("hierarchical index needs at least one bucket".into()));
        }
        let mut seen = vec![false; n_entries];
        for &m in buckets.iter().flatten() {
            let slot = seen
                .get_mut(m as usize)
                .ok_or_else(|| Error::Schema(format!("bucket member {m} out of range")))?;
            if std::mem::replace(slot, true) {
                return Err(Error::Schema(format!("entry {m} appears in two buckets")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Schema("buckets do not cover every entry".into()));
        }
        if buckets.iter().any(Vec::is_empty) {
            return Err(Error::Schema("empty bucket".into()));
        }
        let l1_norms: Vec<f64> = l1_keys.chunks_exact(dim).map(norm).collect();
        if l1_norms.iter().any(|&n| n == 0.0 || !n.is_finite()) {
            return Err(Error::Schema("first-level key with zero or non-finite norm".into()));
        }
        let mut index = Self { dim, l1_keys, l1_norms, buckets, top_m: 1 };
        index.set_top_m(top_m)?;
        Ok(index)
    }

    pub fn n_l1(&self) -> usize {
        self.buckets.len()
    }

    pub fn top_m(&self) -> usize {
        self.top_m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn buckets(&self) -> &[Vec<u32>] {
        &self.buckets
    }

    pub fn l1_keys(&self) -> &[f32] {
        &self.l1_keys
    }

    pub fn set_top_m(&mut self, top_m: usize) -> Result<()> {
        if top_m == 0 || top_m > self.n_l1() {
            return Err(Error::InvalidParameter(format!(
                "top_m = {top_m} must lie in 1..={}",
                self.n_l1()
            )));
        }
        self.top_m = top_m;
        Ok(())
    }

    pub fn with_top_m(mut self, top_m: usize) -> Result<Self> {
        self.set_top_m(top_m)?;
        Ok(self)
    }
}

/// Clusters entry keys into `n_l1` first-level buckets with spherical k-means.
///
/// Buckets that end up empty are dropped, so the built index may hold fewer than
/// `n_l1` buckets when entry keys coincide. `top_m` defaults to
/// `min(DEFAULT_TOP_M, n_l1)`.
pub fn build_hier_index(entries: &[MemoryEntry], n_l1: usize, seed: u64) -> Result<HierarchicalIndex> {
    let k = entries.len();
    if n_l1 == 0 || n_l1 > k {
        return Err(Error::InvalidParameter(format!("n_l1 = {n_l1} must lie in 1..={k}")));
    }
    let dim = entries[0].key().len();
    let keys: Vec<f32> = entries.iter().flat_map(|e| e.key().iter().copied()).collect();
    let spec = ClusterSpec {
        k: n_l1,
        iterations: HIER_KMEANS_ITERS,
        batch_size: k,
        seed,
        centroid_org: CentroidOrg::Individual,
    };
    let clustering = minibatch_kmeans(&keys, dim, &spec)?;
    let l1_keys: Vec<f32> = clustering.centroids.iter().flatten().map(|&x| x as f32).collect();
    let buckets: Vec<Vec<u32>> = clustering
        .members
        .iter()
        .map(|m| m.iter().map(|&i| i as u32).collect())
        .collect();
    let top_m = DEFAULT_TOP_M.min(buckets.len());
    HierarchicalIndex::from_parts(l1_keys, dim, buckets, top_m, k)
}

/// Scores all first-level keys, expands the `top_m` best buckets, and scans their members.
pub fn retrieve_hier(query: &[f32], index: &HierarchicalIndex, entries: &[MemoryEntry]) -> Result<Retrieval> {
    check_dim(query, entries)?;
    if index.dim != query.len() {
        return Err(Error::DimensionMismatch("index and query dims differ".into()));
    }
    let qn = query_norm(query)?;
    let mut ranked: Vec<(usize, f64)> = index
        .l1_keys
        .chunks_exact(index.dim)
        .zip(&index.l1_norms)
        .map(|(k, &n)| dot(query, k) / (qn * n))
        .enumerate()
        .collect();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0));
    if index.top_m < ranked.len() {
        ranked.select_nth_unstable_by(index.top_m - 1, cmp);
        ranked.truncate(index.top_m);
    }

    let scanned: usize = ranked.iter().map(|&(b, _)| index.buckets[b].len()).sum();
    let candidates = ranked
        .iter()
        .flat_map(|&(b, _)| index.buckets[b].iter().map(|&i| i as usize));
    let (index_out, similarity) = scan(query, qn, entries, candidates).expect("top_m >= 1 and buckets are nonempty");
    Ok(Retrieval {
        index: index_out,
        similarity,
        ops: (index.n_l1() + scanned) as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_entries(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> Vec<MemoryEntry> {
        (0..k)
            .map(|_| {
                let key = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                MemoryEntry::new(key, vec![0.0; 2], vec![0.0]).unwrap()
            })
            .collect()
    }

    fn brute_force(query: &[f32], entries: &[MemoryEntry]) -> usize {
        let q: Vec<f64> = query.iter().map(|&x| x as f64).collect();
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, e) in entries.iter().enumerate() {
            let k: Vec<f64> = e.key().iter().map(|&x| x as f64).collect();
            let kn = k.iter().map(|x| x * x).sum::<f64>().sqrt();
            let s = q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (qn * kn);
            if s > best.1 {
                best = (i, s);
            }
        }
        best.0
    }

    #[test]
    fn single_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let entries = random_entries(&mut rng, 1, 8);
        let r = retrieve_linear(&[0.1; 8], &entries).unwrap();
        assert_eq!((r.index, r.ops), (0, 1));
    }

    #[test]
    fn exact_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let entries = random_entries(&mut rng, 10, 8);
        let r = retrieve_linear(entries[3].key(), &entries).unwrap();
        assert_eq!(r.index, 3);
        assert!((r.similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let e = MemoryEntry::new(vec![1.0, 0.0], vec![0.0], vec![0.0]).unwrap();
        let entries = vec![MemoryEntry::new(vec![0.0, 1.0], vec![0.0], vec![0.0]).unwrap(), e.clone(), e];
        assert_eq!(retrieve_linear(&[2.0, 0.0], &entries).unwrap().index, 1);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let entries = random_entries(&mut rng, 256, 16);
        for _ in 0..50 {
            let q: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            assert_eq!(retrieve_linear(&q, &entries).unwrap().index, brute_force(&q, &entries));
        }
    }

    #[test]
    fn errors() {
        assert!(retrieve_linear(&[1.0], &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let entries = random_entries(&mut rng, 3, 4);
        assert!(retrieve_linear(&[0.0; 4], &entries).is_err());
        assert!(retrieve_linear(&[1.0; 3], &entries).is_err());
        assert!(build_hier_index(&entries, 4, 0).is_err());
        assert!(build_hier_index(&entries, 0, 0).is_err());
    }

    #[test]
    fn singleton_buckets_when_n_l1_equals_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let entries = random_entries(&mut rng, 40, 8);
        let index = build_hier_index(&entries, 40, 9).unwrap();
        assert_eq!(index.n_l1(), 40);
        assert!(index.buckets().iter().all(|b| b.len() == 1));
        for _ in 0..20 {
            let q: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let flat = retrieve_linear(&q, &entries).unwrap();
            let hier = retrieve_hier(&q, &index.clone().with_top_m(40).unwrap(), &entries).unwrap();
            assert_eq!(flat.index, hier.index);
        }
    }

    #[test]
    fn one_bucket_scans_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let entries = random_entries(&mut rng, 30, 8);
        let index = build_hier_index(&entries, 1, 0).unwrap();
        let r = retrieve_hier(&[0.5; 8], &index, &entries).unwrap();
        assert_eq!(r.ops, 31);
        assert_eq!(r.index, retrieve_linear(&[0.5; 8], &entries).unwrap().index);
    }

    #[test]
    fn buckets_partition_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let entries = random_entries(&mut rng, 1024, 8);
        let index = build_hier_index(&entries, 32, 1).unwrap();
        assert_eq!(index.buckets().iter().map(Vec::len).sum::<usize>(), 1024);
        let mut all: Vec<u32> = index.buckets().iter().flatten().copied().collect();
        all.sort_unstable();
        assert!(all.iter().enumerate().all(|(i, &m)| m as usize == i));
    }

    #[test]
    fn balanced_index_op_count() {
        // 128 buckets of 64 entries each; the count does not depend on the query.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let entries = random_entries(&mut rng, 8192, 4);
        let buckets: Vec<Vec<u32>> = (0..128).map(|b| (b * 64..(b + 1) * 64).collect()).collect();
        let l1: Vec<f32> = (0..128 * 4).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let index = HierarchicalIndex::from_parts(l1, 4, buckets, 16, 8192).unwrap();
        let r = retrieve_hier(&[1.0, 0.5, -0.5, 0.1], &index, &entries).unwrap();
        assert_eq!(r.ops, 128 + 16 * 64);
    }

    #[test]
    fn from_parts_validates_partition() {
        let l1 = vec![1.0f32, 0.0, 0.0, 1.0];
        assert!(HierarchicalIndex::from_parts(l1.clone(), 2, vec![vec![0, 1], vec![1]], 1, 2).is_err());
        assert!(HierarchicalIndex::from_parts(l1.clone(), 2, vec![vec![0], vec![]], 1, 2).is_err());
        assert!(HierarchicalIndex::from_parts(l1.clone(), 2, vec![vec![0], vec![1]], 3, 2).is_err());
        assert!(HierarchicalIndex::from_parts(l1, 2, vec![vec![0], vec![1]], 2, 2).is_ok());
    }
}
