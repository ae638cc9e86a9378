//! Spherical k-means with k-means++ seeding.
//!
//! Keys are L2-normalized; assignment maximizes cosine similarity with ties going to
//! the lowest centroid index. When `batch_size >= n` every iteration is a full Lloyd
//! step; otherwise batches are drawn sequentially (wrapping) from the sample stream and
//! centroids move by per-center learning rates `1 / count`. Results depend only on the
//! sample order and the seed.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::CentroidOrg;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ClusterSpec {
    pub k: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub centroid_org: CentroidOrg,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter(format!(
                "k, iterations and batch_size must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Clustering {
    /// Unit-norm centroid of each nonempty cluster.
    pub centroids: Vec<Vec<f64>>,
    /// Sample indices of each nonempty cluster, ascending.
    pub members: Vec<Vec<usize>>,
    /// Clusters that ended without members and were dropped.
    pub dropped_empty: usize,
    /// Mean cosine similarity of samples to their assigned centroid, one value per
    /// iteration, measured at that iteration's assignment step.
    pub objective_history: Vec<f64>,
}

fn normalized(keys: &[f32], dim: usize) -> Vec<f64> {
    let mut out: Vec<f64> = keys.iter().map(|&x| x as f64).collect();
    for row in out.chunks_exact_mut(dim) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    out
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Nearest centroid by cosine; unseeded centroids never win.
fn nearest(x: &[f64], dirs: &[Option<Vec<f64>>]) -> (usize, f64) {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (j, c) in dirs.iter().enumerate() {
        if let Some(c) = c {
            let s = dot(x, c);
            if s > best.1 {
                best = (j, s);
            }
        }
    }
    best
}

fn assign(x: &[f64], dim: usize, rows: &[usize], dirs: &[Option<Vec<f64>>]) -> Vec<(usize, f64)> {
    rows.par_iter().map(|&i| nearest(&x[i * dim..(i + 1) * dim], dirs)).collect()
}

fn kmeans_pp(x: &[f64], dim: usize, pool: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Option<Vec<f64>>> {
    let mut centers: Vec<Option<Vec<f64>>> = vec![None; k];
    let row = |i: usize| &x[i * dim..(i + 1) * dim];
    let first = rng.gen_range(0..pool);
    centers[0] = Some(row(first).to_vec());
    let mut d2: Vec<f64> = (0..pool).map(|i| (2.0 - 2.0 * dot(row(i), row(first))).max(0.0)).collect();
    for slot in centers.iter_mut().skip(1) {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let target = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
        }
        let pick = pick.expect("positive total weight");
        let c = row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min((2.0 - 2.0 * dot(row(i), &c)).max(0.0));
        }
        *slot = Some(c);
    }
    centers
}

/// Moves every centroid flagged empty onto the worst-fit sample of `rows`, one sample each.
fn reseed_empty(
    x: &[f64],
    dim: usize,
    rows: &[usize],
    fit: &[(usize, f64)],
    dirs: &mut [Option<Vec<f64>>],
    sums: &mut [Vec<f64>],
    is_empty: impl Fn(usize) -> bool,
) {
    let mut order: Vec<usize> = (0..rows.len())
        .filter(|&r| fit[r].1 < 1.0 - 1e-12 && x[rows[r] * dim..(rows[r] + 1) * dim].iter().any(|&v| v != 0.0))
        .collect();
    order.sort_by(|&a, &b| fit[a].1.total_cmp(&fit[b].1).then(a.cmp(&b)));
    let mut candidates = order.into_iter();
    for j in 0..dirs.len() {
        if !is_empty(j) {
            continue;
        }
        let Some(r) = candidates.next() else { break };
        let sample = &x[rows[r] * dim..(rows[r] + 1) * dim];
        dirs[j] = Some(sample.to_vec());
        sums[j].copy_from_slice(sample);
    }
}

/// Clusters `n x dim` row-major `keys` into at most `spec.k` groups.
pub fn minibatch_kmeans(keys: &[f32], dim: usize, spec: &ClusterSpec) -> Result<Clustering> {
    spec.validate()?;
    if dim == 0 || !keys.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch(format!("{} key values for dim {dim}", keys.len())));
    }
    let n = keys.len() / dim;
    if n == 0 {
        return Err(Error::InvalidParameter("k-means over zero samples".into()));
    }
    if !keys.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("clustering keys".into()));
    }
    let k = spec.k;
    let x = normalized(keys, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pool = n.min(spec.batch_size.max(k));
    let mut dirs = kmeans_pp(&x, dim, pool, k, &mut rng);
    // Unnormalized running means; `dirs` holds their directions.
    let mut sums: Vec<Vec<f64>> = dirs.iter().map(|c| c.clone().unwrap_or_else(|| vec![0.0; dim])).collect();
    let mut history = Vec::with_capacity(spec.iterations);

    if spec.batch_size >= n {
        let rows: Vec<usize> = (0..n).collect();
        for _ in 0..spec.iterations {
            let fit = assign(&x, dim, &rows, &dirs);
            history.push(fit.iter().map(|f| f.1).sum::<f64>() / n as f64);
            let mut next = vec![vec![0.0f64; dim]; k];
            let mut counts = vec![0usize; k];
            for (i, &(c, _)) in fit.iter().enumerate() {
                counts[c] += 1;
                for (s, v) in next[c].iter_mut().zip(&x[i * dim..(i + 1) * dim]) {
                    *s += v;
                }
            }
            for j in 0..k {
                if counts[j] > 0 {
                    if let Some(u) = unit(&next[j]) {
                        dirs[j] = Some(u);
                    }
                    sums[j] = next[j].clone();
                }
            }
            // similarity of each sample to its own updated centroid
            let fit: Vec<(usize, f64)> = fit
                .iter()
                .enumerate()
                .map(|(i, &(c, _))| (c, dot(&x[i * dim..(i + 1) * dim], dirs[c].as_ref().unwrap())))
                .collect();
            reseed_empty(&x, dim, &rows, &fit, &mut dirs, &mut sums, |j| counts[j] == 0);
        }
    } else {
        let mut counts = vec![0u64; k];
        // Samples processed since each centroid last won one; a full pass without a win
        // marks the cluster empty.
        let mut idle = vec![0usize; k];
        let mut cursor = 0usize;
        for _ in 0..spec.iterations {
            let rows: Vec<usize> = (0..spec.batch_size).map(|b| (cursor + b) % n).collect();
            cursor = (cursor + spec.batch_size) % n;
            let fit = assign(&x, dim, &rows, &dirs);
            history.push(fit.iter().map(|f| f.1).sum::<f64>() / rows.len() as f64);
            idle.iter_mut().for_each(|t| *t += rows.len());
            for (&i, &(c, _)) in rows.iter().zip(&fit) {
                counts[c] += 1;
                idle[c] = 0;
                let eta = 1.0 / counts[c] as f64;
                for (s, v) in sums[c].iter_mut().zip(&x[i * dim..(i + 1) * dim]) {
                    *s = (1.0 - eta) * *s + eta * v;
                }
                if let Some(u) = unit(&sums[c]) {
                    dirs[c] = Some(u);
                }
            }
            let empty: Vec<bool> = (0..k).map(|j| dirs[j].is_none() || idle[j] >= n).collect();
            let before = dirs.clone();
            reseed_empty(&x, dim, &rows, &fit, &mut dirs, &mut sums, |j| empty[j]);
            for j in 0..k {
                if dirs[j] != before[j] {
                    counts[j] = 0;
                    idle[j] = 0;
                }
            }
        }
    }

    let rows: Vec<usize> = (0..n).collect();
    let fit = assign(&x, dim, &rows, &dirs);
    let mut members = vec![Vec::new(); k];
    for (i, &(c, _)) in fit.iter().enumerate() {
        members[c].push(i);
    }
    let mut centroids = Vec::with_capacity(k);
    let mut kept = Vec::with_capacity(k);
    for (j, m) in members.into_iter().enumerate() {
        if !m.is_empty() {
            centroids.push(dirs[j].clone().expect("assigned centroid exists"));
            kept.push(m);
        }
    }
    let dropped_empty = k - kept.len();
    if dropped_empty > 0 {
        warn!("k-means: {dropped_empty} of {k} clusters ended empty and were dropped");
    }
    Ok(Clustering { centroids, members: kept, dropped_empty, objective_history: history })
}
