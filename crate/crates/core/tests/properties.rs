use proptest::prelude::*;

use asmem::attention::{apply_rope, attn_with_state, merge, AttentionState, RopeConfig};
use asmem::calibration::{aggregate_cluster, merge_chunk_traces, minibatch_kmeans, CalibSample, CentroidOrg, ClusterSpec};
use asmem::memory_bank::{build_hier_index, retrieve_hier, retrieve_linear, MemoryEntry};
use asmem::synth::{generate, SynthSpec};
use asmem::tensorstore::{Metadata, ModelGeometry, Tensor, TensorFile};

fn state(d: usize) -> impl Strategy<Value = AttentionState<f64>> {
    (prop::collection::vec(-10.0f64..10.0, d), -20.0f64..20.0).prop_map(|(a, log_z)| AttentionState { a, log_z })
}

fn triple() -> impl Strategy<Value = (AttentionState<f64>, AttentionState<f64>, AttentionState<f64>)> {
    (1usize..16).prop_flat_map(|d| (state(d), state(d), state(d)))
}

fn gap(x: &AttentionState<f64>, y: &AttentionState<f64>) -> f64 {
    let scale = y.a.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
    let da = x.a.iter().zip(&y.a).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    (da / scale).max((x.log_z - y.log_z).abs())
}

fn unit_key(dim: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, dim).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f32>() > 1e-3)
}

fn entries(dim: usize, max: usize) -> impl Strategy<Value = Vec<MemoryEntry>> {
    prop::collection::vec(unit_key(dim), 1..max)
        .prop_map(|keys| keys.into_iter().map(|k| MemoryEntry::new(k, vec![0.0], vec![0.0]).unwrap()).collect())
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn merge_is_commutative_and_associative((x, y, z) in triple()) {
        let xy = merge(&x, &y).unwrap();
        prop_assert!(gap(&xy, &merge(&y, &x).unwrap()) <= 1e-12);
        let left = merge(&xy, &z).unwrap();
        let right = merge(&x, &merge(&y, &z).unwrap()).unwrap();
        prop_assert!(gap(&left, &right) <= 1e-12);
    }

    #[test]
    fn empty_state_is_identity((x, _, _) in triple()) {
        let e = AttentionState::empty(x.a.len());
        prop_assert_eq!(&merge(&x, &e).unwrap(), &x);
        prop_assert_eq!(&merge(&e, &x).unwrap(), &x);
    }

    #[test]
    fn merge_adds_mass_and_stays_convex((x, y, _) in triple()) {
        let m = merge(&x, &y).unwrap();
        let total = x.log_z.exp() + y.log_z.exp();
        prop_assert!((m.log_z.exp() - total).abs() <= 1e-12 * total);
        for ((&p, &q), &r) in x.a.iter().zip(&y.a).zip(&m.a) {
            prop_assert!(r >= p.min(q) - 1e-12 && r <= p.max(q) + 1e-12);
        }
    }

    #[test]
    fn splitting_keys_is_lossless(
        d in 1usize..9,
        n in 1usize..40,
        cut_frac in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let k: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let cut = ((n as f64 * cut_frac) as usize).min(n) * d;
        let full = attn_with_state(&q, &k, &v).unwrap();
        let parts = merge(
            &attn_with_state(&q, &k[..cut], &v[..cut]).unwrap(),
            &attn_with_state(&q, &k[cut..], &v[cut..]).unwrap(),
        ).unwrap();
        prop_assert!(gap(&parts, &full) <= 1e-12);
    }

    #[test]
    fn rope_keeps_head_norms(half in 1usize..9, heads in 1usize..4, pos in 0u64..100_000, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let d = 2 * half;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..heads * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let r = apply_rope(&q, d, pos, &RopeConfig::default()).unwrap();
        for (a, b) in q.chunks_exact(d).zip(r.chunks_exact(d)) {
            let na: f64 = a.iter().map(|x| x * x).sum();
            let nb: f64 = b.iter().map(|x| x * x).sum();
            prop_assert!((na - nb).abs() <= 1e-9 * na.max(1.0));
        }
        prop_assert_eq!(apply_rope(&q, d, 0, &RopeConfig::default()).unwrap(), q);
    }

    #[test]
    fn linear_retrieval_is_the_cosine_argmax(bank in entries(6, 40), query in unit_key(6)) {
        let r = retrieve_linear(&query, &bank).unwrap();
        prop_assert_eq!(r.ops, bank.len() as u64);
        let sims: Vec<f64> = bank.iter().map(|e| cosine(&query, e.key())).collect();
        let best = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(sims[r.index] >= best - 1e-9);
    }

    #[test]
    fn hier_index_partitions_and_is_sound(
        bank in entries(5, 60),
        query in unit_key(5),
        n_l1_frac in 0.0f64..1.0,
        top_m in 1usize..8,
        seed in any::<u64>(),
    ) {
        let n_l1 = 1 + ((bank.len() - 1) as f64 * n_l1_frac) as usize;
        let index = build_hier_index(&bank, n_l1, seed).unwrap();
        let mut seen: Vec<u32> = index.buckets().iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..bank.len() as u32).collect::<Vec<_>>());

        let index = index.clone().with_top_m(top_m.min(index.n_l1())).unwrap();
        let h = retrieve_hier(&query, &index, &bank).unwrap();
        let flat = retrieve_linear(&query, &bank).unwrap();
        prop_assert!(h.similarity <= flat.similarity + 1e-12);
        prop_assert!(h.ops as usize > index.n_l1() && h.ops as usize <= index.n_l1() + bank.len());

        let full = index.clone().with_top_m(index.n_l1()).unwrap();
        prop_assert_eq!(retrieve_hier(&query, &full, &bank).unwrap().index, flat.index);
    }

    #[test]
    fn aggregation_ignores_member_order(
        members in prop::collection::vec((prop::collection::vec(-1.0f32..1.0, 3), -5.0f64..5.0), 1..12),
        rotate in 0usize..12,
    ) {
        let samples: Vec<CalibSample> = members
            .iter()
            .map(|(a, lz)| CalibSample { slot: 0, key: vec![1.0, a[0]], a: a.clone(), log_z: vec![*lz] })
            .collect();
        let refs: Vec<&CalibSample> = samples.iter().collect();
        let mut turned = refs.clone();
        turned.rotate_left(rotate % refs.len());
        let x = aggregate_cluster(&refs).unwrap();
        let y = aggregate_cluster(&turned).unwrap();
        prop_assert!((x.log_z()[0] - y.log_z()[0]).abs() <= 1e-12);
        for (p, q) in x.a().iter().zip(y.a()) {
            prop_assert!((p - q).abs() <= 1e-5);
        }
        let mean_mass = members.iter().map(|m| m.1.exp()).sum::<f64>() / members.len() as f64;
        prop_assert!((x.log_z()[0] - mean_mass.ln()).abs() <= 1e-9);
    }

    #[test]
    fn kmeans_members_partition_samples(
        n in 2usize..60,
        k in 1usize..10,
        seed in any::<u64>(),
        batch in 1usize..80,
    ) {
        use rand::{Rng, SeedableRng};
        let dim = 4;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let keys: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let spec = ClusterSpec { k: k.min(n), iterations: 5, batch_size: batch, seed, centroid_org: CentroidOrg::Individual };
        let c = minibatch_kmeans(&keys, dim, &spec).unwrap();
        let mut all: Vec<usize> = c.members.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(c.members.len() + c.dropped_empty, spec.k);
        prop_assert!(c.members.iter().all(|m| !m.is_empty()));
    }

    #[test]
    fn tensor_files_round_trip(
        meta in prop::collection::btree_map("[a-z_]{1,8}", "[ -~]{0,12}", 0..4),
        shapes in prop::collection::vec(prop::collection::vec(0usize..4, 0..3), 0..4),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tensors: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n: usize = s.iter().product();
                match i % 3 {
                    0 => Tensor::f32(format!("t{i}"), s, (0..n).map(|_| rng.gen()).collect()),
                    1 => Tensor::f64(format!("t{i}"), s, (0..n).map(|_| rng.gen()).collect()),
                    _ => Tensor::u32(format!("t{i}"), s, (0..n).map(|_| rng.gen()).collect()),
                }
                .unwrap()
            })
            .collect();
        let meta: Metadata = meta;
        let file = TensorFile::new(tensors, meta).unwrap();
        let bytes = file.to_bytes().unwrap();
        let back = TensorFile::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &file);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn chunk_order_does_not_matter(seed in any::<u64>(), rotate in 1usize..4) {
        let out = generate(&SynthSpec {
            geometry: ModelGeometry::new(1, 2, 1, 4).unwrap(),
            prefix_len: 32,
            n_clusters: 2,
            queries_per_cluster: 3,
            spread: 0.1,
            seed,
            n_chunks: 4,
            local_len: 1,
        }).unwrap();
        let mut chunks = out.chunks.clone();
        chunks.rotate_left(rotate);
        let a = merge_chunk_traces(&out.chunks).unwrap();
        let b = merge_chunk_traces(&chunks).unwrap();
        for (la, lb) in a.layers().iter().zip(b.layers()) {
            for (x, y) in la.log_z.iter().zip(&lb.log_z) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            for (x, y) in la.attn_out.iter().zip(&lb.attn_out) {
                prop_assert!((x - y).abs() <= 1e-5);
            }
        }
        for (lm, lt) in a.layers().iter().zip(out.traces.layers()) {
            for (x, y) in lm.log_z.iter().zip(&lt.log_z) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}
