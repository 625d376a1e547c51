//! Randomized invariants of sampling, interaction weights, attention and
//! ingestion.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spil::global_spil::{GlobalSpil, GlobalSpilConfig, GlobalTrace};
use spil::ingest::{augment, build_point_cloud, generate_synthetic, AugmentConfig, PartConstants};
use spil::local_spil::{position_spacing, LocalSpil, LocalSpilConfig, LocalTrace, PositionVariant};
use spil::model::{build_network, evaluate, load_network, resample_indices, save_network, NetworkConfig};
use spil::numerics::{Graph, ParamStore, Tensor};
use spil::sampling::{ball_query, distance, farthest_point_sample, Point3};

fn variant_strategy() -> impl Strategy<Value = PositionVariant> {
    prop_oneof![
        Just(PositionVariant::Spacing),
        Just(PositionVariant::Spanning),
        Just(PositionVariant::Masking)
    ]
}

/// Up to ten points, either on a small integer grid (many ties and
/// duplicates) or continuous.
fn small_cloud() -> impl Strategy<Value = Vec<Point3>> {
    let grid = prop::collection::vec((0..3u8, 0..3u8, 0..2u8), 1..=10)
        .prop_map(|v| v.into_iter().map(|(x, y, z)| [x as f64, y as f64, z as f64]).collect());
    let free = prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.0..4.0f64), 1..=10)
        .prop_map(|v| v.into_iter().map(|(x, y, z)| [x, y, z]).collect());
    prop_oneof![grid, free]
}

fn sq_dist(a: &Point3, b: &Point3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Greedy FPS recomputed from scratch at every step.
fn fps_reference(coords: &[Point3], n: usize, start: usize) -> Vec<usize> {
    let m = coords.len();
    let mut picks = vec![start];
    while picks.len() < n.min(m) {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..m).filter(|i| !picks.contains(i)) {
            let d = picks.iter().map(|&p| sq_dist(&coords[i], &coords[p])).fold(f64::INFINITY, f64::min);
            if best.map_or(true, |(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        picks.push(best.unwrap().0);
    }
    (0..n).map(|t| picks[t % picks.len()]).collect()
}

fn random_coords(n: usize, frames: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    (0..n)
        .map(|_| [rng.gen(), rng.gen(), rng.gen_range(0..frames) as f64])
        .collect()
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn local_layer(variant: PositionVariant, seed: u64) -> (ParamStore, LocalSpil) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = LocalSpilConfig::new(2, 6, 3, 2).with_variant(variant);
    let layer = LocalSpil::new(&mut store, "local", cfg, &mut rng).unwrap();
    (store, layer)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fps_matches_reference(coords in small_cloud(), extra in 0usize..4, start_frac in 0.0..1.0f64) {
        let m = coords.len();
        let start = ((start_frac * m as f64) as usize).min(m - 1);
        for n in 1..=m + extra {
            let got = farthest_point_sample(&coords, n, start).unwrap();
            prop_assert_eq!(&got.indices, &fps_reference(&coords, n, start));
            prop_assert_eq!(got.coords.len(), n);
        }
    }

    #[test]
    fn fps_with_n_equal_m_is_a_permutation(coords in small_cloud()) {
        let m = coords.len();
        let mut idx = farthest_point_sample(&coords, m, 0).unwrap().indices;
        idx.sort_unstable();
        prop_assert_eq!(idx, (0..m).collect::<Vec<_>>());
    }

    #[test]
    fn ball_query_members_within_radius(seed in any::<u64>(), radius in 0.05..2.0f64, k in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = random_coords(30, 3, &mut rng);
        let centroids = farthest_point_sample(&coords, 6, 0).unwrap();
        let groups = ball_query(&coords, &centroids, radius, k);
        for (c, members) in centroids.indices.iter().zip(&groups) {
            prop_assert_eq!(members.len(), k);
            prop_assert_eq!(members[0], *c);
            for &j in members {
                prop_assert!(distance(&coords[j], &coords[*c]) <= radius + 1e-12);
            }
        }
        prop_assert_eq!(groups, ball_query(&coords, &centroids, radius, k));
    }

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0..50.0f64, 12)) {
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], values).unwrap());
        let s = x.softmax_lastdim().unwrap();
        let v = s.value();
        for row in v.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn interaction_rows_are_stochastic(variant in variant_strategy(), seed in any::<u64>(), frames in 1usize..4) {
        let (store, layer) = local_layer(variant, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let (n, k) = (5, 6);
        let coords = random_coords(n * k, frames, &mut rng);
        let g = Graph::new();
        let x = g.constant(random_tensor(&[n, k, 2], &mut rng));
        let mut trace = LocalTrace { head_weights: vec![] };
        layer.forward(&g, &store, x, &coords, Some(&mut trace)).unwrap();
        for w in &trace.head_weights {
            prop_assert!(w.data().iter().all(|&v| v >= 0.0));
            for row in w.data().chunks(k) {
                let uniform = row.iter().all(|&v| v == 1.0 / k as f64);
                prop_assert!(uniform || (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn spacing_decreases_with_distance(d1 in 0.0..10.0f64, gap in 1e-3..5.0f64) {
        let o = [0.0, 0.0, 0.0];
        prop_assert!(position_spacing(&o, &[d1, 0.0, 0.0]) > position_spacing(&o, &[d1 + gap, 0.0, 0.0]));
    }

    #[test]
    fn neighbor_slot_order_does_not_matter(variant in variant_strategy(), seed in any::<u64>()) {
        let (store, layer) = local_layer(variant, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let k = 6;
        let coords = random_coords(k, 3, &mut rng);
        let feats = random_tensor(&[1, k, 2], &mut rng);
        let mut perm: Vec<usize> = (1..k).collect();
        perm.sort_by_key(|_| rng.gen::<u32>());
        perm.insert(0, 0);

        let g = Graph::new();
        let base = layer.forward(&g, &store, g.constant(feats.clone()), &coords, None).unwrap();
        let permuted_coords: Vec<Point3> = perm.iter().map(|&i| coords[i]).collect();
        let permuted = g.constant(feats).index_select(&[0]).unwrap().reshape(&[k, 2]).unwrap()
            .index_select(&perm).unwrap().reshape(&[1, k, 2]).unwrap();
        let other = layer.forward(&g, &store, permuted, &permuted_coords, None).unwrap();
        prop_assert!(base.value().max_abs_diff(&other.value()) <= 1e-9);
    }

    #[test]
    fn attention_without_offset_is_permutation_equivariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = GlobalSpilConfig::new(6, 7);
        cfg.use_z = false;
        let mut store = ParamStore::new();
        let layer = GlobalSpil::new(&mut store, "global", cfg, &mut rng).unwrap();
        let coords = random_coords(7, 4, &mut rng);
        let x = random_tensor(&[7, 6], &mut rng);
        let mut perm: Vec<usize> = (0..7).collect();
        perm.sort_by_key(|_| rng.gen::<u32>());

        let g = Graph::new();
        let mut trace = GlobalTrace { attention: Tensor::zeros(&[1]) };
        let y = layer.forward(&g, &store, &coords, g.constant(x.clone()), Some(&mut trace)).unwrap();
        for row in trace.attention.data().chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let pc: Vec<Point3> = perm.iter().map(|&i| coords[i]).collect();
        let px = g.constant(x).index_select(&perm).unwrap();
        let py = layer.forward(&g, &store, &pc, px, None).unwrap();
        let expected = y.index_select(&perm).unwrap();
        prop_assert!(py.value().max_abs_diff(&expected.value()) < 1e-9);
    }

    #[test]
    fn equal_features_without_position_give_equal_outputs(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = GlobalSpilConfig::new(5, 4);
        cfg.use_position = false;
        cfg.use_z = false;
        let mut store = ParamStore::new();
        let layer = GlobalSpil::new(&mut store, "global", cfg, &mut rng).unwrap();
        let coords = random_coords(4, 3, &mut rng);
        let row = random_tensor(&[1, 5], &mut rng);
        let g = Graph::new();
        let x = g.constant(row).broadcast_to(&[4, 5]).unwrap();
        let y = layer.forward(&g, &store, &coords, x, None).unwrap();
        let v = y.value();
        for r in 1..4 {
            prop_assert_eq!(v.row(r), v.row(0));
        }
    }

    #[test]
    fn point_count_matches_confident_joints(seed in 0u64..1000, threshold in 0.0..0.9f64) {
        let seqs = generate_synthetic(2, seed);
        let constants = PartConstants::default();
        for s in &seqs {
            let expected: usize = s.frames.iter()
                .flat_map(|f| &f.persons)
                .map(|p| p.joints.iter().filter(|j| j[2] >= threshold).count())
                .sum();
            match build_point_cloud(s, &constants, threshold) {
                Ok(c) => {
                    prop_assert_eq!(c.len(), expected);
                    prop_assert_eq!(c.label, s.label);
                }
                Err(_) => prop_assert_eq!(expected, 0),
            }
        }
    }

    #[test]
    fn augmentation_keeps_labels_features_and_counts(seed in 0u64..1000) {
        let s = &generate_synthetic(1, seed)[0];
        let c = build_point_cloud(s, &PartConstants::default(), 0.05).unwrap();
        let a = augment(&c, &AugmentConfig { seed, ..AugmentConfig::default() });
        prop_assert_eq!(a.len(), c.len());
        prop_assert_eq!(a.label, c.label);
        prop_assert_eq!(&a.features, &c.features);
    }

    #[test]
    fn resampling_hits_the_target(len in 1usize..300, target in 1usize..300, seed in any::<u64>()) {
        let idx = resample_indices(len, target, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(idx.len(), target);
        prop_assert!(idx.iter().all(|&i| i < len));
        let mut distinct = idx.clone();
        distinct.sort_unstable();
        distinct.dedup();
        prop_assert_eq!(distinct.len(), len.min(target));
    }
}

#[test]
fn zero_offset_matches_disabled_offset_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let mut layer = GlobalSpil::new(&mut store, "global", GlobalSpilConfig::new(6, 5), &mut rng).unwrap();
    let coords = random_coords(5, 3, &mut rng);
    let x = random_tensor(&[5, 6], &mut rng);
    let g = Graph::new();
    let with_z = layer.forward(&g, &store, &coords, g.constant(x.clone()), None).unwrap().value().clone();
    layer.config.use_z = false;
    let without = layer.forward(&g, &store, &coords, g.constant(x), None).unwrap().value().clone();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&with_z), bits(&without));
}

#[test]
fn checkpoint_round_trip_preserves_accuracy() {
    let clouds: Vec<_> = generate_synthetic(6, 3)
        .iter()
        .map(|s| build_point_cloud(s, &PartConstants::default(), 0.05).unwrap())
        .collect();
    let mut net = build_network(&NetworkConfig::desk(), 2).unwrap();
    net.calibrate(&clouds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_network(&net, dir.path()).unwrap();
    let back = load_network(dir.path()).unwrap();
    assert_eq!(
        evaluate(&net, &clouds).unwrap().accuracy.to_bits(),
        evaluate(&back, &clouds).unwrap().accuracy.to_bits()
    );
}
