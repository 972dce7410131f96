use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;

use siamnet::dataio::{make_split, mirror, PersonImage, Protocol, Split, SplitSpec};
use siamnet::eval::{cmc, ScoreTable};
use siamnet::pairwise::{cosine_matrix, pairwise_oracle, pairwise_oracle_specific};
use siamnet::{CostFunction, NetworkConfig, NetworkParams, PairMasks, SharingMode, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_filter("columns must be nonzero", move |v| {
            (0..cols).all(|c| (0..rows).map(|r| v[r * cols + c].powi(2)).sum::<f64>() > 1e-3)
        })
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn labels(n: usize, k: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0..k as u8, n)
}

fn person(subject: usize, camera: &str) -> PersonImage {
    PersonImage {
        subject_id: format!("{subject:04}"),
        camera_id: camera.into(),
        index: 0,
        pixels: Tensor::zeros(&[3, 1, 1]),
        mirrored: false,
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_is_bounded_and_scale_invariant(x in matrix(5, 4), y in matrix(5, 3), a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let s = cosine_matrix(&x, &y).unwrap();
        let scaled = cosine_matrix(&(&x * a), &(&y * b)).unwrap();
        for (u, v) in s.iter().zip(scaled.iter()) {
            prop_assert!(u.abs() <= 1.0 + 1e-12);
            prop_assert!((u - v).abs() < 1e-12);
        }
        let t = cosine_matrix(&y, &x).unwrap();
        prop_assert!(s.t().iter().zip(t.iter()).all(|(u, v)| (u - v).abs() < 1e-12));
    }

    #[test]
    fn general_masks_count_each_unordered_pair_once(l in labels(12, 4), c in 1.0f64..4.0) {
        let m = PairMasks::general_lenient(&l, c).unwrap();
        prop_assert_eq!(m.n1 + m.n2, 12 * 11 / 2);
        prop_assert_eq!(m.considered().count(), 12 * 11 / 2);
        prop_assert!(m.considered().all(|(i, j)| i < j));
        let positives = m.considered().filter(|&(i, j)| l[i] == l[j]).count();
        prop_assert_eq!(m.n1, positives);
    }

    #[test]
    fn specific_masks_cover_the_full_grid(lx in labels(6, 3), ly in labels(5, 3)) {
        let m = PairMasks::view_specific_lenient(&lx, &ly, 2.0).unwrap();
        prop_assert_eq!(m.n1 + m.n2, 30);
        prop_assert_eq!(m.considered().count(), 30);
    }

    #[test]
    fn matrix_form_matches_pair_loop(x in matrix(6, 8), l in labels(8, 3), alpha in 0.5f64..4.0, beta in -0.5f64..0.9) {
        let masks = PairMasks::general_lenient(&l, 2.0).unwrap();
        let (cost, grad) = CostFunction::Deviance { alpha, beta }.general(&x, &masks).unwrap();
        let (oc, og) = pairwise_oracle(&x, &masks, alpha, beta).unwrap();
        prop_assert!(close(cost, oc, 1e-10));
        prop_assert!(grad.iter().zip(og.iter()).all(|(a, b)| close(*a, *b, 1e-10)));
    }

    #[test]
    fn specific_matrix_form_matches_pair_loop(x in matrix(4, 5), y in matrix(4, 6), lx in labels(5, 3), ly in labels(6, 3)) {
        let masks = PairMasks::view_specific_lenient(&lx, &ly, 2.0).unwrap();
        let (cost, gx, gy) = CostFunction::default().specific(&x, &y, &masks).unwrap();
        let (oc, ox, oy) = pairwise_oracle_specific(&x, &y, &masks, 2.0, 0.5).unwrap();
        prop_assert!(close(cost, oc, 1e-10));
        prop_assert!(gx.iter().zip(ox.iter()).all(|(a, b)| close(*a, *b, 1e-10)));
        prop_assert!(gy.iter().zip(oy.iter()).all(|(a, b)| close(*a, *b, 1e-10)));
    }

    #[test]
    fn deviance_is_nonnegative(x in matrix(3, 6), l in labels(6, 2)) {
        let masks = PairMasks::general_lenient(&l, 2.0).unwrap();
        let s = cosine_matrix(&x, &x).unwrap();
        prop_assert!(CostFunction::default().cost(&s, &masks).unwrap() >= 0.0);
    }

    #[test]
    fn mirroring_twice_is_identity(w in 1usize..7, h in 1usize..5, seed in 0u64..1000) {
        let mut img = person(1, "a");
        img.pixels = Tensor::from_fn(&[3, h, w], |i| ((i as u64 * 2654435761 + seed) % 97) as f64);
        let once = mirror(&img);
        prop_assert_eq!(once.mirrored, true);
        prop_assert_eq!(once.pixels.data()[w - 1], img.pixels.data()[0]);
        prop_assert_eq!(mirror(&once), img);
    }

    #[test]
    fn viper_splits_are_disjoint_halves(n in 4usize..60, seed in any::<u64>(), repeat in 0usize..11) {
        let data: Vec<_> = (0..n).flat_map(|s| [person(s, "a"), person(s, "b")]).collect();
        let split = make_split(&data, &SplitSpec { protocol: Protocol::ViperStyle, repeat, seed }).unwrap();
        let train: BTreeSet<_> = split.train.iter().collect();
        prop_assert_eq!(split.train.len(), n / 2);
        prop_assert_eq!(split.train.len() + split.probe.len(), n);
        prop_assert!(split.probe.iter().all(|p| !train.contains(p)));
        prop_assert_eq!(&split.probe, &split.gallery);
    }

    #[test]
    fn split_csv_round_trips(n in 4usize..30, seed in any::<u64>()) {
        let data: Vec<_> = (0..n).flat_map(|s| [person(s, "a"), person(s, "b")]).collect();
        let split = make_split(&data, &SplitSpec { protocol: Protocol::ViperStyle, repeat: 0, seed }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        split.write_csv(&path).unwrap();
        prop_assert_eq!(Split::read_csv(&path).unwrap(), split);
    }

    #[test]
    fn cmc_is_monotone_and_ends_at_one(scores in prop::collection::vec(-1.0f64..1.0, 36), ties in any::<bool>()) {
        let scores = if ties { scores.iter().map(|s| (s * 2.0).round() / 2.0).collect() } else { scores };
        let ids: Vec<String> = (0..6).map(|i| i.to_string()).collect();
        let table = ScoreTable::new(Array2::from_shape_vec((6, 6), scores).unwrap(), ids.clone(), ids).unwrap();
        let curve = cmc(&table).unwrap();
        prop_assert!(curve.mean.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*curve.mean.last().unwrap(), 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn model_serialization_round_trips(seed in any::<u64>(), specific in any::<bool>()) {
        let mode = if specific { SharingMode::ViewSpecific } else { SharingMode::General };
        let config = NetworkConfig { c1_channels: 3, c3_channels: 4, feature_dim: 5, ..NetworkConfig::default() };
        let params = NetworkParams::init(config, mode, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.snet");
        params.save(&path).unwrap();
        let back = NetworkParams::load(&path).unwrap();
        prop_assert_eq!(back.mode(), mode);
        prop_assert_eq!(back.branches(), params.branches());
    }
}
