mod common;

use common::{naive_combined, naive_instantaneous, NaiveBatch};
use proptest::prelude::*;
use rand::Rng;
use splitprune_core::lcis::{
    alpha, instantaneous_score, inter_similarity, intra_similarity, label_mean_maps,
    normalize_scores, score_batch, FeatureBatch, ScoreState,
};
use splitprune_core::{Error, Tensor};

fn batch(shape: [usize; 4], data: Vec<f32>, labels: Vec<usize>, classes: usize) -> FeatureBatch {
    FeatureBatch::new(
        Tensor::new(shape.to_vec(), data).unwrap(),
        labels,
        classes,
        0,
    )
    .unwrap()
}

#[test]
fn mean_maps_match_brute_force_averaging() {
    let mut rng = common::rng(1);
    for _ in 0..50 {
        let nb = NaiveBatch::random(&mut rng, 3, 3, 2, 2);
        let fb = nb.to_feature_batch(2, 2, 0);
        let means = label_mean_maps(&fb).unwrap();
        for (slot, &l) in means.labels.iter().enumerate() {
            for i in 0..3 {
                let members: Vec<usize> = (0..nb.labels.len())
                    .filter(|&b| nb.labels[b] == l)
                    .collect();
                for e in 0..4 {
                    let mut s = 0.0;
                    for &b in &members {
                        s += nb.maps[b][i][e];
                    }
                    let want = s / members.len() as f64;
                    assert!((means.map(slot, i)[e] - want).abs() <= 1e-6);
                }
            }
        }
        // Absent labels are omitted.
        for l in 0..3 {
            assert_eq!(means.slot_of(l).is_some(), nb.labels.contains(&l));
        }
    }
}

#[test]
fn mean_map_small_cases() {
    let fb = batch([2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0], vec![0, 1], 2);
    let m = label_mean_maps(&fb).unwrap();
    assert_eq!(m.map(0, 0), &[1.0, 2.0]);
    assert_eq!(m.map(1, 0), &[3.0, 4.0]);
    let fb = batch([2, 1, 1, 2], vec![5.0, 6.0, 5.0, 6.0], vec![1, 1], 2);
    let m = label_mean_maps(&fb).unwrap();
    assert_eq!(m.present_labels(), 1);
    assert_eq!(m.map(0, 0), &[5.0, 6.0]);
}

#[test]
fn empty_batch_is_a_data_error() {
    let r = FeatureBatch::new(Tensor::<f32>::zeros(&[0, 1, 1, 1]), vec![], 2, 0);
    assert!(matches!(r, Err(Error::Data(_))));
}

#[test]
fn intra_and_inter_small_cases() {
    // Single sample with identity map: <M, M> = 2.
    let fb = batch([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0], vec![0], 1);
    let m = label_mean_maps(&fb).unwrap();
    assert_eq!(intra_similarity(&fb, &m), vec![2.0]);
    assert_eq!(inter_similarity(&m), vec![0.0]);

    // Every sample's map equals M: intra = ||M||^2 everywhere; inter too.
    let mmap = [0.5f32, 1.5, -1.0, 2.0];
    let data: Vec<f32> = (0..3 * 2).flat_map(|_| mmap).collect();
    let fb = batch([3, 2, 2, 2], data, vec![0, 1, 1], 2);
    let m = label_mean_maps(&fb).unwrap();
    let norm2: f64 = mmap.iter().map(|&v| (v as f64).powi(2)).sum();
    for v in intra_similarity(&fb, &m) {
        assert!((v - norm2).abs() < 1e-12);
    }
    for v in inter_similarity(&m) {
        assert!((v - norm2).abs() < 1e-12);
    }

    // Orthogonal mean maps.
    let fb = batch(
        [2, 1, 2, 2],
        vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        vec![0, 1],
        2,
    );
    let m = label_mean_maps(&fb).unwrap();
    assert_eq!(inter_similarity(&m), vec![0.0]);
}

#[test]
fn intra_and_inter_match_brute_force_loops() {
    let mut rng = common::rng(2);
    for _ in 0..100 {
        let nb = NaiveBatch::random(&mut rng, 3, 4, 3, 2);
        let fb = nb.to_feature_batch(3, 2, 0);
        let m = label_mean_maps(&fb).unwrap();
        let (intra, inter, _) = naive_instantaneous(&nb);
        for (a, b) in intra_similarity(&fb, &m).iter().zip(&intra) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
        for (a, b) in inter_similarity(&m).iter().zip(&inter) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn inter_with_four_labels_enumerates_six_pairs() {
    let mut rng = common::rng(3);
    let data: Vec<f32> = (0..4 * 2 * 4)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let fb = batch([4, 2, 2, 2], data.clone(), vec![3, 0, 2, 1], 4);
    let m = label_mean_maps(&fb).unwrap();
    let got = inter_similarity(&m);
    for (i, g) in got.iter().enumerate() {
        let map = |b: usize| &data[(b * 2 + i) * 4..][..4];
        let mut s = 0.0;
        let mut pairs = 0;
        for a in 0..4 {
            for b in a + 1..4 {
                s += map(a)
                    .iter()
                    .zip(map(b))
                    .map(|(x, y)| (*x as f64) * (*y as f64))
                    .sum::<f64>();
                pairs += 1;
            }
        }
        assert_eq!(pairs, 6);
        assert!((g - s / 6.0).abs() <= 1e-6);
    }
}

#[test]
fn normalize_and_instantaneous_small_cases() {
    assert_eq!(normalize_scores(&[3.7]), vec![1.0]);
    assert_eq!(normalize_scores(&[2.0; 4]), vec![0.25; 4]);
    assert_eq!(normalize_scores(&[0.0; 5]), vec![0.2; 5]);
    let s = instantaneous_score(&[0.6, 0.4], &[0.2, 0.8]);
    assert!((s[0] - 0.4).abs() < 1e-15 && (s[1] + 0.4).abs() < 1e-15);
    // Statistically identical channels score zero.
    let data: Vec<f32> = (0..4)
        .flat_map(|b| [b as f32, 1.0, b as f32, 1.0])
        .collect();
    let fb = batch([4, 2, 1, 2], data, vec![0, 1, 0, 1], 2);
    assert!(score_batch(&fb)
        .unwrap()
        .instantaneous
        .iter()
        .all(|v| v.abs() < 1e-15));
}

#[test]
fn score_state_small_cases() {
    let mut s = ScoreState::new(1, 100).unwrap();
    let c = s.update(&[0.2]).unwrap().to_vec();
    assert!((s.alpha() - 0.99).abs() < 1e-15);
    assert!((c[0] - 0.2).abs() < 1e-15);
    s.update(&[0.4]).unwrap();
    assert!((s.historical[0] - 0.3).abs() < 1e-15);

    let mut s = ScoreState::new(2, 3).unwrap();
    for v in [[0.1, -0.1], [0.3, -0.3], [-0.2, 0.2]] {
        s.update(&v).unwrap();
    }
    assert_eq!(s.alpha(), 0.0);
    assert_eq!(s.combined, s.historical);
    assert!(matches!(
        s.update(&[0.0, 0.0]),
        Err(Error::ScheduleExhausted { t: 3, total: 3 })
    ));
    assert_eq!(alpha(0, 7), 1.0);
}

#[test]
fn pipeline_matches_naive_reference_over_sequences() {
    let mut rng = common::rng(4);
    for _ in 0..100 {
        let n = rng.random_range(1..=4);
        let k = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let total = rng.random_range(1..=6);
        let mut state = ScoreState::new(n, total).unwrap();
        let mut history = Vec::new();
        for t in 0..total {
            let nb = NaiveBatch::random(&mut rng, n, k, h, w);
            let got = score_batch(&nb.to_feature_batch(h, w, t))
                .unwrap()
                .instantaneous;
            let (_, _, want) = naive_instantaneous(&nb);
            history.push(want.clone());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-6);
            }
            let combined = state.update(&got).unwrap().to_vec();
            for (a, b) in combined.iter().zip(naive_combined(&history, total)) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}

proptest! {
    #[test]
    fn permuting_channels_permutes_scores(seed in any::<u64>(), rot in 1usize..4) {
        let mut rng = common::rng(seed);
        let nb = NaiveBatch::random(&mut rng, 4, 3, 2, 2);
        let mut permuted = NaiveBatch { maps: nb.maps.clone(), labels: nb.labels.clone(), classes: 3 };
        for m in permuted.maps.iter_mut() {
            m.rotate_left(rot);
        }
        let a = score_batch(&nb.to_feature_batch(2, 2, 0)).unwrap();
        let b = score_batch(&permuted.to_feature_batch(2, 2, 0)).unwrap();
        for i in 0..4 {
            let j = (i + 4 - rot) % 4;
            prop_assert!((a.instantaneous[i] - b.instantaneous[j]).abs() < 1e-12);
            prop_assert!((a.intra[i] - b.intra[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn scaling_activations_scales_raw_scores_quadratically(seed in any::<u64>(), c in 0.1f64..10.0) {
        let mut rng = common::rng(seed);
        let nb = NaiveBatch::random(&mut rng, 3, 3, 2, 3);
        let mut scaled = NaiveBatch { maps: nb.maps.clone(), labels: nb.labels.clone(), classes: 3 };
        // Scale in f32 space so both inputs are exactly what the library sees.
        for v in scaled.maps.iter_mut().flatten().flatten() {
            *v = ((*v as f32) * c as f32) as f64;
        }
        let eff = |a: f64, b: f64| if a == 0.0 { 0.0 } else { b / a };
        let a = score_batch(&nb.to_feature_batch(2, 3, 0)).unwrap();
        let b = score_batch(&scaled.to_feature_batch(2, 3, 0)).unwrap();
        for i in 0..3 {
            if a.intra[i] > 1e-9 {
                prop_assert!((eff(a.intra[i], b.intra[i]) / (c * c) - 1.0).abs() < 1e-5);
            }
            prop_assert!((a.instantaneous[i] - b.instantaneous[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn historical_is_the_running_mean(values in prop::collection::vec(-1.0f64..1.0, 1..100)) {
        let mut s = ScoreState::new(1, values.len()).unwrap();
        for v in &values {
            s.update(&[*v]).unwrap();
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        prop_assert!((s.historical[0] - mean).abs() <= 1e-9);
        prop_assert_eq!(&s.combined, &s.historical);
    }
}
