use dcmil_survival::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_force_cindex(times: &[f64], events: &[bool], risks: &[f64]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..times.len() {
        for j in 0..times.len() {
            if events[i] && times[i] < times[j] {
                den += 1.0;
                if risks[i] > risks[j] {
                    num += 1.0;
                } else if risks[i] == risks[j] {
                    num += 0.5;
                }
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

fn exhaustive_youden(u: &[f64], correct: &[bool]) -> (f64, f64) {
    let mut sorted: Vec<f64> = u.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut candidates = vec![sorted[0]];
    for w in sorted.windows(2) {
        candidates.push((w[0] + w[1]) / 2.0);
    }
    candidates.push(sorted[sorted.len() - 1].next_up());
    let pos = correct.iter().filter(|&&c| c).count() as f64;
    let neg = correct.len() as f64 - pos;
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for &t in &candidates {
        let tp = u.iter().zip(correct).filter(|(&x, &c)| c && x < t).count() as f64;
        let fp = u.iter().zip(correct).filter(|(&x, &c)| !c && x < t).count() as f64;
        let j = tp / pos - fp / neg;
        if j > best.1 {
            best = (t, j);
        }
    }
    best
}

#[test]
fn cindex_matches_brute_force_on_random_cohorts() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 200 {
        let n = rng.random_range(2..=12);
        // Coarse grids force both time ties and risk ties.
        let times: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let risks: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64 * 0.25).collect();
        match brute_force_cindex(&times, &events, &risks) {
            Some(expected) => {
                assert_eq!(concordance_index(&times, &events, &risks).unwrap(), expected);
                checked += 1;
            }
            None => assert_eq!(
                concordance_index(&times, &events, &risks),
                Err(SurvivalError::NoComparablePairs)
            ),
        }
    }
}

#[test]
fn six_patient_mixed_censoring_case() {
    let times = [2.0, 3.0, 3.0, 5.0, 6.0, 8.0];
    let events = [true, false, true, true, false, true];
    let risks = [0.9, 0.4, 0.7, 0.7, 0.2, 0.1];
    // Ten comparable pairs, nine concordant and one risk tie.
    let c = concordance_index(&times, &events, &risks).unwrap();
    assert_eq!(c, 0.95);
    assert_eq!(Some(c), brute_force_cindex(&times, &events, &risks));
}

#[test]
fn eight_patient_logrank_matches_hand_table() {
    let a = SurvivalGroup::new(vec![1.0, 3.0, 5.0, 7.0], vec![true, true, false, true]).unwrap();
    let b = SurvivalGroup::new(vec![2.0, 4.0, 6.0, 8.0], vec![true, true, true, false]).unwrap();
    // Per event time (n_a, n_b, d, d_a): (4,4,1,1) (3,4,1,0) (3,3,1,1) (2,3,1,0) (1,2,1,0) (1,1,1,1)
    let o_minus_e = 0.5 - 3.0 / 7.0 + 0.5 - 2.0 / 5.0 - 1.0 / 3.0 + 0.5;
    let variance = 0.25 + 12.0 / 49.0 + 0.25 + 6.0 / 25.0 + 2.0 / 9.0 + 0.25;
    let r = logrank_test(&a, &b).unwrap();
    assert!((r.observed_minus_expected - o_minus_e).abs() < 1e-12);
    assert!((r.variance - variance).abs() < 1e-12);
    assert!((r.statistic - o_minus_e * o_minus_e / variance).abs() < 1e-12);
    let swapped = logrank_test(&b, &a).unwrap();
    assert!((swapped.statistic - r.statistic).abs() < 1e-12);
}

#[test]
fn youden_matches_exhaustive_scan_on_overlapping_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..300 {
        let n = rng.random_range(2..40);
        let correct: Vec<bool> = (0..n).map(|k| k % 2 == 0 || rng.random_bool(0.5)).collect();
        if correct.iter().all(|&c| c) {
            continue;
        }
        let u: Vec<f64> = correct
            .iter()
            .map(|&c| (rng.random_range(0..20) as f64 + if c { 0.0 } else { 6.0 }) * 0.01)
            .collect();
        let got = youden_threshold(&u, &correct).unwrap();
        let (t, j) = exhaustive_youden(&u, &correct);
        assert_eq!(got.j, j);
        assert_eq!(got.threshold, t);
    }
}

#[test]
fn independent_correctness_gives_small_j() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let u: Vec<f64> = (0..4000).map(|_| rng.random::<f64>()).collect();
    let c: Vec<bool> = (0..4000).map(|_| rng.random_bool(0.5)).collect();
    assert!(youden_threshold(&u, &c).unwrap().j < 0.06);
}

#[test]
fn distances_match_hand_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let reference: Vec<Vec<f64>> = (0..7).map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let query: Vec<Vec<f64>> = (0..9).map(|_| (0..5).map(|_| rng.random_range(-20.0..20.0)).collect()).collect();
    let map = distance_heatmap(&reference, &query).unwrap();
    for (q, d) in query.iter().zip(&map.distances) {
        let mut s = 0.0;
        for k in 0..5 {
            let c: f64 = reference.iter().map(|r| r[k]).sum::<f64>() / 7.0;
            s += (q[k] - c).powi(2);
        }
        assert!((s.sqrt() - d).abs() < 1e-12);
    }
    assert_eq!(map.histogram.iter().sum::<usize>(), 9);
}

proptest! {
    #[test]
    fn cindex_invariant_under_increasing_transform(
        rows in prop::collection::vec((0u8..8, any::<bool>(), -5.0f64..5.0), 2..30)
    ) {
        let times: Vec<f64> = rows.iter().map(|r| r.0 as f64).collect();
        let events: Vec<bool> = rows.iter().map(|r| r.1).collect();
        let risks: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let moved: Vec<f64> = risks.iter().map(|r| r.exp() * 3.0 + 1.0).collect();
        prop_assert_eq!(
            concordance_index(&times, &events, &risks),
            concordance_index(&times, &events, &moved)
        );
    }

    #[test]
    fn km_is_monotone_and_bounded(
        rows in prop::collection::vec((0.0f64..10.0, any::<bool>()), 1..40)
    ) {
        let times: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let events: Vec<bool> = rows.iter().map(|r| r.1).collect();
        let c = km_estimate(&times, &events).unwrap();
        let mut prev = 1.0;
        for &p in &c.survival_probs {
            prop_assert!((0.0..=prev).contains(&p));
            prev = p;
        }
        if events.iter().all(|&e| e) {
            prop_assert_eq!(*c.survival_probs.last().unwrap(), 0.0);
        }
    }

    #[test]
    fn logrank_is_symmetric_and_nonnegative(
        a in prop::collection::vec((0.0f64..10.0, any::<bool>()), 1..15),
        b in prop::collection::vec((0.0f64..10.0, any::<bool>()), 1..15),
    ) {
        let ga = SurvivalGroup::new(a.iter().map(|r| r.0).collect(), a.iter().map(|r| r.1).collect()).unwrap();
        let gb = SurvivalGroup::new(b.iter().map(|r| r.0).collect(), b.iter().map(|r| r.1).collect()).unwrap();
        let x = logrank_test(&ga, &gb).unwrap();
        let y = logrank_test(&gb, &ga).unwrap();
        prop_assert!(x.statistic >= 0.0);
        prop_assert!((x.statistic - y.statistic).abs() <= 1e-9 * (1.0 + x.statistic));
    }
}
