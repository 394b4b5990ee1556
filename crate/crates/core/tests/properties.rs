use std::collections::HashSet;

use exclusion_core::dataset::{generate_synthetic, partition_disjoint, Shape};
use exclusion_core::ensemble::majority_vote;
use exclusion_core::learner::ProbVector;
use exclusion_core::metrics::{attack_advantage, format_percent, format_ratio, roc_auc, RocCurve};
use exclusion_core::signature::{hamming_bits, hamming_norm, PHash64};
use proptest::prelude::*;

fn labeled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..20, n).prop_map(|v| v.into_iter().map(|x| x as f64 / 4.0).collect()),
            prop::collection::vec(any::<bool>(), n).prop_map(|mut m| {
                m[0] = true;
                m[1] = false;
                m
            }),
        )
    })
}

proptest! {
    #[test]
    fn auc_is_invariant_under_monotone_maps((scores, members) in labeled_scores()) {
        let base = roc_auc(&scores, &members).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s + 1.0).exp()).collect();
        prop_assert!((roc_auc(&mapped, &members).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn auc_complement_symmetry((scores, members) in labeled_scores()) {
        let base = roc_auc(&scores, &members).unwrap();
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        let flipped: Vec<bool> = members.iter().map(|m| !m).collect();
        prop_assert!((roc_auc(&negated, &members).unwrap() - (1.0 - base)).abs() < 1e-12);
        prop_assert!((roc_auc(&scores, &flipped).unwrap() - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn advantage_is_the_roc_max_gap((scores, members) in labeled_scores()) {
        let adv = attack_advantage(&scores, &members).unwrap();
        prop_assert_eq!(adv, RocCurve::new(&scores, &members).unwrap().max_gap());
        prop_assert!((0.0..=1.0).contains(&adv));
    }

    #[test]
    fn roc_points_are_monotone((scores, members) in labeled_scores()) {
        let curve = RocCurve::new(&scores, &members).unwrap();
        prop_assert_eq!(curve.points.first().copied(), Some((0.0, 0.0)));
        prop_assert_eq!(curve.points.last().copied(), Some((1.0, 1.0)));
        for w in curve.points.windows(2) {
            prop_assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn hamming_is_a_metric(a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
        let (a, b, c) = (PHash64(a), PHash64(b), PHash64(c));
        prop_assert_eq!(hamming_bits(a, a), 0);
        prop_assert_eq!(hamming_bits(a, b), hamming_bits(b, a));
        prop_assert!(hamming_bits(a, c) <= hamming_bits(a, b) + hamming_bits(b, c));
        prop_assert_eq!(hamming_norm(a, b), hamming_bits(a, b) as f64 / 64.0);
    }

    #[test]
    fn partitions_are_disjoint_covering_and_balanced(
        k in 2usize..5,
        per_class in 1usize..30,
        n in 2usize..7,
        seed in any::<u64>(),
    ) {
        let d = generate_synthetic(k, per_class, Shape::new(2, 2, 1).unwrap(), 1.0, seed).unwrap();
        prop_assume!(d.len() >= n);
        let p = partition_disjoint(&d, n, seed ^ 1).unwrap();
        let mut seen = HashSet::new();
        for (s, i) in p.members() {
            prop_assert!(seen.insert(s.id));
            prop_assert_eq!(p.origin(s.id), Some(i));
        }
        prop_assert_eq!(seen.len(), d.len());
        let sizes: Vec<usize> = p.subsets().iter().map(|s| s.len()).collect();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        for class in 0..k {
            let counts: Vec<usize> = p.subsets().iter().map(|s| s.class_counts()[class]).collect();
            let ideal = per_class as f64 / n as f64;
            for c in counts {
                prop_assert!((c as f64 - ideal).abs() < 1.0 + 1e-9, "class {class}: {c} vs {ideal}");
            }
        }
    }

    #[test]
    fn majority_winner_has_most_votes(
        votes in prop::collection::vec(0usize..4, 2..9),
        weights in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 9),
    ) {
        let probs: Vec<ProbVector> = votes
            .iter()
            .zip(&weights)
            .map(|(&v, w)| {
                let mut w = w.clone();
                w[v] += 4.0;
                ProbVector::normalized(w)
            })
            .collect();
        let winner = majority_vote(&votes, &probs).unwrap();
        let count = |c: usize| votes.iter().filter(|&&v| v == c).count();
        prop_assert!((0..4).all(|c| count(winner) >= count(c)));
    }

    #[test]
    fn formatted_numbers_round_to_nearest(v in 0.0f64..1.0) {
        let pct: f64 = format_percent(v).parse().unwrap();
        prop_assert!((pct - 100.0 * v).abs() <= 0.005 + 1e-9);
        let ratio: f64 = format_ratio(v).parse().unwrap();
        prop_assert!((ratio - v).abs() <= 0.005 + 1e-9);
    }
}
