use flmd::metrics::{auc, disparity, hd_binary, hd_multi, ndcg_at_k, ScoredSet};
use proptest::prelude::*;

/// Counts every positive/negative pair directly.
fn auc_pairs(scores: &[f64], labels: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1.0 && labels[j] == 0.0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// DCG of the scores' ranking, with stable tie order, over the ideal DCG.
fn ndcg_direct(scores: &[f64], rel: &[f64], k: usize) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut dcg = 0.0;
    for (r, &i) in idx.iter().take(k).enumerate() {
        dcg += rel[i] / (r as f64 + 2.0).log2();
    }
    let mut ideal = rel.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut idcg = 0.0;
    for (r, g) in ideal.iter().take(k).enumerate() {
        idcg += g / (r as f64 + 2.0).log2();
    }
    dcg / idcg
}

/// Scores drawn from a small grid so ties are common, with both classes.
fn scored_set(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..=max)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(0u8..12, n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_map(|(s, l)| {
            let scores = s.into_iter().map(|v| f64::from(v) / 4.0).collect();
            let mut labels: Vec<f64> = l.into_iter().map(|b| f64::from(u8::from(b))).collect();
            labels[0] = 1.0;
            labels[1] = 0.0;
            (scores, labels)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn auc_equals_pairwise_count((scores, labels) in scored_set(200)) {
        prop_assert_eq!(auc(&scores, &labels).unwrap(), auc_pairs(&scores, &labels));
    }

    #[test]
    fn auc_ignores_increasing_transforms((scores, labels) in scored_set(80), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let moved: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
        prop_assert_eq!(auc(&moved, &labels).unwrap(), auc(&scores, &labels).unwrap());
    }

    #[test]
    fn negated_scores_complement(raw in prop::collection::vec(-1e3f64..1e3, 2..100), flips in prop::collection::vec(any::<bool>(), 100)) {
        let mut scores = raw.clone();
        scores.sort_by(f64::total_cmp);
        scores.dedup();
        prop_assume!(scores.len() >= 2);
        let mut labels: Vec<f64> = flips.iter().take(scores.len()).map(|&b| f64::from(u8::from(b))).collect();
        labels[0] = 1.0;
        labels[1] = 0.0;
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let total = auc(&scores, &labels).unwrap() + auc(&neg, &labels).unwrap();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ndcg_matches_direct_formula((scores, rel) in scored_set(60), k in 1usize..12) {
        let got = ndcg_at_k(&scores, &rel, k).unwrap();
        prop_assert!((got - ndcg_direct(&scores, &rel, k)).abs() < 1e-12);
        prop_assert!(got <= 1.0 + 1e-12);
    }

    #[test]
    fn disparity_is_scaled_absolute_difference((s1, l1) in scored_set(40), (s2, l2) in scored_set(40)) {
        let g1 = ScoredSet { scores: s1, labels: l1 };
        let g2 = ScoredSet { scores: s2, labels: l2 };
        let a1 = auc(&g1.scores, &g1.labels).unwrap();
        let a2 = auc(&g2.scores, &g2.labels).unwrap();
        let hd = hd_binary(&g1, &g2).unwrap();
        prop_assert_eq!(hd, (a1 - a2).abs() * 1e3);
        prop_assert_eq!(hd, hd_binary(&g2, &g1).unwrap());
        prop_assert_eq!(hd_binary(&g1, &g1).unwrap(), 0.0);
        prop_assert!(hd_multi(&g1, &g2, 5).unwrap() >= 0.0);
        prop_assert_eq!(hd_multi(&g2, &g2, 5).unwrap(), 0.0);
    }
}

#[test]
fn ndcg_is_one_for_ideal_order() {
    let rel = [3.0, 2.0, 2.0, 1.0, 0.0];
    let scores = [9.0, 8.0, 7.0, 1.0, 0.5];
    assert_eq!(ndcg_at_k(&scores, &rel, 5).unwrap(), 1.0);
    assert!(ndcg_at_k(&[0.5, 8.0, 7.0, 1.0, 9.0], &rel, 3).unwrap() < 1.0);
}

#[test]
fn multi_disparity_arithmetic() {
    assert!((disparity(0.58, 0.52) - 60.0).abs() < 1e-9);
}
