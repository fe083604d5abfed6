use proptest::prelude::*;
use reltab_core::eval::{compute_metrics, metrics_consistent, rank_of, random_mrr, random_rr_std, RankingResult, TieBreak};

/// Sort candidates by descending score, then by index, and read off the
/// truth's position.
fn brute_force(scores: &[f64], truth: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.iter().position(|&i| i == truth).unwrap() + 1
}

fn scores() -> impl Strategy<Value = (Vec<f64>, usize)> {
    // Few distinct values so ties are common.
    prop::collection::vec((-4i32..4).prop_map(|v| v as f64 * 0.5), 1..40)
        .prop_flat_map(|s| {
            let n = s.len();
            (Just(s), 0..n)
        })
}

proptest! {
    #[test]
    fn rank_matches_sorting((s, truth) in scores()) {
        prop_assert_eq!(rank_of(&s, truth, TieBreak::TokenId).unwrap(), brute_force(&s, truth));
    }

    #[test]
    fn tie_policies_are_ordered((s, truth) in scores()) {
        let o = rank_of(&s, truth, TieBreak::Optimistic).unwrap();
        let t = rank_of(&s, truth, TieBreak::TokenId).unwrap();
        let p = rank_of(&s, truth, TieBreak::Pessimistic).unwrap();
        prop_assert!(1 <= o && o <= t && t <= p && p <= s.len());
        let higher = s.iter().filter(|&&x| x > s[truth]).count();
        let equal = s.iter().filter(|&&x| x == s[truth]).count();
        prop_assert_eq!(o, higher + 1);
        prop_assert_eq!(p, higher + equal);
    }

    #[test]
    fn rank_survives_monotone_maps((s, truth) in scores(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let mapped: Vec<f64> = s.iter().map(|x| (a * x + b).tanh() * 3.0 + x.exp()).collect();
        for tie in [TieBreak::TokenId, TieBreak::Optimistic, TieBreak::Pessimistic] {
            prop_assert_eq!(rank_of(&s, truth, tie).unwrap(), rank_of(&mapped, truth, tie).unwrap());
        }
    }

    #[test]
    fn aggregates_are_consistent(ranks in prop::collection::vec(1usize..500, 1..200), k in 1usize..20) {
        let results: Vec<RankingResult> =
            ranks.iter().enumerate().map(|(i, &r)| RankingResult { instance: i, true_id: 0, rank: r, pool: 500 }).collect();
        let m = compute_metrics(&results, k).unwrap();
        prop_assert!(metrics_consistent(m.hits_at_k, m.mean_rank, m.mrr));
        prop_assert!(m.mrr >= 1.0 / m.mean_rank - 1e-12);
        let n = ranks.len() as f64;
        prop_assert!((m.hits_at_k - ranks.iter().filter(|&&r| r <= k).count() as f64 / n).abs() < 1e-15);
    }
}

#[test]
fn random_ranking_moments() {
    // Mean and spread of 1/r for r uniform on 1..=n, by enumeration.
    for n in [1usize, 2, 7, 100] {
        let rr: Vec<f64> = (1..=n).map(|r| 1.0 / r as f64).collect();
        let mean = rr.iter().sum::<f64>() / n as f64;
        let var = rr.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((random_mrr(n) - mean).abs() < 1e-15);
        assert!((random_rr_std(n) - var.sqrt()).abs() < 1e-12);
    }
    assert!((random_mrr(4) - 25.0 / 48.0).abs() < 1e-15);
}

#[test]
fn inconsistent_rows_are_flagged() {
    assert!(metrics_consistent(0.801, 284.25, 0.656));
    assert!(!metrics_consistent(0.5, 2.0, 0.4));
    assert!(!metrics_consistent(1.2, 2.0, 0.6));
    assert!(!metrics_consistent(0.5, 0.5, 0.6));
}
