use kvguard::metrics::{ngram_repetition_rate, rouge_l_f1, token_f1};
use kvguard::stats::{holm_bonferroni, wilcoxon_signed_rank};
use kvguard::*;
use proptest::prelude::*;

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(String::from), 0..12)
}

proptest! {
    #[test]
    fn guards_are_disjoint_and_sized(c in 1usize..600, extra in 0usize..300, rho_p in 0.0f64..0.5, rho_s in 0.0f64..0.5) {
        let cfg = ProtectionConfig { rho_suffix: rho_s, ..ProtectionConfig::bilateral(rho_p) };
        let mut s = CacheState::new(c, 1).unwrap();
        s.admit(&(0..(c + extra) as u32).map(LogicalPosition).collect::<Vec<_>>()).unwrap();
        let set = compute_protected_set(&cfg, &s);
        prop_assert!(set.prefix.is_disjoint(&set.suffix));
        prop_assert_eq!(set.prefix.len(), cfg.prefix_slots(c).min(c + extra));
        prop_assert!(set.suffix.len() <= cfg.suffix_slots(c));
        // prefix is the lowest run, suffix the highest
        if let (Some(p), Some(q)) = (set.prefix.iter().next_back(), set.suffix.iter().next()) {
            prop_assert!(p < q);
        }
    }

    #[test]
    fn overlap_scores_are_bounded(p in words(), r in words()) {
        for f in [token_f1(&p, &[r.clone()]), rouge_l_f1(&p, &[r.clone()])] {
            prop_assert!((0.0..=1.0).contains(&f));
        }
        prop_assert_eq!(token_f1(&p, &[r.clone()]), token_f1(&r, &[p.clone()]));
        // LCS never exceeds multiset overlap
        prop_assert!(rouge_l_f1(&p, &[r.clone()]) <= token_f1(&p, &[r.clone()]) + 1e-12);
        prop_assert_eq!(token_f1(&p, &[p.clone()]), 1.0);
        prop_assert!((0.0..1.0).contains(&ngram_repetition_rate(&p, 4)));
    }

    #[test]
    fn holm_dominates_raw_and_keeps_order(ps in prop::collection::vec(0.0f64..=1.0, 1..20)) {
        let adj = holm_bonferroni(&ps);
        for i in 0..ps.len() {
            prop_assert!(adj[i] >= ps[i] && adj[i] <= 1.0);
            for j in 0..ps.len() {
                if ps[i] < ps[j] {
                    prop_assert!(adj[i] <= adj[j]);
                }
            }
        }
    }

    #[test]
    fn wilcoxon_is_sign_symmetric(d in prop::collection::vec(-5i32..=5, 1..30)) {
        let d: Vec<f64> = d.into_iter().map(f64::from).collect();
        let flipped: Vec<f64> = d.iter().map(|x| -x).collect();
        let (a, b) = (wilcoxon_signed_rank(&d), wilcoxon_signed_rank(&flipped));
        prop_assert!((a.p_value - b.p_value).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.p_value));
    }
}
