use proptest::prelude::*;

use plstitch::eval::{edit_score, labels_from_segments, segmental_f1, segments_from_labels, Segment};
use plstitch::losses::{pairwise_baseline, perm_ce_baseline, total_loss, vid_loss, LossWeights};
use plstitch::pl::{self, Permutation, ScoreVector};
use plstitch::synth::{sample_clip, sample_triplet, SyntheticVideo};
use plstitch::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scores(k: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    k.prop_flat_map(|k| prop::collection::vec(-5.0f64..5.0, k))
}

fn scores_with_ranking(k: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    scores(k).prop_flat_map(|s| {
        let n = s.len();
        (Just(s), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
    })
}

fn sv(v: &[f64]) -> ScoreVector {
    ScoreVector::new(v.to_vec()).unwrap()
}

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|m| {
            let mut plus = x.to_vec();
            let mut minus = x.to_vec();
            plus[m] += h;
            minus[m] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn enumeration_normalizes(s in scores(1..=6)) {
        let total: f64 = pl::enumerate_probabilities(&sv(&s)).unwrap().values().sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn likelihood_is_shift_invariant((s, r) in scores_with_ranking(1..=8), c in -100.0f64..100.0) {
        let r = Permutation::new(r).unwrap();
        let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
        let a = pl::log_likelihood(&sv(&s), &r).unwrap();
        let b = pl::log_likelihood(&sv(&shifted), &r).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
    }

    #[test]
    fn mode_is_descending_order(s in scores(2..=6)) {
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-9));
        let probs = pl::enumerate_probabilities(&sv(&s)).unwrap();
        let (mode, _) = probs.iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        prop_assert_eq!(mode, &sv(&s).argsort_descending());
    }

    #[test]
    fn gradient_sums_to_zero_and_matches_differences((s, r) in scores_with_ranking(2..=8)) {
        let r = Permutation::new(r).unwrap();
        let grad = pl::nll_grad(&sv(&s), &r).unwrap();
        prop_assert!(grad.iter().sum::<f64>().abs() <= 1e-10);
        let fd = central_difference(|x| pl::nll(&sv(x), &r).unwrap(), &s, 1e-5);
        for (g, f) in grad.iter().zip(&fd) {
            prop_assert!((g - f).abs() <= 1e-5, "{g} vs {f}");
        }
    }

    #[test]
    fn nll_is_nonnegative_and_matches_enumeration((s, r) in scores_with_ranking(1..=6)) {
        let r = Permutation::new(r).unwrap();
        let nll = pl::nll(&sv(&s), &r).unwrap();
        prop_assert!(nll >= 0.0);
        let p = pl::enumerate_probabilities(&sv(&s)).unwrap()[&r];
        prop_assert!((nll + p.ln()).abs() <= 1e-10);
        if s.len() > 1 {
            prop_assert!(nll > 0.0);
        }
    }

    #[test]
    fn vid_loss_is_the_pl_nll(s in scores(1..=8)) {
        let s = sv(&s);
        prop_assert_eq!(vid_loss(&s).unwrap(), pl::nll(&s, &Permutation::identity(s.len())).unwrap());
    }

    #[test]
    fn pairwise_is_shift_invariant_and_matches_pl_for_pairs(s in scores(2..=8), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
        let a = pairwise_baseline(&sv(&s)).unwrap();
        let b = pairwise_baseline(&sv(&shifted)).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-10);
        let pair = sv(&s[..2]);
        prop_assert!((pairwise_baseline(&pair).unwrap() - vid_loss(&pair).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn perm_ce_is_bounded(logits in prop::collection::vec(-10.0f64..10.0, 2..30), pick in any::<prop::sample::Index>()) {
        let t = pick.index(logits.len());
        let ce = perm_ce_baseline(&logits, t).unwrap();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(ce >= 0.0);
        prop_assert!(ce <= (logits.len() as f64).ln() + (max - logits[t]) + 1e-12);
    }

    #[test]
    fn total_loss_is_linear(v in 0.0f64..10.0, m in 0.0f64..10.0, j in 0.0f64..10.0, dv in 0.0f64..5.0) {
        let w = LossWeights::default();
        let a = total_loss(&w, v, m, j).unwrap();
        let b = total_loss(&w, v + dv, m, j).unwrap();
        prop_assert!((b - a - w.lambda1 * dv).abs() <= 1e-12);
        prop_assert!((a - (w.lambda1 * v + w.lambda2 * m + w.lambda3 * j)).abs() <= 1e-12);
    }

    #[test]
    fn segment_round_trip(labels in prop::collection::vec(0usize..4, 1..40)) {
        let segs = segments_from_labels(&labels);
        prop_assert_eq!(labels_from_segments(&segs).unwrap(), labels);
        prop_assert_eq!(segments_from_labels(&labels_from_segments(&segs).unwrap()), segs.clone());
        for pair in segs.windows(2) {
            prop_assert!(pair[0].class != pair[1].class);
            prop_assert_eq!(pair[0].end, pair[1].start);
        }
    }

    #[test]
    fn segment_metrics_are_bounded_symmetric_and_monotone(
        a in prop::collection::vec(0usize..3, 1..30),
        b in prop::collection::vec(0usize..3, 1..30),
    ) {
        let (sa, sb): (Vec<Segment>, Vec<Segment>) = (segments_from_labels(&a), segments_from_labels(&b));
        let e = edit_score(&sa, &sb).unwrap();
        prop_assert_eq!(e, edit_score(&sb, &sa).unwrap());
        prop_assert!((0.0..=100.0).contains(&e));
        let f: Vec<f64> = [0.1, 0.25, 0.5].iter().map(|&d| segmental_f1(&sa, &sb, d).unwrap()).collect();
        prop_assert!(f.iter().all(|v| (0.0..=100.0).contains(v)));
        prop_assert!(f[2] <= f[1] && f[1] <= f[0]);
        prop_assert_eq!(edit_score(&sa, &sa).unwrap(), 100.0);
        prop_assert_eq!(segmental_f1(&sa, &sa, 0.5).unwrap(), 100.0);
    }

    #[test]
    fn clips_respect_bounds(len in 1usize..200, k in 1usize..16, seed in any::<u64>()) {
        prop_assume!(k <= len);
        let video = SyntheticVideo::new(vec![Tensor::zeros(1, 1); len], vec![0; len]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clip = sample_clip(&video, k, &mut rng).unwrap();
        prop_assert_eq!(clip.indices.len(), k);
        prop_assert!(clip.dt >= 1);
        prop_assert!(clip.t0 + (k - 1) * clip.dt < len);
        for (i, &t) in clip.indices.iter().enumerate() {
            prop_assert_eq!(t, clip.t0 + i * clip.dt);
        }
    }

    #[test]
    fn triplets_respect_offsets(len in 7usize..100, lo in 1usize..3, span in 0usize..2, seed in any::<u64>()) {
        let hi = lo + span;
        prop_assume!(2 * hi < len);
        let video = SyntheticVideo::new(vec![Tensor::zeros(1, 1); len], vec![0; len]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = sample_triplet(&video, [lo, hi], &mut rng).unwrap();
        prop_assert!((lo..=hi).contains(&t.tau1) && (lo..=hi).contains(&t.tau2));
        prop_assert!(t.index >= t.tau1 && t.index + t.tau2 < len);
    }
}
