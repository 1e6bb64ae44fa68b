use forgetbench::attack::{lira_offline, lr_mia, normal_cdf, LiraConfig, MatrixProvenance, ScoreMatrix};
use forgetbench::metrics::{
    clopper_pearson_upper, epsilon_from_rates, estimate_epsilon, nearest_rank, roc_from_scores, tpr_at_fpr,
};
use forgetbench::store::{build_split_plan, IndexSet};
use forgetbench::unlearn::{randlabel_relabel, ssd_dampen};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

/// Scores on a coarse grid so ties are common.
fn scored_labels(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    prop::collection::vec((0u8..20, any::<bool>()), 2..max)
        .prop_filter("both classes", |v| v.iter().any(|x| x.1) && v.iter().any(|x| !x.1))
        .prop_map(|v| v.into_iter().map(|(s, l)| (s as f64 / 4.0, l as u8)).unzip())
}

fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                num += if si > sj { 2 } else if si == sj { 1 } else { 0 };
            }
        }
    }
    num as f64 / (2 * pairs) as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_plans_are_disjoint_deterministic_and_bounded(
        n_train in 20usize..400,
        n_val in 1usize..50,
        n_test in 1usize..50,
        iterations in 1usize..8,
        seed in any::<u64>(),
    ) {
        let fraction = 1.0 / (iterations as f64 * 2.0);
        let plan = build_split_plan("p", n_train, n_val, n_test, fraction, iterations, seed).unwrap();
        prop_assert!(plan.train_indices.is_disjoint(&plan.val_indices));
        prop_assert!(plan.train_indices.is_disjoint(&plan.test_indices));
        prop_assert!(plan.val_indices.is_disjoint(&plan.test_indices));
        for (i, a) in plan.forget_sequence.iter().enumerate() {
            prop_assert!(a.is_subset(&plan.train_indices));
            for b in &plan.forget_sequence[i + 1..] {
                prop_assert!(a.is_disjoint(b));
            }
        }
        let total: usize = plan.forget_sequence.iter().map(IndexSet::len).sum();
        prop_assert!(total <= plan.train_indices.len());
        let again = build_split_plan("p", n_train, n_val, n_test, fraction, iterations, seed).unwrap();
        prop_assert_eq!(serde_json::to_vec(&plan).unwrap(), serde_json::to_vec(&again).unwrap());
        plan.validate().unwrap();
    }

    #[test]
    fn auc_matches_pair_counting((scores, labels) in scored_labels(200)) {
        let curve = roc_from_scores(&scores, &labels).unwrap();
        prop_assert_eq!(curve.auc, brute_force_auc(&scores, &labels));
        for w in curve.points.windows(2) {
            prop_assert!(w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr);
        }
    }

    #[test]
    fn tpr_at_fpr_is_monotone((scores, labels) in scored_labels(120), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let curve = roc_from_scores(&scores, &labels).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(tpr_at_fpr(&curve, lo) <= tpr_at_fpr(&curve, hi));
    }

    #[test]
    fn epsilon_is_antitone_in_delta(fpr in 0.0f64..1.0, fnr in 0.0f64..1.0, d1 in 0.0f64..0.5, d2 in 0.0f64..0.5) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let e_lo = epsilon_from_rates(fpr, fnr, lo);
        let e_hi = epsilon_from_rates(fpr, fnr, hi);
        prop_assert!(e_hi <= e_lo);
        prop_assert!(e_lo.is_finite() && e_lo >= 0.0);
    }

    #[test]
    fn epsilon_vanishes_for_coin_flip_error_rates(fpr in 0.5f64..=1.0, fnr in 0.5f64..=1.0) {
        prop_assert_eq!(epsilon_from_rates(fpr, fnr, 0.0), 0.0);
    }

    #[test]
    fn per_example_epsilon_follows_permutations(
        trials in prop::collection::vec(
            (prop::collection::vec(any::<bool>(), 1..12), prop::collection::vec(any::<bool>(), 1..12)),
            1..20,
        ),
        seed in any::<u64>(),
        conf in prop::option::of(0.5f64..0.99),
    ) {
        let (m, n): (Vec<_>, Vec<_>) = trials.into_iter().unzip();
        let base = estimate_epsilon(&m, &n, 1e-3, conf).unwrap();
        let perm = shuffled(m.len(), seed);
        let pm: Vec<_> = perm.iter().map(|&i| m[i].clone()).collect();
        let pn: Vec<_> = perm.iter().map(|&i| n[i].clone()).collect();
        let permuted = estimate_epsilon(&pm, &pn, 1e-3, conf).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(permuted.epsilon[k], base.epsilon[i]);
        }
        prop_assert!(base.epsilon.iter().all(|e| e.is_finite() && *e >= 0.0));
    }

    #[test]
    fn clopper_pearson_bounds_the_point_rate(n in 1usize..200, k_frac in 0.0f64..1.0, conf in 0.5f64..0.999) {
        let k = ((n as f64) * k_frac) as usize;
        let u = clopper_pearson_upper(k, n, conf);
        prop_assert!(u >= k as f64 / n as f64 - 1e-12 && u <= 1.0);
    }

    #[test]
    fn quantiles_are_monotone(mut v in prop::collection::vec(-1e3f64..1e3, 1..100), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        v.sort_by(f64::total_cmp);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(nearest_rank(&v, lo) <= nearest_rank(&v, hi));
    }

    #[test]
    fn lr_mia_follows_permutations(
        m in prop::collection::vec(0.0f64..5.0, 2..40),
        n in prop::collection::vec(0.0f64..5.0, 2..40),
        seed in any::<u64>(),
    ) {
        let base = lr_mia(&m, &n, 3).unwrap();
        let pm = shuffled(m.len(), seed);
        let pn = shuffled(n.len(), seed ^ 1);
        let m2: Vec<f64> = pm.iter().map(|&i| m[i]).collect();
        let n2: Vec<f64> = pn.iter().map(|&i| n[i]).collect();
        let permuted = lr_mia(&m2, &n2, 3).unwrap();
        for (k, &i) in pm.iter().enumerate() {
            prop_assert_eq!(permuted.scores[k], base.scores[i]);
        }
        for (k, &i) in pn.iter().enumerate() {
            prop_assert_eq!(permuted.scores[m.len() + k], base.scores[m.len() + i]);
        }
    }

    #[test]
    fn lira_is_monotone_and_follows_permutations(
        cells in prop::collection::vec((prop::collection::vec(-3.0f32..3.0, 6), prop::collection::vec(any::<bool>(), 6)), 1..20),
        phi in prop::collection::vec(-4.0f64..4.0, 20),
        bump in 0.01f64..1.0,
        seed in any::<u64>(),
    ) {
        // 6 shadows; force at least two OUT cells per query
        let q = cells.len();
        let mut scores = vec![0f32; 6 * q];
        let mut member = vec![false; 6 * q];
        for (j, (s, m)) in cells.iter().enumerate() {
            for k in 0..6 {
                scores[k * q + j] = s[k];
                member[k * q + j] = m[k] && k >= 2;
            }
        }
        let matrix = |order: &[usize]| ScoreMatrix {
            shadows: 6,
            queries: order.iter().map(|&j| j as u32).collect(),
            query_classes: order.iter().map(|&j| (j % 3) as u32).collect(),
            scores: (0..6).flat_map(|k| order.iter().map(move |&j| (k, j))).map(|(k, j)| scores[k * q + j]).collect(),
            member: (0..6).flat_map(|k| order.iter().map(move |&j| (k, j))).map(|(k, j)| member[k * q + j]).collect(),
            provenance: MatrixProvenance::default(),
        };
        let cfg = LiraConfig::default();
        let ident: Vec<usize> = (0..q).collect();
        let target = &phi[..q];
        let labels: Vec<u8> = (0..q).map(|j| (j % 2) as u8).collect();
        let base = lira_offline(&(0..q as u32).collect::<Vec<_>>(), target, &labels, &matrix(&ident), &cfg).unwrap();

        let higher: Vec<f64> = target.iter().map(|p| p + bump).collect();
        let up = lira_offline(&(0..q as u32).collect::<Vec<_>>(), &higher, &labels, &matrix(&ident), &cfg).unwrap();
        for j in 0..q {
            // strict wherever the CDF has not saturated
            prop_assert!(up.scores[j] >= base.scores[j]);
            if base.scores[j] > 1e-12 && up.scores[j] < 1.0 - 1e-12 {
                prop_assert!(up.scores[j] > base.scores[j]);
            }
        }

        let perm = shuffled(q, seed);
        let pq: Vec<u32> = perm.iter().map(|&j| j as u32).collect();
        let pt: Vec<f64> = perm.iter().map(|&j| target[j]).collect();
        let pl: Vec<u8> = perm.iter().map(|&j| labels[j]).collect();
        let permuted = lira_offline(&pq, &pt, &pl, &matrix(&perm), &cfg).unwrap();
        for (k, &j) in perm.iter().enumerate() {
            prop_assert!((permuted.scores[k] - base.scores[j]).abs() <= 1e-12);
        }
    }

    #[test]
    fn normal_cdf_is_monotone(x in -20.0f64..20.0, dx in 1e-3f64..5.0, mean in -3.0f64..3.0, sd in 1e-3f64..5.0) {
        prop_assert!(normal_cdf(x + dx, mean, sd) >= normal_cdf(x, mean, sd));
    }

    #[test]
    fn ssd_only_shrinks_and_is_inert_for_huge_alpha(
        theta in prop::collection::vec(-2.0f32..2.0, 1..64),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d: Vec<f64> = theta.iter().map(|_| rng.random_range(0.0..1.0)).collect();
        let f: Vec<f64> = theta.iter().map(|_| rng.random_range(0.0..10.0)).collect();
        let out = ssd_dampen(&theta, &d, &f, 1.0, 1.0).unwrap();
        for (a, b) in theta.iter().zip(&out) {
            prop_assert!(b.abs() <= a.abs());
            prop_assert!(a.signum() == b.signum() || *b == 0.0);
        }
        prop_assert_eq!(ssd_dampen(&theta, &d, &f, 1e300, 1.0).unwrap(), theta);
    }

    #[test]
    fn randlabel_never_keeps_the_true_class(
        labels in prop::collection::vec(0usize..10, 1..200),
        seed in any::<u64>(),
    ) {
        let out = randlabel_relabel(&labels, 10, seed).unwrap();
        prop_assert_eq!(out.len(), labels.len());
        for (a, b) in labels.iter().zip(&out) {
            prop_assert!(a != b && *b < 10);
        }
        prop_assert_eq!(randlabel_relabel(&labels, 10, seed).unwrap(), out);
    }

    #[test]
    fn index_set_algebra(a in prop::collection::vec(0u32..300, 0..100), b in prop::collection::vec(0u32..300, 0..100)) {
        let (a, b) = (IndexSet::new(a), IndexSet::new(b));
        let u = a.union(&b);
        let i = a.intersection(&b);
        let d = a.difference(&b);
        prop_assert!(a.is_subset(&u) && b.is_subset(&u));
        prop_assert!(i.is_subset(&a) && i.is_subset(&b));
        prop_assert!(d.is_disjoint(&b));
        prop_assert_eq!(d.len() + i.len(), a.len());
        prop_assert_eq!(u.len(), a.len() + b.len() - i.len());
        prop_assert!(u.as_slice().windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(d.union(&i), a);
    }
}
