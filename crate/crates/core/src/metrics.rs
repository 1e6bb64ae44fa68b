//! Worst-case privacy measurements from attack outputs: exact ROC curves,
//! TPR at low FPR, Clopper–Pearson error bounds and per-example ε estimates.

use serde::{Deserialize, Serialize};
use statrs::function::beta::inv_beta_reg;

use crate::attack::AttackResult;
use crate::error::{BenchError, Result};

/// FPR targets reported by [`worst_case_report`].
pub const REPORT_FPRS: [f64; 3] = [1e-3, 1e-2, 1e-1];

/// Default one-sided confidence for error-rate bounds.
pub const DEFAULT_CONFIDENCE: f64 = 0.95;

/// Floor on error-rate denominators so that ε̂ stays finite.
pub const RATE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Predict "member" when `score >= threshold`; `+inf` at the origin.
    pub threshold: f64,
    pub true_positives: usize,
    pub false_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(BenchError::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(BenchError::NanInput("attack scores"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(BenchError::BadLabel {
            label: l as usize,
            classes: 2,
        });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(BenchError::OneClass);
    }
    Ok((positives, negatives))
}

/// Exact ROC: every distinct score is a threshold. AUC counts member/nonmember
/// pairs, ties at half credit, using integer arithmetic.
pub fn roc_from_scores(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    let (positives, negatives) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
        true_positives: 0,
        false_positives: 0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    // wins: member strictly above nonmember; ties: equal scores
    let (mut wins, mut ties) = (0u128, 0u128);
    let mut k = 0;
    while k < order.len() {
        let t = scores[order[k]];
        let (mut gp, mut gn) = (0usize, 0usize);
        while k < order.len() && scores[order[k]] == t {
            if labels[order[k]] == 1 {
                gp += 1;
            } else {
                gn += 1;
            }
            k += 1;
        }
        // members in this group beat every nonmember still below
        wins += gp as u128 * (negatives - fp - gn) as u128;
        ties += gp as u128 * gn as u128;
        tp += gp;
        fp += gn;
        points.push(RocPoint {
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
            threshold: t,
            true_positives: tp,
            false_positives: fp,
        });
    }
    let auc = (2 * wins + ties) as f64 / (2 * positives as u128 * negatives as u128) as f64;
    Ok(RocCurve {
        points,
        auc,
        positives,
        negatives,
    })
}

/// TPR of the best operating point whose FPR does not exceed `fpr_target`.
pub fn tpr_at_fpr(curve: &RocCurve, fpr_target: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.fpr <= fpr_target)
        .map(|p| p.tpr)
        .fold(0.0, f64::max)
}

/// Accuracy of the rule `score >= threshold ⇒ member`.
pub fn accuracy_at(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|&(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    correct as f64 / scores.len().max(1) as f64
}

/// One-sided Clopper–Pearson upper bound on a rate after `k` events in `n`
/// trials: the `confidence` quantile of `Beta(k + 1, n − k)`, or 1 when `k = n`.
pub fn clopper_pearson_upper(k: usize, n: usize, confidence: f64) -> f64 {
    if n == 0 || k >= n {
        return 1.0;
    }
    inv_beta_reg((k + 1) as f64, (n - k) as f64, confidence).clamp(0.0, 1.0)
}

/// `max(ln((1−δ−FPR)/FNR), ln((1−δ−FNR)/FPR), 0)` with nonpositive numerators
/// dropping their branch and denominators floored at [`RATE_FLOOR`].
pub fn epsilon_from_rates(fpr: f64, fnr: f64, delta: f64) -> f64 {
    let branch = |num: f64, den: f64| {
        if num <= 0.0 {
            0.0
        } else {
            (num / den.max(RATE_FLOOR)).ln()
        }
    };
    branch(1.0 - delta - fpr, fnr).max(branch(1.0 - delta - fnr, fpr)).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonEstimate {
    pub epsilon: Vec<f64>,
    pub delta: f64,
    /// `None` when point rates were used instead of upper bounds.
    pub confidence: Option<f64>,
    pub fpr_upper: Vec<f64>,
    pub fnr_upper: Vec<f64>,
}

/// Per-example ε̂ from repeated attack decisions.
///
/// `member_decisions[e]` holds the attack's verdicts (true = "member") over the
/// trials in which example `e` was a member; `nonmember_decisions[e]` over the
/// trials in which it was not. With `confidence = Some(c)` the error rates are
/// replaced by one-sided Clopper–Pearson upper bounds at level `c`.
pub fn estimate_epsilon(
    member_decisions: &[Vec<bool>],
    nonmember_decisions: &[Vec<bool>],
    delta: f64,
    confidence: Option<f64>,
) -> Result<EpsilonEstimate> {
    if !(0.0..1.0).contains(&delta) {
        return Err(BenchError::BadDelta(delta));
    }
    if member_decisions.len() != nonmember_decisions.len() {
        return Err(BenchError::LengthMismatch {
            left: member_decisions.len(),
            right: nonmember_decisions.len(),
        });
    }
    let n = member_decisions.len();
    let mut out = EpsilonEstimate {
        epsilon: Vec::with_capacity(n),
        delta,
        confidence,
        fpr_upper: Vec::with_capacity(n),
        fnr_upper: Vec::with_capacity(n),
    };
    for (e, (m, nm)) in member_decisions.iter().zip(nonmember_decisions).enumerate() {
        if m.is_empty() || nm.is_empty() {
            return Err(BenchError::EmptyTrials(e));
        }
        let misses = m.iter().filter(|&&d| !d).count();
        let alarms = nm.iter().filter(|&&d| d).count();
        let (fnr, fpr) = match confidence {
            Some(c) => (clopper_pearson_upper(misses, m.len(), c), clopper_pearson_upper(alarms, nm.len(), c)),
            None => (misses as f64 / m.len() as f64, alarms as f64 / nm.len() as f64),
        };
        out.epsilon.push(epsilon_from_rates(fpr, fnr, delta));
        out.fpr_upper.push(fpr);
        out.fnr_upper.push(fnr);
    }
    Ok(out)
}

/// Largest ε̂ over the operating points of an ROC curve, with Clopper–Pearson
/// upper bounds on FPR and FNR at each point.
pub fn roc_epsilon(curve: &RocCurve, delta: f64, confidence: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&delta) {
        return Err(BenchError::BadDelta(delta));
    }
    Ok(curve
        .points
        .iter()
        .map(|p| {
            let fpr = clopper_pearson_upper(p.false_positives, curve.negatives, confidence);
            let fnr = clopper_pearson_upper(curve.positives - p.true_positives, curve.positives, confidence);
            epsilon_from_rates(fpr, fnr, delta)
        })
        .fold(0.0, f64::max))
}

/// Nearest-rank quantile of an ascending-sorted slice.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub attack: String,
    pub config_hash: String,
    pub auc: f64,
    /// `(fpr_target, tpr)` for each of [`REPORT_FPRS`].
    pub tpr_at_fpr: Vec<(f64, f64)>,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSummary {
    pub max: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub delta: f64,
    pub count: usize,
}

impl EpsilonSummary {
    pub fn from_estimate(eps: &EpsilonEstimate) -> Option<Self> {
        let mut sorted = eps.epsilon.clone();
        if sorted.is_empty() {
            return None;
        }
        sorted.sort_by(f64::total_cmp);
        Some(EpsilonSummary {
            max: *sorted.last().expect("nonempty"),
            p50: nearest_rank(&sorted, 0.5),
            p90: nearest_rank(&sorted, 0.9),
            p99: nearest_rank(&sorted, 0.99),
            delta: eps.delta,
            count: sorted.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseReport {
    pub attacks: Vec<AttackSummary>,
    pub epsilon: Option<EpsilonSummary>,
}

pub fn summarize_attack(result: &AttackResult) -> Result<AttackSummary> {
    let curve = roc_from_scores(&result.scores, &result.labels)?;
    Ok(AttackSummary {
        attack: result.attack.clone(),
        config_hash: result.config_hash.clone(),
        auc: curve.auc,
        tpr_at_fpr: REPORT_FPRS.iter().map(|&f| (f, tpr_at_fpr(&curve, f))).collect(),
        queries: result.queries.len(),
    })
}

/// Worst-case view of a set of attacks plus the per-example ε̂ distribution.
/// The maximum ε̂ is always reported next to its quantiles.
pub fn worst_case_report(results: &[AttackResult], eps: Option<&EpsilonEstimate>) -> Result<WorstCaseReport> {
    if results.is_empty() {
        return Err(BenchError::EmptyInput("attack results"));
    }
    Ok(WorstCaseReport {
        attacks: results.iter().map(summarize_attack).collect::<Result<_>>()?,
        epsilon: eps.and_then(EpsilonSummary::from_estimate),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::function::beta::beta_reg;

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut twice, mut pairs) = (0u128, 0u128);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1;
                    twice += if si > sj {
                        2
                    } else if si == sj {
                        1
                    } else {
                        0
                    };
                }
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    /// Operating points by trying every candidate threshold independently.
    fn brute_points(scores: &[f64], labels: &[u8]) -> Vec<(usize, usize)> {
        let mut ts: Vec<f64> = scores.to_vec();
        ts.sort_by(|a, b| b.total_cmp(a));
        ts.dedup();
        let mut out = vec![(0, 0)];
        for t in ts {
            let tp = scores.iter().zip(labels).filter(|&(&s, &l)| s >= t && l == 1).count();
            let fp = scores.iter().zip(labels).filter(|&(&s, &l)| s >= t && l == 0).count();
            out.push((tp, fp));
        }
        out
    }

    #[test]
    fn four_point_example() {
        let c = roc_from_scores(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert_eq!(c.auc, 0.75);
        assert_eq!(tpr_at_fpr(&c, 0.5), 1.0);
        assert_eq!(tpr_at_fpr(&c, 0.49), 0.5);
        assert_eq!(tpr_at_fpr(&c, 1.0), 1.0);
        let first = c.points[0];
        let last = *c.points.last().unwrap();
        assert_eq!((first.fpr, first.tpr, last.fpr, last.tpr), (0.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn separated_classes() {
        let c = roc_from_scores(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap();
        assert_eq!(c.auc, 1.0);
        assert!(c.points.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(tpr_at_fpr(&c, 0.0), 1.0);
    }

    #[test]
    fn roc_errors() {
        assert_eq!(roc_from_scores(&[0.1, 0.2], &[1, 1]).unwrap_err().code(), "ONE_CLASS");
        assert_eq!(roc_from_scores(&[f64::NAN, 0.2], &[1, 0]).unwrap_err().code(), "NAN_INPUT");
    }

    #[test]
    fn sweep_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..1000 {
            let n = rng.random_range(2..120);
            // coarse grid so ties are common
            let levels = if trial % 2 == 0 { 5 } else { 1000 };
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let c = roc_from_scores(&scores, &labels).unwrap();
            assert_eq!(c.auc, brute_auc(&scores, &labels));
            let pts: Vec<(usize, usize)> = c.points.iter().map(|p| (p.true_positives, p.false_positives)).collect();
            assert_eq!(pts, brute_points(&scores, &labels));
        }
    }

    #[test]
    fn clopper_pearson_closed_forms() {
        // zero events: 1 − (1 − c)^(1/n)
        for n in [1usize, 5, 40, 1000] {
            let u = clopper_pearson_upper(0, n, 0.95);
            assert!((u - (1.0 - 0.05f64.powf(1.0 / n as f64))).abs() < 1e-9, "{n}");
        }
        assert_eq!(clopper_pearson_upper(7, 7, 0.95), 1.0);
        // the bound is where the binomial CDF at k drops to 1 − c
        for (k, n) in [(3usize, 20usize), (10, 50), (1, 9)] {
            let u = clopper_pearson_upper(k, n, 0.95);
            let tail = 1.0 - beta_reg((k + 1) as f64, (n - k) as f64, u);
            assert!((tail - 0.05).abs() < 1e-9, "{k}/{n}: {tail}");
            assert!(u > k as f64 / n as f64);
        }
    }

    #[test]
    fn epsilon_point_examples() {
        let none = estimate_epsilon(&[vec![true, false]], &[vec![true, false]], 0.0, None).unwrap();
        assert_eq!(none.epsilon, vec![0.0]);
        assert!((epsilon_from_rates(0.01, 0.1, 0.0) - 90f64.ln()).abs() < 1e-12);
        assert!((90f64.ln() - 4.4998).abs() < 1e-4);
        assert_eq!(epsilon_from_rates(0.6, 0.7, 0.0), 0.0);
        assert!(epsilon_from_rates(0.0, 0.0, 0.0).is_finite());
    }

    #[test]
    fn epsilon_errors() {
        assert_eq!(estimate_epsilon(&[vec![true]], &[vec![false]], 1.0, None).unwrap_err().code(), "BAD_DELTA");
        assert_eq!(estimate_epsilon(&[vec![true]], &[vec![]], 0.0, None).unwrap_err().code(), "EMPTY_TRIALS");
    }

    #[test]
    fn bernoulli_attacker_recovers_analytic_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (fpr, fnr, r) = (0.05, 0.2, 10_000);
        let m: Vec<bool> = (0..r).map(|_| !rng.random_bool(fnr)).collect();
        let nm: Vec<bool> = (0..r).map(|_| rng.random_bool(fpr)).collect();
        let analytic = epsilon_from_rates(fpr, fnr, 0.0);
        let point = estimate_epsilon(&[m.clone()], &[nm.clone()], 0.0, None).unwrap();
        assert!((point.epsilon[0] - analytic).abs() < 0.1, "{} vs {analytic}", point.epsilon[0]);
        // upper bounds on the error rates can only lower the estimate
        let bounded = estimate_epsilon(&[m], &[nm], 0.0, Some(0.95)).unwrap();
        assert!(bounded.epsilon[0] <= point.epsilon[0]);
        assert!(bounded.fpr_upper[0] >= point.fpr_upper[0] && bounded.fnr_upper[0] >= point.fnr_upper[0]);
    }

    #[test]
    fn report_keeps_the_maximum() {
        let eps = EpsilonEstimate {
            epsilon: vec![0.0, 0.0, 0.0, 5.0],
            delta: 1e-3,
            confidence: Some(0.95),
            fpr_upper: vec![0.5; 4],
            fnr_upper: vec![0.5; 4],
        };
        let s = EpsilonSummary::from_estimate(&eps).unwrap();
        assert_eq!((s.max, s.p50), (5.0, 0.0));
        assert!(s.p50 <= s.p90 && s.p90 <= s.p99 && s.p99 <= s.max);
        assert_eq!(worst_case_report(&[], Some(&eps)).unwrap_err().code(), "EMPTY_INPUT");
    }

    #[test]
    fn null_attack_tpr_at_one_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let res = AttackResult::new("null", scores, labels, (0..n as u32).collect()).unwrap();
        let rep = worst_case_report(&[res], None).unwrap();
        let tpr = rep.attacks[0].tpr_at_fpr[1].1;
        // binomial band: 3σ for 10k members at p = 0.01
        let band = 3.0 * (0.01f64 * 0.99 / 10_000.0).sqrt();
        assert!((tpr - 0.01).abs() < band + 1e-3, "{tpr}");
    }

    #[test]
    fn roc_epsilon_is_zero_for_chance_and_large_for_separation() {
        let labels: Vec<u8> = (0..200).map(|i| (i % 2) as u8).collect();
        let flat = vec![0.5; 200];
        let c = roc_from_scores(&flat, &labels).unwrap();
        assert_eq!(roc_epsilon(&c, 0.0, 0.95).unwrap(), 0.0);
        let sep: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let c = roc_from_scores(&sep, &labels).unwrap();
        assert!(roc_epsilon(&c, 0.0, 0.95).unwrap() > 3.0);
    }
}
