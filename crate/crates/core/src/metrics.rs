//! Evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::env::Catalog;
use crate::error::{Error, Result};
use crate::simulation::Impression;

/// Probabilities are clipped to `[CLIP, 1 - CLIP]` before taking logs.
pub const CLIP: f64 = 1e-15;

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("no examples".into()));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Input(format!("score {s} is not a number")));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Input("labels must be 0 or 1".into()));
    }
    Ok(())
}

fn positives(labels: &[u8]) -> usize {
    labels.iter().filter(|&&l| l == 1).count()
}

/// Percentage CTR change relative to the random policy.
pub fn ctr_uplift(model_ctr: f64, random_ctr: f64) -> Result<f64> {
    if random_ctr.is_nan() || random_ctr <= 0.0 {
        return Err(Error::UndefinedMetric(format!(
            "random-policy CTR {random_ctr} is not a usable baseline"
        )));
    }
    Ok(100.0 * (model_ctr / random_ctr - 1.0))
}

/// Step-wise area under the precision-recall curve.
///
/// Thresholds run over the distinct scores in descending order; each
/// threshold contributes `(recall gain) * precision`. Equal scores form a
/// single operating point.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let pos = positives(labels);
    if pos == 0 {
        return Err(Error::UndefinedMetric("PR-AUC needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut area) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let group_tp_before = tp;
        while i < order.len() && scores[order[i]] == s {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        if tp > group_tp_before {
            area += (tp - group_tp_before) as f64 / pos as f64 * (tp as f64 / seen as f64);
        }
    }
    Ok(area)
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let pos = positives(labels);
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC-AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Count (positive, negative) pairs won by the positive, in half units.
    let (mut neg_below, mut wins2) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut gp, mut gn) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        wins2 += gp * (2 * neg_below + gn);
        neg_below += gn;
    }
    Ok(wins2 as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Mean binary cross-entropy with clipped scores.
pub fn log_loss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let sum: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let p = s.clamp(CLIP, 1.0 - CLIP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / scores.len() as f64)
}

/// Relative cross-entropy (percent) against the constant predictor at the
/// evaluation set's own positive rate.
pub fn rce(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let pos = positives(labels);
    if pos == 0 || pos == labels.len() {
        return Err(Error::UndefinedMetric(
            "naive cross-entropy is zero (all labels identical)".into(),
        ));
    }
    let prevalence = pos as f64 / labels.len() as f64;
    rce_against(scores, labels, prevalence)
}

/// Relative cross-entropy against a constant `baseline_rate` predictor.
pub fn rce_against(scores: &[f64], labels: &[u8], baseline_rate: f64) -> Result<f64> {
    check(scores, labels)?;
    let naive = log_loss(&vec![baseline_rate; labels.len()], labels)?;
    if naive <= 0.0 {
        return Err(Error::UndefinedMetric(
            "naive cross-entropy is zero".into(),
        ));
    }
    Ok(100.0 * (naive - log_loss(scores, labels)?) / naive)
}

/// Regret of a served log against the per-user ground-truth top-K slates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regret {
    pub per_round: Vec<f64>,
    pub cumulative: Vec<f64>,
}

/// Per-round regret: summed truth CTR of the user's oracle top-`k` slate
/// minus that of the served slate. Rounds follow their order in the log.
pub fn regret(impressions: &[Impression], catalog: &Catalog, k: usize) -> Result<Regret> {
    let truth = catalog.truth_ctr.as_ref().ok_or_else(|| {
        Error::Unsupported("regret needs a catalog with ground-truth CTRs".into())
    })?;
    let oracle = catalog.oracle_top_k(k).expect("truth present");
    let ads = catalog.ads();
    let mut per_round: Vec<f64> = Vec::new();
    let mut current: Option<u64> = None;
    for imp in impressions {
        if imp.user_id >= catalog.users() || imp.ad_id >= ads {
            return Err(Error::Lookup(format!(
                "impression {} refers to a cell outside the catalog",
                imp.impression_id
            )));
        }
        if current != Some(imp.round) {
            let best: f64 = oracle[imp.user_id].iter().map(|&a| truth[imp.user_id * ads + a]).sum();
            per_round.push(best);
            current = Some(imp.round);
        }
        *per_round.last_mut().expect("round started") -= truth[imp.user_id * ads + imp.ad_id];
    }
    let cumulative = per_round
        .iter()
        .scan(0.0, |acc, r| {
            *acc += r;
            Some(*acc)
        })
        .collect();
    Ok(Regret { per_round, cumulative })
}

/// Click rate after each round: total clicks over total impressions so far.
pub fn cumulative_ctr_series(impressions: &[Impression]) -> Vec<f64> {
    let mut out = Vec::new();
    let (mut clicks, mut shown) = (0u64, 0u64);
    for (i, imp) in impressions.iter().enumerate() {
        clicks += imp.label as u64;
        shown += 1;
        if impressions.get(i + 1).is_none_or(|n| n.round != imp.round) {
            out.push(clicks as f64 / shown as f64);
        }
    }
    out
}

/// Summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub run_id: String,
    pub seed: u64,
    pub config_digest: String,
    pub rounds: u64,
    pub impressions: u64,
    pub retrains: u64,
    pub cumulative_ctr: f64,
    pub random_ctr: f64,
    pub ctr_uplift_pct: Option<f64>,
    pub train_pr_auc: Option<f64>,
    pub test_pr_auc: Option<f64>,
    pub roc_auc: Option<f64>,
    pub rce_pct: Option<f64>,
    pub log_loss: Option<f64>,
    /// Training PR-AUC reported by an offline warm start, when one ran.
    pub warm_start_pr_auc: Option<f64>,
    /// Set when the environment ran out of servable ads before the horizon.
    pub early_stop: Option<String>,
    pub ctr_series: Vec<f64>,
    /// Cumulative regret per round (synthetic catalogs only).
    pub regret_series: Option<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Brute force: for every distinct threshold t (descending), precision
    /// and recall of `score >= t`; area is the sum of recall steps times
    /// precision.
    fn pr_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
        let mut ts: Vec<f64> = scores.to_vec();
        ts.sort_by(|a, b| b.total_cmp(a));
        ts.dedup();
        let (mut area, mut prev_recall) = (0.0, 0.0);
        for t in ts {
            let sel: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
            let tp = sel.iter().filter(|&&i| labels[i] == 1).count() as f64;
            let recall = tp / pos;
            area += (recall - prev_recall) * tp / sel.len() as f64;
            prev_recall = recall;
        }
        area
    }

    fn roc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut w, mut n) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    n += 1.0;
                    w += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        w / n
    }

    #[test]
    fn uplift_examples() {
        assert_eq!(ctr_uplift(0.1, 0.1).unwrap(), 0.0);
        assert!((ctr_uplift(0.2390, 0.1).unwrap() - 139.0).abs() < 1e-9);
        assert_eq!(ctr_uplift(0.0, 0.3).unwrap(), -100.0);
        assert!(matches!(ctr_uplift(0.2, 0.0), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn pr_auc_small_cases() {
        let s = [0.9, 0.8, 0.7, 0.6];
        let y = [1, 0, 1, 0];
        // Thresholds: 0.9 -> P=1, R=1/2; 0.7 -> P=2/3, R=1.
        assert!((pr_auc(&s, &y).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert!((pr_auc(&s, &y).unwrap() - pr_oracle(&s, &y)).abs() < 1e-15);
        assert_eq!(pr_auc(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(pr_auc(&[0.3; 8], &[1, 0, 1, 0, 0, 1, 0, 0]).unwrap(), 3.0 / 8.0);
        assert_eq!(pr_auc(&[0.5; 10], &[1, 0, 1, 0, 1, 0, 1, 0, 1, 0]).unwrap(), 0.5);
        assert!(matches!(pr_auc(&[0.2, 0.1], &[0, 0]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(pr_auc(&[0.2], &[0, 1]), Err(Error::Shape(_))));
    }

    #[test]
    fn roc_auc_small_cases() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.4; 5], &[1, 0, 0, 1, 0]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auc_match_oracles_on_random_instances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for case in 0..300 {
            let n = rng.random_range(2..=120);
            let coarse = case % 2 == 0;
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    if coarse {
                        rng.random_range(0..6) as f64 / 5.0
                    } else {
                        rng.random()
                    }
                })
                .collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.3) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            assert!((pr_auc(&scores, &labels).unwrap() - pr_oracle(&scores, &labels)).abs() < 1e-9);
            assert!((roc_auc(&scores, &labels).unwrap() - roc_oracle(&scores, &labels)).abs() < 1e-9);
        }
    }

    #[test]
    fn rce_examples() {
        // naive p = 0.5: CE = ln 2; model CE = -(ln 0.8 + ln 0.7) / 2.
        let model = -(0.8f64.ln() + 0.7f64.ln()) / 2.0;
        let expected = 100.0 * (2f64.ln() - model) / 2f64.ln();
        assert!((rce(&[0.8, 0.3], &[1, 0]).unwrap() - expected).abs() < 1e-12);

        let labels = [1, 0, 0, 1, 0, 0, 0];
        let p = 2.0 / 7.0;
        assert!(rce(&[p; 7], &labels).unwrap().abs() < 1e-9);
        let near_perfect: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        assert!(rce(&near_perfect, &labels).unwrap() > 99.9);
        assert!(matches!(rce(&[0.3, 0.4], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn log_loss_is_finite_for_saturated_predictions() {
        let l = log_loss(&[0.0, 1.0], &[1, 0]).unwrap();
        assert!(l.is_finite());
        assert!((l - (-CLIP.ln())).abs() < 0.2);
    }

    fn imp(round: u64, user: usize, ad: usize, label: u8, id: u64) -> Impression {
        Impression {
            round,
            user_id: user,
            ad_id: ad,
            served_score: 0.0,
            point_score: 0.0,
            label,
            policy_tag: "t".into(),
            impression_id: id,
            run_id: "r".into(),
        }
    }

    fn truth_catalog(truth: Vec<f64>, users: usize, ads: usize) -> Catalog {
        Catalog {
            user_ids: (0..users).map(|u| u.to_string()).collect(),
            ad_ids: (0..ads).map(|a| a.to_string()).collect(),
            user_feature_names: vec![],
            ad_feature_names: vec![],
            user_features: vec![],
            ad_features: vec![],
            labels: vec![0; users * ads],
            holdout: vec![false; users * ads],
            truth_ctr: Some(truth),
        }
    }

    #[test]
    fn regret_examples() {
        let cat = truth_catalog(vec![0.1, 0.5, 0.3, 0.2, 0.2, 0.9], 2, 3);
        let log = vec![
            imp(0, 0, 1, 0, 0),
            imp(0, 0, 2, 1, 1),
            imp(1, 1, 0, 0, 2),
            imp(1, 1, 1, 0, 3),
        ];
        let r = regret(&log, &cat, 2).unwrap();
        assert_eq!(r.per_round.len(), 2);
        assert!(r.per_round[0].abs() < 1e-15);
        assert!((r.per_round[1] - (1.1 - 0.4)).abs() < 1e-12);
        assert!((r.cumulative[1] - 0.7).abs() < 1e-12);

        let flat = truth_catalog(vec![0.25; 6], 2, 3);
        assert!(regret(&log, &flat, 2).unwrap().per_round.iter().all(|&x| x.abs() < 1e-15));

        let mut no_truth = cat.clone();
        no_truth.truth_ctr = None;
        assert!(matches!(regret(&log, &no_truth, 2), Err(Error::Unsupported(_))));
    }

    #[test]
    fn ctr_series_matches_running_ratio() {
        let log = vec![imp(0, 0, 1, 1, 0), imp(0, 0, 2, 0, 1), imp(1, 1, 0, 0, 2), imp(2, 1, 1, 1, 3)];
        assert_eq!(cumulative_ctr_series(&log), vec![0.5, 1.0 / 3.0, 0.5]);
    }

    proptest! {
        #[test]
        fn aucs_invariant_under_monotone_transform(
            data in proptest::collection::vec((0.0f64..1.0, 0u8..2), 2..80)
        ) {
            let (scores, mut labels): (Vec<f64>, Vec<u8>) = data.into_iter().unzip();
            labels[0] = 1;
            labels[1] = 0;
            let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert!((pr_auc(&scores, &labels).unwrap() - pr_auc(&t, &labels).unwrap()).abs() < 1e-12);
            prop_assert!((roc_auc(&scores, &labels).unwrap() - roc_auc(&t, &labels).unwrap()).abs() < 1e-12);
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let mut dedup = scores.clone();
            dedup.sort_by(f64::total_cmp);
            dedup.dedup();
            if dedup.len() == scores.len() {
                let sum = roc_auc(&scores, &labels).unwrap() + roc_auc(&neg, &labels).unwrap();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
            let a = pr_auc(&scores, &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
