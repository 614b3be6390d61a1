//! Slate-selection policies.
//!
//! Candidates are identified by id; `scores[id]` (or row `id` of a
//! [`ScoreSamples`]) holds that candidate's score. Every selector returns `K`
//! distinct ids from `eligible`, best first, with ties broken by lowest id.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posterior::ScoreSamples;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Uniformly random slates; no model is consulted or trained.
    Random,
    Greedy,
    EpsilonGreedy,
    Thompson,
    Ucb,
}

impl PolicyKind {
    /// Whether the policy consumes posterior samples rather than point scores.
    pub fn uses_samples(self) -> bool {
        matches!(self, PolicyKind::Thompson | PolicyKind::Ucb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub epsilon: f64,
    /// UCB score is the `ucb_order_k`-th largest of `ucb_samples` draws.
    pub ucb_order_k: usize,
    pub ucb_samples: usize,
    pub slate_size: usize,
    /// Explicit policy RNG seed; derived from the experiment seed when absent.
    pub rng_seed: Option<u64>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Ucb,
            epsilon: 0.1,
            ucb_order_k: 2,
            ucb_samples: 10,
            slate_size: 7,
            rng_seed: None,
        }
    }
}

impl PolicyConfig {
    /// Number of posterior samples drawn per candidate each round.
    pub fn samples_per_round(&self) -> usize {
        match self.kind {
            PolicyKind::Thompson => 1,
            PolicyKind::Ucb => self.ucb_samples,
            PolicyKind::Random | PolicyKind::Greedy | PolicyKind::EpsilonGreedy => 0,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(0.0..=1.0).contains(&self.epsilon) {
            p.push(format!("policy.epsilon must be in [0, 1], got {}", self.epsilon));
        }
        if self.slate_size == 0 {
            p.push("policy.slate_size must be >= 1".into());
        }
        if self.ucb_samples == 0 {
            p.push("policy.ucb_samples must be >= 1".into());
        }
        if self.ucb_order_k == 0 || self.ucb_order_k > self.ucb_samples {
            p.push(format!(
                "policy.ucb_order_k must be in [1, ucb_samples = {}], got {}",
                self.ucb_samples, self.ucb_order_k
            ));
        }
        p
    }
}

/// The `k`-th largest of `samples` (k = 1 is the maximum).
pub fn empirical_quantile(samples: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > samples.len() {
        return Err(Error::Usage(format!(
            "order statistic k = {k} out of range for {} samples",
            samples.len()
        )));
    }
    let mut v = samples.to_vec();
    let (_, kth, _) = v.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    Ok(*kth)
}

/// Map a confidence level `q` to an order-statistic index:
/// `k = floor((1 - q) S) + 1`, clamped to `[1, S]`.
pub fn confidence_level_to_k(q: f64, samples: usize) -> usize {
    // the tolerance absorbs representation error in 1 - q (e.g. q = 0.9)
    let k = ((1.0 - q) * samples as f64 + 1e-9).floor() as usize + 1;
    k.clamp(1, samples.max(1))
}

fn rank_order(scores: impl Fn(usize) -> f64, a: usize, b: usize) -> Ordering {
    scores(b).total_cmp(&scores(a)).then(a.cmp(&b))
}

fn check_eligible(k: usize, eligible: &[usize]) -> Result<()> {
    if k == 0 {
        return Err(Error::Usage("slate size must be >= 1".into()));
    }
    if eligible.len() < k {
        return Err(Error::EnvironmentExhausted(format!(
            "{} eligible candidates for a slate of {k}",
            eligible.len()
        )));
    }
    Ok(())
}

fn check_ids(len: usize, eligible: &[usize]) -> Result<()> {
    match eligible.iter().find(|&&id| id >= len) {
        Some(id) => Err(Error::Shape(format!("candidate {id} has no score (only {len})"))),
        None => Ok(()),
    }
}

fn top_k_by(score: impl Fn(usize) -> f64, k: usize, eligible: &[usize]) -> Vec<usize> {
    let mut ids = eligible.to_vec();
    ids.sort_unstable_by(|&a, &b| rank_order(&score, a, b));
    ids.dedup();
    ids.truncate(k);
    ids
}

pub fn select_greedy(scores: &[f64], k: usize, eligible: &[usize]) -> Result<Vec<usize>> {
    check_eligible(k, eligible)?;
    check_ids(scores.len(), eligible)?;
    Ok(top_k_by(|i| scores[i], k, eligible))
}

/// `k` distinct eligible ids drawn uniformly without replacement.
pub fn select_random<R: Rng + ?Sized>(k: usize, eligible: &[usize], rng: &mut R) -> Result<Vec<usize>> {
    check_eligible(k, eligible)?;
    Ok(rand::seq::index::sample(rng, eligible.len(), k)
        .into_iter()
        .map(|i| eligible[i])
        .collect())
}

/// Fill the slate slot by slot: with probability `1 - epsilon` the best
/// remaining candidate, otherwise a uniformly chosen remaining one.
pub fn select_epsilon_greedy<R: Rng + ?Sized>(
    scores: &[f64],
    k: usize,
    epsilon: f64,
    eligible: &[usize],
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_eligible(k, eligible)?;
    check_ids(scores.len(), eligible)?;
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Usage(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let mut remaining = eligible.to_vec();
    remaining.sort_unstable_by(|&a, &b| rank_order(|i| scores[i], a, b));
    remaining.dedup();
    let mut slate = Vec::with_capacity(k);
    for _ in 0..k {
        let pick = if rng.random::<f64>() < epsilon {
            rng.random_range(0..remaining.len())
        } else {
            0
        };
        // keep `remaining` in rank order so index 0 stays the best
        slate.push(remaining.remove(pick));
    }
    Ok(slate)
}

/// Top-K of a single posterior draw per candidate.
pub fn select_thompson(samples: &ScoreSamples, k: usize, eligible: &[usize]) -> Result<Vec<usize>> {
    if samples.sample_count() != 1 {
        return Err(Error::Usage(format!(
            "Thompson sampling needs exactly one sample per candidate, got {}",
            samples.sample_count()
        )));
    }
    check_eligible(k, eligible)?;
    check_ids(samples.candidate_count(), eligible)?;
    Ok(top_k_by(|i| samples.get(i, 0), k, eligible))
}

/// Per-candidate UCB scores: the `order_k`-th largest sample of each row.
pub fn ucb_scores(samples: &ScoreSamples, order_k: usize) -> Result<Vec<f64>> {
    (0..samples.candidate_count())
        .map(|i| empirical_quantile(samples.row(i), order_k))
        .collect()
}

pub fn select_ucb(
    samples: &ScoreSamples,
    order_k: usize,
    k: usize,
    eligible: &[usize],
) -> Result<Vec<usize>> {
    if order_k == 0 || order_k > samples.sample_count() {
        return Err(Error::Usage(format!(
            "ucb order k = {order_k} exceeds {} samples",
            samples.sample_count()
        )));
    }
    check_eligible(k, eligible)?;
    check_ids(samples.candidate_count(), eligible)?;
    let ucb = ucb_scores(samples, order_k)?;
    Ok(top_k_by(|i| ucb[i], k, eligible))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SimRng;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn sorted(mut v: Vec<usize>) -> Vec<usize> {
        v.sort_unstable();
        v
    }

    #[test]
    fn quantile_examples() {
        let s: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(empirical_quantile(&s, 2).unwrap(), 9.0);
        let s: Vec<f64> = (1..=100).rev().map(f64::from).collect();
        assert_eq!(empirical_quantile(&s, 5).unwrap(), 96.0);
        assert_eq!(empirical_quantile(&[0.3; 7], 4).unwrap(), 0.3);
        assert!(matches!(empirical_quantile(&s, 0), Err(Error::Usage(_))));
        assert!(matches!(empirical_quantile(&s, 101), Err(Error::Usage(_))));
    }

    #[test]
    fn confidence_to_k() {
        assert_eq!(confidence_level_to_k(0.9, 10), 2);
        assert_eq!(confidence_level_to_k(0.999_999, 10), 1);
        assert_eq!(confidence_level_to_k(0.95, 100), 6);
        assert_eq!(confidence_level_to_k(0.01, 10), 10);
    }

    #[test]
    fn greedy_examples() {
        let all = [0, 1, 2];
        assert_eq!(sorted(select_greedy(&[0.9, 0.1, 0.5], 2, &all).unwrap()), vec![0, 2]);
        assert_eq!(select_greedy(&[0.4; 3], 2, &all).unwrap(), vec![0, 1]);
        assert_eq!(sorted(select_greedy(&[0.2, 0.7, 0.1], 3, &all).unwrap()), vec![0, 1, 2]);
        assert!(matches!(
            select_greedy(&[0.2, 0.7, 0.1], 4, &all),
            Err(Error::EnvironmentExhausted(_))
        ));
    }

    #[test]
    fn epsilon_zero_is_greedy_and_seeded_runs_repeat() {
        let scores: Vec<f64> = (0..20).map(|i| ((i * 7) % 13) as f64).collect();
        let elig: Vec<usize> = (0..20).collect();
        let mut rng = SimRng::seed_from_u64(1);
        assert_eq!(
            select_epsilon_greedy(&scores, 5, 0.0, &elig, &mut rng).unwrap(),
            select_greedy(&scores, 5, &elig).unwrap()
        );
        let a = select_epsilon_greedy(&scores, 5, 0.1, &elig, &mut SimRng::seed_from_u64(9)).unwrap();
        let b = select_epsilon_greedy(&scores, 5, 0.1, &elig, &mut SimRng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn epsilon_one_is_uniform() {
        let scores: Vec<f64> = (0..10).map(f64::from).collect();
        let elig: Vec<usize> = (0..10).collect();
        let mut rng = SimRng::seed_from_u64(42);
        let trials = 100_000;
        let k = 3;
        let mut counts = [0usize; 10];
        for _ in 0..trials {
            for c in select_epsilon_greedy(&scores, k, 1.0, &elig, &mut rng).unwrap() {
                counts[c] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / trials as f64;
            assert!((f - 0.3).abs() < 0.01, "inclusion frequency {f}");
        }
    }

    #[test]
    fn thompson_examples() {
        let s = ScoreSamples::from_rows(vec![vec![0.3], vec![0.7]]).unwrap();
        assert_eq!(select_thompson(&s, 1, &[0, 1]).unwrap(), vec![1]);
        let two = ScoreSamples::from_rows(vec![vec![0.3, 0.2], vec![0.7, 0.1]]).unwrap();
        assert!(matches!(select_thompson(&two, 1, &[0, 1]), Err(Error::Usage(_))));
    }

    #[test]
    fn ucb_prefers_consistent_candidate() {
        let a = vec![0.5; 10];
        let mut b = vec![0.1; 10];
        b[3] = 0.9;
        let s = ScoreSamples::from_rows(vec![a, b]).unwrap();
        assert_eq!(ucb_scores(&s, 2).unwrap(), vec![0.5, 0.1]);
        assert_eq!(select_ucb(&s, 2, 1, &[0, 1]).unwrap(), vec![0]);
        // k = 1 picks the optimistic one
        assert_eq!(select_ucb(&s, 1, 1, &[0, 1]).unwrap(), vec![1]);
        assert!(select_ucb(&s, 11, 1, &[0, 1]).is_err());
    }

    #[test]
    fn ucb_single_sample_is_greedy() {
        let v = [0.2, 0.9, 0.4, 0.9];
        let s = ScoreSamples::from_rows(v.iter().map(|&x| vec![x]).collect()).unwrap();
        let elig = [0, 1, 2, 3];
        assert_eq!(select_ucb(&s, 1, 2, &elig).unwrap(), select_greedy(&v, 2, &elig).unwrap());
    }

    #[test]
    fn respects_eligible_subset() {
        let scores = [0.9, 0.8, 0.7, 0.6];
        assert_eq!(select_greedy(&scores, 2, &[1, 3]).unwrap(), vec![1, 3]);
        assert!(select_greedy(&scores, 1, &[7]).is_err());
    }

    proptest! {
        #[test]
        fn selectors_return_k_distinct_eligible(
            scores in prop::collection::vec(0.001f64..0.999, 5..40),
            k in 1usize..5,
            seed in any::<u64>(),
        ) {
            let elig: Vec<usize> = (0..scores.len()).filter(|i| i % 3 != 1).collect();
            prop_assume!(elig.len() >= k);
            let mut rng = SimRng::seed_from_u64(seed);
            let samples = ScoreSamples::from_rows(scores.iter().map(|&x| vec![x]).collect()).unwrap();
            for slate in [
                select_greedy(&scores, k, &elig).unwrap(),
                select_epsilon_greedy(&scores, k, 0.5, &elig, &mut rng).unwrap(),
                select_thompson(&samples, k, &elig).unwrap(),
                select_ucb(&samples, 1, k, &elig).unwrap(),
            ] {
                prop_assert_eq!(slate.len(), k);
                let mut s = slate.clone();
                s.sort_unstable();
                s.dedup();
                prop_assert_eq!(s.len(), k);
                prop_assert!(slate.iter().all(|c| elig.contains(c)));
            }
        }

        #[test]
        fn greedy_invariant_under_monotone_transform(
            scores in prop::collection::vec(-5.0f64..5.0, 3..30),
            k in 1usize..3,
        ) {
            let elig: Vec<usize> = (0..scores.len()).collect();
            let t: Vec<f64> = scores.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(select_greedy(&scores, k, &elig).unwrap(), select_greedy(&t, k, &elig).unwrap());
            let rows: Vec<Vec<f64>> = scores.iter().map(|&x| vec![x, x - 1.0, x + 0.5]).collect();
            let trows: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x.exp()).collect()).collect();
            let s = ScoreSamples::from_rows(rows.iter().map(|r| r.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()).collect()).unwrap();
            let ts = ScoreSamples::from_rows(trows.iter().map(|r| r.iter().map(|x| x / (1.0 + x)).collect()).collect()).unwrap();
            prop_assert_eq!(select_ucb(&s, 2, k, &elig).unwrap(), select_ucb(&ts, 2, k, &elig).unwrap());
        }

        #[test]
        fn ucb_dominance(
            lo in prop::collection::vec(0.01f64..0.4, 10),
            hi in prop::collection::vec(0.5f64..0.99, 10),
            order_k in 1usize..=10,
        ) {
            let s = ScoreSamples::from_rows(vec![lo, hi]).unwrap();
            prop_assert_eq!(select_ucb(&s, order_k, 1, &[0, 1]).unwrap(), vec![1]);
        }
    }

    #[test]
    fn epsilon_overlap_is_monotone() {
        let scores: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let elig: Vec<usize> = (0..30).collect();
        let greedy = select_greedy(&scores, 7, &elig).unwrap();
        let overlap = |eps: f64| {
            let mut rng = SimRng::seed_from_u64(5);
            let mut total = 0usize;
            for _ in 0..10_000 {
                let s = select_epsilon_greedy(&scores, 7, eps, &elig, &mut rng).unwrap();
                total += s.iter().filter(|c| greedy.contains(c)).count();
            }
            total
        };
        let (o0, o5, o1) = (overlap(0.0), overlap(0.5), overlap(1.0));
        assert!(o0 >= o5 && o5 >= o1, "{o0} {o5} {o1}");
    }

    #[test]
    fn random_slates_are_uniform() {
        let elig: Vec<usize> = (10..20).collect();
        let mut rng = SimRng::seed_from_u64(9);
        let mut counts = [0usize; 20];
        for _ in 0..20_000 {
            let s = select_random(3, &elig, &mut rng).unwrap();
            assert_eq!(sorted(s.clone()).windows(2).filter(|w| w[0] == w[1]).count(), 0);
            for a in s {
                counts[a] += 1;
            }
        }
        // each id is picked with probability 3/10: mean 6000, sd ~65
        for &c in &counts[10..] {
            assert!((c as f64 - 6000.0).abs() < 300.0, "{c}");
        }
        assert!(counts[..10].iter().all(|&c| c == 0));
        assert!(matches!(select_random(11, &elig, &mut rng), Err(Error::EnvironmentExhausted(_))));
    }
}
