//! Brute-force estimator oracles. On instances small enough to enumerate
//! every (displayed ranking, observation vector) outcome, the expectation
//! of an estimator can be computed exactly and compared against the metric
//! it claims to estimate, with no Monte-Carlo error in the way.
//!
//! Clicks are noise free here (a click is exactly relevance and
//! observation); noisy clicks are exercised by the simulation tests.

use crate::estimate::{EstimatorConfig, EstimatorKind};
use crate::ranking::{metric_weight, rank_scores, rank_subset, MetricSpec, RankedList};
use crate::simulate::{displayed_list, ObservationModel};
use crate::{Error, Result};

/// Hard cap on (rankings x observation vectors) outcomes per expectation.
pub const OUTCOME_SPACE_LIMIT: u128 = 1 << 20;

/// A logging policy given extensionally as every ranking it can display
/// with its probability.
#[derive(Debug, Clone)]
pub struct EnumerablePolicy {
    /// Displayed ranking and its probability; probabilities sum to 1.
    pub rankings: Vec<(RankedList, f64)>,
}

impl EnumerablePolicy {
    pub fn new(rankings: Vec<(RankedList, f64)>) -> Result<Self> {
        if rankings.is_empty() {
            return Err(Error::Config("enumerable policy needs at least one ranking".into()));
        }
        let n = rankings[0].0.num_docs();
        let mut total = 0.0;
        for (ranked, p) in &rankings {
            if ranked.num_docs() != n {
                return Err(Error::Config(
                    "enumerable policy rankings must cover the same documents".into(),
                ));
            }
            if !p.is_finite() || *p < 0.0 {
                return Err(Error::Config(format!("ranking probability {p} is not in [0, 1]")));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("ranking probabilities sum to {total}, not 1")));
        }
        Ok(Self { rankings })
    }

    /// Policy that always shows one fixed ranking.
    pub fn deterministic(ranking: RankedList) -> Self {
        Self { rankings: vec![(ranking, 1.0)] }
    }

    /// Exact outcome distribution of the k-th-slot randomization applied to
    /// a production ranking: every document at production rank k or below
    /// lands in slot k with equal probability. Degenerates to the
    /// deterministic policy when fewer than k documents exist.
    pub fn kth_slot_randomization(production: &RankedList, k: u32) -> Self {
        let n = production.num_docs();
        if n < k as usize {
            return Self::deterministic(production.clone());
        }
        let tail = &production.order[k as usize - 1..];
        let p = 1.0 / tail.len() as f64;
        let rankings = tail
            .iter()
            .map(|&d| (displayed_list(production, Some(d), k), p))
            .collect();
        Self { rankings }
    }

    pub fn num_docs(&self) -> usize {
        self.rankings[0].0.num_docs()
    }
}

/// Marginal observation probability of one document under an enumerable
/// policy: the policy-weighted sum of the position-based propensity at the
/// document's displayed rank in each ranking.
pub fn exact_policy_propensity(
    policy: &EnumerablePolicy,
    obs: &ObservationModel,
    doc: u32,
) -> f64 {
    policy
        .rankings
        .iter()
        .map(|(ranked, p)| p * obs.propensity(ranked.rank_of(doc as usize)))
        .sum()
}

/// True when every relevant document is observable somewhere: each one
/// appears in the observed prefix of at least one positive-probability
/// ranking. Estimator unbiasedness is only promised under this coverage.
pub fn covers_all_relevant(
    policy: &EnumerablePolicy,
    obs: &ObservationModel,
    relevance: &[bool],
) -> bool {
    relevance
        .iter()
        .enumerate()
        .filter(|(_, &rel)| rel)
        .all(|(d, _)| exact_policy_propensity(policy, obs, d as u32) > 0.0)
}

/// One enumerated outcome: a displayed ranking index, an observation
/// bitmask over its first `min(k, n)` slots (bit s = slot s + 1 observed),
/// the joint probability, and the estimator's value on that outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeContribution {
    pub ranking: usize,
    pub observed: u32,
    pub probability: f64,
    pub estimate: f64,
}

/// An exactly enumerated estimator expectation. `value` is the sum of
/// probability-weighted estimates over `outcomes`, accumulated in
/// enumeration order so it is reproducible bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactExpectation {
    pub value: f64,
    pub outcomes: Vec<OutcomeContribution>,
}

/// Exact expectation of an estimator over every (ranking, observation)
/// outcome of an enumerable policy, with noise-free clicks.
///
/// `model_scores` are the candidate model's document scores; the estimate
/// on each outcome weights the candidate ranking's metric terms by the
/// clicks of that outcome over the estimator's propensities, exactly as
/// the streaming estimator would on a log containing that one interaction.
/// Self-normalization is ignored: a ratio of sums has no per-outcome
/// decomposition, so this oracle always targets the plain unnormalized
/// form.
pub fn exact_estimator_expectation(
    policy: &EnumerablePolicy,
    obs: &ObservationModel,
    relevance: &[bool],
    config: &EstimatorConfig,
    model_scores: &[f64],
    spec: MetricSpec,
) -> Result<ExactExpectation> {
    let n = policy.num_docs();
    if relevance.len() != n || model_scores.len() != n {
        return Err(Error::Config(format!(
            "relevance/scores cover {}/{} documents, policy ranks {n}",
            relevance.len(),
            model_scores.len(),
        )));
    }
    let m = (obs.cutoff_k as usize).min(n);
    let size = policy.rankings.len() as u128 * (1u128 << m);
    if size > OUTCOME_SPACE_LIMIT {
        return Err(Error::OutcomeSpaceTooLarge { size, limit: OUTCOME_SPACE_LIMIT });
    }

    let evaluated = rank_scores(policy.rankings[0].0.query_id, model_scores);
    let aware: Vec<f64> = match config.kind {
        EstimatorKind::PolicyAware => {
            (0..n).map(|d| exact_policy_propensity(policy, obs, d as u32)).collect()
        }
        _ => Vec::new(),
    };
    let slot_obs: Vec<f64> = (1..=m).map(|s| obs.propensity(s as u32)).collect();

    let mut outcomes = Vec::new();
    let mut value = 0.0;
    for (ri, (ranked, pi)) in policy.rankings.iter().enumerate() {
        if *pi == 0.0 {
            continue;
        }
        let top = &ranked.order[..m];
        // metric term and propensity for a click on each displayed slot
        let lambda: Vec<f64> = match config.kind {
            EstimatorKind::Rerank => {
                let restricted = rank_subset(model_scores, top);
                top.iter()
                    .map(|d| {
                        let pos = restricted.iter().position(|x| x == d).expect("doc displayed");
                        metric_weight(spec, pos as u32 + 1)
                    })
                    .collect()
            }
            _ => top.iter().map(|&d| metric_weight(spec, evaluated.rank_of(d as usize))).collect(),
        };
        let rho: Vec<f64> = (0..m)
            .map(|s| {
                let raw = match config.kind {
                    EstimatorKind::Naive => 1.0,
                    EstimatorKind::PolicyOblivious | EstimatorKind::Rerank => slot_obs[s],
                    EstimatorKind::PolicyAware => aware[top[s] as usize],
                };
                match config.clip_threshold {
                    Some(tau) => raw.max(tau),
                    None => raw,
                }
            })
            .collect();

        for mask in 0u32..1 << m {
            let mut probability = *pi;
            let mut estimate = 0.0;
            for s in 0..m {
                let seen = mask >> s & 1 == 1;
                probability *= if seen { slot_obs[s] } else { 1.0 - slot_obs[s] };
                if probability == 0.0 {
                    break;
                }
                if seen && relevance[top[s] as usize] {
                    estimate += lambda[s] / rho[s];
                }
            }
            if probability == 0.0 {
                continue;
            }
            outcomes.push(OutcomeContribution { ranking: ri, observed: mask, probability, estimate });
            value += probability * estimate;
        }
    }
    Ok(ExactExpectation { value, outcomes })
}

/// The contrast instance: two rankings over four documents shown with
/// equal probability under a top-2 observed prefix. `shared_doc` sits in
/// the observed prefix of both rankings, `exclusive_doc` only in the
/// first, and both are relevant, so any estimator that corrects only
/// within the displayed ranking undercounts `exclusive_doc` by exactly the
/// probability of the ranking that shows it.
#[derive(Debug, Clone)]
pub struct TwoRankingFixture {
    pub policy: EnumerablePolicy,
    pub obs: ObservationModel,
    pub relevance: Vec<bool>,
    pub model_scores: Vec<f64>,
    pub shared_doc: u32,
    pub exclusive_doc: u32,
}

pub fn two_ranking_fixture() -> TwoRankingFixture {
    let first = RankedList::from_order(0, vec![0, 1, 2, 3]);
    let second = RankedList::from_order(0, vec![2, 0, 3, 1]);
    let policy = EnumerablePolicy::new(vec![(first, 0.5), (second, 0.5)])
        .expect("fixture probabilities sum to 1");
    TwoRankingFixture {
        policy,
        obs: ObservationModel::new(2).expect("cutoff 2"),
        relevance: vec![true, true, false, false],
        model_scores: vec![4.0, 3.0, 2.0, 1.0],
        shared_doc: 0,
        exclusive_doc: 1,
    }
}

/// Outcome of one named verification check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name: name.into(), passed, detail }
}

fn unclipped(kind: EstimatorKind) -> EstimatorConfig {
    EstimatorConfig::new(kind, None, false).expect("no clip threshold to validate")
}

/// Sum of each relevant document's metric term under the ranking the
/// estimators are evaluating; the target every unbiased estimate must hit.
fn fixture_truth(fx: &TwoRankingFixture, relevance: &[bool], spec: MetricSpec) -> f64 {
    let evaluated = rank_scores(0, &fx.model_scores);
    crate::ranking::true_loss(spec, &evaluated, relevance)
}

fn two_ranking_checks() -> Result<Vec<CheckOutcome>> {
    let fx = two_ranking_fixture();
    let spec = MetricSpec::Arp;
    let mut results = Vec::new();

    // isolate the document shown in only one ranking: correcting per
    // displayed ranking recovers exactly that ranking's share of its value
    let mut only_exclusive = vec![false; fx.relevance.len()];
    only_exclusive[fx.exclusive_doc as usize] = true;
    let truth = fixture_truth(&fx, &only_exclusive, spec);
    let oblivious = exact_estimator_expectation(
        &fx.policy,
        &fx.obs,
        &only_exclusive,
        &unclipped(EstimatorKind::PolicyOblivious),
        &fx.model_scores,
        spec,
    )?;
    let expected = fx.policy.rankings[0].1 * truth;
    let pass = (oblivious.value - expected).abs() <= 1e-12 && oblivious.value < truth;
    results.push(check(
        "oblivious-biased",
        pass,
        format!("expectation {} vs true {truth} (share {expected})", oblivious.value),
    ));

    let truth = fixture_truth(&fx, &fx.relevance, spec);
    let aware = exact_estimator_expectation(
        &fx.policy,
        &fx.obs,
        &fx.relevance,
        &unclipped(EstimatorKind::PolicyAware),
        &fx.model_scores,
        spec,
    )?;
    let pass = (aware.value - truth).abs() <= 1e-12;
    results.push(check(
        "aware-unbiased",
        pass,
        format!("expectation {} vs true {truth}", aware.value),
    ));

    // with a single ranking the marginal propensity is the per-ranking one
    let single = EnumerablePolicy::deterministic(fx.policy.rankings[0].0.clone());
    let oblivious = exact_estimator_expectation(
        &single,
        &fx.obs,
        &fx.relevance,
        &unclipped(EstimatorKind::PolicyOblivious),
        &fx.model_scores,
        spec,
    )?;
    let aware = exact_estimator_expectation(
        &single,
        &fx.obs,
        &fx.relevance,
        &unclipped(EstimatorKind::PolicyAware),
        &fx.model_scores,
        spec,
    )?;
    let pass = (oblivious.value - aware.value).abs() <= 1e-12;
    results.push(check(
        "deterministic-equality",
        pass,
        format!("oblivious {} vs aware {}", oblivious.value, aware.value),
    ));
    Ok(results)
}

fn slot_randomization_checks() -> Result<Vec<CheckOutcome>> {
    let mut results = Vec::new();

    let mut worst = 0.0f64;
    for n in 1..=8usize {
        let production = RankedList::from_order(0, (0..n as u32).collect());
        for k in 1..=n as u32 {
            let policy = EnumerablePolicy::kth_slot_randomization(&production, k);
            let obs = ObservationModel::new(k)?;
            let model = crate::ranking::LinearModel::new(vec![1.0]);
            let logging = crate::simulate::LoggingPolicy::new(model, k, true)?;
            for rank in 1..=n as u32 {
                let doc = production.order[rank as usize - 1];
                let exact = exact_policy_propensity(&policy, &obs, doc);
                let closed = crate::simulate::policy_propensity(&logging, &obs, rank, n);
                worst = worst.max((exact - closed).abs());
            }
        }
    }
    results.push(check(
        "closed-form-propensity",
        worst <= 1e-12,
        format!("max |enumerated - closed form| = {worst:e} over n <= 8"),
    ));

    let production = RankedList::from_order(0, vec![0, 1, 2, 3]);
    let policy = EnumerablePolicy::kth_slot_randomization(&production, 1);
    let obs = ObservationModel::new(1)?;
    let worst = (0..4)
        .map(|d| (exact_policy_propensity(&policy, &obs, d) - 0.25).abs())
        .fold(0.0f64, f64::max);
    results.push(check(
        "uniform-first-slot",
        worst <= 1e-12,
        format!("max deviation from 1/4 = {worst:e}"),
    ));
    Ok(results)
}

fn deterministic_policy_checks() -> Result<Vec<CheckOutcome>> {
    let production = RankedList::from_order(0, vec![3, 1, 0, 2, 4]);
    let policy = EnumerablePolicy::deterministic(production.clone());
    let obs = ObservationModel::new(3)?;
    let mut results = Vec::new();

    let mut worst = 0.0f64;
    for rank in 1..=5u32 {
        let doc = production.order[rank as usize - 1];
        let exact = exact_policy_propensity(&policy, &obs, doc);
        worst = worst.max((exact - obs.propensity(rank)).abs());
    }
    results.push(check(
        "displayed-rank-propensity",
        worst <= 1e-12,
        format!("max |marginal - 1/rank| = {worst:e}"),
    ));
    Ok(results)
}

/// Names accepted by [`run_fixture`], in report order.
pub fn fixture_names() -> &'static [&'static str] {
    &["two-ranking", "slot-randomization", "deterministic-policy"]
}

/// Runs one named fixture's checks. "illustrative-3-3" is accepted as an
/// alias for "two-ranking".
pub fn run_fixture(name: &str) -> Result<Vec<CheckOutcome>> {
    match name {
        "two-ranking" | "illustrative-3-3" => two_ranking_checks(),
        "slot-randomization" => slot_randomization_checks(),
        "deterministic-policy" => deterministic_policy_checks(),
        other => Err(Error::Config(format!(
            "unknown fixture {other:?}; expected one of {:?}",
            fixture_names()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::{true_loss, LinearModel};
    use crate::simulate::LoggingPolicy;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn policy_rejects_probabilities_off_one() {
        let r = RankedList::from_order(0, vec![0, 1]);
        assert!(EnumerablePolicy::new(vec![(r.clone(), 0.6), (r.clone(), 0.5)]).is_err());
        assert!(EnumerablePolicy::new(vec![(r.clone(), -0.1), (r.clone(), 1.1)]).is_err());
        assert!(EnumerablePolicy::new(vec![]).is_err());
        assert!(EnumerablePolicy::new(vec![(r, 1.0)]).is_ok());
    }

    #[test]
    fn policy_rejects_mismatched_sizes() {
        let a = RankedList::from_order(0, vec![0, 1]);
        let b = RankedList::from_order(0, vec![0, 1, 2]);
        assert!(EnumerablePolicy::new(vec![(a, 0.5), (b, 0.5)]).is_err());
    }

    #[test]
    fn slot_randomization_enumerates_uniform_tail() {
        let production = RankedList::from_order(0, vec![2, 0, 3, 1]);
        let policy = EnumerablePolicy::kth_slot_randomization(&production, 2);
        assert_eq!(policy.rankings.len(), 3);
        for (ranked, p) in &policy.rankings {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
            assert_eq!(ranked.order[0], 2);
        }
        let slots: Vec<u32> = policy.rankings.iter().map(|(r, _)| r.order[1]).collect();
        assert_eq!(slots, vec![0, 3, 1]);
    }

    #[test]
    fn slot_randomization_without_enough_docs_is_deterministic() {
        let production = RankedList::from_order(0, vec![1, 0]);
        let policy = EnumerablePolicy::kth_slot_randomization(&production, 5);
        assert_eq!(policy.rankings.len(), 1);
        assert_eq!(policy.rankings[0].1, 1.0);
    }

    #[test]
    fn first_slot_randomization_observes_uniformly() {
        let production = RankedList::from_order(0, vec![0, 1, 2, 3]);
        let policy = EnumerablePolicy::kth_slot_randomization(&production, 1);
        let obs = ObservationModel::new(1).unwrap();
        for d in 0..4 {
            assert!((exact_policy_propensity(&policy, &obs, d) - 0.25).abs() <= 1e-12);
        }
    }

    #[test]
    fn enumerated_propensity_matches_closed_form_everywhere() {
        for n in 1..=8usize {
            let mut order: Vec<u32> = (0..n as u32).collect();
            order.reverse();
            let production = RankedList::from_order(0, order);
            for k in 1..=n as u32 {
                let policy = EnumerablePolicy::kth_slot_randomization(&production, k);
                let obs = ObservationModel::new(k).unwrap();
                let logging =
                    LoggingPolicy::new(LinearModel::new(vec![0.0]), k, true).unwrap();
                for rank in 1..=n as u32 {
                    let doc = production.order[rank as usize - 1];
                    let exact = exact_policy_propensity(&policy, &obs, doc);
                    let closed = crate::simulate::policy_propensity(&logging, &obs, rank, n);
                    assert!(
                        (exact - closed).abs() <= 1e-12,
                        "n {n} k {k} rank {rank}: {exact} vs {closed}"
                    );
                }
            }
        }
    }

    #[test]
    fn oracle_rejects_oversized_outcome_spaces() {
        let production = RankedList::from_order(0, (0..21).collect());
        let policy = EnumerablePolicy::deterministic(production);
        let obs = ObservationModel::new(21).unwrap();
        let config = EstimatorConfig::new(EstimatorKind::Naive, None, false).unwrap();
        let relevance = vec![true; 21];
        let scores = vec![0.0; 21];
        let err = exact_estimator_expectation(
            &policy,
            &obs,
            &relevance,
            &config,
            &scores,
            MetricSpec::Arp,
        )
        .unwrap_err();
        assert!(matches!(err, Error::OutcomeSpaceTooLarge { .. }));
    }

    #[test]
    fn expectation_is_sum_of_contributions() {
        let fx = two_ranking_fixture();
        let config = EstimatorConfig::new(EstimatorKind::PolicyAware, None, false).unwrap();
        let exp = exact_estimator_expectation(
            &fx.policy,
            &fx.obs,
            &fx.relevance,
            &config,
            &fx.model_scores,
            MetricSpec::Arp,
        )
        .unwrap();
        let total: f64 = exp.outcomes.iter().map(|o| o.probability * o.estimate).sum();
        assert_eq!(exp.value, total);
        let mass: f64 = exp.outcomes.iter().map(|o| o.probability).sum();
        assert!((mass - 1.0).abs() <= 1e-12, "probability mass {mass}");
    }

    #[test]
    fn shared_document_is_estimated_exactly_by_both() {
        // a document observable in every ranking is handled by the
        // per-ranking correction too
        let fx = two_ranking_fixture();
        let mut only_shared = vec![false; 4];
        only_shared[fx.shared_doc as usize] = true;
        let evaluated = rank_scores(0, &fx.model_scores);
        let truth = true_loss(MetricSpec::Arp, &evaluated, &only_shared);
        for kind in [EstimatorKind::PolicyOblivious, EstimatorKind::PolicyAware] {
            let config = EstimatorConfig::new(kind, None, false).unwrap();
            let exp = exact_estimator_expectation(
                &fx.policy,
                &fx.obs,
                &only_shared,
                &config,
                &fx.model_scores,
                MetricSpec::Arp,
            )
            .unwrap();
            assert!(
                (exp.value - truth).abs() <= 1e-12,
                "{kind:?}: {} vs {truth}",
                exp.value
            );
        }
    }

    #[test]
    fn exclusive_document_shrinks_to_its_ranking_share() {
        let fx = two_ranking_fixture();
        let mut only_exclusive = vec![false; 4];
        only_exclusive[fx.exclusive_doc as usize] = true;
        let evaluated = rank_scores(0, &fx.model_scores);
        let truth = true_loss(MetricSpec::Arp, &evaluated, &only_exclusive);
        let config = EstimatorConfig::new(EstimatorKind::PolicyOblivious, None, false).unwrap();
        let exp = exact_estimator_expectation(
            &fx.policy,
            &fx.obs,
            &only_exclusive,
            &config,
            &fx.model_scores,
            MetricSpec::Arp,
        )
        .unwrap();
        assert!((exp.value - 0.5 * truth).abs() <= 1e-12);
    }

    #[test]
    fn fixture_checks_all_pass() {
        for name in fixture_names() {
            let outcomes = run_fixture(name).unwrap();
            assert!(!outcomes.is_empty());
            for c in &outcomes {
                assert!(c.passed, "{name}/{}: {}", c.name, c.detail);
            }
        }
    }

    #[test]
    fn fixture_alias_matches_primary_name() {
        let a = run_fixture("two-ranking").unwrap();
        let b = run_fixture("illustrative-3-3").unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.passed, y.passed);
        }
    }

    #[test]
    fn unknown_fixture_is_a_config_error() {
        assert!(matches!(run_fixture("no-such-fixture"), Err(Error::Config(_))));
    }

    /// Random policy over random permutations, regenerated until every
    /// relevant document is observable somewhere.
    fn random_covered_instance(
        rng: &mut ChaCha8Rng,
    ) -> (EnumerablePolicy, ObservationModel, Vec<bool>, Vec<f64>) {
        loop {
            let n = rng.gen_range(2..=6usize);
            let k = rng.gen_range(1..=3.min(n) as u32);
            let num_rankings = rng.gen_range(1..=4usize);
            let mut rankings = Vec::with_capacity(num_rankings);
            let mut weights = Vec::with_capacity(num_rankings);
            for _ in 0..num_rankings {
                let mut order: Vec<u32> = (0..n as u32).collect();
                order.shuffle(rng);
                rankings.push(RankedList::from_order(0, order));
                weights.push(rng.gen_range(0.05..1.0));
            }
            let total: f64 = weights.iter().sum();
            let policy = EnumerablePolicy::new(
                rankings.into_iter().zip(weights.iter().map(|w| w / total)).collect(),
            )
            .unwrap();
            let obs = ObservationModel::new(k).unwrap();
            let relevance: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            if !relevance.iter().any(|&r| r) || !covers_all_relevant(&policy, &obs, &relevance) {
                continue;
            }
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            return (policy, obs, relevance, scores);
        }
    }

    #[test]
    fn aware_expectation_matches_truth_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let config = EstimatorConfig::new(EstimatorKind::PolicyAware, None, false).unwrap();
        for i in 0..40 {
            let (policy, obs, relevance, scores) = random_covered_instance(&mut rng);
            for spec in [MetricSpec::Arp, MetricSpec::Dcg, MetricSpec::DcgAt(3)] {
                let evaluated = rank_scores(0, &scores);
                let truth = true_loss(spec, &evaluated, &relevance);
                let exp =
                    exact_estimator_expectation(&policy, &obs, &relevance, &config, &scores, spec)
                        .unwrap();
                assert!(
                    (exp.value - truth).abs() <= 1e-12,
                    "instance {i} {spec}: {} vs {truth}",
                    exp.value
                );
            }
        }
    }

    #[test]
    fn naive_expectation_scales_with_observation_not_truth() {
        // position bias shrinks uncorrected click mass: under a
        // deterministic policy the naive expectation is the propensity-
        // weighted sum, strictly under the truth once any relevant
        // document sits below rank 1
        let production = RankedList::from_order(0, vec![0, 1, 2]);
        let policy = EnumerablePolicy::deterministic(production);
        let obs = ObservationModel::new(3).unwrap();
        let relevance = vec![true, true, false];
        let scores = vec![3.0, 2.0, 1.0];
        let config = EstimatorConfig::new(EstimatorKind::Naive, None, false).unwrap();
        let exp = exact_estimator_expectation(
            &policy,
            &obs,
            &relevance,
            &config,
            &scores,
            MetricSpec::Arp,
        )
        .unwrap();
        // doc 0 observed with probability 1 contributes rank 1; doc 1
        // observed half the time contributes rank 2 half-weighted
        assert!((exp.value - (1.0 + 0.5 * 2.0)).abs() <= 1e-12);
    }

    #[test]
    fn clipping_biases_the_aware_oracle() {
        let fx = two_ranking_fixture();
        let clipped = EstimatorConfig::new(EstimatorKind::PolicyAware, Some(0.9), false).unwrap();
        let evaluated = rank_scores(0, &fx.model_scores);
        let truth = true_loss(MetricSpec::Arp, &evaluated, &fx.relevance);
        let exp = exact_estimator_expectation(
            &fx.policy,
            &fx.obs,
            &fx.relevance,
            &clipped,
            &fx.model_scores,
            MetricSpec::Arp,
        )
        .unwrap();
        assert!(exp.value < truth - 1e-9, "clip floor must shrink the estimate");
    }

    #[test]
    fn rerank_oracle_ranks_within_the_displayed_set() {
        // two docs displayed, k = 2: the restricted ranking of the
        // displayed pair decides the metric term, not the full list
        let production = RankedList::from_order(0, vec![2, 0, 1]);
        let policy = EnumerablePolicy::deterministic(production);
        let obs = ObservationModel::new(2).unwrap();
        let relevance = vec![true, false, true];
        // full ranking by these scores is [1, 0, 2]; within {0, 2} doc 0
        // outranks doc 2 so their restricted ranks are 1 and 2
        let scores = vec![2.0, 3.0, 1.0];
        let config = EstimatorConfig::new(EstimatorKind::Rerank, None, false).unwrap();
        let exp = exact_estimator_expectation(
            &policy,
            &obs,
            &relevance,
            &config,
            &scores,
            MetricSpec::Arp,
        )
        .unwrap();
        // doc 2 at displayed rank 1 (observed, rho 1) restricted rank 2;
        // doc 0 at displayed rank 2 (observed half, rho 1/2) restricted
        // rank 1, so the expectation is 2 + 1
        assert!((exp.value - 3.0).abs() <= 1e-12);
    }
}
