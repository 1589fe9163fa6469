//! Linear scoring, deterministic ranking, and true-label ranking metrics.
//!
//! All metrics are expressed as losses to minimize: the per-document weight
//! `lambda(d | R)` is the rank itself for ARP and the negated reciprocal log
//! discount for DCG, so smaller values always mean a better ranking. NDCG@k
//! is the one exception: it is reported as the usual normalized value in
//! [0, 1] where 1 is ideal.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::data::Partition;
use crate::{Error, Result};

/// Weight vector of a linear scoring model; the sole trainable object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
}

impl LinearModel {
    pub fn new(weights: Vec<f64>) -> Self {
        Self { weights }
    }

    pub fn zeros(num_features: usize) -> Self {
        Self { weights: vec![0.0; num_features] }
    }

    pub fn num_features(&self) -> usize {
        self.weights.len()
    }

    /// Scores one document feature row: the dot product with the weights.
    pub fn score_doc(&self, features: &[f64]) -> f64 {
        debug_assert_eq!(features.len(), self.weights.len());
        self.weights
            .iter()
            .zip(features)
            .map(|(w, x)| w * x)
            .sum()
    }

    /// Scores every document of a query. Errors on feature-count mismatch.
    pub fn score(&self, query: &crate::data::Query) -> Result<Vec<f64>> {
        if query.num_features() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                actual: query.num_features(),
            });
        }
        Ok((0..query.num_docs())
            .map(|d| self.score_doc(query.doc_features(d)))
            .collect())
    }
}

/// A permutation of a query's documents, best first, with 1-based ranks.
///
/// `order[p]` is the document shown at position `p + 1`; `ranks[d]` is the
/// 1-based rank of document `d`. The two are mutually inverse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: u32,
    pub order: Vec<u32>,
    pub ranks: Vec<u32>,
}

impl RankedList {
    /// Builds the ranked list from an explicit order (best first).
    pub fn from_order(query_id: u32, order: Vec<u32>) -> Self {
        let mut ranks = vec![0u32; order.len()];
        for (pos, &doc) in order.iter().enumerate() {
            ranks[doc as usize] = pos as u32 + 1;
        }
        Self { query_id, order, ranks }
    }

    pub fn num_docs(&self) -> usize {
        self.order.len()
    }

    /// 1-based rank of a document.
    pub fn rank_of(&self, doc: usize) -> u32 {
        self.ranks[doc]
    }
}

/// Ranks documents by descending score; ties break by ascending document
/// index so the result is deterministic.
pub fn rank_scores(query_id: u32, scores: &[f64]) -> RankedList {
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    });
    RankedList::from_order(query_id, order)
}

/// Ranks a subset of a query's documents by descending score, ties by
/// ascending document index. `docs` are indices into `scores`.
pub fn rank_subset(scores: &[f64], docs: &[u32]) -> Vec<u32> {
    let mut order = docs.to_vec();
    order.sort_unstable_by(|&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    });
    order
}

/// A ranking metric, expressed as a per-document loss weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MetricSpec {
    /// Sum of the ranks of relevant documents (lower is better).
    Arp,
    /// Discounted cumulative gain over the full ranking, as a negative loss.
    Dcg,
    /// DCG truncated at rank k; documents beyond k contribute nothing.
    DcgAt(u32),
    /// Fraction of the top k that is relevant, negated to a loss.
    PrecisionAt(u32),
    /// DCG@k normalized by the ideal DCG@k; reported in [0, 1], 1 is ideal.
    NdcgAt(u32),
}

impl MetricSpec {
    /// Cutoff of a top-k metric, if any.
    pub fn cutoff(&self) -> Option<u32> {
        match *self {
            MetricSpec::Arp | MetricSpec::Dcg => None,
            MetricSpec::DcgAt(k) | MetricSpec::PrecisionAt(k) | MetricSpec::NdcgAt(k) => Some(k),
        }
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            MetricSpec::Arp => write!(f, "arp"),
            MetricSpec::Dcg => write!(f, "dcg"),
            MetricSpec::DcgAt(k) => write!(f, "dcg@{k}"),
            MetricSpec::PrecisionAt(k) => write!(f, "precision@{k}"),
            MetricSpec::NdcgAt(k) => write!(f, "ndcg@{k}"),
        }
    }
}

impl FromStr for MetricSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_cutoff = |v: &str| -> Result<u32> {
            let k: u32 = v
                .parse()
                .map_err(|_| Error::Config(format!("invalid metric cutoff in '{s}'")))?;
            if k == 0 {
                return Err(Error::Config(format!("metric cutoff must be >= 1 in '{s}'")));
            }
            Ok(k)
        };
        match s.split_once('@') {
            None => match s {
                "arp" => Ok(MetricSpec::Arp),
                "dcg" => Ok(MetricSpec::Dcg),
                _ => Err(Error::Config(format!("unknown metric '{s}'"))),
            },
            Some((name, v)) => {
                let k = parse_cutoff(v)?;
                match name {
                    "dcg" => Ok(MetricSpec::DcgAt(k)),
                    "precision" => Ok(MetricSpec::PrecisionAt(k)),
                    "ndcg" => Ok(MetricSpec::NdcgAt(k)),
                    _ => Err(Error::Config(format!("unknown metric '{s}'"))),
                }
            }
        }
    }
}

impl TryFrom<String> for MetricSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MetricSpec> for String {
    fn from(m: MetricSpec) -> String {
        m.to_string()
    }
}

/// The DCG discount at a 1-based rank: 1 / log2(1 + rank).
pub fn dcg_discount(rank: u32) -> f64 {
    1.0 / (1.0 + rank as f64).log2()
}

/// Per-document loss weight `lambda(d | R)` at a 1-based rank.
///
/// For NDCG@k this returns the DCG@k weight; the normalization is a
/// per-query scalar applied by [`true_loss`].
pub fn metric_weight(spec: MetricSpec, rank: u32) -> f64 {
    debug_assert!(rank >= 1);
    match spec {
        MetricSpec::Arp => rank as f64,
        MetricSpec::Dcg => -dcg_discount(rank),
        MetricSpec::DcgAt(k) | MetricSpec::NdcgAt(k) => {
            if rank <= k {
                -dcg_discount(rank)
            } else {
                0.0
            }
        }
        MetricSpec::PrecisionAt(k) => {
            if rank <= k {
                -1.0 / k as f64
            } else {
                0.0
            }
        }
    }
}

/// Ideal (most negative) DCG@k for a given number of relevant documents.
fn ideal_dcg_at(k: u32, num_relevant: usize) -> f64 {
    (1..=k.min(num_relevant as u32)).map(|r| -dcg_discount(r)).sum()
}

/// True-label loss of a ranking: the sum of `metric_weight` over relevant
/// documents. NDCG@k divides the DCG@k sum by the ideal DCG@k of the same
/// relevance vector and is 0 when nothing is relevant.
pub fn true_loss(spec: MetricSpec, ranked: &RankedList, relevance: &[bool]) -> f64 {
    debug_assert_eq!(ranked.num_docs(), relevance.len());
    let raw: f64 = relevance
        .iter()
        .enumerate()
        .filter(|(_, &rel)| rel)
        .map(|(d, _)| metric_weight(spec, ranked.rank_of(d)))
        .sum();
    match spec {
        MetricSpec::NdcgAt(k) => {
            let num_relevant = relevance.iter().filter(|&&r| r).count();
            if num_relevant == 0 {
                0.0
            } else {
                raw / ideal_dcg_at(k, num_relevant)
            }
        }
        _ => raw,
    }
}

/// Mean of [`true_loss`] over the queries of a partition, ranking each query
/// with the model. Queries are reduced in partition order so the result is
/// bit-stable regardless of the parallelism used upstream.
pub fn evaluate(model: &LinearModel, partition: &Partition, spec: MetricSpec) -> Result<f64> {
    if partition.queries.is_empty() {
        return Err(Error::EmptyPartition);
    }
    let mut total = 0.0;
    for query in &partition.queries {
        let scores = model.score(query)?;
        let ranked = rank_scores(query.id, &scores);
        total += true_loss(spec, &ranked, &query.binary_relevance);
    }
    Ok(total / partition.queries.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Query;
    use proptest::prelude::*;

    fn query_from(features: Vec<Vec<f64>>, grades: Vec<u8>) -> Query {
        Query::new(7, features, grades).unwrap()
    }

    #[test]
    fn score_is_projection_on_basis_weight() {
        let model = LinearModel::new(vec![1.0, 0.0]);
        let q = query_from(vec![vec![2.0, 5.0]], vec![0]);
        assert_eq!(model.score(&q).unwrap(), vec![2.0]);
    }

    #[test]
    fn score_zero_weights_all_zero() {
        let model = LinearModel::zeros(2);
        let q = query_from(vec![vec![2.0, 5.0], vec![-1.0, 3.0]], vec![0, 0]);
        assert_eq!(model.score(&q).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn score_sums_features() {
        let model = LinearModel::new(vec![1.0, 1.0]);
        let q = query_from(vec![vec![1.0, 0.0], vec![0.0, 2.0]], vec![0, 0]);
        assert_eq!(model.score(&q).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn score_rejects_dimension_mismatch() {
        let model = LinearModel::new(vec![1.0]);
        let q = query_from(vec![vec![2.0, 5.0]], vec![0]);
        assert!(matches!(
            model.score(&q),
            Err(Error::DimensionMismatch { expected: 1, actual: 2 })
        ));
    }

    #[test]
    fn rank_two_elements() {
        let ranked = rank_scores(0, &[1.0, 2.0]);
        assert_eq!(ranked.order, vec![1, 0]);
        assert_eq!(ranked.ranks, vec![2, 1]);
    }

    #[test]
    fn rank_ties_break_by_index() {
        let ranked = rank_scores(0, &[0.5, 0.5, 0.5]);
        assert_eq!(ranked.order, vec![0, 1, 2]);
    }

    #[test]
    fn rank_three_scores() {
        let ranked = rank_scores(0, &[3.0, 1.0, 2.0]);
        assert_eq!(ranked.ranks, vec![1, 3, 2]);
    }

    #[test]
    fn metric_weight_examples() {
        assert_eq!(metric_weight(MetricSpec::Arp, 4), 4.0);
        assert_eq!(metric_weight(MetricSpec::Dcg, 1), -1.0);
        assert_eq!(metric_weight(MetricSpec::DcgAt(5), 6), 0.0);
        assert!((metric_weight(MetricSpec::Dcg, 3) - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn metric_weight_precision() {
        assert_eq!(metric_weight(MetricSpec::PrecisionAt(4), 2), -0.25);
        assert_eq!(metric_weight(MetricSpec::PrecisionAt(4), 5), 0.0);
    }

    #[test]
    fn true_loss_single_relevant_at_top() {
        let ranked = rank_scores(0, &[2.0, 1.0]);
        assert_eq!(true_loss(MetricSpec::Arp, &ranked, &[true, false]), 1.0);
    }

    #[test]
    fn true_loss_no_relevant_is_zero() {
        let ranked = rank_scores(0, &[2.0, 1.0]);
        for spec in [MetricSpec::Arp, MetricSpec::Dcg, MetricSpec::NdcgAt(1)] {
            assert_eq!(true_loss(spec, &ranked, &[false, false]), 0.0);
        }
    }

    #[test]
    fn true_loss_dcg_ranks_one_and_three() {
        // relevant at ranks 1 and 3: -(1 + 0.5)
        let ranked = rank_scores(0, &[3.0, 2.0, 1.0]);
        let loss = true_loss(MetricSpec::Dcg, &ranked, &[true, false, true]);
        assert!((loss - (-1.5)).abs() < 1e-15);
    }

    #[test]
    fn ndcg_is_one_for_ideal_ranking() {
        let ranked = rank_scores(0, &[3.0, 2.0, 1.0]);
        let v = true_loss(MetricSpec::NdcgAt(3), &ranked, &[true, true, false]);
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ndcg_of_worst_ranking_is_fraction() {
        // one relevant doc at rank 3 of 3, k=3: dcg = -1/2, ideal = -1
        let ranked = rank_scores(0, &[3.0, 2.0, 1.0]);
        let v = true_loss(MetricSpec::NdcgAt(3), &ranked, &[false, false, true]);
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn evaluate_singleton_partition_equals_true_loss() {
        let q = query_from(vec![vec![1.0], vec![2.0]], vec![4, 0]);
        let partition = Partition { queries: vec![q] };
        let model = LinearModel::new(vec![1.0]);
        // relevant doc 0 scores 1.0, ranked below doc 1 -> rank 2
        let v = evaluate(&model, &partition, MetricSpec::Arp).unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn evaluate_mean_unchanged_by_duplicate_query() {
        let q = query_from(vec![vec![1.0], vec![2.0]], vec![4, 0]);
        let mut dup = q.clone();
        dup.id = 8;
        let single = Partition { queries: vec![q.clone()] };
        let double = Partition { queries: vec![q, dup] };
        let model = LinearModel::new(vec![1.0]);
        let a = evaluate(&model, &single, MetricSpec::Arp).unwrap();
        let b = evaluate(&model, &double, MetricSpec::Arp).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluate_is_arithmetic_mean() {
        // query A: relevant at rank 1 (loss 1); query B: relevant at rank 3 (loss 3)
        let a = query_from(vec![vec![2.0], vec![1.0]], vec![4, 0]);
        let mut b = query_from(vec![vec![0.0], vec![2.0], vec![1.0]], vec![3, 0, 0]);
        b.id = 8;
        let partition = Partition { queries: vec![a, b] };
        let model = LinearModel::new(vec![1.0]);
        let v = evaluate(&model, &partition, MetricSpec::Arp).unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn evaluate_empty_partition_errors() {
        let model = LinearModel::new(vec![1.0]);
        let partition = Partition { queries: vec![] };
        assert!(matches!(
            evaluate(&model, &partition, MetricSpec::Arp),
            Err(Error::EmptyPartition)
        ));
    }

    #[test]
    fn evaluate_invariant_under_query_order() {
        let a = query_from(vec![vec![2.0], vec![1.0]], vec![4, 0]);
        let mut b = query_from(vec![vec![0.0], vec![2.0], vec![1.0]], vec![3, 0, 0]);
        b.id = 8;
        let model = LinearModel::new(vec![1.0]);
        let fwd = Partition { queries: vec![a.clone(), b.clone()] };
        let rev = Partition { queries: vec![b, a] };
        assert_eq!(
            evaluate(&model, &fwd, MetricSpec::Dcg).unwrap(),
            evaluate(&model, &rev, MetricSpec::Dcg).unwrap()
        );
    }

    #[test]
    fn metric_parsing_round_trips() {
        for s in ["arp", "dcg", "dcg@5", "precision@3", "ndcg@10"] {
            let spec: MetricSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert!("dcg@0".parse::<MetricSpec>().is_err());
        assert!("mrr".parse::<MetricSpec>().is_err());
    }

    proptest! {
        #[test]
        fn rank_is_a_bijection(scores in proptest::collection::vec(-100.0f64..100.0, 1..40)) {
            let ranked = rank_scores(0, &scores);
            let mut seen = vec![false; scores.len()];
            for &r in &ranked.ranks {
                prop_assert!(r >= 1 && r as usize <= scores.len());
                prop_assert!(!seen[(r - 1) as usize]);
                seen[(r - 1) as usize] = true;
            }
            for (pos, &doc) in ranked.order.iter().enumerate() {
                prop_assert_eq!(ranked.ranks[doc as usize] as usize, pos + 1);
            }
        }

        #[test]
        fn dcg_weight_shrinks_in_magnitude_with_rank(rank in 1u32..1000) {
            let a = metric_weight(MetricSpec::Dcg, rank);
            let b = metric_weight(MetricSpec::Dcg, rank + 1);
            prop_assert!(b.abs() < a.abs());
            prop_assert!(a < 0.0 && b < 0.0);
        }

        #[test]
        fn topk_loss_ignores_order_below_cutoff(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 8usize;
            let k = 3u32;
            let order: Vec<u32> = {
                let mut v: Vec<u32> = (0..n as u32).collect();
                for i in (1..n).rev() {
                    let j = rng.gen_range(0..=i);
                    v.swap(i, j);
                }
                v
            };
            let relevance: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let base = RankedList::from_order(0, order.clone());
            // permute the tail beyond rank k
            let mut shuffled = order.clone();
            shuffled[k as usize..].reverse();
            let perm = RankedList::from_order(0, shuffled);
            let spec = MetricSpec::DcgAt(k);
            prop_assert_eq!(
                true_loss(spec, &base, &relevance),
                true_loss(spec, &perm, &relevance)
            );
        }
    }
}
