//! Counterfactual estimators of ranking losses from click logs.
//!
//! Four estimators share one pipeline: turn each click into an
//! inverse-propensity weight, accumulate the weights per document, then
//! score any candidate model as (1/Z) sum over documents of omega times the
//! metric weight at the model's rank.
//!
//! * naive: every click counts 1, so position bias goes uncorrected;
//! * policy_oblivious: divides by the observation propensity at the
//!   displayed rank, correcting position bias but not the selection bias of
//!   the top-k cutoff;
//! * policy_aware: divides by the marginal observation probability under
//!   the stochastic logging policy, correcting both;
//! * rerank: policy-oblivious weights, but every interaction is scored by
//!   reranking only the documents it displayed in its top k.
//!
//! Weight accumulation collapses the log into per-document weights once, so
//! training epochs never rescan interactions. The rerank estimator keeps
//! per-displayed-set weight groups instead: its restricted ranking differs
//! per interaction, and interactions sharing a displayed set aggregate
//! exactly.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::Partition;
use crate::ranking::{metric_weight, rank_scores, rank_subset, LinearModel, MetricSpec, RankedList};
use crate::simulate::{
    policy_propensity, production_rankings, Click, ClickLog, LoggingPolicy, ObservationModel,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EstimatorKind {
    Naive,
    PolicyOblivious,
    PolicyAware,
    Rerank,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EstimatorKind::Naive => "naive",
            EstimatorKind::PolicyOblivious => "policy_oblivious",
            EstimatorKind::PolicyAware => "policy_aware",
            EstimatorKind::Rerank => "rerank",
        };
        write!(f, "{s}")
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(EstimatorKind::Naive),
            "policy_oblivious" => Ok(EstimatorKind::PolicyOblivious),
            "policy_aware" => Ok(EstimatorKind::PolicyAware),
            "rerank" => Ok(EstimatorKind::Rerank),
            _ => Err(Error::Config(format!("unknown estimator '{s}'"))),
        }
    }
}

impl TryFrom<String> for EstimatorKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EstimatorKind> for String {
    fn from(k: EstimatorKind) -> String {
        k.to_string()
    }
}

/// How clicks become weights: the estimator kind, an optional clipping
/// threshold applied during training only, and self-normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// Training-time propensity floor tau: rho <- max(rho, tau). Never
    /// applied to validation estimates.
    pub clip_threshold: Option<f64>,
    /// Divide by the summed click weights instead of the interaction count.
    pub self_normalize: bool,
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind, clip_threshold: Option<f64>, self_normalize: bool) -> Result<Self> {
        if let Some(t) = clip_threshold {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("clip threshold {t} outside (0, 1]")));
            }
        }
        Ok(Self { kind, clip_threshold, self_normalize })
    }

    /// The same estimator with clipping disabled, for validation estimates.
    pub fn unclipped(&self) -> Self {
        Self { clip_threshold: None, ..*self }
    }
}

/// Propensity of one click under an estimator. The naive estimator ignores
/// propensities entirely; oblivious and rerank divide by the observation
/// propensity at the displayed rank; aware divides by the closed-form
/// marginal over the policy's randomization. Clipping floors the result.
/// A zero propensity for a clicked document means the log is inconsistent
/// with the stated policy.
pub fn click_propensity(
    config: &EstimatorConfig,
    policy: &LoggingPolicy,
    obs: &ObservationModel,
    production: &RankedList,
    click: &Click,
) -> Result<f64> {
    let raw = match config.kind {
        EstimatorKind::Naive => 1.0,
        EstimatorKind::PolicyOblivious | EstimatorKind::Rerank => {
            obs.propensity(click.displayed_rank)
        }
        EstimatorKind::PolicyAware => {
            let rank = production.rank_of(click.doc as usize);
            policy_propensity(policy, obs, rank, production.num_docs())
        }
    };
    if raw <= 0.0 {
        return Err(Error::ZeroPropensity {
            query_id: production.query_id,
            doc: click.doc as usize,
        });
    }
    Ok(match config.clip_threshold {
        Some(tau) => raw.max(tau),
        None => raw,
    })
}

/// Weights of one displayed top-k set for the rerank estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct RerankGroup {
    pub query_index: usize,
    /// Restricted document set, ascending; the interaction's displayed top k.
    pub docs: Vec<u32>,
    /// Accumulated click weight per entry of `docs`.
    pub weights: Vec<f64>,
}

/// Per-document click weights omega collapsed over a log, plus the
/// normalizer. Queries are indexed by partition position.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentWeights {
    pub kind: EstimatorKind,
    /// omega per (query index, document); zero for never-clicked documents.
    pub per_query: Vec<Vec<f64>>,
    /// Populated for rerank only: weights grouped by displayed set.
    pub rerank_groups: Vec<RerankGroup>,
    pub num_interactions: usize,
    /// Z: the interaction count, or the summed click weights when
    /// self-normalizing.
    pub normalizer: f64,
}

impl DocumentWeights {
    /// Full-information weights: omega is the true binary relevance and the
    /// normalizer is the query count, reducing the estimated loss to the
    /// supervised empirical risk.
    pub fn supervised(partition: &Partition) -> Self {
        let per_query = partition
            .queries
            .iter()
            .map(|q| q.binary_relevance.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            kind: EstimatorKind::Naive,
            per_query,
            rerank_groups: Vec::new(),
            num_interactions: partition.num_queries(),
            normalizer: partition.num_queries() as f64,
        }
    }

    pub fn total_weight(&self) -> f64 {
        if self.kind == EstimatorKind::Rerank {
            self.rerank_groups.iter().flat_map(|g| &g.weights).sum()
        } else {
            self.per_query.iter().flatten().sum()
        }
    }
}

/// Index of partition queries by id.
pub fn query_index(partition: &Partition) -> HashMap<u32, usize> {
    partition
        .queries
        .iter()
        .enumerate()
        .map(|(i, q)| (q.id, i))
        .collect()
}

/// Collapses a click log into per-document weights:
/// omega_d = sum over interactions of c_i(d) / rho_i(d). One linear pass.
pub fn accumulate_weights(
    log: &ClickLog,
    partition: &Partition,
    config: &EstimatorConfig,
) -> Result<DocumentWeights> {
    let production = production_rankings(&log.policy.model, partition)?;
    let index = query_index(partition);
    let mut per_query: Vec<Vec<f64>> = partition
        .queries
        .iter()
        .map(|q| vec![0.0; q.num_docs()])
        .collect();
    let mut groups: Vec<RerankGroup> = Vec::new();
    let mut group_index: HashMap<(usize, Option<u32>), usize> = HashMap::new();
    let mut click_weight_sum = 0.0;

    for interaction in &log.interactions {
        let qi = *index.get(&interaction.query_id).ok_or_else(|| {
            Error::Data(format!("logged query {} not in partition", interaction.query_id))
        })?;
        let prod = &production[qi];
        let group = if config.kind == EstimatorKind::Rerank {
            let key = (qi, interaction.sampled_doc);
            let gi = *group_index.entry(key).or_insert_with(|| {
                let m = prod.num_docs().min(log.policy.cutoff_k as usize);
                let mut docs: Vec<u32> = (1..=m as u32)
                    .map(|r| {
                        crate::simulate::displayed_doc(
                            prod,
                            interaction.sampled_doc,
                            log.policy.cutoff_k,
                            r,
                        )
                    })
                    .collect();
                docs.sort_unstable();
                let weights = vec![0.0; docs.len()];
                groups.push(RerankGroup { query_index: qi, docs, weights });
                groups.len() - 1
            });
            Some(gi)
        } else {
            None
        };
        for click in &interaction.clicks {
            let rho = click_propensity(config, &log.policy, &log.observation, prod, click)?;
            let w = 1.0 / rho;
            click_weight_sum += w;
            match group {
                Some(gi) => {
                    let g = &mut groups[gi];
                    let slot = g
                        .docs
                        .binary_search(&click.doc)
                        .map_err(|_| Error::Data(format!(
                            "click on document {} outside its displayed top-k set",
                            click.doc
                        )))?;
                    g.weights[slot] += w;
                }
                None => per_query[qi][click.doc as usize] += w,
            }
        }
    }

    let normalizer = if config.self_normalize {
        click_weight_sum
    } else {
        log.interactions.len() as f64
    };
    Ok(DocumentWeights {
        kind: config.kind,
        per_query,
        rerank_groups: groups,
        num_interactions: log.interactions.len(),
        normalizer,
    })
}

/// Estimated loss of a model: (1/Z) sum over queries and documents of
/// omega_d times the metric weight at the model's rank of d. For rerank,
/// ranks come from reordering each group's restricted document set. An
/// empty log (Z = 0) estimates 0. Cutoff metrics use their lambda weights;
/// ndcg@k has no click-only normalizer, so it is treated as dcg@k here.
pub fn estimate_loss(
    weights: &DocumentWeights,
    model: &LinearModel,
    partition: &Partition,
    spec: MetricSpec,
) -> Result<f64> {
    if weights.normalizer == 0.0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    if weights.kind == EstimatorKind::Rerank {
        let mut scores_cache: HashMap<usize, Vec<f64>> = HashMap::new();
        for group in &weights.rerank_groups {
            let scores = match scores_cache.entry(group.query_index) {
                std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(model.score(&partition.queries[group.query_index])?)
                }
            };
            let order = rank_subset(scores, &group.docs);
            for (pos, &doc) in order.iter().enumerate() {
                let slot = group.docs.binary_search(&doc).expect("doc from same set");
                let w = group.weights[slot];
                if w != 0.0 {
                    total += w * metric_weight(spec, pos as u32 + 1);
                }
            }
        }
    } else {
        for (qi, omega) in weights.per_query.iter().enumerate() {
            if omega.iter().all(|&w| w == 0.0) {
                continue;
            }
            let query = &partition.queries[qi];
            let ranked = rank_scores(query.id, &model.score(query)?);
            for (doc, &w) in omega.iter().enumerate() {
                if w != 0.0 {
                    total += w * metric_weight(spec, ranked.rank_of(doc));
                }
            }
        }
    }
    Ok(total / weights.normalizer)
}

/// Validation-time estimate: same estimator with clipping disabled.
pub fn counterfactual_evaluate(
    log: &ClickLog,
    partition: &Partition,
    config: &EstimatorConfig,
    model: &LinearModel,
    spec: MetricSpec,
) -> Result<f64> {
    let weights = accumulate_weights(log, partition, &config.unclipped())?;
    estimate_loss(&weights, model, partition, spec)
}

/// Content fingerprint of a log, for keying weight caches.
pub fn log_fingerprint(log: &ClickLog) -> String {
    let mut h = Sha256::new();
    h.update(log.seed.to_le_bytes());
    h.update((log.interactions.len() as u64).to_le_bytes());
    h.update(log.policy.cutoff_k.to_le_bytes());
    h.update([log.policy.randomize as u8]);
    h.update(log.observation.cutoff_k.to_le_bytes());
    for w in &log.policy.model.weights {
        h.update(w.to_le_bytes());
    }
    for i in &log.interactions {
        h.update(i.query_id.to_le_bytes());
        h.update(i.sampled_doc.map_or(u32::MAX, |d| d).to_le_bytes());
        for c in &i.clicks {
            h.update(c.doc.to_le_bytes());
            h.update(c.displayed_rank.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

/// Cache file path for one (log, estimator config) pair.
pub fn weights_cache_path(dir: &Path, log: &ClickLog, config: &EstimatorConfig) -> PathBuf {
    let mut h = Sha256::new();
    h.update(log_fingerprint(log).as_bytes());
    h.update(config.kind.to_string().as_bytes());
    h.update([config.self_normalize as u8]);
    h.update(config.clip_threshold.unwrap_or(f64::NAN).to_le_bytes());
    let key = format!("{:x}", h.finalize());
    dir.join(format!("weights-{}.bin", &key[..16]))
}

const WEIGHTS_MAGIC: &[u8; 8] = b"CLTRWTS1";

fn kind_code(kind: EstimatorKind) -> u8 {
    match kind {
        EstimatorKind::Naive => 0,
        EstimatorKind::PolicyOblivious => 1,
        EstimatorKind::PolicyAware => 2,
        EstimatorKind::Rerank => 3,
    }
}

fn kind_from_code(code: u8) -> Result<EstimatorKind> {
    match code {
        0 => Ok(EstimatorKind::Naive),
        1 => Ok(EstimatorKind::PolicyOblivious),
        2 => Ok(EstimatorKind::PolicyAware),
        3 => Ok(EstimatorKind::Rerank),
        _ => Err(Error::Data(format!("bad estimator code {code} in weights cache"))),
    }
}

/// Writes weights to a little-endian binary sidecar.
pub fn save_weights(weights: &DocumentWeights, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&[kind_code(weights.kind)])?;
    w.write_all(&(weights.num_interactions as u64).to_le_bytes())?;
    w.write_all(&weights.normalizer.to_le_bytes())?;
    w.write_all(&(weights.per_query.len() as u64).to_le_bytes())?;
    for omega in &weights.per_query {
        w.write_all(&(omega.len() as u64).to_le_bytes())?;
        for v in omega {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&(weights.rerank_groups.len() as u64).to_le_bytes())?;
    for g in &weights.rerank_groups {
        w.write_all(&(g.query_index as u64).to_le_bytes())?;
        w.write_all(&(g.docs.len() as u64).to_le_bytes())?;
        for d in &g.docs {
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &g.weights {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a sidecar written by [`save_weights`].
pub fn load_weights(path: &Path) -> Result<DocumentWeights> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Data("not a weights cache file".into()));
    }
    let mut u64buf = [0u8; 8];
    let mut f64buf = [0u8; 8];
    let mut u32buf = [0u8; 4];
    let mut byte = [0u8; 1];
    r.read_exact(&mut byte)?;
    let kind = kind_from_code(byte[0])?;
    r.read_exact(&mut u64buf)?;
    let num_interactions = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut f64buf)?;
    let normalizer = f64::from_le_bytes(f64buf);
    r.read_exact(&mut u64buf)?;
    let nq = u64::from_le_bytes(u64buf) as usize;
    let mut per_query = Vec::with_capacity(nq);
    for _ in 0..nq {
        r.read_exact(&mut u64buf)?;
        let nd = u64::from_le_bytes(u64buf) as usize;
        let mut omega = Vec::with_capacity(nd);
        for _ in 0..nd {
            r.read_exact(&mut f64buf)?;
            omega.push(f64::from_le_bytes(f64buf));
        }
        per_query.push(omega);
    }
    r.read_exact(&mut u64buf)?;
    let ng = u64::from_le_bytes(u64buf) as usize;
    let mut rerank_groups = Vec::with_capacity(ng);
    for _ in 0..ng {
        r.read_exact(&mut u64buf)?;
        let query_index = u64::from_le_bytes(u64buf) as usize;
        r.read_exact(&mut u64buf)?;
        let nd = u64::from_le_bytes(u64buf) as usize;
        let mut docs = Vec::with_capacity(nd);
        for _ in 0..nd {
            r.read_exact(&mut u32buf)?;
            docs.push(u32::from_le_bytes(u32buf));
        }
        let mut group_weights = Vec::with_capacity(nd);
        for _ in 0..nd {
            r.read_exact(&mut f64buf)?;
            group_weights.push(f64::from_le_bytes(f64buf));
        }
        rerank_groups.push(RerankGroup { query_index, docs, weights: group_weights });
    }
    Ok(DocumentWeights { kind, per_query, rerank_groups, num_interactions, normalizer })
}
