//! Click simulation: production ranker bootstrap, the k-th-slot
//! randomization logging policy, position-based observation, and noisy
//! clicks, plus the closed-form propensities the estimators divide by.
//!
//! Every interaction draws from its own counter-based RNG stream keyed by
//! (seed, interaction index), so a log is reproducible bit for bit at any
//! parallelism and in any execution order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{Partition, Query};
use crate::ranking::{rank_scores, LinearModel, RankedList};
use crate::{Error, Result};

/// The stochastic logging policy: rank by the production model, then (when
/// randomizing and n >= k) replace position k with a document sampled
/// uniformly from everything at production rank k or below.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoggingPolicy {
    pub model: LinearModel,
    pub cutoff_k: u32,
    pub randomize: bool,
}

impl LoggingPolicy {
    pub fn new(model: LinearModel, cutoff_k: u32, randomize: bool) -> Result<Self> {
        if cutoff_k == 0 {
            return Err(Error::Config("policy cutoff must be >= 1".into()));
        }
        Ok(Self { model, cutoff_k, randomize })
    }
}

/// Position-based observation: seen with probability 1/rank through the
/// top k, never below.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ObservationModel {
    pub cutoff_k: u32,
}

impl ObservationModel {
    pub fn new(cutoff_k: u32) -> Result<Self> {
        if cutoff_k == 0 {
            return Err(Error::Config("observation cutoff must be >= 1".into()));
        }
        Ok(Self { cutoff_k })
    }

    /// P(observed | displayed rank): 1/rank within the cutoff, else 0.
    pub fn propensity(&self, displayed_rank: u32) -> f64 {
        debug_assert!(displayed_rank >= 1);
        if displayed_rank <= self.cutoff_k {
            1.0 / displayed_rank as f64
        } else {
            0.0
        }
    }
}

/// Click probabilities conditioned on relevance, given observation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClickModel {
    pub p_click_relevant: f64,
    pub p_click_nonrelevant: f64,
}

impl Default for ClickModel {
    fn default() -> Self {
        Self { p_click_relevant: 1.0, p_click_nonrelevant: 0.1 }
    }
}

impl ClickModel {
    /// Noise-free variant: relevant documents always click, others never do.
    pub fn noise_free() -> Self {
        Self { p_click_relevant: 1.0, p_click_nonrelevant: 0.0 }
    }
}

/// One click with the rank it was displayed at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Click {
    pub doc: u32,
    pub displayed_rank: u32,
}

/// One logged interaction. The full displayed ranking is recoverable from
/// the production ranking plus `sampled_doc`, so only the clicks and the
/// sampled document are stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub query_id: u32,
    /// Document placed at position k by the randomization, if any.
    pub sampled_doc: Option<u32>,
    pub clicks: Vec<Click>,
}

/// A simulated interaction log together with the policy that produced it.
#[derive(Debug, Clone)]
pub struct ClickLog {
    pub interactions: Vec<Interaction>,
    pub policy: LoggingPolicy,
    pub observation: ObservationModel,
    pub seed: u64,
}

impl ClickLog {
    pub fn num_clicks(&self) -> usize {
        self.interactions.iter().map(|i| i.clicks.len()).sum()
    }
}

/// Production rankings for every query of a partition, in partition order.
pub fn production_rankings(model: &LinearModel, partition: &Partition) -> Result<Vec<RankedList>> {
    partition
        .queries
        .iter()
        .map(|q| Ok(rank_scores(q.id, &model.score(q)?)))
        .collect()
}

/// Document shown at `displayed_rank` after placing `sampled` (a document
/// at production rank >= k) into slot k and shifting the remainder down.
pub fn displayed_doc(
    production: &RankedList,
    sampled: Option<u32>,
    k: u32,
    displayed_rank: u32,
) -> u32 {
    let r = displayed_rank as usize;
    match sampled {
        None => production.order[r - 1],
        Some(d) => {
            let k = k as usize;
            if r < k {
                production.order[r - 1]
            } else if r == k {
                d
            } else if displayed_rank <= production.rank_of(d as usize) {
                production.order[r - 2]
            } else {
                production.order[r - 1]
            }
        }
    }
}

/// Materializes the full displayed ranking for one interaction.
pub fn displayed_list(production: &RankedList, sampled: Option<u32>, k: u32) -> RankedList {
    match sampled {
        None => production.clone(),
        Some(d) => {
            let k = k as usize;
            let mut order = Vec::with_capacity(production.num_docs());
            order.extend_from_slice(&production.order[..k - 1]);
            order.push(d);
            order.extend(production.order[k - 1..].iter().copied().filter(|&x| x != d));
            RankedList::from_order(production.query_id, order)
        }
    }
}

/// Draws one displayed ranking for a query under the policy. Returns the
/// ranking and the document the randomization placed at position k (none
/// when not randomizing or when fewer than k documents exist).
pub fn display_ranking(
    policy: &LoggingPolicy,
    query: &Query,
    rng: &mut ChaCha8Rng,
) -> Result<(RankedList, Option<u32>)> {
    let production = rank_scores(query.id, &policy.model.score(query)?);
    let sampled = draw_sampled(policy, &production, rng);
    let displayed = displayed_list(&production, sampled, policy.cutoff_k);
    Ok((displayed, sampled))
}

fn draw_sampled(policy: &LoggingPolicy, production: &RankedList, rng: &mut ChaCha8Rng) -> Option<u32> {
    let n = production.num_docs();
    let k = policy.cutoff_k as usize;
    if !policy.randomize || n < k {
        return None;
    }
    let j = rng.gen_range(0..=(n - k));
    Some(production.order[k - 1 + j])
}

/// Closed-form P(o(d)=1 | q, r, pi) of a document under the policy, taking
/// the randomization into account. Documents at production ranks below k
/// keep their slot, so their propensity is the plain observation propensity;
/// documents at rank k or beyond reach slot k with probability 1/(n-k+1) and
/// are observed there with probability 1/k. Without randomization (or with
/// fewer than k documents) this reduces to the observation propensity at the
/// production rank.
pub fn policy_propensity(
    policy: &LoggingPolicy,
    obs: &ObservationModel,
    production_rank: u32,
    n_docs: usize,
) -> f64 {
    debug_assert!(production_rank >= 1 && production_rank as usize <= n_docs);
    let k = policy.cutoff_k;
    if !policy.randomize || (n_docs as u32) < k || production_rank < k {
        return obs.propensity(production_rank);
    }
    1.0 / (k as f64 * (n_docs as u32 - k + 1) as f64)
}

/// Simulates `count` interactions: sample a query uniformly with
/// replacement, draw the displayed ranking, draw observation bits by
/// position, then click bits by relevance. Deterministic given the seed.
pub fn simulate_clicks(
    partition: &Partition,
    policy: &LoggingPolicy,
    obs: &ObservationModel,
    click_model: &ClickModel,
    count: usize,
    seed: u64,
) -> Result<ClickLog> {
    if partition.queries.is_empty() {
        return Err(Error::EmptyPartition);
    }
    let production = production_rankings(&policy.model, partition)?;
    let interactions: Vec<Interaction> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            simulate_one(partition, &production, policy, obs, click_model, &mut rng)
        })
        .collect();
    Ok(ClickLog {
        interactions,
        policy: policy.clone(),
        observation: *obs,
        seed,
    })
}

fn simulate_one(
    partition: &Partition,
    production: &[RankedList],
    policy: &LoggingPolicy,
    obs: &ObservationModel,
    click_model: &ClickModel,
    rng: &mut ChaCha8Rng,
) -> Interaction {
    let qi = rng.gen_range(0..partition.queries.len());
    let query = &partition.queries[qi];
    let prod = &production[qi];
    let sampled = draw_sampled(policy, prod, rng);
    let top = prod.num_docs().min(obs.cutoff_k as usize) as u32;
    let mut clicks = Vec::new();
    for rank in 1..=top {
        let observed = rng.gen::<f64>() < obs.propensity(rank);
        if !observed {
            continue;
        }
        let doc = displayed_doc(prod, sampled, policy.cutoff_k, rank);
        let p = if query.binary_relevance[doc as usize] {
            click_model.p_click_relevant
        } else {
            click_model.p_click_nonrelevant
        };
        if rng.gen::<f64>() < p {
            clicks.push(Click { doc, displayed_rank: rank });
        }
    }
    Interaction { query_id: query.id, sampled_doc: sampled, clicks }
}

const LOG_SCHEMA: &str = "cltr.clicklog.v1";

#[derive(Serialize, Deserialize)]
struct LogHeader {
    schema: String,
    policy_k: u32,
    observation_k: u32,
    randomized: bool,
    seed: u64,
    count: usize,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LogRecord {
    query_id: u32,
    displayed_order: Vec<u32>,
    clicks: Vec<u8>,
    sampled_doc: Option<u32>,
    seed_index: u64,
}

/// Writes a log as JSON lines: one header line, then one record per
/// interaction carrying the full displayed order and a per-document click
/// bit vector. Paths ending in `.gz` are gzip-compressed. The partition is
/// needed to reconstruct displayed orders from the stored sampled documents.
pub fn save_log(log: &ClickLog, partition: &Partition, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = flate2::write::GzEncoder::new(file, flate2::Compression::default());
        write_log(log, partition, &mut enc)?;
        enc.finish()?;
    } else {
        write_log(log, partition, BufWriter::new(file))?;
    }
    Ok(())
}

fn write_log(log: &ClickLog, partition: &Partition, mut w: impl Write) -> Result<()> {
    let production = production_rankings(&log.policy.model, partition)?;
    let index: std::collections::HashMap<u32, usize> = partition
        .queries
        .iter()
        .enumerate()
        .map(|(i, q)| (q.id, i))
        .collect();
    let header = LogHeader {
        schema: LOG_SCHEMA.to_string(),
        policy_k: log.policy.cutoff_k,
        observation_k: log.observation.cutoff_k,
        randomized: log.policy.randomize,
        seed: log.seed,
        count: log.interactions.len(),
        weights: log.policy.model.weights.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for (i, interaction) in log.interactions.iter().enumerate() {
        let qi = *index
            .get(&interaction.query_id)
            .ok_or_else(|| Error::Data(format!("query {} not in partition", interaction.query_id)))?;
        let displayed = displayed_list(&production[qi], interaction.sampled_doc, log.policy.cutoff_k);
        let mut bits = vec![0u8; displayed.num_docs()];
        for click in &interaction.clicks {
            bits[click.doc as usize] = 1;
        }
        let record = LogRecord {
            query_id: interaction.query_id,
            displayed_order: displayed.order,
            clicks: bits,
            sampled_doc: interaction.sampled_doc,
            seed_index: i as u64,
        };
        serde_json::to_writer(&mut w, &record)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Reads a log written by [`save_log`].
pub fn load_log(path: &Path) -> Result<ClickLog> {
    let file = File::open(path)?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(flate2::read::GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let mut lines = BufReader::new(reader).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, message: "missing log header".into() })??;
    let header: LogHeader = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        message: format!("bad log header: {e}"),
    })?;
    if header.schema != LOG_SCHEMA {
        return Err(Error::Parse {
            line: 1,
            message: format!("unsupported log schema '{}'", header.schema),
        });
    }
    let mut interactions = Vec::with_capacity(header.count);
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LogRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: format!("bad log record: {e}"),
        })?;
        let mut clicks = Vec::new();
        for (pos, &doc) in record.displayed_order.iter().enumerate() {
            if record.clicks.get(doc as usize).copied().unwrap_or(0) == 1 {
                clicks.push(Click { doc, displayed_rank: pos as u32 + 1 });
            }
        }
        interactions.push(Interaction {
            query_id: record.query_id,
            sampled_doc: record.sampled_doc,
            clicks,
        });
    }
    if interactions.len() != header.count {
        return Err(Error::Data(format!(
            "log header promises {} interactions, found {}",
            header.count,
            interactions.len()
        )));
    }
    Ok(ClickLog {
        interactions,
        policy: LoggingPolicy {
            model: LinearModel::new(header.weights),
            cutoff_k: header.policy_k,
            randomize: header.randomized,
        },
        observation: ObservationModel { cutoff_k: header.observation_k },
        seed: header.seed,
    })
}

const PRODUCTION_SAMPLE_STREAM: u64 = u64::MAX - 1;

/// Trains the production ranker on a seeded subsample of the training
/// queries, using true relevance as supervision with the hinge ARP bound.
/// Mirrors a weak ranker bootstrapped from a small fraction of the data.
pub fn train_production_ranker(
    dataset: &crate::data::Dataset,
    fraction: f64,
    seed: u64,
) -> Result<LinearModel> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("production fraction {fraction} outside (0, 1]")));
    }
    let n = dataset.train.num_queries();
    if n == 0 {
        return Err(Error::EmptyPartition);
    }
    let take = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PRODUCTION_SAMPLE_STREAM);
    for i in 0..take {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let sub = Partition {
        queries: idx[..take].iter().map(|&i| dataset.train.queries[i].clone()).collect(),
    };
    let weights = crate::estimate::DocumentWeights::supervised(&sub);
    let config = crate::train::TrainConfig {
        loss: crate::loss::LossSpec::ArpLinearBound,
        estimator: crate::estimate::EstimatorConfig::new(
            crate::estimate::EstimatorKind::Naive,
            None,
            false,
        )?,
        learning_rate: 0.05,
        epochs: 40,
        lr_decay: 1.0,
        seed,
    };
    Ok(crate::train::train(&config, &sub, &weights)?.model)
}
