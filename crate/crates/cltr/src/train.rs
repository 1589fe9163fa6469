//! SGD training of linear models against weighted surrogate losses, plus
//! hyperparameter tuning and loss selection on counterfactually estimated
//! validation performance.
//!
//! Training never rescans the click log: it consumes the collapsed
//! per-document weights, taking one gradient step per query (or per
//! displayed-set group for the rerank estimator) in a seeded shuffled order.
//! Pairwise losses refresh their rank-based discounts from the current model
//! once per epoch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Partition;
use crate::estimate::{
    accumulate_weights, estimate_loss, DocumentWeights, EstimatorConfig, EstimatorKind,
};
use crate::loss::{loss_gradient, loss_value, LossSpec};
use crate::ranking::{rank_scores, LinearModel, MetricSpec, RankedList};
use crate::simulate::ClickLog;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub estimator: EstimatorConfig,
    /// Base step size; zero is allowed as a degenerate control (the model
    /// never moves).
    pub learning_rate: f64,
    pub epochs: usize,
    /// Multiplicative per-epoch decay in (0, 1].
    pub lr_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr decay {} outside (0, 1]", self.lr_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainResult {
    pub config: TrainConfig,
    pub model: LinearModel,
    /// Post-update training loss at the end of each epoch.
    pub train_loss_trace: Vec<f64>,
    /// Filled in by [`tune`] and [`select_loss`].
    pub validation_estimate: Option<f64>,
}

/// One SGD step's worth of weighted documents: a whole query, or one
/// displayed-set group under the rerank estimator.
struct TrainUnit {
    query_index: usize,
    docs: Vec<u32>,
    weights: Vec<f64>,
}

fn build_units(weights: &DocumentWeights) -> Vec<TrainUnit> {
    if weights.kind == EstimatorKind::Rerank {
        weights
            .rerank_groups
            .iter()
            .filter(|g| g.weights.iter().any(|&w| w != 0.0))
            .map(|g| TrainUnit {
                query_index: g.query_index,
                docs: g.docs.clone(),
                weights: g.weights.clone(),
            })
            .collect()
    } else {
        weights
            .per_query
            .iter()
            .enumerate()
            .filter(|(_, omega)| omega.iter().any(|&w| w != 0.0))
            .map(|(qi, omega)| TrainUnit {
                query_index: qi,
                docs: (0..omega.len() as u32).collect(),
                weights: omega.clone(),
            })
            .collect()
    }
}

fn unit_scores(model: &LinearModel, partition: &Partition, unit: &TrainUnit, out: &mut Vec<f64>) {
    let query = &partition.queries[unit.query_index];
    out.clear();
    out.extend(
        unit.docs
            .iter()
            .map(|&d| model.score_doc(query.doc_features(d as usize))),
    );
}

/// Rankings each pairwise loss holds fixed for one epoch, one per unit.
fn expectation_step(
    model: &LinearModel,
    partition: &Partition,
    units: &[TrainUnit],
) -> Vec<RankedList> {
    let mut scores = Vec::new();
    units
        .iter()
        .map(|u| {
            unit_scores(model, partition, u, &mut scores);
            rank_scores(0, &scores)
        })
        .collect()
}

fn total_loss(
    spec: LossSpec,
    model: &LinearModel,
    partition: &Partition,
    units: &[TrainUnit],
    rankings: Option<&[RankedList]>,
    inv_z: f64,
) -> f64 {
    let mut scores = Vec::new();
    let mut total = 0.0;
    for (i, unit) in units.iter().enumerate() {
        unit_scores(model, partition, unit, &mut scores);
        total += loss_value(spec, &scores, &unit.weights, rankings.map(|r| &r[i]));
    }
    total * inv_z
}

/// Trains a zero-initialized linear model by SGD over the weighted units.
/// Deterministic given the config seed. A divergence guard halves the
/// learning rate and replays the epoch (up to 5 times total) whenever the
/// epoch loss is non-finite or blows past its starting value; training
/// aborts if the guard runs out.
pub fn train(
    config: &TrainConfig,
    partition: &Partition,
    weights: &DocumentWeights,
) -> Result<TrainResult> {
    config.validate()?;
    let num_features = partition.queries.first().map_or(0, |q| q.num_features());
    let mut model = LinearModel::zeros(num_features);
    let units = build_units(weights);
    if units.is_empty() || weights.normalizer == 0.0 {
        return Ok(TrainResult {
            config: config.clone(),
            model,
            train_loss_trace: vec![0.0; config.epochs],
            validation_estimate: None,
        });
    }
    let inv_z = 1.0 / weights.normalizer;
    let needs_em = config.loss.needs_expectation_step();

    let initial_rankings = needs_em.then(|| expectation_step(&model, partition, &units));
    let initial_loss = total_loss(
        config.loss,
        &model,
        partition,
        &units,
        initial_rankings.as_deref(),
        inv_z,
    );
    // losses can sit at either sign, so the blow-up bound is additive
    let guard = initial_loss + 10.0 * initial_loss.abs().max(1.0);

    let mut trace = Vec::with_capacity(config.epochs);
    let mut halvings = 0u32;
    let mut scores = Vec::new();
    let mut grad = Vec::new();
    let mut epoch = 0;
    while epoch < config.epochs {
        let snapshot = model.clone();
        let lr = config.learning_rate
            * config.lr_decay.powi(epoch as i32)
            * 0.5f64.powi(halvings as i32);
        let rankings = needs_em.then(|| expectation_step(&model, partition, &units));

        let mut order: Vec<usize> = (0..units.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        for &ui in &order {
            let unit = &units[ui];
            unit_scores(&model, partition, unit, &mut scores);
            grad.resize(scores.len(), 0.0);
            loss_gradient(
                config.loss,
                &scores,
                &unit.weights,
                rankings.as_deref().map(|r| &r[ui]),
                &mut grad,
            );
            let query = &partition.queries[unit.query_index];
            let step = lr * inv_z;
            for (j, &doc) in unit.docs.iter().enumerate() {
                if grad[j] != 0.0 {
                    let row = query.doc_features(doc as usize);
                    for (w, &x) in model.weights.iter_mut().zip(row) {
                        *w -= step * grad[j] * x;
                    }
                }
            }
        }

        let loss = total_loss(config.loss, &model, partition, &units, rankings.as_deref(), inv_z);
        if !loss.is_finite() || loss > guard {
            model = snapshot;
            halvings += 1;
            if halvings > 5 {
                return Err(Error::Diverged(format!(
                    "loss {loss} still past {guard} after 5 learning-rate halvings"
                )));
            }
            continue;
        }
        trace.push(loss);
        epoch += 1;
    }

    Ok(TrainResult {
        config: config.clone(),
        model,
        train_loss_trace: trace,
        validation_estimate: None,
    })
}

/// Trains every config in the grid and keeps the one whose model minimizes
/// the counterfactual estimate on the validation log (clipping disabled).
/// Ties keep the earliest config.
pub fn tune(
    train_weights: &DocumentWeights,
    train_partition: &Partition,
    validation_log: &ClickLog,
    validation_partition: &Partition,
    grid: &[TrainConfig],
    spec: MetricSpec,
) -> Result<TrainResult> {
    if grid.is_empty() {
        return Err(Error::Config("tuning grid is empty".into()));
    }
    let mut validation_cache: Vec<(EstimatorConfig, DocumentWeights)> = Vec::new();
    let mut best: Option<TrainResult> = None;
    for config in grid {
        let mut result = train(config, train_partition, train_weights)?;
        let est_cfg = config.estimator.unclipped();
        if !validation_cache.iter().any(|(c, _)| *c == est_cfg) {
            let w = accumulate_weights(validation_log, validation_partition, &est_cfg)?;
            validation_cache.push((est_cfg, w));
        }
        let weights = &validation_cache.iter().find(|(c, _)| *c == est_cfg).unwrap().1;
        let estimate = estimate_loss(weights, &result.model, validation_partition, spec)?;
        result.validation_estimate = Some(estimate);
        let better = match &best {
            None => true,
            Some(b) => estimate < b.validation_estimate.unwrap(),
        };
        if better {
            best = Some(result);
        }
    }
    Ok(best.unwrap())
}

/// Picks the candidate whose model has the best counterfactual validation
/// estimate under one shared estimator (clipping disabled). Ties keep the
/// earliest candidate.
pub fn select_loss(
    candidates: &[TrainResult],
    validation_log: &ClickLog,
    validation_partition: &Partition,
    estimator: &EstimatorConfig,
    spec: MetricSpec,
) -> Result<TrainResult> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidates to select from".into()));
    }
    let weights = accumulate_weights(validation_log, validation_partition, &estimator.unclipped())?;
    let mut best: Option<TrainResult> = None;
    for candidate in candidates {
        let estimate = estimate_loss(&weights, &candidate.model, validation_partition, spec)?;
        let better = match &best {
            None => true,
            Some(b) => estimate < b.validation_estimate.unwrap(),
        };
        if better {
            let mut chosen = candidate.clone();
            chosen.validation_estimate = Some(estimate);
            best = Some(chosen);
        }
    }
    Ok(best.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Query};
    use crate::ranking::evaluate;
    use crate::simulate::{
        simulate_clicks, Click, ClickModel, Interaction, LoggingPolicy, ObservationModel,
    };

    fn supervised_config(loss: LossSpec, lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            loss,
            estimator: EstimatorConfig::new(EstimatorKind::Naive, None, false).unwrap(),
            learning_rate: lr,
            epochs,
            lr_decay: 1.0,
            seed: 4,
        }
    }

    #[test]
    fn zero_weights_leave_model_unchanged() {
        let ds = generate_synthetic(3, 4, 2, 0.0, 0).unwrap();
        let weights = DocumentWeights::supervised(&ds.train);
        assert_eq!(weights.total_weight(), 0.0);
        let config = supervised_config(LossSpec::ArpLinearBound, 0.1, 5);
        let result = train(&config, &ds.train, &weights).unwrap();
        assert_eq!(result.model.weights, vec![0.0; 2]);
        assert_eq!(result.train_loss_trace, vec![0.0; 5]);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = generate_synthetic(6, 5, 3, 0.4, 1).unwrap();
        let weights = DocumentWeights::supervised(&ds.train);
        let config = supervised_config(LossSpec::LambdaDcg, 0.05, 10);
        let a = train(&config, &ds.train, &weights).unwrap();
        let b = train(&config, &ds.train, &weights).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.train_loss_trace, b.train_loss_trace);
    }

    #[test]
    fn unit_propensity_log_reproduces_supervised_run() {
        // one interaction per query clicking exactly the relevant docs at
        // propensity 1 builds the same weights as direct supervision
        let queries = vec![
            Query::new(0, vec![vec![1.0, 0.2], vec![0.1, 0.8], vec![0.4, 0.4]], vec![4, 0, 0])
                .unwrap(),
            Query::new(1, vec![vec![0.0, 1.0], vec![0.9, 0.1], vec![0.2, 0.2]], vec![0, 3, 0])
                .unwrap(),
        ];
        let partition = Partition { queries };
        let policy =
            LoggingPolicy::new(LinearModel::new(vec![1.0, 1.0]), 3, false).unwrap();
        let interactions = vec![
            Interaction {
                query_id: 0,
                sampled_doc: None,
                clicks: vec![Click { doc: 0, displayed_rank: 1 }],
            },
            Interaction {
                query_id: 1,
                sampled_doc: None,
                clicks: vec![Click { doc: 1, displayed_rank: 1 }],
            },
        ];
        let log = ClickLog {
            interactions,
            policy,
            observation: ObservationModel::new(3).unwrap(),
            seed: 0,
        };
        let cfg = EstimatorConfig::new(EstimatorKind::Naive, None, false).unwrap();
        let from_log = accumulate_weights(&log, &partition, &cfg).unwrap();
        let supervised = DocumentWeights::supervised(&partition);
        assert_eq!(from_log.per_query, supervised.per_query);
        assert_eq!(from_log.normalizer, supervised.normalizer);

        let config = supervised_config(LossSpec::ArpLogBound, 0.1, 8);
        let a = train(&config, &partition, &from_log).unwrap();
        let b = train(&config, &partition, &supervised).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.train_loss_trace, b.train_loss_trace);
    }

    #[test]
    fn convex_losses_descend_at_small_rate() {
        let ds = generate_synthetic(5, 6, 3, 0.33, 9).unwrap();
        let weights = DocumentWeights::supervised(&ds.train);
        for loss in [LossSpec::ArpLinearBound, LossSpec::ArpLogBound] {
            let config = supervised_config(loss, 1e-3, 20);
            let result = train(&config, &ds.train, &weights).unwrap();
            for pair in result.train_loss_trace.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-9, "{loss}: {} -> {}", pair[0], pair[1]);
            }
        }
    }

    #[test]
    fn supervised_training_reaches_random_search_skyline() {
        let ds = generate_synthetic(30, 12, 3, 0.3, 2).unwrap();
        let weights = DocumentWeights::supervised(&ds.train);
        let mut trained_arp = f64::INFINITY;
        for lr in [0.02, 0.05, 0.1, 0.2] {
            let mut config = supervised_config(LossSpec::ArpLinearBound, lr, 60);
            config.lr_decay = 0.98;
            let trained = train(&config, &ds.train, &weights).unwrap();
            let arp = evaluate(&trained.model, &ds.train, MetricSpec::Arp).unwrap();
            trained_arp = trained_arp.min(arp);
        }

        // 100k random probes of the 3-dim weight space optimize the metric
        // directly, so they upper-bound what any surrogate should concede
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut best = f64::INFINITY;
        for _ in 0..100_000 {
            let w: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let arp = evaluate(&LinearModel::new(w), &ds.train, MetricSpec::Arp).unwrap();
            if arp < best {
                best = arp;
            }
        }
        assert!(
            trained_arp <= best * 1.05,
            "trained ARP {trained_arp} vs random-search best {best}"
        );
    }

    #[test]
    fn runaway_learning_rate_aborts() {
        let ds = generate_synthetic(4, 5, 3, 0.4, 3).unwrap();
        let weights = DocumentWeights::supervised(&ds.train);
        let config = supervised_config(LossSpec::ArpLogBound, 1e13, 4);
        assert!(matches!(train(&config, &ds.train, &weights), Err(Error::Diverged(_))));
    }

    fn validation_setup() -> (crate::data::Dataset, ClickLog) {
        let ds = generate_synthetic(12, 8, 3, 0.25, 5).unwrap();
        let policy = LoggingPolicy::new(LinearModel::new(vec![0.2, -0.1, 0.3]), 4, true).unwrap();
        let obs = ObservationModel::new(4).unwrap();
        let log = simulate_clicks(
            &ds.validation,
            &policy,
            &obs,
            &ClickModel::default(),
            30_000,
            41,
        )
        .unwrap();
        (ds, log)
    }

    #[test]
    fn tune_singleton_grid_returns_it() {
        let (ds, vlog) = validation_setup();
        let weights = DocumentWeights::supervised(&ds.train);
        let config = supervised_config(LossSpec::ArpLinearBound, 0.05, 10);
        let result = tune(
            &weights,
            &ds.train,
            &vlog,
            &ds.validation,
            std::slice::from_ref(&config),
            MetricSpec::Arp,
        )
        .unwrap();
        assert_eq!(result.config, config);
        assert!(result.validation_estimate.is_some());
    }

    #[test]
    fn tune_breaks_ties_by_grid_order() {
        let (ds, vlog) = validation_setup();
        let weights = DocumentWeights::supervised(&ds.train);
        // rate 0 trains the same (all-zero) model regardless of seed, so both
        // candidates estimate identically and the first one must win the tie
        let mut a = supervised_config(LossSpec::ArpLinearBound, 0.0, 10);
        a.seed = 100;
        let mut b = a.clone();
        b.seed = 200;
        let grid = vec![a, b];
        let result = tune(&weights, &ds.train, &vlog, &ds.validation, &grid, MetricSpec::Arp)
            .unwrap();
        assert_eq!(result.config.seed, 100);
    }

    #[test]
    fn tune_prefers_learning_over_frozen_model() {
        let (ds, vlog) = validation_setup();
        let weights = DocumentWeights::supervised(&ds.train);
        // selection must run on a corrected estimator: the raw click count
        // rewards whatever the logging policy already showed near the top
        let aware = EstimatorConfig::new(EstimatorKind::PolicyAware, None, false).unwrap();
        let mut frozen = supervised_config(LossSpec::ArpLinearBound, 0.0, 15);
        frozen.estimator = aware.clone();
        let mut live = supervised_config(LossSpec::ArpLinearBound, 0.05, 15);
        live.estimator = aware;
        let grid = vec![frozen, live.clone()];
        let result = tune(&weights, &ds.train, &vlog, &ds.validation, &grid, MetricSpec::Arp)
            .unwrap();
        assert_eq!(result.config, live);
    }

    #[test]
    fn select_loss_single_candidate_is_identity() {
        let (ds, vlog) = validation_setup();
        let weights = DocumentWeights::supervised(&ds.train);
        let config = supervised_config(LossSpec::ArpLinearBound, 0.05, 10);
        let result = train(&config, &ds.train, &weights).unwrap();
        let estimator = EstimatorConfig::new(EstimatorKind::PolicyAware, None, true).unwrap();
        let chosen = select_loss(
            std::slice::from_ref(&result),
            &vlog,
            &ds.validation,
            &estimator,
            MetricSpec::Arp,
        )
        .unwrap();
        assert_eq!(chosen.model, result.model);
    }

    #[test]
    fn select_loss_separates_trained_from_untrained() {
        let (ds, vlog) = validation_setup();
        let weights = DocumentWeights::supervised(&ds.train);
        let config = supervised_config(LossSpec::ArpLinearBound, 0.05, 30);
        let trained = train(&config, &ds.train, &weights).unwrap();
        let untrained = TrainResult {
            config: config.clone(),
            model: LinearModel::zeros(3),
            train_loss_trace: vec![],
            validation_estimate: None,
        };
        let estimator = EstimatorConfig::new(EstimatorKind::PolicyAware, None, true).unwrap();
        // order the weaker candidate first so selection must overturn it
        let chosen = select_loss(
            &[untrained, trained.clone()],
            &vlog,
            &ds.validation,
            &estimator,
            MetricSpec::Arp,
        )
        .unwrap();
        assert_eq!(chosen.model, trained.model);
    }

    #[test]
    fn select_loss_ties_keep_first() {
        let (ds, vlog) = validation_setup();
        let weights = DocumentWeights::supervised(&ds.train);
        let mut a = train(
            &supervised_config(LossSpec::ArpLinearBound, 0.05, 10),
            &ds.train,
            &weights,
        )
        .unwrap();
        a.validation_estimate = None;
        let mut b = a.clone();
        b.config.seed = 999;
        let estimator = EstimatorConfig::new(EstimatorKind::PolicyOblivious, None, true).unwrap();
        let chosen =
            select_loss(&[a.clone(), b], &vlog, &ds.validation, &estimator, MetricSpec::Arp)
                .unwrap();
        assert_eq!(chosen.config.seed, a.config.seed);
    }
}
