//! End-to-end experiment pipeline: load or generate a dataset, bootstrap a
//! production ranker, simulate click logs, accumulate per-estimator click
//! weights, tune each loss over a learning-rate grid, and report true test
//! metrics as a long-format table.
//!
//! Everything downstream of the config is deterministic: per-stage seeds
//! are derived by hashing the base seed with a stage tag, so rerunning the
//! same resolved config reproduces `results.csv` byte for byte at any
//! thread count.

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{generate_synthetic, load_dataset, Dataset};
use crate::estimate::{accumulate_weights, DocumentWeights, EstimatorConfig, EstimatorKind};
use crate::loss::LossSpec;
use crate::ranking::{evaluate, MetricSpec};
use crate::simulate::{
    simulate_clicks, train_production_ranker, ClickModel, LoggingPolicy, ObservationModel,
};
use crate::train::{select_loss, train, tune, TrainConfig, TrainResult};
use crate::{Error, Result};

/// Share of the logged interaction budget replayed on the validation split
/// for estimator-based model selection.
pub const VALIDATION_LOG_SHARE: f64 = 0.15;

fn default_name() -> String {
    "run".into()
}

fn default_true() -> bool {
    true
}

fn default_production_fraction() -> f64 {
    0.01
}

fn default_lr_decay() -> f64 {
    1.0
}

fn default_tune_metric() -> MetricSpec {
    MetricSpec::Arp
}

fn default_metrics() -> Vec<MetricSpec> {
    vec![MetricSpec::Arp]
}

/// Dataset source: the literal string "synthetic" with a generation
/// recipe, or a directory holding `train`, `validation` and `test` splits
/// as `<split>.txt` or `<split>.txt.gz`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: String,
    pub num_features: usize,
    #[serde(default)]
    pub num_queries: Option<usize>,
    #[serde(default)]
    pub docs_per_query: Option<usize>,
    #[serde(default)]
    pub relevant_fraction: Option<f64>,
    /// Generation seed for the synthetic source; defaults to a value
    /// derived from the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Rescale every feature to [0, 1] using training-split bounds.
    #[serde(default)]
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    /// Display and observation cutoff; also the randomized slot.
    pub cutoff_k: u32,
    #[serde(default = "default_true")]
    pub randomize: bool,
    /// Interactions to simulate on the training split.
    pub num_clicks: u64,
    /// Click exactly on observed relevant documents, never elsewhere.
    #[serde(default)]
    pub noise_free: bool,
    /// Fraction of training queries used to bootstrap the production
    /// ranker.
    #[serde(default = "default_production_fraction")]
    pub production_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    pub kinds: Vec<EstimatorKind>,
    /// Propensity floor applied during training only.
    #[serde(default)]
    pub clip_threshold: Option<f64>,
    #[serde(default)]
    pub self_normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub kinds: Vec<LossSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub learning_rates: Vec<f64>,
    pub epochs: usize,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Metric the tuner minimizes on the validation estimate.
    #[serde(default = "default_tune_metric")]
    pub tune_metric: MetricSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// True metrics evaluated on the test split, one CSV row each.
    #[serde(default = "default_metrics")]
    pub metrics: Vec<MetricSpec>,
    /// Also train on the true labels and report the same metrics.
    #[serde(default = "default_true")]
    pub skyline: bool,
    /// Also pick one loss per estimator by validation estimate.
    #[serde(default)]
    pub select_loss: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { metrics: default_metrics(), skyline: true, select_loss: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Cutoffs to sweep; empty means the single simulation cutoff.
    #[serde(default)]
    pub cutoff_k: Vec<u32>,
    /// Interaction counts to sweep; empty means the single count.
    #[serde(default)]
    pub num_clicks: Vec<u64>,
}

/// A full experiment description, deserializable from one config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Base seed every stage seed is derived from.
    #[serde(default)]
    pub seed: u64,
    pub data: DataSection,
    pub simulation: SimulationSection,
    pub estimators: EstimatorSection,
    pub losses: LossSection,
    pub training: TrainingSection,
    #[serde(default)]
    pub report: ReportSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.name.is_empty() || self.name.contains([',', '\n', '\r']) {
            return bad(format!("experiment name {:?} must be non-empty and comma-free", self.name));
        }
        if self.data.num_features == 0 {
            return bad("num_features must be >= 1".into());
        }
        if self.data.source == "synthetic" {
            for (field, missing) in [
                ("num_queries", self.data.num_queries.is_none()),
                ("docs_per_query", self.data.docs_per_query.is_none()),
                ("relevant_fraction", self.data.relevant_fraction.is_none()),
            ] {
                if missing {
                    return bad(format!("synthetic data needs data.{field}"));
                }
            }
            let f = self.data.relevant_fraction.unwrap();
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("relevant_fraction {f} outside [0, 1]"));
            }
        }
        if self.simulation.cutoff_k == 0 {
            return bad("simulation cutoff_k must be >= 1".into());
        }
        if !(self.simulation.production_fraction > 0.0
            && self.simulation.production_fraction <= 1.0)
        {
            return bad(format!(
                "production_fraction {} outside (0, 1]",
                self.simulation.production_fraction
            ));
        }
        if self.estimators.kinds.is_empty() {
            return bad("at least one estimator kind is required".into());
        }
        if self.losses.kinds.is_empty() {
            return bad("at least one loss is required".into());
        }
        if self.training.learning_rates.is_empty() {
            return bad("at least one learning rate is required".into());
        }
        for &lr in &self.training.learning_rates {
            if !lr.is_finite() || lr < 0.0 {
                return bad(format!("learning rate {lr} must be finite and >= 0"));
            }
        }
        if self.training.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.training.lr_decay > 0.0 && self.training.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} outside (0, 1]", self.training.lr_decay));
        }
        if self.report.metrics.is_empty() {
            return bad("at least one report metric is required".into());
        }
        for &k in &self.sweep.cutoff_k {
            if k == 0 {
                return bad("swept cutoff_k values must be >= 1".into());
            }
        }
        // estimator construction validates the clip threshold range
        EstimatorConfig::new(
            self.estimators.kinds[0],
            self.estimators.clip_threshold,
            self.estimators.self_normalize,
        )?;
        Ok(())
    }

    fn cutoffs(&self) -> Vec<u32> {
        if self.sweep.cutoff_k.is_empty() {
            vec![self.simulation.cutoff_k]
        } else {
            self.sweep.cutoff_k.clone()
        }
    }

    fn click_counts(&self) -> Vec<u64> {
        if self.sweep.num_clicks.is_empty() {
            vec![self.simulation.num_clicks]
        } else {
            self.sweep.num_clicks.clone()
        }
    }
}

/// Stage seed: the base seed hashed with a human-readable stage tag.
pub fn derived_seed(base: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// One long-format result: a single metric value for one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub estimator: String,
    pub loss: String,
    pub k: u32,
    pub num_clicks: u64,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// Selected model weights for one (run point, estimator, loss) cell,
/// alongside the validation score that selected them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub run_id: String,
    pub estimator: String,
    pub loss: String,
    pub weights: Vec<f64>,
    pub validation_score: Option<f64>,
}

/// Everything a run produces: the resolved config, the result table and
/// the selected models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub rows: Vec<ResultRow>,
    pub models: Vec<ModelRecord>,
}

impl ExperimentReport {
    /// The result table in CSV, floats printed in shortest round-trip
    /// form.
    pub fn results_csv(&self) -> String {
        let mut out = String::from("run_id,estimator,loss,k,num_clicks,seed,metric,value\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.run_id, r.estimator, r.loss, r.k, r.num_clicks, r.seed, r.metric, r.value
            )
            .expect("writing to a String cannot fail");
        }
        out
    }

    pub fn run_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Writes `results.csv` and `run.json` into `out_dir`, creating it if
/// needed; returns both paths.
pub fn write_report(report: &ExperimentReport, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("results.csv");
    let json_path = out_dir.join("run.json");
    std::fs::write(&csv_path, report.results_csv())?;
    std::fs::write(&json_path, report.run_json()?)?;
    Ok((csv_path, json_path))
}

fn load_or_generate(config: &ExperimentConfig) -> Result<Dataset> {
    let data = &config.data;
    let mut dataset = if data.source == "synthetic" {
        generate_synthetic(
            data.num_queries.unwrap(),
            data.docs_per_query.unwrap(),
            data.num_features,
            data.relevant_fraction.unwrap(),
            data.seed.unwrap_or_else(|| derived_seed(config.seed, "dataset")),
        )?
    } else {
        let dir = Path::new(&data.source);
        let split = |stem: &str| -> Result<PathBuf> {
            for name in [format!("{stem}.txt"), format!("{stem}.txt.gz")] {
                let p = dir.join(&name);
                if p.exists() {
                    return Ok(p);
                }
            }
            Err(Error::Config(format!("no {stem}.txt or {stem}.txt.gz under {}", dir.display())))
        };
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        load_dataset(
            &name,
            data.num_features,
            &split("train")?,
            &split("validation")?,
            &split("test")?,
        )?
    };
    if data.normalize {
        dataset.normalize_min_max();
    }
    Ok(dataset)
}

/// Supervised skyline for one loss: trains on the true labels at every
/// learning rate and keeps the model with the best true validation metric
/// (first grid entry wins ties).
fn best_supervised(
    loss: LossSpec,
    supervised: &DocumentWeights,
    dataset: &Dataset,
    training: &TrainingSection,
) -> Result<TrainResult> {
    let mut best: Option<(f64, TrainResult)> = None;
    for &lr in &training.learning_rates {
        let config = TrainConfig {
            loss,
            estimator: EstimatorConfig::new(EstimatorKind::Naive, None, false)?,
            learning_rate: lr,
            epochs: training.epochs,
            lr_decay: training.lr_decay,
            seed: training.seed,
        };
        let mut result = train(&config, &dataset.train, supervised)?;
        let score = evaluate(&result.model, &dataset.validation, training.tune_metric)?;
        result.validation_estimate = Some(score);
        match &best {
            Some((s, _)) if score >= *s => {}
            _ => best = Some((score, result)),
        }
    }
    Ok(best.expect("learning_rates is non-empty").1)
}

fn push_model_rows(
    rows: &mut Vec<ResultRow>,
    models: &mut Vec<ModelRecord>,
    report: &ReportSection,
    dataset: &Dataset,
    result: &TrainResult,
    run_id: &str,
    estimator: &str,
    loss: &str,
    k: u32,
    num_clicks: u64,
    seed: u64,
) -> Result<()> {
    for &metric in &report.metrics {
        rows.push(ResultRow {
            run_id: run_id.into(),
            estimator: estimator.into(),
            loss: loss.into(),
            k,
            num_clicks,
            seed,
            metric: metric.to_string(),
            value: evaluate(&result.model, &dataset.test, metric)?,
        });
    }
    models.push(ModelRecord {
        run_id: run_id.into(),
        estimator: estimator.into(),
        loss: loss.into(),
        weights: result.model.weights.clone(),
        validation_score: result.validation_estimate,
    });
    Ok(())
}

fn run_pipeline(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let dataset = load_or_generate(config)?;
    info!(
        "dataset {}: {} train / {} validation / {} test queries",
        dataset.name,
        dataset.train.num_queries(),
        dataset.validation.num_queries(),
        dataset.test.num_queries()
    );
    let production = train_production_ranker(
        &dataset,
        config.simulation.production_fraction,
        derived_seed(config.seed, "production"),
    )?;
    let production_arp = evaluate(&production, &dataset.test, MetricSpec::Arp)?;
    info!("production ranker test arp {production_arp}");
    let click_model = if config.simulation.noise_free {
        ClickModel::noise_free()
    } else {
        ClickModel::default()
    };
    let supervised = DocumentWeights::supervised(&dataset.train);

    let mut rows = Vec::new();
    let mut models = Vec::new();
    for &k in &config.cutoffs() {
        let policy = LoggingPolicy::new(production.clone(), k, config.simulation.randomize)?;
        let obs = ObservationModel::new(k)?;
        for &num_clicks in &config.click_counts() {
            let run_id = format!("{}-k{k}-n{num_clicks}", config.name);
            let train_log = simulate_clicks(
                &dataset.train,
                &policy,
                &obs,
                &click_model,
                num_clicks as usize,
                derived_seed(config.seed, &format!("train-log-k{k}-n{num_clicks}")),
            )?;
            let validation_clicks = (num_clicks as f64 * VALIDATION_LOG_SHARE).ceil() as usize;
            let validation_log = simulate_clicks(
                &dataset.validation,
                &policy,
                &obs,
                &click_model,
                validation_clicks,
                derived_seed(config.seed, &format!("validation-log-k{k}-n{num_clicks}")),
            )?;
            info!(
                "{run_id}: {} train clicks over {} interactions, {} validation clicks",
                train_log.num_clicks(),
                num_clicks,
                validation_log.num_clicks()
            );

            if config.report.skyline {
                for &loss in &config.losses.kinds {
                    let best = best_supervised(loss, &supervised, &dataset, &config.training)?;
                    push_model_rows(
                        &mut rows,
                        &mut models,
                        &config.report,
                        &dataset,
                        &best,
                        &run_id,
                        "skyline",
                        &loss.to_string(),
                        k,
                        num_clicks,
                        config.seed,
                    )?;
                }
            }

            for &kind in &config.estimators.kinds {
                let estimator = EstimatorConfig::new(
                    kind,
                    config.estimators.clip_threshold,
                    config.estimators.self_normalize,
                )?;
                let train_weights = accumulate_weights(&train_log, &dataset.train, &estimator)?;
                let mut tuned = Vec::new();
                for &loss in &config.losses.kinds {
                    let grid: Vec<TrainConfig> = config
                        .training
                        .learning_rates
                        .iter()
                        .map(|&lr| TrainConfig {
                            loss,
                            estimator: estimator.clone(),
                            learning_rate: lr,
                            epochs: config.training.epochs,
                            lr_decay: config.training.lr_decay,
                            seed: config.training.seed,
                        })
                        .collect();
                    let best = tune(
                        &train_weights,
                        &dataset.train,
                        &validation_log,
                        &dataset.validation,
                        &grid,
                        config.training.tune_metric,
                    )?;
                    push_model_rows(
                        &mut rows,
                        &mut models,
                        &config.report,
                        &dataset,
                        &best,
                        &run_id,
                        &kind.to_string(),
                        &loss.to_string(),
                        k,
                        num_clicks,
                        config.seed,
                    )?;
                    tuned.push(best);
                }
                if config.report.select_loss {
                    let chosen = select_loss(
                        &tuned,
                        &validation_log,
                        &dataset.validation,
                        &estimator,
                        config.training.tune_metric,
                    )?;
                    let label = format!("selected:{}", chosen.config.loss);
                    push_model_rows(
                        &mut rows,
                        &mut models,
                        &config.report,
                        &dataset,
                        &chosen,
                        &run_id,
                        &kind.to_string(),
                        &label,
                        k,
                        num_clicks,
                        config.seed,
                    )?;
                }
            }
        }
    }
    Ok(ExperimentReport { config: config.clone(), rows, models })
}

/// Runs the full pipeline. `threads` bounds the worker pool; the result is
/// identical at any thread count, so the bound only affects speed.
pub fn run_experiment(
    config: &ExperimentConfig,
    threads: Option<usize>,
) -> Result<ExperimentReport> {
    match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(format!("cannot build a {t}-thread pool: {e}")))?
            .install(|| run_pipeline(config)),
        None => run_pipeline(config),
    }
}
