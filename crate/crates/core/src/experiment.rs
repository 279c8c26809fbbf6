//! End-to-end experiments: config resolution, dense training, the TLC run and
//! report emission.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    derive_seed, generate, load_csv, load_idx, split, DataKind, Dataset, LabelColumn, SeedPurpose, SplitFractions,
    Splits,
};
use crate::error::{Result, TlcError};
use crate::metrics::{evaluate, Evaluation, KlComparison};
use crate::nn::{ActivationKind, NetSpec, SequentialNet};
use crate::pipeline::{calibration_subset, tlc_run_observed, CompressionReport, RetrainMode, TlcConfig};
use crate::ranking::{compare_substitutions, RankCriterion};
use crate::store::{count_flops, save_checkpoint, CheckpointMetadata, CostSummary};
use crate::train::{train_model, TrainHistory, TrainSchedule};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    Generated {
        kind: DataKind,
        n: usize,
        classes: usize,
        noise: f64,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        has_header: bool,
        /// Defaults to the last column.
        #[serde(default)]
        label_column: Option<usize>,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub hidden: Vec<usize>,
    pub activation: ActivationKind,
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f32,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
}

fn default_leaky_slope() -> f32 {
    0.01
}

fn default_true() -> bool {
    true
}

/// Training hyperparameters; the shuffle seed is derived from the global seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub milestones: Vec<usize>,
    pub drop_factor: f32,
}

impl ScheduleSpec {
    pub fn with_seed(&self, seed: u64) -> TrainSchedule {
        TrainSchedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            milestones: self.milestones.clone(),
            drop_factor: self.drop_factor,
            seed,
        }
    }
}

fn default_calibration_batches() -> usize {
    100
}

fn default_criterion() -> RankCriterion {
    RankCriterion::Tlc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlcSpec {
    pub theta: f64,
    pub retrain: RetrainMode,
    #[serde(default = "default_calibration_batches")]
    pub calibration_batches: usize,
    #[serde(default)]
    pub max_outer_iterations: Option<usize>,
    #[serde(default = "default_criterion")]
    pub criterion: RankCriterion,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    #[serde(default)]
    pub kl_comparisons: bool,
    #[serde(default)]
    pub checkpoints: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub split: SplitFractions,
    pub network: NetworkSpec,
    pub schedule: ScheduleSpec,
    pub tlc: TlcSpec,
    #[serde(default)]
    pub report: ReportOptions,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| TlcError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TlcError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| TlcError::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.seeds().schedule_for(self).validate()?;
        self.tlc_config().validate()?;
        if self.network.hidden.contains(&0) {
            return Err(TlcError::Config("hidden widths must be >= 1".into()));
        }
        if let DatasetSpec::Generated { n, classes, noise, kind } = &self.dataset {
            if *n < classes * 10 || *classes < 2 || !(*noise >= 0.0) {
                return Err(TlcError::Config(format!("invalid {kind:?} dataset parameters")));
            }
        }
        Ok(())
    }

    /// Every default made explicit.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut c = self.clone();
        if c.tlc.max_outer_iterations.is_none() {
            c.tlc.max_outer_iterations = Some(c.network.hidden.len());
        }
        c
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_global(self.seed)
    }

    pub fn tlc_config(&self) -> TlcConfig {
        let seeds = self.seeds();
        TlcConfig {
            theta: self.tlc.theta,
            retrain: self.tlc.retrain,
            calibration_batches: self.tlc.calibration_batches,
            max_outer_iterations: self.tlc.max_outer_iterations,
            criterion: self.tlc.criterion,
            schedule: seeds.schedule_for(self),
            seed: seeds.calibration,
        }
    }
}

/// Per-purpose seeds fanned out from the global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub global: u64,
    pub data_gen: u64,
    pub split: u64,
    pub init: u64,
    pub shuffle: u64,
    pub calibration: u64,
}

impl Seeds {
    pub fn from_global(global: u64) -> Self {
        Seeds {
            global,
            data_gen: derive_seed(global, SeedPurpose::DataGen),
            split: derive_seed(global, SeedPurpose::Split),
            init: derive_seed(global, SeedPurpose::Init),
            shuffle: derive_seed(global, SeedPurpose::Shuffle),
            calibration: derive_seed(global, SeedPurpose::Calibration),
        }
    }

    fn schedule_for(&self, config: &ExperimentConfig) -> TrainSchedule {
        config.schedule.with_seed(self.shuffle)
    }
}

pub fn load_dataset(spec: &DatasetSpec, seeds: &Seeds) -> Result<Dataset> {
    match spec {
        DatasetSpec::Generated { kind, n, classes, noise } => generate(*kind, *n, *classes, *noise, seeds.data_gen),
        DatasetSpec::Csv {
            path,
            has_header,
            label_column,
        } => load_csv(
            path,
            *has_header,
            label_column.map_or(LabelColumn::Last, LabelColumn::Index),
        ),
        DatasetSpec::Idx { images, labels } => load_idx(images, labels),
    }
}

/// Data splits and an untrained network, as determined by the config.
#[derive(Debug)]
pub struct Prepared {
    pub splits: Splits,
    pub model: SequentialNet,
    pub seeds: Seeds,
    pub schedule: TrainSchedule,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let seeds = config.seeds();
    let data = load_dataset(&config.dataset, &seeds).map_err(|e| e.in_stage("loading dataset"))?;
    let splits = split(&data, config.split, seeds.split).map_err(|e| e.in_stage("splitting dataset"))?;
    let spec = NetSpec {
        input_dim: data.dim(),
        hidden: config.network.hidden.clone(),
        class_count: data.class_count,
        activation: config.network.activation,
        leaky_slope: config.network.leaky_slope,
        batch_norm: config.network.batch_norm,
    };
    let model = SequentialNet::new(&spec, &mut ChaCha8Rng::seed_from_u64(seeds.init))
        .map_err(|e| e.in_stage("building network"))?;
    Ok(Prepared {
        splits,
        model,
        seeds,
        schedule: seeds.schedule_for(config),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub fingerprint: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub input_dim: usize,
    pub class_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub val: Evaluation,
    pub test: Evaluation,
    pub cost: CostSummary,
}

/// Everything measured in a run. Identical configs yield identical values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMetrics {
    pub dataset: SplitSummary,
    pub dense: ModelMetrics,
    pub dense_training: TrainHistory,
    pub compression: CompressionReport,
    #[serde(rename = "final")]
    pub final_model: ModelMetrics,
    pub kl_comparisons: Vec<KlComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub elapsed_seconds: f64,
    pub parallel: bool,
    pub crate_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub metrics: ExperimentMetrics,
    pub run_info: RunInfo,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub dense: SequentialNet,
    pub compressed: SequentialNet,
    pub splits: Splits,
    /// Retrained model of every outer iteration; empty unless
    /// `report.checkpoints` is set.
    pub iteration_models: Vec<SequentialNet>,
}

fn model_metrics(model: &SequentialNet, splits: &Splits) -> Result<ModelMetrics> {
    Ok(ModelMetrics {
        val: evaluate(model, &splits.val)?,
        test: evaluate(model, &splits.test)?,
        cost: count_flops(model),
    })
}

/// Trains the dense model and runs TLC on it, without touching the disk.
pub fn execute(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let started = Instant::now();
    let config = config.resolved();
    let prepared = prepare(&config)?;
    let splits = prepared.splits;
    let (dense, history) = train_model(&prepared.model, &splits.train, Some(&splits.val), &prepared.schedule)
        .map_err(|e| e.in_stage("dense training"))?;
    let dense_metrics = model_metrics(&dense, &splits).map_err(|e| e.in_stage("dense evaluation"))?;

    let tlc_config = config.tlc_config();
    let mut iteration_models = Vec::new();
    let (compressed, mut compression) = tlc_run_observed(&dense, &splits, &tlc_config, |_, m| {
        if config.report.checkpoints {
            iteration_models.push(m.clone());
        }
    })
    .map_err(|e| e.in_stage("tlc run"))?;

    let mut kl = Vec::new();
    if config.report.kl_comparisons {
        let calib = calibration_subset(
            &splits.train,
            tlc_config.calibration_batches,
            tlc_config.schedule.batch_size,
            tlc_config.seed,
        );
        let order = compression
            .iterations
            .first()
            .map(|it| it.ranking.removable().map(|e| e.layer_id).collect::<Vec<_>>())
            .unwrap_or_default();
        for id in order {
            kl.extend(
                compare_substitutions(&dense, id, &splits.val, &calib).map_err(|e| e.in_stage("KL comparison"))?,
            );
        }
        compression.kl_comparisons = kl.clone();
    }
    let final_metrics = model_metrics(&compressed, &splits).map_err(|e| e.in_stage("final evaluation"))?;

    let data_summary = SplitSummary {
        fingerprint: splits.train.fingerprint(),
        train: splits.train.len(),
        val: splits.val.len(),
        test: splits.test.len(),
        input_dim: splits.train.dim(),
        class_count: splits.train.class_count,
    };
    let report = ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        seeds: prepared.seeds,
        metrics: ExperimentMetrics {
            dataset: data_summary,
            dense: dense_metrics,
            dense_training: history,
            compression,
            final_model: final_metrics,
            kl_comparisons: kl,
        },
        run_info: RunInfo {
            elapsed_seconds: started.elapsed().as_secs_f64(),
            parallel: crate::par::is_parallel(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        },
    };
    Ok(ExperimentOutcome {
        report,
        dense,
        compressed,
        splits,
        iteration_models,
    })
}

pub const REPORT_FILE: &str = "report.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const DENSE_CHECKPOINT_FILE: &str = "dense.tlck";
pub const FINAL_CHECKPOINT_FILE: &str = "final.tlck";

/// File name of the retrained model of outer iteration `index`.
pub fn iteration_checkpoint_file(index: usize) -> String {
    format!("iteration_{index}.tlck")
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| TlcError::io(path, e))
}

/// Runs an experiment and writes the report, the resolved config and the dense
/// and final checkpoints into `out_dir`, plus one checkpoint per outer
/// iteration when `report.checkpoints` is set.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| TlcError::io(out_dir, e))?;
    let outcome = execute(config)?;
    let report = &outcome.report;
    write(&out_dir.join(RESOLVED_CONFIG_FILE), report.config.to_toml()?)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| TlcError::Serde(e.to_string()))?;
    write(&out_dir.join(REPORT_FILE), json)?;

    let meta = CheckpointMetadata {
        schedule: Some(report.config.schedule.with_seed(report.seeds.shuffle)),
        seed: Some(report.seeds.global),
        dataset_fingerprint: Some(report.metrics.dataset.fingerprint.clone()),
        notes: Default::default(),
    };
    save_checkpoint(&outcome.dense, &meta, &out_dir.join(DENSE_CHECKPOINT_FILE))?;
    save_checkpoint(&outcome.compressed, &meta, &out_dir.join(FINAL_CHECKPOINT_FILE))?;
    for (i, model) in outcome.iteration_models.iter().enumerate() {
        save_checkpoint(model, &meta, &out_dir.join(iteration_checkpoint_file(i)))?;
    }
    Ok(outcome)
}

/// The metrics section of a written report, for reproducibility checks.
pub fn metrics_json(report: &ExperimentReport) -> Result<String> {
    serde_json::to_string_pretty(&report.metrics).map_err(|e| TlcError::Serde(e.to_string()))
}
