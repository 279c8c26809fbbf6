//! The iterative remove-and-retrain driver.
//!
//! Each outer iteration ranks the layers of the last accepted model once, then
//! consumes that ranking greedily: every candidate removal is committed, and
//! the sweep stops right after the first candidate whose validation accuracy
//! falls below that of the previously committed model. The result is
//! retrained; if its validation accuracy still clears `θ · A_init` it becomes
//! the new accepted model, otherwise the run ends and the last accepted model
//! is returned.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collapse::{collapse_and_recalibrate, ensure_statistics, partition_neurons, refresh_empirical_stats};
use crate::data::{Dataset, Splits};
use crate::error::{Result, TlcError};
use crate::metrics::{evaluate, CollapseMode, KlComparison};
use crate::nn::{LayerId, SequentialNet};
use crate::ranking::{rank_layers, rank_layers_baseline, LayerRanking, RankCriterion};
use crate::store::{count_flops, CostSummary};
use crate::tensor::Matrix;
use crate::train::{train_model, TrainSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    /// Rerun the full training schedule after each removal round.
    Full,
    /// A short run at the schedule's final learning rate.
    Finetune { epochs: usize },
}

fn default_calibration_batches() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlcConfig {
    /// Relative validation-accuracy floor.
    pub theta: f64,
    pub retrain: RetrainMode,
    /// Calibration subset size in batches of `schedule.batch_size`, drawn
    /// from the training split.
    #[serde(default = "default_calibration_batches")]
    pub calibration_batches: usize,
    /// Defaults to the number of hidden layers.
    #[serde(default)]
    pub max_outer_iterations: Option<usize>,
    #[serde(default = "default_criterion")]
    pub criterion: RankCriterion,
    /// Schedule for retraining rounds.
    pub schedule: TrainSchedule,
    pub seed: u64,
}

fn default_criterion() -> RankCriterion {
    RankCriterion::Tlc
}

impl TlcConfig {
    pub fn new(theta: f64, schedule: TrainSchedule, seed: u64) -> Self {
        TlcConfig {
            theta,
            retrain: RetrainMode::Full,
            calibration_batches: default_calibration_batches(),
            max_outer_iterations: None,
            criterion: RankCriterion::Tlc,
            schedule,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0) || !self.theta.is_finite() {
            return Err(TlcError::Config(format!("theta must be positive, got {}", self.theta)));
        }
        if let RetrainMode::Finetune { epochs: 0 } = self.retrain {
            return Err(TlcError::Config("finetune epochs must be >= 1".into()));
        }
        if self.calibration_batches == 0 {
            return Err(TlcError::Config("calibration_batches must be >= 1".into()));
        }
        self.schedule.validate()
    }

    fn retrain_schedule(&self, iteration: usize) -> TrainSchedule {
        let base = match self.retrain {
            RetrainMode::Full => self.schedule.clone(),
            RetrainMode::Finetune { epochs } => self.schedule.finetune(epochs),
        };
        TrainSchedule {
            seed: self.schedule.seed ^ (iteration as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            ..base
        }
    }
}

/// Fixed calibration rows drawn from the training split.
pub fn calibration_subset(train: &Dataset, batches: usize, batch_size: usize, seed: u64) -> Matrix {
    let want = (batches * batch_size).min(train.len());
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(want);
    idx.sort_unstable();
    train.features.select_rows(&idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalStep {
    pub layer_id: LayerId,
    pub val_accuracy: f64,
    pub val_loss: f64,
    /// Whether the candidate matched or beat the previously committed model.
    pub improved_or_equal: bool,
    pub flops_per_sample: u64,
    pub parameter_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterIteration {
    pub index: usize,
    pub ranking: LayerRanking,
    pub removals: Vec<RemovalStep>,
    /// Accuracy of the model the sweep started from.
    pub start_val_accuracy: f64,
    pub pre_retrain_val_accuracy: f64,
    pub post_retrain_val_accuracy: f64,
    /// Whether the retrained model cleared the threshold and was kept.
    pub accepted: bool,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// `θ · A_init > A_init`: nothing was attempted.
    ThresholdUnsatisfiable,
    /// A retrained model fell below the threshold.
    BelowThreshold,
    NoRemovableLayers,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub theta: f64,
    pub initial_val_accuracy: f64,
    pub threshold: f64,
    pub dense_test_accuracy: f64,
    pub final_val_accuracy: f64,
    pub final_test_accuracy: f64,
    /// Layers removed from the returned model, in removal order.
    pub removed_layers: Vec<LayerId>,
    pub iterations: Vec<OuterIteration>,
    pub cost_before: CostSummary,
    pub cost_after: CostSummary,
    pub termination: Termination,
    #[serde(default)]
    pub kl_comparisons: Vec<KlComparison>,
}

impl CompressionReport {
    pub fn accepted_iterations(&self) -> impl Iterator<Item = &OuterIteration> {
        self.iterations.iter().filter(|it| it.accepted)
    }
}

fn rank(model: &SequentialNet, config: &TlcConfig, splits: &Splits, calib: &Matrix) -> Result<LayerRanking> {
    match config.criterion {
        RankCriterion::Tlc => rank_layers(model, &splits.val, calib),
        other => rank_layers_baseline(model, other, &splits.train, config.schedule.batch_size, calib),
    }
}

/// Runs the remove-and-retrain loop on an already trained `model`.
pub fn tlc_run(model: &SequentialNet, splits: &Splits, config: &TlcConfig) -> Result<(SequentialNet, CompressionReport)> {
    tlc_run_observed(model, splits, config, |_, _| {})
}

/// As [`tlc_run`], calling `observe` with every outer iteration and its
/// retrained model, whether or not the iteration was accepted.
pub fn tlc_run_observed(
    model: &SequentialNet,
    splits: &Splits,
    config: &TlcConfig,
    mut observe: impl FnMut(&OuterIteration, &SequentialNet),
) -> Result<(SequentialNet, CompressionReport)> {
    config.validate()?;
    let calib = calibration_subset(&splits.train, config.calibration_batches, config.schedule.batch_size, config.seed);
    let model = ensure_statistics(model, &calib)?;

    let dense = evaluate(&model, &splits.val)?;
    let initial = dense.accuracy;
    let threshold = config.theta * initial;
    let dense_test = evaluate(&model, &splits.test)?.accuracy;
    let cost_before = count_flops(&model);

    let mut keep = model;
    let mut keep_acc = initial;
    let mut removed = Vec::new();
    let mut iterations = Vec::new();
    let max_outer = config.max_outer_iterations.unwrap_or(keep.depth());

    let termination = if keep_acc < threshold {
        Termination::ThresholdUnsatisfiable
    } else {
        let mut term = Termination::IterationLimit;
        for index in 0..max_outer {
            let ranking = match rank(&keep, config, splits, &calib) {
                Ok(r) => r,
                Err(TlcError::EmptyRanking) => {
                    term = Termination::NoRemovableLayers;
                    break;
                }
                Err(e) => return Err(e.in_stage(format!("ranking in iteration {index}"))),
            };

            let mut current = keep.clone();
            let mut current_acc = keep_acc;
            let mut steps = Vec::new();
            for entry in ranking.removable() {
                let layer = current.layer(entry.layer_id)?;
                if !partition_neurons(layer)?.is_removable() {
                    continue;
                }
                let candidate = collapse_and_recalibrate(&current, entry.layer_id, CollapseMode::Tlc, &calib)?;
                let candidate = refresh_empirical_stats(&candidate, &calib)?;
                let e = evaluate(&candidate, &splits.val)?;
                let cost = count_flops(&candidate);
                let improved = e.accuracy >= current_acc;
                steps.push(RemovalStep {
                    layer_id: entry.layer_id,
                    val_accuracy: e.accuracy,
                    val_loss: e.loss,
                    improved_or_equal: improved,
                    flops_per_sample: cost.flops_per_sample,
                    parameter_count: cost.parameter_count,
                });
                log::info!(
                    "iteration {index}: removed {} (val acc {:.4}, previous {:.4})",
                    entry.layer_id,
                    e.accuracy,
                    current_acc
                );
                current = candidate;
                current_acc = e.accuracy;
                if !improved {
                    break;
                }
            }
            if steps.is_empty() {
                term = Termination::NoRemovableLayers;
                break;
            }

            let schedule = config.retrain_schedule(index);
            let (retrained, history) = train_model(&current, &splits.train, None, &schedule)
                .map_err(|e| e.in_stage(format!("retraining in iteration {index}")))?;
            let retrained = refresh_empirical_stats(&retrained, &calib)?;
            let post = evaluate(&retrained, &splits.val)?.accuracy;
            let accepted = post >= threshold;
            log::info!(
                "iteration {index}: {} layer(s) removed, retrained val acc {post:.4} (threshold {threshold:.4})",
                steps.len()
            );
            iterations.push(OuterIteration {
                index,
                ranking,
                start_val_accuracy: keep_acc,
                pre_retrain_val_accuracy: current_acc,
                post_retrain_val_accuracy: post,
                accepted,
                final_train_loss: history.epochs.last().map_or(f64::NAN, |r| r.train_loss),
                removals: steps.clone(),
            });
            observe(iterations.last().unwrap(), &retrained);
            if !accepted {
                term = Termination::BelowThreshold;
                break;
            }
            removed.extend(steps.iter().map(|s| s.layer_id));
            keep = retrained;
            keep_acc = post;
            if keep.depth() == 0 {
                term = Termination::NoRemovableLayers;
                break;
            }
        }
        term
    };

    let final_test = evaluate(&keep, &splits.test)?.accuracy;
    let report = CompressionReport {
        theta: config.theta,
        initial_val_accuracy: initial,
        threshold,
        dense_test_accuracy: dense_test,
        final_val_accuracy: keep_acc,
        final_test_accuracy: final_test,
        removed_layers: removed,
        iterations,
        cost_before,
        cost_after: count_flops(&keep),
        termination,
        kl_comparisons: Vec::new(),
    };
    Ok((keep, report))
}
