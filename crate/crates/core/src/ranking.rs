//! Layer-importance ranking by trial removal, magnitude baselines, and the
//! always-ON / always-OFF substitution comparison.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::collapse::{collapse_and_recalibrate, ensure_statistics, partition_neurons};
use crate::data::Dataset;
use crate::error::{Result, TlcError};
use crate::forward::loss_and_gradients;
use crate::metrics::{evaluate, kl_divergence, CollapseMode, KlComparison};
use crate::nn::{LayerId, SequentialNet};
use crate::par;
use crate::tensor::Matrix;
use crate::train::batch_ranges;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankCriterion {
    /// Validation accuracy after surgical removal.
    Tlc,
    /// Ascending sum of absolute affine weights.
    SmallestWeights,
    /// Ascending sum of absolute weight gradients over one pass of training data.
    SmallestGradients,
}

impl std::str::FromStr for RankCriterion {
    type Err = TlcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tlc" => Ok(RankCriterion::Tlc),
            "weights" | "smallest_weights" => Ok(RankCriterion::SmallestWeights),
            "gradients" | "smallest_gradients" => Ok(RankCriterion::SmallestGradients),
            other => Err(TlcError::Input(format!("unknown ranking criterion {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub layer_id: LayerId,
    /// Validation accuracy of the model with this layer collapsed (TLC
    /// criterion only).
    pub val_accuracy: Option<f64>,
    pub val_loss: Option<f64>,
    /// Baseline magnitude sum (baseline criteria only).
    pub magnitude: Option<f64>,
    /// False when the layer has no ON neuron.
    pub removable: bool,
}

/// Layers from least to most important.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRanking {
    pub criterion: RankCriterion,
    pub entries: Vec<RankEntry>,
    pub evaluated_on: String,
    pub base_accuracy: f64,
    pub base_loss: f64,
}

impl LayerRanking {
    pub fn order(&self) -> Vec<LayerId> {
        self.entries.iter().map(|e| e.layer_id).collect()
    }

    pub fn removable(&self) -> impl Iterator<Item = &RankEntry> {
        self.entries.iter().filter(|e| e.removable)
    }
}

/// Removable first; then accuracy descending, loss ascending, id ascending.
fn tlc_order(a: &RankEntry, b: &RankEntry) -> Ordering {
    b.removable
        .cmp(&a.removable)
        .then_with(|| {
            let (x, y) = (a.val_accuracy.unwrap_or(f64::NEG_INFINITY), b.val_accuracy.unwrap_or(f64::NEG_INFINITY));
            y.total_cmp(&x)
        })
        .then_with(|| {
            let (x, y) = (a.val_loss.unwrap_or(f64::INFINITY), b.val_loss.unwrap_or(f64::INFINITY));
            x.total_cmp(&y)
        })
        .then_with(|| a.layer_id.cmp(&b.layer_id))
}

/// Removable first; then magnitude ascending, id ascending.
fn magnitude_order(a: &RankEntry, b: &RankEntry) -> Ordering {
    b.removable
        .cmp(&a.removable)
        .then_with(|| a.magnitude.unwrap_or(0.0).total_cmp(&b.magnitude.unwrap_or(0.0)))
        .then_with(|| a.layer_id.cmp(&b.layer_id))
}

/// Sorts entries in place under the criterion's order.
pub fn sort_entries(criterion: RankCriterion, entries: &mut [RankEntry]) {
    match criterion {
        RankCriterion::Tlc => entries.sort_by(tlc_order),
        _ => entries.sort_by(magnitude_order),
    }
}

fn removable_flags(model: &SequentialNet) -> Result<Vec<bool>> {
    model
        .layers()
        .iter()
        .map(|l| partition_neurons(l).map(|p| p.is_removable()))
        .collect()
}

/// Ranks hidden layers by the validation accuracy of the model with each one
/// surgically collapsed and downstream norms recalibrated on `calibration`.
/// Norm-free layers get empirical statistics from `calibration` first.
pub fn rank_layers(model: &SequentialNet, val: &Dataset, calibration: &Matrix) -> Result<LayerRanking> {
    let model = ensure_statistics(model, calibration)?;
    let base = evaluate(&model, val)?;
    let flags = removable_flags(&model)?;
    if !flags.iter().any(|&f| f) {
        return Err(TlcError::EmptyRanking);
    }
    let ids = model.layer_ids();
    let results: Vec<Result<RankEntry>> = par::map_indices(ids.len(), |k| {
        let id = ids[k];
        if !flags[k] {
            return Ok(RankEntry {
                layer_id: id,
                val_accuracy: None,
                val_loss: None,
                magnitude: None,
                removable: false,
            });
        }
        let candidate = collapse_and_recalibrate(&model, id, CollapseMode::Tlc, calibration)?;
        let e = evaluate(&candidate, val)?;
        Ok(RankEntry {
            layer_id: id,
            val_accuracy: Some(e.accuracy),
            val_loss: Some(e.loss),
            magnitude: None,
            removable: true,
        })
    });
    let mut entries = results.into_iter().collect::<Result<Vec<_>>>()?;
    sort_entries(RankCriterion::Tlc, &mut entries);
    Ok(LayerRanking {
        criterion: RankCriterion::Tlc,
        entries,
        evaluated_on: val.fingerprint(),
        base_accuracy: base.accuracy,
        base_loss: base.loss,
    })
}

/// Per-layer `Σ |∂L/∂W|` accumulated over mini-batch gradients of one pass
/// through `train` (in dataset order, train-mode batch statistics).
pub fn gradient_magnitudes(model: &SequentialNet, train: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(TlcError::Input("empty probe set".into()));
    }
    let ranges = batch_ranges(train.len(), batch_size);
    let per_batch: Vec<Result<Vec<f64>>> = par::map_ordered(&ranges, |&(s, e)| {
        let x = train.features.slice_rows(s, e);
        let g = loss_and_gradients(model, &x, &train.labels[s..e])?;
        Ok(g.gradients
            .layers
            .iter()
            .map(|lg| lg.weights.as_slice().iter().map(|v| v.abs() as f64).sum())
            .collect())
    });
    let mut sums = vec![0.0; model.depth()];
    for b in per_batch {
        for (acc, v) in sums.iter_mut().zip(b?) {
            *acc += v;
        }
    }
    Ok(sums)
}

/// Ranks hidden layers by ascending weight (or weight-gradient) magnitude.
/// Entries carry no accuracy; removal still uses surgical collapse.
pub fn rank_layers_baseline(
    model: &SequentialNet,
    criterion: RankCriterion,
    probe: &Dataset,
    batch_size: usize,
    calibration: &Matrix,
) -> Result<LayerRanking> {
    let model = ensure_statistics(model, calibration)?;
    let flags = removable_flags(&model)?;
    if !flags.iter().any(|&f| f) {
        return Err(TlcError::EmptyRanking);
    }
    let magnitudes: Vec<f64> = match criterion {
        RankCriterion::SmallestWeights => model
            .layers()
            .iter()
            .map(|l| l.affine.weights.as_slice().iter().map(|v| v.abs() as f64).sum())
            .collect(),
        RankCriterion::SmallestGradients => gradient_magnitudes(&model, probe, batch_size)?,
        RankCriterion::Tlc => {
            return Err(TlcError::Config("use rank_layers for the TLC criterion".into()));
        }
    };
    let mut entries: Vec<RankEntry> = model
        .layers()
        .iter()
        .zip(magnitudes)
        .zip(flags)
        .map(|((l, m), removable)| RankEntry {
            layer_id: l.id,
            val_accuracy: None,
            val_loss: None,
            magnitude: Some(m),
            removable,
        })
        .collect();
    sort_entries(criterion, &mut entries);
    Ok(LayerRanking {
        criterion,
        entries,
        evaluated_on: probe.fingerprint(),
        base_accuracy: f64::NAN,
        base_loss: f64::NAN,
    })
}

/// Collapses `layer_id` under each of TLC, always-ON and always-OFF and
/// reports `KL(original ‖ modified)` and accuracy on `val`.
pub fn compare_substitutions(
    model: &SequentialNet,
    layer_id: LayerId,
    val: &Dataset,
    calibration: &Matrix,
) -> Result<Vec<KlComparison>> {
    let model = ensure_statistics(model, calibration)?;
    let base = evaluate(&model, val)?;
    let results: Vec<Result<KlComparison>> = par::map_ordered(&CollapseMode::ALL, |&mode| {
        let modified = collapse_and_recalibrate(&model, layer_id, mode, calibration)?;
        let e = evaluate(&modified, val)?;
        Ok(KlComparison {
            layer_id,
            mode,
            mean_kl: kl_divergence(&model, &modified, val)?,
            sample_count: val.len(),
            accuracy: e.accuracy,
            accuracy_delta: e.accuracy - base.accuracy,
        })
    });
    results.into_iter().collect()
}
