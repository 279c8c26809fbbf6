//! Accuracy, cross-entropy and output-distribution KL divergence.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, TlcError};
use crate::forward::{log_softmax, predict};
use crate::nn::{LayerId, SequentialNet};
use crate::par;
use crate::tensor::Matrix;

/// Rows per evaluation chunk. Fixed so the reduction order never depends on
/// how many threads run.
pub const EVAL_CHUNK: usize = 256;

/// Probabilities below this are clamped before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Fraction of argmax predictions equal to the label.
    pub accuracy: f64,
    /// Mean cross-entropy in nats.
    pub loss: f64,
    pub samples: usize,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn chunk_logits(model: &SequentialNet, features: &Matrix) -> Result<Vec<Matrix>> {
    let ranges = par::chunk_ranges(features.rows(), EVAL_CHUNK);
    par::map_ordered(&ranges, |&(s, e)| predict(model, &features.slice_rows(s, e)))
        .into_iter()
        .collect()
}

/// Eval-mode accuracy and mean cross-entropy.
pub fn evaluate(model: &SequentialNet, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(TlcError::Input("cannot evaluate on an empty dataset".into()));
    }
    if data.class_count > model.class_count() {
        return Err(TlcError::dim("class count", model.class_count(), data.class_count));
    }
    let chunks = chunk_logits(model, &data.features)?;
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    let mut offset = 0;
    for logits in &chunks {
        for (r, row) in logits.row_iter().enumerate() {
            let y = data.labels[offset + r];
            if argmax(row) == y {
                correct += 1;
            }
            loss -= log_softmax(row)[y];
        }
        offset += logits.rows();
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss / data.len() as f64,
        samples: data.len(),
    })
}

/// `Σ_c p_c ln(p_c / q_c)` with both sides clamped at [`PROB_FLOOR`]; terms
/// with `p_c = 0` contribute nothing.
pub fn kl_from_probs(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pc, _)| pc > 0.0)
        .map(|(&pc, &qc)| {
            let pc = pc.max(PROB_FLOOR);
            pc * (pc.ln() - qc.max(PROB_FLOOR).ln())
        })
        .sum()
}

/// Mean per-sample `KL(softmax(a(x)) ‖ softmax(b(x)))` in nats.
pub fn kl_divergence(original: &SequentialNet, modified: &SequentialNet, data: &Dataset) -> Result<f64> {
    if original.class_count() != modified.class_count() {
        return Err(TlcError::dim("KL class count", original.class_count(), modified.class_count()));
    }
    if original.input_dim() != modified.input_dim() {
        return Err(TlcError::dim("KL input dim", original.input_dim(), modified.input_dim()));
    }
    if data.is_empty() {
        return Err(TlcError::Input("cannot compute KL on an empty dataset".into()));
    }
    let ranges = par::chunk_ranges(data.len(), EVAL_CHUNK);
    let partial: Vec<Result<f64>> = par::map_ordered(&ranges, |&(s, e)| {
        let x = data.features.slice_rows(s, e);
        let la = predict(original, &x)?;
        let lb = predict(modified, &x)?;
        Ok(la
            .row_iter()
            .zip(lb.row_iter())
            .map(|(ra, rb)| {
                let p: Vec<f64> = log_softmax(ra).into_iter().map(f64::exp).collect();
                let q: Vec<f64> = log_softmax(rb).into_iter().map(f64::exp).collect();
                kl_from_probs(&p, &q)
            })
            .sum())
    });
    let mut total = 0.0;
    for p in partial {
        total += p?;
    }
    Ok(total / data.len() as f64)
}

/// How a layer was substituted when comparing output divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollapseMode {
    /// Prune OFF neurons, linearize and fuse ON neurons.
    Tlc,
    /// Rectifier replaced by the identity for every neuron.
    AlwaysOn,
    /// Rectifier replaced by the null function for every neuron.
    AlwaysOff,
}

impl CollapseMode {
    pub const ALL: [CollapseMode; 3] = [CollapseMode::Tlc, CollapseMode::AlwaysOn, CollapseMode::AlwaysOff];
}

impl std::str::FromStr for CollapseMode {
    type Err = TlcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tlc" => Ok(CollapseMode::Tlc),
            "on" | "always_on" => Ok(CollapseMode::AlwaysOn),
            "off" | "always_off" => Ok(CollapseMode::AlwaysOff),
            other => Err(TlcError::Input(format!("unknown collapse mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlComparison {
    pub layer_id: LayerId,
    pub mode: CollapseMode,
    pub mean_kl: f64,
    pub sample_count: usize,
    pub accuracy: f64,
    /// Modified minus original accuracy.
    pub accuracy_delta: f64,
}
