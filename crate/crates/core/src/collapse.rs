//! Neuron ON/OFF classification from normalization statistics and surgical
//! removal of a hidden layer.
//!
//! A neuron whose rectifier input is distributed as `N(β, γ²)` is treated as
//! ON when `β > 0` and OFF otherwise. Collapsing a layer drops its OFF neurons
//! and replaces the rectifier of its ON neurons with the identity, at which
//! point the layer is affine and composes exactly into the successor's affine
//! block:
//!
//! ```text
//! W' = W_next[:, S] · Ŵ[S, :]        b' = W_next[:, S] · b̂[S] + b_next
//! ```
//!
//! where `(Ŵ, b̂)` is the layer's affine block with eval-mode batch norm folded
//! in and `S` the ON set.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TlcError};
use crate::metrics::CollapseMode;
use crate::nn::{AffineBlock, EmpiricalStats, LayerId, LayerTriple, Norm, SequentialNet};
use crate::tensor::Matrix;

/// Floor on |γ| in the error likelihood.
pub const GAMMA_FLOOR: f64 = 1e-12;

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Probability that a neuron with rectifier input `N(beta, gamma²)` is on the
/// other side of zero from its assigned state: `Φ(−|β| / |γ|)`.
pub fn error_likelihood(beta: f64, gamma: f64) -> f64 {
    std_normal_cdf(-beta.abs() / gamma.abs().max(GAMMA_FLOOR))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronPartition {
    pub layer_id: LayerId,
    pub on: Vec<usize>,
    pub off: Vec<usize>,
    /// Per-neuron error likelihood, in `[0, 0.5]`.
    pub error_likelihood: Vec<f64>,
}

impl NeuronPartition {
    pub fn width(&self) -> usize {
        self.error_likelihood.len()
    }

    /// Whether a TLC collapse of this layer would leave any signal path.
    pub fn is_removable(&self) -> bool {
        !self.on.is_empty()
    }

    pub fn mean_error(&self) -> f64 {
        self.error_likelihood.iter().sum::<f64>() / self.width().max(1) as f64
    }
}

/// `(β, |γ|)` analogues for each neuron of a layer.
fn neuron_stats(layer: &LayerTriple) -> Result<(Vec<f64>, Vec<f64>)> {
    match &layer.norm {
        Norm::Batch(bn) => Ok((
            bn.beta.iter().map(|&v| v as f64).collect(),
            bn.gamma.iter().map(|&v| v as f64).collect(),
        )),
        Norm::Empirical(s) => Ok((
            s.mean.iter().map(|&v| v as f64).collect(),
            s.std.iter().map(|&v| v as f64).collect(),
        )),
        Norm::None => Err(TlcError::StatisticsAbsent(layer.id)),
    }
}

/// Splits a layer's neurons by the sign of β (β ≤ 0 is OFF).
pub fn partition_neurons(layer: &LayerTriple) -> Result<NeuronPartition> {
    let (beta, gamma) = neuron_stats(layer)?;
    let mut on = Vec::new();
    let mut off = Vec::new();
    let mut err = Vec::with_capacity(beta.len());
    for (i, (&b, &g)) in beta.iter().zip(&gamma).enumerate() {
        if b > 0.0 {
            on.push(i);
        } else {
            off.push(i);
        }
        err.push(error_likelihood(b, g));
    }
    Ok(NeuronPartition {
        layer_id: layer.id,
        on,
        off,
        error_likelihood: err,
    })
}

/// Eval-mode `(pre, z, out)` of one layer.
pub(crate) fn layer_eval(layer: &LayerTriple, h: &Matrix) -> (Matrix, Matrix, Matrix) {
    let pre = layer.affine.apply(h);
    let mut z = pre.clone();
    if let Norm::Batch(bn) = &layer.norm {
        let (scale, shift) = bn.eval_scale_shift();
        for r in 0..z.rows() {
            for (i, v) in z.row_mut(r).iter_mut().enumerate() {
                *v = *v * scale[i] + shift[i];
            }
        }
    }
    let out = layer.activation.apply(&z);
    (pre, z, out)
}

/// Eval-mode input reaching the layer at position `pos`.
pub(crate) fn input_to(model: &SequentialNet, pos: usize, x: &Matrix) -> Matrix {
    let mut h = x.clone();
    for layer in &model.layers()[..pos] {
        h = layer_eval(layer, &h).2;
    }
    h
}

/// Computes per-neuron mean and population std of the rectifier input of
/// `layer_id` over all calibration batches and attaches them to the layer.
///
/// A layer that already has batch norm is rejected unless
/// `replace_batch_norm` is set, in which case the norm is first folded into
/// the affine block (eval-mode outputs are unchanged).
pub fn attach_empirical_stats(
    model: &SequentialNet,
    layer_id: LayerId,
    calibration_batches: &[Matrix],
    replace_batch_norm: bool,
) -> Result<SequentialNet> {
    let pos = model.position(layer_id).ok_or(TlcError::UnknownLayer(layer_id))?;
    let total: usize = calibration_batches.iter().map(Matrix::rows).sum();
    if total == 0 {
        return Err(TlcError::Input("empty calibration set".into()));
    }
    if total < 2 {
        return Err(TlcError::Input("empirical statistics need at least two samples".into()));
    }
    let mut out = model.clone();
    {
        let layer = out.layer_mut(layer_id)?;
        if matches!(layer.norm, Norm::Batch(_)) {
            if !replace_batch_norm {
                return Err(TlcError::Input(format!(
                    "layer {layer_id} has batch-norm statistics; set replace_batch_norm to override"
                )));
            }
            layer.affine = effective_affine(layer);
        }
        layer.norm = Norm::None;
    }

    let width = out.layers()[pos].width();
    let mut sum = vec![0.0f64; width];
    let mut sumsq = vec![0.0f64; width];
    for batch in calibration_batches {
        if batch.cols() != model.input_dim() {
            return Err(TlcError::dim("calibration features", model.input_dim(), batch.cols()));
        }
        let h = input_to(&out, pos, batch);
        let pre = out.layers()[pos].affine.apply(&h);
        for row in pre.row_iter() {
            for (i, &v) in row.iter().enumerate() {
                sum[i] += v as f64;
                sumsq[i] += v as f64 * v as f64;
            }
        }
    }
    let n = total as f64;
    let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
    let std: Vec<f32> = sum
        .iter()
        .zip(&sumsq)
        .map(|(s, q)| {
            let mu = s / n;
            let var = (q / n - mu * mu).max(0.0);
            (var.sqrt() as f32).max(EmpiricalStats::STD_FLOOR)
        })
        .collect();
    out.layer_mut(layer_id)?.norm = Norm::Empirical(EmpiricalStats {
        mean,
        std,
        sample_count: total,
    });
    Ok(out)
}

/// f64 `(Ŵ, b̂)` of a layer: its affine block with eval-mode batch norm
/// folded in. Layers without batch norm return their affine block.
fn effective_affine_f64(layer: &LayerTriple) -> (Vec<f64>, Vec<f64>) {
    let w = &layer.affine.weights;
    let (n_out, n_in) = w.shape();
    let mut wf: Vec<f64> = w.as_slice().iter().map(|&v| v as f64).collect();
    let mut bf: Vec<f64> = layer.affine.bias.iter().map(|&v| v as f64).collect();
    if let Norm::Batch(bn) = &layer.norm {
        for i in 0..n_out {
            let scale = bn.gamma[i] as f64 / (bn.running_var[i] as f64 + bn.eps as f64).sqrt();
            for v in &mut wf[i * n_in..(i + 1) * n_in] {
                *v *= scale;
            }
            bf[i] = scale * (bf[i] - bn.running_mean[i] as f64) + bn.beta[i] as f64;
        }
    }
    (wf, bf)
}

/// The affine map `x ↦ Ŵx + b̂` equal to the layer's eval-mode affine + norm.
pub fn effective_affine(layer: &LayerTriple) -> AffineBlock {
    let (w, b) = effective_affine_f64(layer);
    AffineBlock {
        weights: Matrix::from_vec(
            layer.affine.n_out(),
            layer.affine.n_in(),
            w.into_iter().map(|v| v as f32).collect(),
        )
        .expect("same shape"),
        bias: b.into_iter().map(|v| v as f32).collect(),
    }
}

/// Neurons kept (and linearized) when collapsing the layer under `mode`.
pub fn kept_neurons(layer: &LayerTriple, mode: CollapseMode) -> Result<Vec<usize>> {
    match mode {
        CollapseMode::Tlc => {
            let part = partition_neurons(layer)?;
            if part.on.is_empty() {
                return Err(TlcError::NonRemovable(layer.id));
            }
            Ok(part.on)
        }
        CollapseMode::AlwaysOn => Ok((0..layer.width()).collect()),
        CollapseMode::AlwaysOff => Ok(Vec::new()),
    }
}

/// Removes hidden layer `layer_id`, folding its kept neurons into the next
/// affine block (the next hidden layer or the head). Survivor ids are
/// unchanged. Downstream batch-norm running statistics are stale afterwards;
/// run [`recalibrate_norms_from`] before evaluating.
pub fn collapse_layer(model: &SequentialNet, layer_id: LayerId, mode: CollapseMode) -> Result<SequentialNet> {
    if layer_id.is_head() {
        return Err(TlcError::HeadNotRemovable(layer_id));
    }
    let pos = model.position(layer_id).ok_or(TlcError::UnknownLayer(layer_id))?;
    let layer = &model.layers()[pos];
    let kept = kept_neurons(layer, mode)?;
    let (w_hat, b_hat) = effective_affine_f64(layer);
    let n_in = layer.affine.n_in();

    let next = model.successor_affine(pos);
    let n_next = next.n_out();
    let mut w_new = vec![0.0f64; n_next * n_in];
    let mut b_new: Vec<f64> = next.bias.iter().map(|&v| v as f64).collect();
    for o in 0..n_next {
        let dst = &mut w_new[o * n_in..(o + 1) * n_in];
        for &s in &kept {
            let c = next.weights[(o, s)] as f64;
            if c == 0.0 {
                continue;
            }
            for (d, &v) in dst.iter_mut().zip(&w_hat[s * n_in..(s + 1) * n_in]) {
                *d += c * v;
            }
            b_new[o] += c * b_hat[s];
        }
    }

    let mut out = model.clone();
    *out.successor_affine_mut(pos) = AffineBlock {
        weights: Matrix::from_vec(n_next, n_in, w_new.into_iter().map(|v| v as f32).collect())?,
        bias: b_new.into_iter().map(|v| v as f32).collect(),
    };
    out.remove_at(pos);
    out.validate()?;
    Ok(out)
}

/// Replaces the running statistics of every batch-norm layer at position
/// `first_pos` or later with the exact mean and biased variance of its
/// pre-activations over `calibration`. Layers are processed front to back, so
/// each sees inputs produced with already-recalibrated statistics. γ and β are
/// untouched.
pub fn recalibrate_norms_from(model: &SequentialNet, calibration: &Matrix, first_pos: usize) -> Result<SequentialNet> {
    if calibration.rows() == 0 {
        return Err(TlcError::Input("empty calibration set".into()));
    }
    if calibration.cols() != model.input_dim() {
        return Err(TlcError::dim("calibration features", model.input_dim(), calibration.cols()));
    }
    let mut out = model.clone();
    let mut h = calibration.clone();
    let m = calibration.rows() as f64;
    for pos in 0..out.depth() {
        if pos >= first_pos {
            let layer = &mut out.layers_mut()[pos];
            if let Norm::Batch(bn) = &mut layer.norm {
                let pre = layer.affine.apply(&h);
                let n = bn.width();
                let mut mean = vec![0.0f64; n];
                for row in pre.row_iter() {
                    for (a, &v) in mean.iter_mut().zip(row) {
                        *a += v as f64;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                let mut var = vec![0.0f64; n];
                for row in pre.row_iter() {
                    for ((a, &v), mu) in var.iter_mut().zip(row).zip(&mean) {
                        *a += (v as f64 - mu).powi(2);
                    }
                }
                for i in 0..n {
                    bn.running_mean[i] = mean[i] as f32;
                    bn.running_var[i] = (var[i] / m) as f32;
                }
            }
        }
        h = layer_eval(&out.layers()[pos], &h).2;
    }
    Ok(out)
}

/// Recalibrates every batch-norm layer.
pub fn recalibrate_norms(model: &SequentialNet, calibration: &Matrix) -> Result<SequentialNet> {
    recalibrate_norms_from(model, calibration, 0)
}

/// Collapses `layer_id` and recalibrates the batch norms downstream of it.
pub fn collapse_and_recalibrate(
    model: &SequentialNet,
    layer_id: LayerId,
    mode: CollapseMode,
    calibration: &Matrix,
) -> Result<SequentialNet> {
    let pos = model.position(layer_id).ok_or(TlcError::UnknownLayer(layer_id))?;
    let collapsed = collapse_layer(model, layer_id, mode)?;
    recalibrate_norms_from(&collapsed, calibration, pos)
}

/// Gives every norm-free hidden layer empirical statistics measured on
/// `calibration`, so that it can be partitioned. Layers that already carry
/// statistics are left alone.
pub fn ensure_statistics(model: &SequentialNet, calibration: &Matrix) -> Result<SequentialNet> {
    let mut out = model.clone();
    let missing: Vec<LayerId> = model
        .layers()
        .iter()
        .filter(|l| matches!(l.norm, Norm::None))
        .map(|l| l.id)
        .collect();
    for id in missing {
        out = attach_empirical_stats(&out, id, std::slice::from_ref(calibration), false)?;
    }
    Ok(out)
}

/// Recomputes empirical statistics of every layer that carries them, e.g.
/// after retraining or after an upstream removal shifted their inputs.
pub fn refresh_empirical_stats(model: &SequentialNet, calibration: &Matrix) -> Result<SequentialNet> {
    let mut out = model.clone();
    let stale: Vec<LayerId> = model
        .layers()
        .iter()
        .filter(|l| matches!(l.norm, Norm::Empirical(_)))
        .map(|l| l.id)
        .collect();
    for id in stale {
        out = attach_empirical_stats(&out, id, std::slice::from_ref(calibration), false)?;
    }
    Ok(out)
}
