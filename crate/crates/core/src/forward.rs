//! Forward propagation, cross-entropy loss and backpropagation.

use crate::error::{Result, TlcError};
use crate::nn::{Activation, LayerId, Norm, SequentialNet};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics normalize; the trace carries them for the EMA update.
    Train,
    /// Running statistics normalize; the forward is a pure function.
    Eval,
}

/// Batch statistics of one batch-norm layer in train mode.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased (divide-by-m) variance.
    pub var: Vec<f32>,
    pub inv_std: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub id: LayerId,
    /// Affine output `x`.
    pub pre: Matrix,
    /// Standardized `x̂`; equals `pre` when the layer has no batch norm.
    pub normalized: Matrix,
    /// Rectifier input `z`.
    pub z: Matrix,
    /// Rectifier output `y`.
    pub out: Matrix,
    pub batch_stats: Option<BatchStats>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Matrix,
    pub layers: Vec<LayerTrace>,
    pub logits: Matrix,
}

impl ForwardTrace {
    /// Input to the output head.
    pub fn head_input(&self) -> &Matrix {
        self.layers.last().map_or(&self.input, |l| &l.out)
    }
}

fn check_finite(m: &Matrix, layer: LayerId) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(TlcError::NonFinite { layer })
    }
}

fn check_input(model: &SequentialNet, batch: &Matrix) -> Result<()> {
    if batch.cols() != model.input_dim() {
        return Err(TlcError::dim("batch features", model.input_dim(), batch.cols()));
    }
    Ok(())
}

/// Standardizes `x` with its own column statistics (biased variance).
fn batch_normalize(x: &Matrix, eps: f32) -> (Matrix, BatchStats) {
    let (m, n) = x.shape();
    let mut mean = vec![0.0f64; n];
    for row in x.row_iter() {
        for (acc, &v) in mean.iter_mut().zip(row) {
            *acc += v as f64;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut var = vec![0.0f64; n];
    for row in x.row_iter() {
        for ((acc, &v), mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v as f64 - mu;
            *acc += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= m as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps as f64).sqrt()).collect();

    let mut xhat = x.clone();
    for r in 0..m {
        for (i, v) in xhat.row_mut(r).iter_mut().enumerate() {
            *v = ((*v as f64 - mean[i]) * inv_std[i]) as f32;
        }
    }
    let stats = BatchStats {
        mean: mean.iter().map(|&v| v as f32).collect(),
        var: var.iter().map(|&v| v as f32).collect(),
        inv_std: inv_std.iter().map(|&v| v as f32).collect(),
    };
    (xhat, stats)
}

/// Full forward pass recording every intermediate.
pub fn forward(model: &SequentialNet, batch: &Matrix, mode: Mode) -> Result<ForwardTrace> {
    check_input(model, batch)?;
    let mut traces = Vec::with_capacity(model.depth());
    let mut h = batch.clone();
    for layer in model.layers() {
        let pre = layer.affine.apply(&h);
        check_finite(&pre, layer.id)?;
        let (normalized, z, batch_stats) = match (&layer.norm, mode) {
            (Norm::Batch(bn), Mode::Train) => {
                let (xhat, stats) = batch_normalize(&pre, bn.eps);
                let mut z = xhat.clone();
                for r in 0..z.rows() {
                    for (i, v) in z.row_mut(r).iter_mut().enumerate() {
                        *v = bn.gamma[i] * *v + bn.beta[i];
                    }
                }
                (xhat, z, Some(stats))
            }
            (Norm::Batch(bn), Mode::Eval) => {
                let mut xhat = pre.clone();
                let mut z = pre.clone();
                for i in 0..bn.width() {
                    let inv = 1.0 / (bn.running_var[i] as f64 + bn.eps as f64).sqrt();
                    for r in 0..pre.rows() {
                        let xh = ((pre[(r, i)] as f64 - bn.running_mean[i] as f64) * inv) as f32;
                        xhat[(r, i)] = xh;
                        z[(r, i)] = bn.gamma[i] * xh + bn.beta[i];
                    }
                }
                (xhat, z, None)
            }
            _ => (pre.clone(), pre.clone(), None),
        };
        check_finite(&z, layer.id)?;
        let out = layer.activation.apply(&z);
        check_finite(&out, layer.id)?;
        h = out.clone();
        traces.push(LayerTrace {
            id: layer.id,
            pre,
            normalized,
            z,
            out,
            batch_stats,
        });
    }
    let logits = model.head().apply(&h);
    check_finite(&logits, LayerId::HEAD)?;
    Ok(ForwardTrace {
        input: batch.clone(),
        layers: traces,
        logits,
    })
}

/// Eval-mode logits without keeping intermediates.
pub fn predict(model: &SequentialNet, batch: &Matrix) -> Result<Matrix> {
    check_input(model, batch)?;
    let mut h = batch.clone();
    for layer in model.layers() {
        let mut z = layer.affine.apply(&h);
        if let Norm::Batch(bn) = &layer.norm {
            let (scale, shift) = bn.eval_scale_shift();
            for r in 0..z.rows() {
                for (i, v) in z.row_mut(r).iter_mut().enumerate() {
                    *v = *v * scale[i] + shift[i];
                }
            }
        }
        if !matches!(layer.activation, Activation::Identity) {
            for r in 0..z.rows() {
                for (i, v) in z.row_mut(r).iter_mut().enumerate() {
                    *v = layer.activation.apply_one(i, *v);
                }
            }
        }
        check_finite(&z, layer.id)?;
        h = z;
    }
    let logits = model.head().apply(&h);
    check_finite(&logits, LayerId::HEAD)?;
    Ok(logits)
}

/// Folds a train-mode trace's batch statistics into the running statistics:
/// `running ← (1 − ρ)·running + ρ·batch`.
pub fn update_running_stats(model: &mut SequentialNet, trace: &ForwardTrace) {
    for (layer, lt) in model.layers_mut().iter_mut().zip(&trace.layers) {
        if let (Norm::Batch(bn), Some(stats)) = (&mut layer.norm, &lt.batch_stats) {
            let rho = bn.momentum;
            for i in 0..bn.width() {
                bn.running_mean[i] = (1.0 - rho) * bn.running_mean[i] + rho * stats.mean[i];
                bn.running_var[i] = (1.0 - rho) * bn.running_var[i] + rho * stats.var[i];
            }
        }
    }
}

/// Log-softmax of one logit row in f64.
pub fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}

pub fn softmax(row: &[f32]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

/// Summed cross-entropy of a logit batch (not averaged).
pub fn cross_entropy_sum(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(labels, logits.rows(), logits.cols())?;
    Ok(logits
        .row_iter()
        .zip(labels)
        .map(|(row, &y)| -log_softmax(row)[y])
        .sum())
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(TlcError::dim("labels", rows, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(TlcError::Input(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// Gradients of one hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Vec<f32>,
    /// Present iff the layer has batch norm.
    pub gamma: Option<Vec<f32>>,
    pub beta: Option<Vec<f32>>,
    /// Present iff the layer uses PReLU.
    pub prelu: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    pub head_weights: Matrix,
    pub head_bias: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct LossAndGradients {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub gradients: Gradients,
    pub trace: ForwardTrace,
}

fn column_sums(m: &Matrix) -> Vec<f32> {
    let mut acc = vec![0.0f64; m.cols()];
    for row in m.row_iter() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Train-mode mean cross-entropy and its gradient for every trainable
/// parameter. The model is not modified; running statistics can be updated
/// from the returned trace with [`update_running_stats`].
pub fn loss_and_gradients(model: &SequentialNet, batch: &Matrix, labels: &[usize]) -> Result<LossAndGradients> {
    check_input(model, batch)?;
    check_labels(labels, batch.rows(), model.class_count())?;
    if batch.rows() == 0 {
        return Err(TlcError::Input("empty batch".into()));
    }
    let trace = forward(model, batch, Mode::Train)?;
    let m = batch.rows();
    let inv_m = 1.0 / m as f64;

    let mut loss = 0.0f64;
    let mut dlogits = Matrix::zeros(m, model.class_count());
    for (r, (row, &y)) in trace.logits.row_iter().zip(labels).enumerate() {
        let ls = log_softmax(row);
        loss -= ls[y];
        for (c, l) in ls.iter().enumerate() {
            let p = l.exp() - if c == y { 1.0 } else { 0.0 };
            dlogits[(r, c)] = (p * inv_m) as f32;
        }
    }
    loss *= inv_m;

    let head_weights = dlogits.matmul_at(trace.head_input());
    let head_bias = column_sums(&dlogits);
    let mut dh = dlogits.matmul(&model.head().weights);

    let mut layer_grads = Vec::with_capacity(model.depth());
    for (k, layer) in model.layers().iter().enumerate().rev() {
        let lt = &trace.layers[k];
        let n = layer.width();
        let mut dz = dh;
        let mut prelu = match &layer.activation {
            Activation::Prelu { .. } => Some(vec![0.0f64; n]),
            _ => None,
        };
        for r in 0..m {
            for i in 0..n {
                let z = lt.z[(r, i)];
                let g = dz[(r, i)];
                if let Some(p) = prelu.as_mut() {
                    if z <= 0.0 {
                        p[i] += (g * z) as f64;
                    }
                }
                dz[(r, i)] = g * layer.activation.derivative_one(i, z);
            }
        }

        let (dx, gamma, beta) = match (&layer.norm, &lt.batch_stats) {
            (Norm::Batch(bn), Some(stats)) => {
                let mut dgamma = vec![0.0f64; n];
                let mut dbeta = vec![0.0f64; n];
                let mut sum_dxhat = vec![0.0f64; n];
                let mut sum_dxhat_xhat = vec![0.0f64; n];
                for r in 0..m {
                    for i in 0..n {
                        let g = dz[(r, i)] as f64;
                        let xh = lt.normalized[(r, i)] as f64;
                        dgamma[i] += g * xh;
                        dbeta[i] += g;
                        let dxh = g * bn.gamma[i] as f64;
                        sum_dxhat[i] += dxh;
                        sum_dxhat_xhat[i] += dxh * xh;
                    }
                }
                let mut dx = Matrix::zeros(m, n);
                for r in 0..m {
                    for i in 0..n {
                        let dxh = dz[(r, i)] as f64 * bn.gamma[i] as f64;
                        let xh = lt.normalized[(r, i)] as f64;
                        let v = stats.inv_std[i] as f64 * inv_m
                            * (m as f64 * dxh - sum_dxhat[i] - xh * sum_dxhat_xhat[i]);
                        dx[(r, i)] = v as f32;
                    }
                }
                let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
                (dx, Some(to32(dgamma)), Some(to32(dbeta)))
            }
            _ => (dz, None, None),
        };

        let input = if k == 0 { &trace.input } else { &trace.layers[k - 1].out };
        let weights = dx.matmul_at(input);
        let bias = column_sums(&dx);
        dh = dx.matmul(&layer.affine.weights);
        layer_grads.push(LayerGrads {
            weights,
            bias,
            gamma,
            beta,
            prelu: prelu.map(|p| p.into_iter().map(|v| v as f32).collect()),
        });
    }
    layer_grads.reverse();

    Ok(LossAndGradients {
        loss,
        gradients: Gradients {
            layers: layer_grads,
            head_weights,
            head_bias,
        },
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AffineBlock, BatchNorm, LayerTriple, NetSpec, ActivationKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_layer_net() -> SequentialNet {
        let mut bn = BatchNorm::new(2);
        bn.eps = 0.0;
        let layer = LayerTriple {
            id: LayerId(0),
            affine: AffineBlock::new(Matrix::identity(2), vec![0.0; 2]).unwrap(),
            norm: Norm::Batch(bn),
            activation: Activation::Relu,
        };
        let head = AffineBlock::new(Matrix::identity(2), vec![0.0; 2]).unwrap();
        SequentialNet::from_parts(2, vec![layer], head, None).unwrap()
    }

    #[test]
    fn identity_norm_relu_layer() {
        let net = identity_layer_net();
        let x = Matrix::from_rows(&[[-1.0, 2.0], [0.0, 0.0]]).unwrap();
        let trace = forward(&net, &x, Mode::Eval).unwrap();
        assert_eq!(trace.layers[0].out.row(0), &[0.0, 2.0]);
        assert_eq!(trace.layers[0].out.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn eval_forward_is_pure_and_bitwise_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = SequentialNet::new(&NetSpec::mlp(4, vec![6, 6, 6], 3, ActivationKind::Relu), &mut rng).unwrap();
        let x = Matrix::from_vec(8, 4, (0..32).map(|i| (i as f32 * 0.31).cos()).collect()).unwrap();
        let before = net.clone();
        let a = forward(&net, &x, Mode::Eval).unwrap().logits;
        let b = forward(&net, &x, Mode::Eval).unwrap().logits;
        assert_eq!(a.as_slice(), b.as_slice());
        assert_eq!(net, before);
        let p = predict(&net, &x).unwrap();
        assert!(p.max_abs_diff(&a) < 1e-5);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = identity_layer_net();
        let x = Matrix::zeros(2, 3);
        assert!(matches!(forward(&net, &x, Mode::Eval), Err(TlcError::Dimension { .. })));
    }

    #[test]
    fn non_finite_names_layer() {
        let mut net = identity_layer_net();
        net.layers_mut()[0].affine.weights[(0, 0)] = f32::INFINITY;
        let x = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        match forward(&net, &x, Mode::Eval) {
            Err(TlcError::NonFinite { layer }) => assert_eq!(layer, LayerId(0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Matrix::zeros(3, 5);
        let loss = cross_entropy_sum(&logits, &[0, 2, 4]).unwrap() / 3.0;
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let net = identity_layer_net();
        let x = Matrix::from_rows(&[[1.0, 1.0], [0.5, 2.0]]).unwrap();
        assert!(matches!(loss_and_gradients(&net, &x, &[0, 2]), Err(TlcError::Input(_))));
    }

    #[test]
    fn train_mode_bn_output_has_beta_mean_and_gamma_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = SequentialNet::new(&NetSpec::mlp(3, vec![4], 2, ActivationKind::Identity), &mut rng).unwrap();
        let bn = net.layers_mut()[0].norm.as_batch_mut().unwrap();
        bn.eps = 0.0;
        bn.gamma = vec![2.0, -0.5, 1.0, 3.0];
        bn.beta = vec![0.3, -1.0, 0.0, 2.0];
        let x = Matrix::from_vec(16, 3, (0..48).map(|i| ((i * 7 % 13) as f32 - 6.0) * 0.4).collect()).unwrap();
        let trace = forward(&net, &x, Mode::Train).unwrap();
        let z = &trace.layers[0].z;
        let bn = net.layers()[0].norm.as_batch().unwrap();
        for i in 0..4 {
            let col: Vec<f64> = (0..16).map(|r| z[(r, i)] as f64).collect();
            let mean = col.iter().sum::<f64>() / 16.0;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0).sqrt();
            assert!((mean - bn.beta[i] as f64).abs() < 1e-5);
            assert!((std - bn.gamma[i].abs() as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn running_stats_follow_ema_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = SequentialNet::new(&NetSpec::mlp(2, vec![3], 2, ActivationKind::Relu), &mut rng).unwrap();
        let rho = 0.1f32;
        let mut oracle_mean = [0.0f32; 3];
        let mut oracle_var = [1.0f32; 3];
        for k in 0..5 {
            let x = Matrix::from_vec(6, 2, (0..12).map(|i| ((i + k * 5) as f32 * 0.77).sin() * 3.0).collect()).unwrap();
            let trace = forward(&net, &x, Mode::Train).unwrap();
            let pre = &trace.layers[0].pre;
            for i in 0..3 {
                let col: Vec<f64> = (0..6).map(|r| pre[(r, i)] as f64).collect();
                let mu = col.iter().sum::<f64>() / 6.0;
                let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 6.0;
                oracle_mean[i] = (1.0 - rho) * oracle_mean[i] + rho * mu as f32;
                oracle_var[i] = (1.0 - rho) * oracle_var[i] + rho * var as f32;
            }
            update_running_stats(&mut net, &trace);
        }
        let bn = net.layers()[0].norm.as_batch().unwrap();
        for i in 0..3 {
            assert!((bn.running_mean[i] - oracle_mean[i]).abs() < 1e-5);
            assert!((bn.running_var[i] - oracle_var[i]).abs() < 1e-5);
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn zero_head_gradient_is_softmax_residual_outer_product() {
        // 2-class toy: zero head weights make both logits equal the bias (0),
        // so p = [0.5, 0.5] and dW_head = (1/m) Σ_r (p − e_y)ᵀ h_r.
        let mut net = identity_layer_net();
        *net.head_mut() = AffineBlock::new(Matrix::zeros(2, 2), vec![0.0; 2]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 3.0], [2.0, -1.0], [0.5, 0.5]]).unwrap();
        let labels = [0, 1, 1];
        let res = loss_and_gradients(&net, &x, &labels).unwrap();
        let h = res.trace.head_input();
        let mut expected = [[0.0f64; 2]; 2];
        for r in 0..3 {
            for c in 0..2 {
                let resid = 0.5 - if labels[r] == c { 1.0 } else { 0.0 };
                for j in 0..2 {
                    expected[c][j] += resid * h[(r, j)] as f64 / 3.0;
                }
            }
        }
        for c in 0..2 {
            for j in 0..2 {
                assert!((res.gradients.head_weights[(c, j)] as f64 - expected[c][j]).abs() < 1e-6);
            }
        }
        assert!((res.loss - 2f64.ln()).abs() < 1e-9);
    }
}
