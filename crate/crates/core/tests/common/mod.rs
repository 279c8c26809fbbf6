//! Independent f64 reference implementations used as test oracles.
#![allow(dead_code)]

pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tlc_core::data::{Dataset, Provenance};
use tlc_core::{Activation, ActivationKind, Matrix, NetSpec, Norm, SequentialNet};

#[derive(Clone, Debug)]
pub struct RefBn {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub enum RefAct {
    Relu,
    Leaky(f64),
    Prelu(Vec<f64>),
    Silu,
    Gelu,
    Identity,
}

impl RefAct {
    pub fn apply(&self, i: usize, z: f64) -> f64 {
        match self {
            RefAct::Relu => z.max(0.0),
            RefAct::Leaky(a) => {
                if z > 0.0 {
                    z
                } else {
                    a * z
                }
            }
            RefAct::Prelu(a) => {
                if z > 0.0 {
                    z
                } else {
                    a[i] * z
                }
            }
            RefAct::Silu => z / (1.0 + (-z).exp()),
            RefAct::Gelu => z * 0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2)),
            RefAct::Identity => z,
        }
    }

    pub fn has_kink(&self) -> bool {
        matches!(self, RefAct::Relu | RefAct::Leaky(_) | RefAct::Prelu(_))
    }
}

#[derive(Clone, Debug)]
pub struct RefLayer {
    /// Row-major `n_out × n_in`.
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub bn: Option<RefBn>,
    pub act: RefAct,
}

#[derive(Clone, Debug)]
pub struct RefNet {
    pub layers: Vec<RefLayer>,
    pub head_w: Vec<Vec<f64>>,
    pub head_b: Vec<f64>,
}

/// Per-neuron replacement of a layer's rectifier: `true` passes `z`
/// through, `false` outputs zero.
pub type Mask = Vec<bool>;

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn affine(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(b)
        .map(|(row, bi)| row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + bi)
        .collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..z.len() {
        if z[i] > z[best] {
            best = i;
        }
    }
    best
}

impl RefNet {
    pub fn from_model(model: &SequentialNet) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| RefLayer {
                w: to_rows(&l.affine.weights),
                b: to_f64(&l.affine.bias),
                bn: match &l.norm {
                    Norm::Batch(bn) => Some(RefBn {
                        gamma: to_f64(&bn.gamma),
                        beta: to_f64(&bn.beta),
                        mean: to_f64(&bn.running_mean),
                        var: to_f64(&bn.running_var),
                        eps: bn.eps as f64,
                    }),
                    _ => None,
                },
                act: match &l.activation {
                    Activation::Relu => RefAct::Relu,
                    Activation::LeakyRelu { slope } => RefAct::Leaky(*slope as f64),
                    Activation::Prelu { slopes } => RefAct::Prelu(to_f64(slopes)),
                    Activation::Silu => RefAct::Silu,
                    Activation::Gelu => RefAct::Gelu,
                    Activation::Identity => RefAct::Identity,
                },
            })
            .collect();
        RefNet {
            layers,
            head_w: to_rows(&model.head().weights),
            head_b: to_f64(&model.head().bias),
        }
    }

    /// Rectifier inputs of layer `k` in eval mode.
    fn eval_z(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let l = &self.layers[k];
        let pre = affine(&l.w, &l.b, x);
        match &l.bn {
            Some(bn) => pre
                .iter()
                .enumerate()
                .map(|(i, v)| bn.gamma[i] * (v - bn.mean[i]) / (bn.var[i] + bn.eps).sqrt() + bn.beta[i])
                .collect(),
            None => pre,
        }
    }

    fn eval_layer(&self, k: usize, x: &[f64], mask: Option<&Mask>) -> Vec<f64> {
        let z = self.eval_z(k, x);
        z.iter()
            .enumerate()
            .map(|(i, &v)| match mask {
                Some(m) => {
                    if m[i] {
                        v
                    } else {
                        0.0
                    }
                }
                None => self.layers[k].act.apply(i, v),
            })
            .collect()
    }

    /// Eval-mode logits; `masks[k]` overrides layer `k`'s rectifier.
    pub fn logits(&self, x: &[f64], masks: &[Option<Mask>]) -> Vec<f64> {
        let mut h = x.to_vec();
        for k in 0..self.layers.len() {
            h = self.eval_layer(k, &h, masks.get(k).and_then(|m| m.as_ref()));
        }
        affine(&self.head_w, &self.head_b, &h)
    }

    /// Replaces running statistics of layers `from..` with exact calibration
    /// statistics, propagating front to back.
    pub fn recalibrate_from(&mut self, from: usize, calib: &[Vec<f64>], masks: &[Option<Mask>]) {
        let mut hs: Vec<Vec<f64>> = calib.to_vec();
        for k in 0..self.layers.len() {
            if k >= from {
                let l = &self.layers[k];
                if l.bn.is_some() {
                    let pres: Vec<Vec<f64>> = hs.iter().map(|h| affine(&l.w, &l.b, h)).collect();
                    let n = l.b.len();
                    let m = pres.len() as f64;
                    let mean: Vec<f64> = (0..n).map(|i| pres.iter().map(|p| p[i]).sum::<f64>() / m).collect();
                    let var: Vec<f64> = (0..n)
                        .map(|i| pres.iter().map(|p| (p[i] - mean[i]).powi(2)).sum::<f64>() / m)
                        .collect();
                    let bn = self.layers[k].bn.as_mut().unwrap();
                    bn.mean = mean;
                    bn.var = var;
                }
            }
            let mask = masks.get(k).and_then(|m| m.as_ref());
            hs = hs.iter().map(|h| self.eval_layer(k, h, mask)).collect();
        }
    }

    /// Accuracy and mean cross-entropy in eval mode.
    pub fn evaluate(&self, data: &Dataset, masks: &[Option<Mask>]) -> (f64, f64) {
        let mut correct = 0;
        let mut loss = 0.0;
        for (row, &y) in data.features.row_iter().zip(&data.labels) {
            let x = to_f64(row);
            let z = self.logits(&x, masks);
            if argmax(&z) == y {
                correct += 1;
            }
            loss -= log_softmax(&z)[y];
        }
        (correct as f64 / data.len() as f64, loss / data.len() as f64)
    }

    /// Rectifier inputs of every layer in train mode (batch statistics).
    pub fn train_pre_activations(&self, batch: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
        self.train_forward(batch).1
    }

    /// Train-mode mean cross-entropy of `batch`, plus every layer's rectifier
    /// inputs.
    pub fn train_forward(&self, batch: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
        let mut hs = batch.to_vec();
        let mut zs = Vec::new();
        let m = batch.len() as f64;
        for l in &self.layers {
            let pres: Vec<Vec<f64>> = hs.iter().map(|h| affine(&l.w, &l.b, h)).collect();
            let z: Vec<Vec<f64>> = match &l.bn {
                Some(bn) => {
                    let n = l.b.len();
                    let mean: Vec<f64> = (0..n).map(|i| pres.iter().map(|p| p[i]).sum::<f64>() / m).collect();
                    let var: Vec<f64> = (0..n)
                        .map(|i| pres.iter().map(|p| (p[i] - mean[i]).powi(2)).sum::<f64>() / m)
                        .collect();
                    pres.iter()
                        .map(|p| {
                            (0..n)
                                .map(|i| bn.gamma[i] * (p[i] - mean[i]) / (var[i] + bn.eps).sqrt() + bn.beta[i])
                                .collect()
                        })
                        .collect()
                }
                None => pres,
            };
            hs = z
                .iter()
                .map(|zr| zr.iter().enumerate().map(|(i, &v)| l.act.apply(i, v)).collect())
                .collect();
            zs.push(z);
        }
        let logits = hs.iter().map(|h| affine(&self.head_w, &self.head_b, h)).collect();
        (logits, zs)
    }

    pub fn train_loss(&self, batch: &[Vec<f64>], labels: &[usize]) -> f64 {
        let (logits, _) = self.train_forward(batch);
        logits
            .iter()
            .zip(labels)
            .map(|(z, &y)| -log_softmax(z)[y])
            .sum::<f64>()
            / batch.len() as f64
    }
}

pub fn rows_f64(m: &Matrix) -> Vec<Vec<f64>> {
    to_rows(m)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Misclassification frequency of the ON/OFF rule for `z ~ N(β, γ²)`.
pub fn monte_carlo_error(beta: f64, gamma: f64, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(beta, gamma.abs()).unwrap();
    let on = beta > 0.0;
    let wrong = (0..samples)
        .filter(|_| {
            let z = normal.sample(&mut rng);
            (z > 0.0) != on
        })
        .count();
    wrong as f64 / samples as f64
}

pub fn random_matrix(rows: usize, cols: usize, scale: f32, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// A BN MLP with randomized γ, β and running statistics.
pub fn random_net(
    input_dim: usize,
    hidden: &[usize],
    classes: usize,
    activation: ActivationKind,
    seed: u64,
) -> SequentialNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = NetSpec::mlp(input_dim, hidden.to_vec(), classes, activation);
    let mut net = SequentialNet::new(&spec, &mut rng).unwrap();
    for l in net.layers_mut() {
        if let Some(bn) = l.norm.as_batch_mut() {
            for i in 0..bn.width() {
                bn.gamma[i] = rng.random_range(0.5..1.5) * if rng.random_bool(0.2) { -1.0 } else { 1.0 };
                bn.beta[i] = rng.random_range(-1.0..1.0);
                bn.running_mean[i] = rng.random_range(-0.5..0.5);
                bn.running_var[i] = rng.random_range(0.5..2.0);
            }
        }
        if let Activation::Prelu { slopes } = &mut l.activation {
            slopes.iter_mut().for_each(|s| *s = rng.random_range(0.05..0.4));
        }
        l.affine.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
    }
    net.head_mut().bias.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
    net
}

/// A labelled dataset of standard normal features labelled by a random
/// linear teacher.
pub fn random_dataset(n: usize, dim: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let features: Vec<f32> = (0..n * dim).map(|_| normal.sample(&mut rng)).collect();
    let teacher: Vec<f32> = (0..dim * classes).map(|_| normal.sample(&mut rng)).collect();
    let labels = (0..n)
        .map(|r| {
            let x = &features[r * dim..(r + 1) * dim];
            (0..classes)
                .map(|c| x.iter().zip(&teacher[c * dim..(c + 1) * dim]).map(|(a, b)| a * b).sum::<f32>())
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (c, v)| if v > best.1 { (c, v) } else { best })
                .0
        })
        .collect();
    Dataset::new(
        Matrix::from_vec(n, dim, features).unwrap(),
        labels,
        classes,
        Provenance::Derived("random teacher".into()),
    )
    .unwrap()
}

/// Layer order by brute-force removal through masking instead of fusion:
/// ON neurons pass `z`, OFF neurons output zero, downstream batch norms are
/// recalibrated on `calib`. Batch-norm networks only.
pub fn masking_oracle_ranking(model: &SequentialNet, val: &Dataset, calib: &Matrix) -> Vec<tlc_core::LayerId> {
    let base = RefNet::from_model(model);
    let calib = rows_f64(calib);
    let depth = model.depth();
    let mut scored = Vec::new();
    let mut unremovable = Vec::new();
    for (pos, layer) in model.layers().iter().enumerate() {
        let bn = base.layers[pos].bn.as_ref().expect("batch norm layer");
        let mask: Mask = bn.beta.iter().map(|&b| b > 0.0).collect();
        if !mask.iter().any(|&m| m) {
            unremovable.push(layer.id);
            continue;
        }
        let mut masks = vec![None; depth];
        masks[pos] = Some(mask);
        let mut net = base.clone();
        net.recalibrate_from(pos + 1, &calib, &masks);
        let (acc, loss) = net.evaluate(val, &masks);
        scored.push((layer.id, acc, loss));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)));
    scored.into_iter().map(|s| s.0).chain(unremovable).collect()
}
