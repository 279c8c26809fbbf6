//! Network data model: affine blocks, batch-norm parameters, rectifiers and the
//! sequential stack they form.
//!
//! A hidden layer is an (affine, norm, activation) triple. The norm slot holds
//! either trained batch-norm parameters, empirical pre-activation statistics
//! attached after training (for norm-free layers), or nothing. Only batch norm
//! participates in the forward computation.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TlcError};
use crate::tensor::Matrix;

pub const DEFAULT_BN_EPS: f32 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f32 = 0.1;
pub const DEFAULT_PRELU_SLOPE: f32 = 0.25;

/// Stable identity of a hidden layer. Never reused after the layer is removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerId(pub u32);

impl LayerId {
    /// Reserved identity of the output head.
    pub const HEAD: LayerId = LayerId(u32::MAX);

    pub fn is_head(self) -> bool {
        self == LayerId::HEAD
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_head() {
            write!(f, "head")
        } else {
            write!(f, "L{}", self.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineBlock {
    /// Shape `(n_out, n_in)`.
    pub weights: Matrix,
    pub bias: Vec<f32>,
}

impl AffineBlock {
    pub fn new(weights: Matrix, bias: Vec<f32>) -> Result<Self> {
        if weights.rows() != bias.len() {
            return Err(TlcError::dim("affine bias", weights.rows(), bias.len()));
        }
        if weights.rows() == 0 || weights.cols() == 0 {
            return Err(TlcError::Input("affine block needs n_in, n_out >= 1".into()));
        }
        Ok(AffineBlock { weights, bias })
    }

    /// He-uniform weights, zero bias.
    pub fn he_uniform<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / n_in as f32).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let data = (0..n_in * n_out).map(|_| dist.sample(rng)).collect();
        AffineBlock {
            weights: Matrix::from_vec(n_out, n_in, data).expect("sized"),
            bias: vec![0.0; n_out],
        }
    }

    #[inline]
    pub fn n_in(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn n_out(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }

    /// `x Wᵀ + b` for a batch of rows.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul_bt(&self.weights);
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm {
    pub fn new(n: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; n],
            beta: vec![0.0; n],
            running_mean: vec![0.0; n],
            running_var: vec![1.0; n],
            eps: DEFAULT_BN_EPS,
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.gamma.len();
        for (name, len) in [
            ("beta", self.beta.len()),
            ("running_mean", self.running_mean.len()),
            ("running_var", self.running_var.len()),
        ] {
            if len != n {
                return Err(TlcError::dim(format!("batch-norm {name}"), n, len));
            }
        }
        if self.running_var.iter().any(|&v| !(v >= 0.0)) {
            return Err(TlcError::Input("batch-norm running_var must be >= 0".into()));
        }
        // eps = 0 is accepted for exact-identity constructions; negative never is.
        if !(self.eps >= 0.0) {
            return Err(TlcError::Input("batch-norm eps must be >= 0".into()));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(TlcError::Input("batch-norm momentum must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Per-neuron eval-mode `(scale, shift)` with `z = x * scale + shift`.
    pub fn eval_scale_shift(&self) -> (Vec<f32>, Vec<f32>) {
        let mut scale = Vec::with_capacity(self.width());
        let mut shift = Vec::with_capacity(self.width());
        for i in 0..self.width() {
            let s = self.gamma[i] as f64 / (self.running_var[i] as f64 + self.eps as f64).sqrt();
            scale.push(s as f32);
            shift.push((self.beta[i] as f64 - self.running_mean[i] as f64 * s) as f32);
        }
        (scale, shift)
    }

    pub fn param_count(&self) -> usize {
        2 * self.width()
    }
}

/// Per-neuron pre-activation statistics measured by forward propagation. Their
/// mean plays the role of β and their std the role of |γ| when classifying
/// neurons of layers that carry no batch norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub sample_count: usize,
}

impl EmpiricalStats {
    pub const STD_FLOOR: f32 = 1e-6;

    pub fn width(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Norm {
    Batch(BatchNorm),
    Empirical(EmpiricalStats),
    None,
}

impl Norm {
    pub fn width(&self) -> Option<usize> {
        match self {
            Norm::Batch(bn) => Some(bn.width()),
            Norm::Empirical(s) => Some(s.width()),
            Norm::None => None,
        }
    }

    pub fn as_batch(&self) -> Option<&BatchNorm> {
        match self {
            Norm::Batch(bn) => Some(bn),
            _ => None,
        }
    }

    pub fn as_batch_mut(&mut self) -> Option<&mut BatchNorm> {
        match self {
            Norm::Batch(bn) => Some(bn),
            _ => None,
        }
    }
}

/// Rectifier kind without per-neuron state; used in configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    LeakyRelu,
    Prelu,
    Silu,
    Gelu,
    Identity,
}

impl ActivationKind {
    pub const RECTIFIERS: [ActivationKind; 5] = [
        ActivationKind::Relu,
        ActivationKind::LeakyRelu,
        ActivationKind::Prelu,
        ActivationKind::Silu,
        ActivationKind::Gelu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::LeakyRelu => "leaky_relu",
            ActivationKind::Prelu => "prelu",
            ActivationKind::Silu => "silu",
            ActivationKind::Gelu => "gelu",
            ActivationKind::Identity => "identity",
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = TlcError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "relu" => ActivationKind::Relu,
            "leaky_relu" | "leakyrelu" => ActivationKind::LeakyRelu,
            "prelu" => ActivationKind::Prelu,
            "silu" => ActivationKind::Silu,
            "gelu" => ActivationKind::Gelu,
            "identity" => ActivationKind::Identity,
            other => return Err(TlcError::Input(format!("unknown activation {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f32 },
    /// Learned negative-side slope per neuron.
    Prelu { slopes: Vec<f32> },
    Silu,
    Gelu,
    Identity,
}

#[inline]
fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn std_normal_cdf_f32(z: f32) -> f32 {
    0.5 * libm::erfcf(-z * std::f32::consts::FRAC_1_SQRT_2)
}

const INV_SQRT_2PI: f32 = 0.398_942_3;

impl Activation {
    pub fn from_kind(kind: ActivationKind, width: usize, leaky_slope: f32) -> Self {
        match kind {
            ActivationKind::Relu => Activation::Relu,
            ActivationKind::LeakyRelu => Activation::LeakyRelu { slope: leaky_slope },
            ActivationKind::Prelu => Activation::Prelu {
                slopes: vec![DEFAULT_PRELU_SLOPE; width],
            },
            ActivationKind::Silu => Activation::Silu,
            ActivationKind::Gelu => Activation::Gelu,
            ActivationKind::Identity => Activation::Identity,
        }
    }

    pub fn kind(&self) -> ActivationKind {
        match self {
            Activation::Relu => ActivationKind::Relu,
            Activation::LeakyRelu { .. } => ActivationKind::LeakyRelu,
            Activation::Prelu { .. } => ActivationKind::Prelu,
            Activation::Silu => ActivationKind::Silu,
            Activation::Gelu => ActivationKind::Gelu,
            Activation::Identity => ActivationKind::Identity,
        }
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        match self {
            Activation::LeakyRelu { slope } if !(*slope > 0.0 && *slope < 1.0) => Err(
                TlcError::Input(format!("LeakyReLU slope {slope} outside (0, 1)")),
            ),
            Activation::Prelu { slopes } => {
                if slopes.len() != width {
                    return Err(TlcError::dim("PReLU slopes", width, slopes.len()));
                }
                if slopes.iter().any(|s| !s.is_finite()) {
                    return Err(TlcError::Input("PReLU slopes must be finite".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Activation::Prelu { slopes } => slopes.len(),
            _ => 0,
        }
    }

    /// Value for neuron `i`.
    #[inline]
    pub fn apply_one(&self, i: usize, z: f32) -> f32 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Prelu { slopes } => {
                if z > 0.0 {
                    z
                } else {
                    slopes[i] * z
                }
            }
            Activation::Silu => z * sigmoid(z),
            Activation::Gelu => z * std_normal_cdf_f32(z),
            Activation::Identity => z,
        }
    }

    /// Derivative with respect to the input for neuron `i`.
    #[inline]
    pub fn derivative_one(&self, i: usize, z: f32) -> f32 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    *slope
                }
            }
            Activation::Prelu { slopes } => {
                if z > 0.0 {
                    1.0
                } else {
                    slopes[i]
                }
            }
            Activation::Silu => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Gelu => {
                std_normal_cdf_f32(z) + z * INV_SQRT_2PI * (-0.5 * z * z).exp()
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn apply(&self, z: &Matrix) -> Matrix {
        let mut out = z.clone();
        if matches!(self, Activation::Identity) {
            return out;
        }
        for r in 0..out.rows() {
            for (i, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = self.apply_one(i, *v);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTriple {
    pub id: LayerId,
    pub affine: AffineBlock,
    pub norm: Norm,
    pub activation: Activation,
}

impl LayerTriple {
    pub fn width(&self) -> usize {
        self.affine.n_out()
    }

    pub fn param_count(&self) -> usize {
        self.affine.param_count()
            + self.norm.as_batch().map_or(0, BatchNorm::param_count)
            + self.activation.param_count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.width();
        if let Some(w) = self.norm.width() {
            if w != n {
                return Err(TlcError::dim(format!("norm width of {}", self.id), n, w));
            }
        }
        match &self.norm {
            Norm::Batch(bn) => bn.validate()?,
            Norm::Empirical(s) => {
                if s.std.len() != n {
                    return Err(TlcError::dim(format!("empirical std of {}", self.id), n, s.std.len()));
                }
            }
            Norm::None => {}
        }
        self.activation.validate(n)
    }
}

/// Shape of a freshly built network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub class_count: usize,
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

impl NetSpec {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, class_count: usize, activation: ActivationKind) -> Self {
        NetSpec {
            input_dim,
            hidden,
            class_count,
            activation,
            leaky_slope: default_leaky_slope(),
            batch_norm: true,
        }
    }
}

/// Ordered stack of hidden layer triples followed by an affine output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialNet {
    layers: Vec<LayerTriple>,
    head: AffineBlock,
    input_dim: usize,
    class_count: usize,
    next_id: u32,
}

impl SequentialNet {
    /// He-uniform affine weights, zero biases, identity batch norm.
    pub fn new<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> Result<Self> {
        if spec.input_dim == 0 || spec.class_count == 0 || spec.hidden.contains(&0) {
            return Err(TlcError::Config("all network widths must be >= 1".into()));
        }
        let mut layers = Vec::with_capacity(spec.hidden.len());
        let mut n_in = spec.input_dim;
        for (k, &width) in spec.hidden.iter().enumerate() {
            let affine = AffineBlock::he_uniform(n_in, width, rng);
            let norm = if spec.batch_norm {
                Norm::Batch(BatchNorm::new(width))
            } else {
                Norm::None
            };
            layers.push(LayerTriple {
                id: LayerId(k as u32),
                affine,
                norm,
                activation: Activation::from_kind(spec.activation, width, spec.leaky_slope),
            });
            n_in = width;
        }
        let head = AffineBlock::he_uniform(n_in, spec.class_count, rng);
        let net = SequentialNet {
            next_id: layers.len() as u32,
            layers,
            head,
            input_dim: spec.input_dim,
            class_count: spec.class_count,
        };
        net.validate()?;
        Ok(net)
    }

    /// Assembles a network from explicit parts and validates it.
    pub fn from_parts(
        input_dim: usize,
        layers: Vec<LayerTriple>,
        head: AffineBlock,
        next_id: Option<u32>,
    ) -> Result<Self> {
        let next_id = next_id.unwrap_or_else(|| layers.iter().map(|l| l.id.0 + 1).max().unwrap_or(0));
        let net = SequentialNet {
            class_count: head.n_out(),
            layers,
            head,
            input_dim,
            next_id,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let mut width = self.input_dim;
        let mut prev = None::<LayerId>;
        for layer in &self.layers {
            if layer.id.is_head() || layer.id.0 >= self.next_id {
                return Err(TlcError::Checkpoint(format!("layer id {} out of range", layer.id)));
            }
            if !seen.insert(layer.id) {
                return Err(TlcError::Checkpoint(format!("duplicate layer id {}", layer.id)));
            }
            check_chain(prev, layer.id, width, layer.affine.n_in())?;
            if layer.affine.bias.len() != layer.affine.n_out() {
                return Err(TlcError::dim(format!("bias of {}", layer.id), layer.affine.n_out(), layer.affine.bias.len()));
            }
            layer.validate()?;
            width = layer.width();
            prev = Some(layer.id);
        }
        check_chain(prev, LayerId::HEAD, width, self.head.n_in())?;
        if self.head.bias.len() != self.head.n_out() || self.head.n_out() != self.class_count {
            return Err(TlcError::dim("head outputs", self.class_count, self.head.n_out()));
        }
        Ok(())
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    #[inline]
    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layers(&self) -> &[LayerTriple] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerTriple] {
        &mut self.layers
    }

    pub fn head(&self) -> &AffineBlock {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut AffineBlock {
        &mut self.head
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Number of hidden layers ever allocated, which is the original depth of
    /// a network built by [`SequentialNet::new`].
    pub fn next_id(&self) -> u32 {
        self.next_id
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        self.layers.iter().map(|l| l.id).collect()
    }

    pub fn position(&self, id: LayerId) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn layer(&self, id: LayerId) -> Result<&LayerTriple> {
        self.layers
            .iter()
            .find(|l| l.id == id)
            .ok_or(TlcError::UnknownLayer(id))
    }

    pub fn layer_mut(&mut self, id: LayerId) -> Result<&mut LayerTriple> {
        self.layers
            .iter_mut()
            .find(|l| l.id == id)
            .ok_or(TlcError::UnknownLayer(id))
    }

    /// Affine block that consumes the output of the layer at `pos`.
    pub(crate) fn successor_affine_mut(&mut self, pos: usize) -> &mut AffineBlock {
        if pos + 1 < self.layers.len() {
            &mut self.layers[pos + 1].affine
        } else {
            &mut self.head
        }
    }

    pub(crate) fn successor_affine(&self, pos: usize) -> &AffineBlock {
        if pos + 1 < self.layers.len() {
            &self.layers[pos + 1].affine
        } else {
            &self.head
        }
    }

    pub(crate) fn remove_at(&mut self, pos: usize) -> LayerTriple {
        self.layers.remove(pos)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerTriple::param_count).sum::<usize>() + self.head.param_count()
    }

    pub fn is_finite(&self) -> bool {
        let finite = |v: &[f32]| v.iter().all(|x| x.is_finite());
        self.layers.iter().all(|l| {
            l.affine.weights.is_finite()
                && finite(&l.affine.bias)
                && match &l.norm {
                    Norm::Batch(bn) => {
                        finite(&bn.gamma) && finite(&bn.beta) && finite(&bn.running_mean) && finite(&bn.running_var)
                    }
                    Norm::Empirical(s) => finite(&s.mean) && finite(&s.std),
                    Norm::None => true,
                }
        }) && self.head.weights.is_finite()
            && finite(&self.head.bias)
    }
}

fn check_chain(from: Option<LayerId>, to: LayerId, produced: usize, expected: usize) -> Result<()> {
    if produced == expected {
        return Ok(());
    }
    match from {
        Some(from) => Err(TlcError::Chaining {
            from,
            to,
            produced,
            expected,
        }),
        None => Err(TlcError::dim(format!("input width of {to}"), produced, expected)),
    }
}
