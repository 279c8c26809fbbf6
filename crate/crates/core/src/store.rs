//! Checkpoint persistence and cost accounting.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "TLCK" | u32 version = 1 | u64 header_len | header (UTF-8 JSON) | f32 payload
//! ```
//!
//! The header lists the topology and one entry per tensor with its name,
//! shape and byte offset into the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TlcError};
use crate::nn::{
    Activation, ActivationKind, AffineBlock, BatchNorm, EmpiricalStats, LayerId, LayerTriple, Norm, SequentialNet,
};
use crate::tensor::Matrix;
use crate::train::TrainSchedule;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TLCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE_LEN: usize = 16;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub schedule: Option<TrainSchedule>,
    pub seed: Option<u64>,
    pub dataset_fingerprint: Option<String>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum NormKind {
    Batch { eps: f32, momentum: f32 },
    Empirical { sample_count: usize },
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerHeader {
    id: LayerId,
    n_in: usize,
    n_out: usize,
    activation: ActivationKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    leaky_slope: Option<f32>,
    norm: NormKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    input_dim: usize,
    class_count: usize,
    next_id: u32,
    layers: Vec<LayerHeader>,
    tensors: Vec<TensorEntry>,
    metadata: CheckpointMetadata,
}

struct PayloadWriter {
    tensors: Vec<TensorEntry>,
    bytes: Vec<u8>,
}

impl PayloadWriter {
    fn push(&mut self, name: String, shape: Vec<usize>, values: &[f32]) {
        self.tensors.push(TensorEntry {
            name,
            shape,
            offset: self.bytes.len() as u64,
        });
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serializes a model and its metadata to checkpoint bytes.
pub fn encode_checkpoint(model: &SequentialNet, metadata: &CheckpointMetadata) -> Result<Vec<u8>> {
    let mut w = PayloadWriter {
        tensors: Vec::new(),
        bytes: Vec::new(),
    };
    let mut layers = Vec::with_capacity(model.depth());
    for l in model.layers() {
        let p = format!("L{}", l.id.0);
        let (n_out, n_in) = l.affine.weights.shape();
        w.push(format!("{p}.weight"), vec![n_out, n_in], l.affine.weights.as_slice());
        w.push(format!("{p}.bias"), vec![n_out], &l.affine.bias);
        let norm = match &l.norm {
            Norm::Batch(bn) => {
                w.push(format!("{p}.gamma"), vec![n_out], &bn.gamma);
                w.push(format!("{p}.beta"), vec![n_out], &bn.beta);
                w.push(format!("{p}.running_mean"), vec![n_out], &bn.running_mean);
                w.push(format!("{p}.running_var"), vec![n_out], &bn.running_var);
                NormKind::Batch {
                    eps: bn.eps,
                    momentum: bn.momentum,
                }
            }
            Norm::Empirical(s) => {
                w.push(format!("{p}.stat_mean"), vec![n_out], &s.mean);
                w.push(format!("{p}.stat_std"), vec![n_out], &s.std);
                NormKind::Empirical {
                    sample_count: s.sample_count,
                }
            }
            Norm::None => NormKind::None,
        };
        let leaky_slope = match &l.activation {
            Activation::LeakyRelu { slope } => Some(*slope),
            Activation::Prelu { slopes } => {
                w.push(format!("{p}.prelu"), vec![n_out], slopes);
                None
            }
            _ => None,
        };
        layers.push(LayerHeader {
            id: l.id,
            n_in,
            n_out,
            activation: l.activation.kind(),
            leaky_slope,
            norm,
        });
    }
    let head = model.head();
    w.push("head.weight".into(), vec![head.n_out(), head.n_in()], head.weights.as_slice());
    w.push("head.bias".into(), vec![head.n_out()], &head.bias);

    let header = Header {
        input_dim: model.input_dim(),
        class_count: model.class_count(),
        next_id: model.next_id(),
        layers,
        tensors: w.tensors,
        metadata: metadata.clone(),
    };
    let text = serde_json::to_string(&header).map_err(|e| TlcError::Serde(e.to_string()))?;
    let mut out = Vec::with_capacity(PREAMBLE_LEN + text.len() + w.bytes.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&w.bytes);
    Ok(out)
}

struct PayloadReader<'a> {
    payload: &'a [u8],
    index: BTreeMap<String, &'a TensorEntry>,
}

impl PayloadReader<'_> {
    fn take(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let entry = self
            .index
            .get(name)
            .ok_or_else(|| TlcError::Checkpoint(format!("missing tensor {name}")))?;
        if entry.shape != shape {
            return Err(TlcError::Checkpoint(format!(
                "tensor {name} has shape {:?}, topology implies {shape:?}",
                entry.shape
            )));
        }
        let count: usize = shape.iter().product();
        let start = entry.offset as usize;
        let bytes = &self.payload[start..start + count * 4];
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

/// Parses checkpoint bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(SequentialNet, CheckpointMetadata)> {
    if bytes.len() < PREAMBLE_LEN {
        if bytes.len() >= 4 && bytes[..4] != CHECKPOINT_MAGIC {
            return Err(TlcError::BadMagic([bytes[0], bytes[1], bytes[2], bytes[3]]));
        }
        return Err(TlcError::Truncated {
            needed: PREAMBLE_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != CHECKPOINT_MAGIC {
        return Err(TlcError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(TlcError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = PREAMBLE_LEN as u64 + header_len;
    if (bytes.len() as u64) < header_end {
        return Err(TlcError::Truncated {
            needed: header_end,
            found: bytes.len() as u64,
        });
    }
    let header_end = header_end as usize;
    let text = std::str::from_utf8(&bytes[PREAMBLE_LEN..header_end])
        .map_err(|e| TlcError::Checkpoint(format!("header is not UTF-8: {e}")))?;
    let header: Header = serde_json::from_str(text).map_err(|e| TlcError::Checkpoint(format!("header: {e}")))?;

    let payload = &bytes[header_end..];
    let mut needed = 0u64;
    let mut index = BTreeMap::new();
    for t in &header.tensors {
        let len = t.shape.iter().product::<usize>() as u64 * 4;
        needed = needed.max(t.offset + len);
        if index.insert(t.name.clone(), t).is_some() {
            return Err(TlcError::Checkpoint(format!("duplicate tensor {}", t.name)));
        }
    }
    let declared: u64 = header.tensors.iter().map(|t| t.shape.iter().product::<usize>() as u64 * 4).sum();
    if declared != needed {
        return Err(TlcError::Checkpoint("tensor byte ranges overlap or leave gaps".into()));
    }
    if (payload.len() as u64) < needed {
        return Err(TlcError::Truncated {
            needed: header_end as u64 + needed,
            found: bytes.len() as u64,
        });
    }
    if payload.len() as u64 > needed {
        return Err(TlcError::TrailingBytes {
            extra: payload.len() as u64 - needed,
        });
    }
    let reader = PayloadReader { payload, index };

    let mut layers = Vec::with_capacity(header.layers.len());
    for lh in &header.layers {
        let p = format!("L{}", lh.id.0);
        let n = lh.n_out;
        let weights = Matrix::from_vec(n, lh.n_in, reader.take(&format!("{p}.weight"), &[n, lh.n_in])?)?;
        let affine = AffineBlock::new(weights, reader.take(&format!("{p}.bias"), &[n])?)?;
        let norm = match lh.norm {
            NormKind::Batch { eps, momentum } => Norm::Batch(BatchNorm {
                gamma: reader.take(&format!("{p}.gamma"), &[n])?,
                beta: reader.take(&format!("{p}.beta"), &[n])?,
                running_mean: reader.take(&format!("{p}.running_mean"), &[n])?,
                running_var: reader.take(&format!("{p}.running_var"), &[n])?,
                eps,
                momentum,
            }),
            NormKind::Empirical { sample_count } => Norm::Empirical(EmpiricalStats {
                mean: reader.take(&format!("{p}.stat_mean"), &[n])?,
                std: reader.take(&format!("{p}.stat_std"), &[n])?,
                sample_count,
            }),
            NormKind::None => Norm::None,
        };
        let activation = match lh.activation {
            ActivationKind::Relu => Activation::Relu,
            ActivationKind::LeakyRelu => Activation::LeakyRelu {
                slope: lh
                    .leaky_slope
                    .ok_or_else(|| TlcError::Checkpoint(format!("{p} missing leaky_slope")))?,
            },
            ActivationKind::Prelu => Activation::Prelu {
                slopes: reader.take(&format!("{p}.prelu"), &[n])?,
            },
            ActivationKind::Silu => Activation::Silu,
            ActivationKind::Gelu => Activation::Gelu,
            ActivationKind::Identity => Activation::Identity,
        };
        layers.push(LayerTriple {
            id: lh.id,
            affine,
            norm,
            activation,
        });
    }
    let last_width = layers.last().map_or(header.input_dim, |l: &LayerTriple| l.width());
    let hw = reader.take("head.weight", &[header.class_count, last_width]);
    let head_weights = match hw {
        Ok(v) => Matrix::from_vec(header.class_count, last_width, v)?,
        Err(_) => {
            // Report a head whose input width disagrees with the last layer as a chaining error.
            let entry = reader
                .index
                .get("head.weight")
                .ok_or_else(|| TlcError::Checkpoint("missing tensor head.weight".into()))?;
            let expected = entry.shape.get(1).copied().unwrap_or(0);
            return Err(match layers.last() {
                Some(l) => TlcError::Chaining {
                    from: l.id,
                    to: LayerId::HEAD,
                    produced: last_width,
                    expected,
                },
                None => TlcError::dim("head input", header.input_dim, expected),
            });
        }
    };
    let head = AffineBlock::new(head_weights, reader.take("head.bias", &[header.class_count])?)?;
    let model = SequentialNet::from_parts(header.input_dim, layers, head, Some(header.next_id))?;
    Ok((model, header.metadata))
}

pub fn save_checkpoint(model: &SequentialNet, metadata: &CheckpointMetadata, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, metadata)?;
    std::fs::write(path, bytes).map_err(|e| TlcError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(SequentialNet, CheckpointMetadata)> {
    let bytes = std::fs::read(path).map_err(|e| TlcError::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Deep, independent copy.
pub fn clone_model(model: &SequentialNet) -> SequentialNet {
    model.clone()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer_id: LayerId,
    pub params: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostSummary {
    /// Trainable parameters (running statistics excluded).
    pub parameter_count: usize,
    pub flops_per_sample: u64,
    pub layers_remaining: usize,
    pub layers_original: usize,
    /// Hidden layers in order, then the head.
    pub per_layer: Vec<LayerCost>,
}

fn affine_flops(a: &AffineBlock) -> u64 {
    2 * (a.n_in() * a.n_out()) as u64 + a.n_out() as u64
}

/// Per-sample inference FLOPs for one hidden layer: `2·n_in·n_out + n_out`
/// for the affine block, `2n` for batch norm (folded scale and shift) and `n`
/// for a non-identity activation.
pub fn layer_flops(layer: &LayerTriple) -> u64 {
    let n = layer.width() as u64;
    let norm = if matches!(layer.norm, Norm::Batch(_)) { 2 * n } else { 0 };
    let act = if matches!(layer.activation, Activation::Identity) { 0 } else { n };
    affine_flops(&layer.affine) + norm + act
}

pub fn count_flops(model: &SequentialNet) -> CostSummary {
    let mut per_layer: Vec<LayerCost> = model
        .layers()
        .iter()
        .map(|l| LayerCost {
            layer_id: l.id,
            params: l.param_count(),
            flops: layer_flops(l),
        })
        .collect();
    per_layer.push(LayerCost {
        layer_id: LayerId::HEAD,
        params: model.head().param_count(),
        flops: affine_flops(model.head()),
    });
    CostSummary {
        parameter_count: per_layer.iter().map(|c| c.params).sum(),
        flops_per_sample: per_layer.iter().map(|c| c.flops).sum(),
        layers_remaining: model.depth(),
        layers_original: model.next_id() as usize,
        per_layer,
    }
}
