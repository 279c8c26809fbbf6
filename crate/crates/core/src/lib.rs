//! Depth reduction for batch-normalized rectifier networks.
//!
//! Hidden neurons are classified ON or OFF from the shift β of their batch
//! norm; a layer is collapsed by dropping its OFF neurons and fusing the
//! linearized ON neurons into the following affine block. Layers are ranked by
//! the validation accuracy of the network without them, and the
//! remove-and-retrain driver keeps shrinking the network while it stays above
//! a relative accuracy threshold.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod collapse;
pub mod data;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod ranking;
pub mod store;
pub mod tensor;
pub mod train;

pub use collapse::{
    attach_empirical_stats, collapse_and_recalibrate, collapse_layer, effective_affine, error_likelihood,
    partition_neurons, recalibrate_norms, recalibrate_norms_from, std_normal_cdf, NeuronPartition,
};
pub use data::{Dataset, Splits};
pub use error::{Result, TlcError};
pub use forward::{forward, loss_and_gradients, predict, Mode};
pub use metrics::{evaluate, kl_divergence, CollapseMode, Evaluation, KlComparison};
pub use nn::{Activation, ActivationKind, AffineBlock, BatchNorm, LayerId, LayerTriple, NetSpec, Norm, SequentialNet};
pub use pipeline::{tlc_run, tlc_run_observed, CompressionReport, RetrainMode, TlcConfig};
pub use ranking::{compare_substitutions, rank_layers, rank_layers_baseline, LayerRanking, RankCriterion};
pub use store::{count_flops, load_checkpoint, save_checkpoint, CostSummary};
pub use tensor::Matrix;
pub use train::{train_model, TrainSchedule};
