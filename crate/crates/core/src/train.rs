//! Mini-batch SGD with momentum, weight decay and a multi-step learning-rate
//! schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, TlcError};
use crate::forward::{loss_and_gradients, update_running_stats, Gradients};
use crate::metrics::evaluate;
use crate::nn::{Activation, Norm, SequentialNet};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    /// L2 penalty on affine weights (not biases or norm parameters).
    pub weight_decay: f32,
    /// Epoch indices (0-based) at which the learning rate is multiplied by
    /// `drop_factor`.
    pub milestones: Vec<usize>,
    pub drop_factor: f32,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![20, 25],
            drop_factor: 0.1,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TlcError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TlcError::Config("batch_size must be >= 1".into()));
        }
        if !(self.drop_factor > 0.0 && self.drop_factor <= 1.0) {
            return Err(TlcError::Config("drop_factor must lie in (0, 1]".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(TlcError::Config("learning_rate > 0, momentum >= 0, weight_decay >= 0 required".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TlcError::Config("milestones must be strictly increasing".into()));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return Err(TlcError::Config("milestones must be < epochs".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.learning_rate * self.drop_factor.powi(drops as i32)
    }

    /// Rate of the last schedule stage.
    pub fn final_lr(&self) -> f32 {
        self.lr_at(self.epochs.saturating_sub(1))
    }

    /// Short run at the final-stage rate.
    pub fn finetune(&self, epochs: usize) -> TrainSchedule {
        TrainSchedule {
            epochs,
            learning_rate: self.final_lr(),
            milestones: Vec::new(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f32,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// Mini-batches of a shuffled index list. A trailing batch of one sample is
/// merged into its predecessor since batch statistics need two samples.
pub fn batch_ranges(len: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out = crate::par::chunk_ranges(len, batch_size);
    if out.len() >= 2 && out.last().is_some_and(|(s, e)| e - s == 1) {
        let (_, end) = out.pop().unwrap();
        out.last_mut().unwrap().1 = end;
    }
    out
}

/// Momentum buffers mirroring the trainable parameters.
struct Velocity {
    grads: Option<Gradients>,
}

fn step_slice(param: &mut [f32], grad: &[f32], vel: &mut [f32], lr: f32, mu: f32, wd: f32) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

fn zeros_like(g: &Gradients) -> Gradients {
    let mut z = g.clone();
    let zero = |v: &mut Vec<f32>| v.iter_mut().for_each(|x| *x = 0.0);
    let zero_m = |m: &mut Matrix| m.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
    for l in &mut z.layers {
        zero_m(&mut l.weights);
        zero(&mut l.bias);
        l.gamma.as_mut().map(zero);
        l.beta.as_mut().map(zero);
        l.prelu.as_mut().map(zero);
    }
    zero_m(&mut z.head_weights);
    zero(&mut z.head_bias);
    z
}

impl Velocity {
    fn apply(&mut self, model: &mut SequentialNet, g: &Gradients, lr: f32, mu: f32, wd: f32) {
        let v = self.grads.get_or_insert_with(|| zeros_like(g));
        for ((layer, lg), lv) in model.layers_mut().iter_mut().zip(&g.layers).zip(&mut v.layers) {
            step_slice(layer.affine.weights.as_mut_slice(), lg.weights.as_slice(), lv.weights.as_mut_slice(), lr, mu, wd);
            step_slice(&mut layer.affine.bias, &lg.bias, &mut lv.bias, lr, mu, wd);
            if let (Norm::Batch(bn), Some(gg), Some(gb)) = (&mut layer.norm, &lg.gamma, &lg.beta) {
                step_slice(&mut bn.gamma, gg, lv.gamma.as_mut().unwrap(), lr, mu, wd);
                step_slice(&mut bn.beta, gb, lv.beta.as_mut().unwrap(), lr, mu, wd);
            }
            if let (Activation::Prelu { slopes }, Some(gp)) = (&mut layer.activation, &lg.prelu) {
                step_slice(slopes, gp, lv.prelu.as_mut().unwrap(), lr, mu, wd);
            }
        }
        let head = model.head_mut();
        step_slice(head.weights.as_mut_slice(), g.head_weights.as_slice(), v.head_weights.as_mut_slice(), lr, mu, wd);
        step_slice(&mut head.bias, &g.head_bias, &mut v.head_bias, lr, mu, wd);
    }
}

/// Trains a copy of `model`. Shuffling is driven by `schedule.seed`, so two
/// runs with equal inputs produce bitwise-identical weights. The returned
/// model's running statistics are the exponential moving averages gathered
/// during training.
pub fn train_model(
    model: &SequentialNet,
    train: &Dataset,
    val: Option<&Dataset>,
    schedule: &TrainSchedule,
) -> Result<(SequentialNet, TrainHistory)> {
    schedule.validate()?;
    if train.is_empty() {
        return Err(TlcError::Input("empty training set".into()));
    }
    if train.dim() != model.input_dim() {
        return Err(TlcError::dim("training features", model.input_dim(), train.dim()));
    }
    if let Some(v) = val {
        if v.dim() != model.input_dim() {
            return Err(TlcError::dim("validation features", model.input_dim(), v.dim()));
        }
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut velocity = Velocity { grads: None };
    let mut history = TrainHistory::default();

    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for (start, end) in batch_ranges(order.len(), schedule.batch_size) {
            let idx = &order[start..end];
            let x = train.features.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let res = loss_and_gradients(&model, &x, &y).map_err(|e| match e {
                TlcError::NonFinite { .. } => TlcError::Diverged { epoch, loss: f64::NAN },
                other => other,
            })?;
            if !res.loss.is_finite() {
                return Err(TlcError::Diverged { epoch, loss: res.loss });
            }
            loss_sum += res.loss * idx.len() as f64;
            update_running_stats(&mut model, &res.trace);
            velocity.apply(&mut model, &res.gradients, lr, schedule.momentum, schedule.weight_decay);
        }
        if !model.is_finite() {
            return Err(TlcError::Diverged { epoch, loss: f64::NAN });
        }
        let val_accuracy = match val {
            Some(v) if !v.is_empty() => Some(evaluate(&model, v)?.accuracy),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / train.len() as f64,
            val_accuracy,
        };
        log::debug!("epoch {epoch}: loss {:.5} val {:?}", record.train_loss, record.val_accuracy);
        history.epochs.push(record);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn milestone_drops_learning_rate() {
        let s = TrainSchedule {
            epochs: 5,
            learning_rate: 0.1,
            milestones: vec![2],
            drop_factor: 0.1,
            ..TrainSchedule::default()
        };
        s.validate().unwrap();
        assert_eq!(s.lr_at(0), 0.1);
        assert_eq!(s.lr_at(1), 0.1);
        assert!((s.lr_at(3) - 0.1 * 0.1).abs() < 1e-9);
        assert!((s.final_lr() - 0.01).abs() < 1e-9);
    }

    #[test]
    fn schedule_validation() {
        let base = TrainSchedule { epochs: 10, milestones: vec![3, 6], ..TrainSchedule::default() };
        assert!(base.validate().is_ok());
        assert!(TrainSchedule { epochs: 0, ..base.clone() }.validate().is_err());
        assert!(TrainSchedule { milestones: vec![6, 3], ..base.clone() }.validate().is_err());
        assert!(TrainSchedule { milestones: vec![10], ..base.clone() }.validate().is_err());
        assert!(TrainSchedule { drop_factor: 0.0, ..base.clone() }.validate().is_err());
        assert!(TrainSchedule { drop_factor: 1.5, ..base }.validate().is_err());
    }

    #[test]
    fn single_sample_tail_is_merged() {
        assert_eq!(batch_ranges(9, 4), vec![(0, 4), (4, 9)]);
        assert_eq!(batch_ranges(10, 4), vec![(0, 4), (4, 8), (8, 10)]);
        assert_eq!(batch_ranges(1, 4), vec![(0, 1)]);
    }
}
