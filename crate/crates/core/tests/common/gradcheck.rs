//! Finite-difference gradient check against the f64 reference network.

use super::{random_dataset, rows_f64, RefNet};
use tlc_core::{loss_and_gradients, SequentialNet};

pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
/// Absolute slack for gradients that are analytically zero, such as a bias
/// feeding a batch norm.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Weight(usize, usize, usize),
    Bias(usize, usize),
    Gamma(usize, usize),
    Beta(usize, usize),
    Prelu(usize, usize),
    HeadWeight(usize, usize),
    HeadBias(usize),
}

fn slots(net: &RefNet) -> Vec<Slot> {
    let mut out = Vec::new();
    for (k, l) in net.layers.iter().enumerate() {
        for r in 0..l.w.len() {
            for c in 0..l.w[r].len() {
                out.push(Slot::Weight(k, r, c));
            }
            out.push(Slot::Bias(k, r));
            if l.bn.is_some() {
                out.push(Slot::Gamma(k, r));
                out.push(Slot::Beta(k, r));
            }
            if matches!(l.act, super::RefAct::Prelu(_)) {
                out.push(Slot::Prelu(k, r));
            }
        }
    }
    for r in 0..net.head_w.len() {
        for c in 0..net.head_w[r].len() {
            out.push(Slot::HeadWeight(r, c));
        }
        out.push(Slot::HeadBias(r));
    }
    out
}

fn param(net: &mut RefNet, s: Slot) -> &mut f64 {
    match s {
        Slot::Weight(k, r, c) => &mut net.layers[k].w[r][c],
        Slot::Bias(k, r) => &mut net.layers[k].b[r],
        Slot::Gamma(k, r) => &mut net.layers[k].bn.as_mut().unwrap().gamma[r],
        Slot::Beta(k, r) => &mut net.layers[k].bn.as_mut().unwrap().beta[r],
        Slot::Prelu(k, r) => match &mut net.layers[k].act {
            super::RefAct::Prelu(a) => &mut a[r],
            _ => unreachable!(),
        },
        Slot::HeadWeight(r, c) => &mut net.head_w[r][c],
        Slot::HeadBias(r) => &mut net.head_b[r],
    }
}

fn analytic(g: &tlc_core::forward::Gradients, s: Slot) -> f64 {
    (match s {
        Slot::Weight(k, r, c) => g.layers[k].weights[(r, c)],
        Slot::Bias(k, r) => g.layers[k].bias[r],
        Slot::Gamma(k, r) => g.layers[k].gamma.as_ref().unwrap()[r],
        Slot::Beta(k, r) => g.layers[k].beta.as_ref().unwrap()[r],
        Slot::Prelu(k, r) => g.layers[k].prelu.as_ref().unwrap()[r],
        Slot::HeadWeight(r, c) => g.head_weights[(r, c)],
        Slot::HeadBias(r) => g.head_bias[r],
    }) as f64
}

fn signs(z: &[Vec<Vec<f64>>]) -> Vec<bool> {
    z.iter().flatten().flatten().map(|&v| v > 0.0).collect()
}

pub struct Outcome {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

/// Central differences of the f64 oracle loss against the engine gradient.
pub fn check(model: &SequentialNet, seed: u64) -> Outcome {
    let data = random_dataset(12, model.input_dim(), model.class_count(), seed);
    let g = loss_and_gradients(model, &data.features, &data.labels).unwrap().gradients;
    let base = RefNet::from_model(model);
    let batch = rows_f64(&data.features);
    let kinked = base.layers.iter().any(|l| l.act.has_kink());
    let base_signs = signs(&base.train_pre_activations(&batch));
    let mut out = Outcome {
        checked: 0,
        skipped: 0,
        worst: 0.0,
        failures: Vec::new(),
    };
    for s in slots(&base) {
        let mut plus = base.clone();
        *param(&mut plus, s) += STEP;
        let mut minus = base.clone();
        *param(&mut minus, s) -= STEP;
        if kinked {
            let crosses = signs(&plus.train_pre_activations(&batch)) != base_signs
                || signs(&minus.train_pre_activations(&batch)) != base_signs;
            if crosses {
                out.skipped += 1;
                continue;
            }
        }
        let numeric = (plus.train_loss(&batch, &data.labels) - minus.train_loss(&batch, &data.labels)) / (2.0 * STEP);
        let a = analytic(&g, s);
        let err = (a - numeric).abs();
        let scale = a.abs().max(numeric.abs());
        out.checked += 1;
        out.worst = out.worst.max(err / scale.max(1e-3));
        if err > REL_TOL * scale && err > ABS_FLOOR {
            out.failures.push(format!("{s:?}: analytic {a:.8e} numeric {numeric:.8e}"));
        }
    }
    out
}

