//! Shared oracles and fixtures for the integration suites.

#![allow(dead_code)]

use lpacc::dataio::{synth_dataset, Dataset, Split};
use lpacc::trainkit::{
    ActivationKind, Arch, Grads, LayerGrads, LayerWeights, Model, ModelConfig, TrainConfig,
};

pub const MNIST_DIR_ENV: &str = "LPACC_MNIST_DIR";

/// The motivating-task dataset: binarized two-class MNIST when the IDX files
/// are available locally, otherwise the separable synthetic stand-in with the
/// same shape (K=784, 1-bit unsigned inputs, 2 classes).
pub fn task_dataset(split: Split, seed: u64) -> (Dataset, bool) {
    if let Some(dir) = std::env::var_os(MNIST_DIR_ENV) {
        if let Ok(ds) = lpacc::dataio::load_mnist_split(&dir, split, (0, 1), 0.5) {
            return (ds, true);
        }
    }
    let samples = match split {
        Split::Train => 4096,
        Split::Test => 1024,
    };
    let ds = synth_dataset(784, 1, false, samples, 2, 1, split, seed)
        .expect("synthetic dataset parameters are valid");
    (ds, false)
}

/// Baseline (or accumulator-constrained) config for the motivating task.
pub fn task_model_config(acc_bits: Option<u32>) -> ModelConfig {
    ModelConfig {
        arch: Arch::Linear,
        weight_bits: 8,
        act_bits: 1,
        acc_bits,
        input_signed: false,
        activation: ActivationKind::ReluUnsigned,
        pin_io_8bit: false,
    }
}

pub fn task_train_config(seed: u64) -> TrainConfig {
    // the linear task takes a stronger rate than the default so the
    // norm-constrained models can regrow useful codes at tiny l1 budgets
    TrainConfig {
        learning_rate: 5e-2,
        seed,
        ..TrainConfig::default()
    }
}

/// Task for the accumulator-width sweeps (fig2 reproduction, certified
/// checkpoints): binarized MNIST when available, otherwise a smaller
/// synthetic task. The symmetric synthetic generator gives every informative
/// coordinate identical weight, so at K=784 the tightest l1 budgets sit below
/// the flat-direction firing threshold and the constrained models cannot
/// leave the all-zero-code fixed point; K=64 keeps the budget above it the
/// way MNIST's graded pixel importance does.
pub fn sweep_task_dataset(split: Split, seed: u64) -> (Dataset, bool) {
    if let Some(dir) = std::env::var_os(MNIST_DIR_ENV) {
        if let Ok(ds) = lpacc::dataio::load_mnist_split(&dir, split, (0, 1), 0.5) {
            return (ds, true);
        }
    }
    let samples = match split {
        Split::Train => 4096,
        Split::Test => 1024,
    };
    let ds = synth_dataset(64, 1, false, samples, 2, 1, split, seed)
        .expect("synthetic dataset parameters are valid");
    (ds, false)
}

pub fn sweep_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::default()
    }
}

/// Every input vector of length `k` with entries in the representable
/// `n_bits` (un)signed range, fed to `visit`.
pub fn for_each_input_vector(k: usize, n_bits: u32, signed: bool, visit: &mut impl FnMut(&[i64])) {
    let (lo, hi) = if signed {
        (-(1i64 << (n_bits - 1)), (1i64 << (n_bits - 1)) - 1)
    } else {
        (0, (1i64 << n_bits) - 1)
    };
    let mut x = vec![lo; k];
    loop {
        visit(&x);
        let mut i = 0;
        loop {
            if i == k {
                return;
            }
            if x[i] == hi {
                x[i] = lo;
                i += 1;
            } else {
                x[i] += 1;
                break;
            }
        }
    }
}

/// True iff every prefix partial sum of `sum x_i w_i` stays inside the
/// signed `acc_bits` interval, computed in wide exact arithmetic.
pub fn prefix_sums_within(x: &[i64], w: &[i64], acc_bits: u32) -> bool {
    let lo = -(1i128 << (acc_bits - 1));
    let hi = (1i128 << (acc_bits - 1)) - 1;
    let mut acc = 0i128;
    for (&xi, &wi) in x.iter().zip(w) {
        acc += xi as i128 * wi as i128;
        if acc < lo || acc > hi {
            return false;
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Flat parameter indexing for finite-difference checks
// ---------------------------------------------------------------------------

pub fn param_names(model: &Model) -> Vec<String> {
    let mut names = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        match &layer.weights {
            LayerWeights::Baseline(b) => {
                for i in 0..b.w.nrows() {
                    for j in 0..b.w.ncols() {
                        names.push(format!("layer{l}.w[{i},{j}]"));
                    }
                }
                for i in 0..b.d.len() {
                    names.push(format!("layer{l}.d[{i}]"));
                }
            }
            LayerWeights::A2q(a) => {
                for i in 0..a.v.nrows() {
                    for j in 0..a.v.ncols() {
                        names.push(format!("layer{l}.v[{i},{j}]"));
                    }
                }
                for i in 0..a.t.len() {
                    names.push(format!("layer{l}.t[{i}]"));
                }
                for i in 0..a.d.len() {
                    names.push(format!("layer{l}.d[{i}]"));
                }
            }
        }
        for i in 0..layer.bias.len() {
            names.push(format!("layer{l}.bias[{i}]"));
        }
    }
    names
}

fn with_param<R>(model: &mut Model, index: usize, f: impl FnOnce(&mut f64) -> R) -> R {
    let mut remaining = index;
    for layer in model.layers.iter_mut() {
        match &mut layer.weights {
            LayerWeights::Baseline(b) => {
                let nw = b.w.len();
                if remaining < nw {
                    let cols = b.w.ncols();
                    return f(&mut b.w[[remaining / cols, remaining % cols]]);
                }
                remaining -= nw;
                if remaining < b.d.len() {
                    return f(&mut b.d[remaining]);
                }
                remaining -= b.d.len();
            }
            LayerWeights::A2q(a) => {
                let nv = a.v.len();
                if remaining < nv {
                    let cols = a.v.ncols();
                    return f(&mut a.v[[remaining / cols, remaining % cols]]);
                }
                remaining -= nv;
                if remaining < a.t.len() {
                    return f(&mut a.t[remaining]);
                }
                remaining -= a.t.len();
                if remaining < a.d.len() {
                    return f(&mut a.d[remaining]);
                }
                remaining -= a.d.len();
            }
        }
        if remaining < layer.bias.len() {
            return f(&mut layer.bias[remaining]);
        }
        remaining -= layer.bias.len();
    }
    panic!("parameter index {index} out of range");
}

pub fn param_count(model: &Model) -> usize {
    model
        .layers
        .iter()
        .map(|layer| {
            let w = match &layer.weights {
                LayerWeights::Baseline(b) => b.w.len() + b.d.len(),
                LayerWeights::A2q(a) => a.v.len() + a.t.len() + a.d.len(),
            };
            w + layer.bias.len()
        })
        .sum()
}

pub fn get_param(model: &mut Model, index: usize) -> f64 {
    with_param(model, index, |p| *p)
}

pub fn set_param(model: &mut Model, index: usize, value: f64) {
    with_param(model, index, |p| *p = value);
}

/// Gradient value for the parameter at the same flat index.
pub fn grad_at(model: &Model, grads: &Grads, index: usize) -> f64 {
    let mut remaining = index;
    for (l, layer) in model.layers.iter().enumerate() {
        match (&layer.weights, &grads.layers[l]) {
            (LayerWeights::Baseline(b), LayerGrads::Baseline { w, d }) => {
                if remaining < w.len() {
                    let cols = b.w.ncols();
                    return w[[remaining / cols, remaining % cols]];
                }
                remaining -= w.len();
                if remaining < d.len() {
                    return d[remaining];
                }
                remaining -= d.len();
            }
            (LayerWeights::A2q(a), LayerGrads::A2q(g)) => {
                if remaining < g.v.len() {
                    let cols = a.v.ncols();
                    return g.v[[remaining / cols, remaining % cols]];
                }
                remaining -= g.v.len();
                if remaining < g.t.len() {
                    return g.t[remaining];
                }
                remaining -= g.t.len();
                if remaining < g.d.len() {
                    return g.d[remaining];
                }
                remaining -= g.d.len();
            }
            _ => unreachable!("gradient kind matches layer kind"),
        }
        if remaining < grads.biases[l].len() {
            return grads.biases[l][remaining];
        }
        remaining -= grads.biases[l].len();
    }
    panic!("parameter index {index} out of range");
}

/// Distance-from-kink smoothness probe for the straight-through surrogate
/// loss: far from clip boundaries, ReLU corners, the norm-cap min, and sign
/// changes of direction parameters.
pub fn model_is_smooth(model: &mut Model, batch: &ndarray::Array2<f64>, delta: f64) -> bool {
    use lpacc::a2q::ForwardMode;
    let cache = match model.forward(batch, ForwardMode::SteSurrogate, false) {
        Ok(c) => c,
        Err(_) => return false,
    };
    for (l, layer) in model.layers.iter().enumerate() {
        match &layer.weights {
            LayerWeights::Baseline(b) => {
                let range = b.range();
                let (n, p) = (range.min() as f64, range.max() as f64);
                for i in 0..b.w.nrows() {
                    let s = b.d[i].exp2();
                    for j in 0..b.w.ncols() {
                        let u = b.w[[i, j]] / s;
                        if (u - n).abs() < delta || (u - p).abs() < delta {
                            return false;
                        }
                    }
                }
            }
            LayerWeights::A2q(a) => {
                let caps = a.norm_cap().caps;
                for i in 0..a.t.len() {
                    if (a.t[i] - caps[i]).abs() < delta {
                        return false;
                    }
                }
                if a.v.iter().any(|v| v.abs() < delta) {
                    return false;
                }
                let fwd = a.forward(ForwardMode::SteSurrogate);
                let range = a.weight_range();
                let (n, p) = (range.min() as f64, range.max() as f64);
                for &u in fwd.scaled.iter() {
                    if (u - n).abs() < delta || (u - p).abs() < delta {
                        return false;
                    }
                }
            }
        }
        if l + 1 < model.layers.len() {
            // ReLU corners and activation-quantizer clip bounds. ReLU outputs
            // resting exactly at the unsigned lower bound 0 are flat regions,
            // not kinks (the ReLU corner itself is caught by the |z| check),
            // so only the upper bound matters there.
            for &z in cache.preact[l].iter() {
                if z.abs() < delta {
                    return false;
                }
            }
            let aq = &model.act_quants[l];
            let s = aq.scale();
            let (n, p) = (aq.range().min() as f64, aq.range().max() as f64);
            for &z in cache.preact[l].iter() {
                let (h, check_lower) = match model.config.activation {
                    ActivationKind::ReluUnsigned => (z.max(0.0), false),
                    ActivationKind::IdentitySigned => (z, true),
                };
                let u = h / s;
                if (check_lower && (u - n).abs() < delta) || (u - p).abs() < delta {
                    return false;
                }
            }
        }
    }
    true
}
