//! Minimal deterministic QAT training harness.
//!
//! Supports a linear classifier and small MLPs with manual backpropagation,
//! plain SGD with weight decay, softmax cross-entropy, and two weight
//! quantizers: the baseline uniform affine quantizer (half-way rounding,
//! learned per-channel power-of-two-initialized scales) and the
//! accumulator-aware quantizer from [`crate::a2q`]. Everything is seeded;
//! identical configs and seeds produce bitwise-identical metric histories.

mod eval;
mod model;
mod train;

pub use eval::{evaluate, DEFAULT_ACC_BITS};
pub use model::{
    ActQuant, BaselineWeights, ForwardCache, Grads, Layer, LayerForward, LayerGrads, LayerWeights,
    Model,
};
pub use train::{
    fake_metrics, loss_and_backward, train, train_from, train_from_with_hook, train_with_hook,
    TrainEvent,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network architecture: a single linear layer or an MLP with the given
/// hidden widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    Linear,
    Mlp(Vec<usize>),
}

/// Hidden nonlinearity plus the signedness of the activations it feeds into
/// the next layer: ReLU outputs are quantized unsigned, identity outputs
/// signed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActivationKind {
    ReluUnsigned,
    IdentitySigned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Weight bits `M`, shared by the hidden layers.
    pub weight_bits: u32,
    /// Activation bits `N` for hidden activation quantizers.
    pub act_bits: u32,
    /// Target accumulator width. `None` trains baseline QAT with wide
    /// (32-bit) accumulation; `Some(p)` trains with the accumulator-aware
    /// quantizer on every layer.
    pub acc_bits: Option<u32>,
    /// Signedness of the dataset inputs; must match the dataset's range.
    pub input_signed: bool,
    pub activation: ActivationKind,
    /// Pin the first and last layer weights to 8 bits regardless of
    /// `weight_bits`, the common convention for io layers.
    pub pin_io_8bit: bool,
}

impl ModelConfig {
    pub fn linear(weight_bits: u32, act_bits: u32, acc_bits: Option<u32>) -> Self {
        ModelConfig {
            arch: Arch::Linear,
            weight_bits,
            act_bits,
            acc_bits,
            input_signed: false,
            activation: ActivationKind::ReluUnsigned,
            pin_io_8bit: false,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.weight_bits == 0 || self.act_bits == 0 {
            return Err(Error::InvalidParam("bit widths must be >= 1".into()));
        }
        if let Arch::Mlp(hidden) = &self.arch {
            if hidden.is_empty() || hidden.contains(&0) {
                return Err(Error::InvalidParam(
                    "MLP hidden sizes must be nonempty and > 0".into(),
                ));
            }
        }
        Ok(())
    }

    /// Weight bits for layer `index` of `total` layers.
    pub(crate) fn layer_weight_bits(&self, index: usize, total: usize) -> u32 {
        if self.pin_io_8bit && (index == 0 || index + 1 == total) {
            8
        } else {
            self.weight_bits
        }
    }
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` every `period` epochs.
    StepDecay {
        factor: f64,
        period: u32,
    },
}

impl LrSchedule {
    pub fn rate_at(&self, base: f64, epoch: u32) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { factor, period } => {
                base * factor.powi((epoch / period.max(1)) as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: usize,
    /// Weight on the norm-cap hinge regularizer.
    pub lambda: f64,
    /// Applied to direction parameters (`v` / `W`) only; log-scale and
    /// log-norm parameters are never decayed.
    pub weight_decay: f64,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: 10,
            batch_size: 64,
            lambda: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidParam("learning rate must be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParam(
                "epochs and batch size must be >= 1".into(),
            ));
        }
        if self.lambda < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidParam(
                "lambda and weight decay must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Scalar metrics for one evaluation or one training epoch. Sparsity is the
/// fraction of exactly-zero integer weight codes, never of the real-valued
/// parameters behind them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1_accuracy: f64,
    pub sparsity: f64,
    pub task_loss: f64,
    pub reg_loss: f64,
}

/// Numerically stable mean softmax cross-entropy and its gradient
/// (mean-reduced) with respect to the logits.
pub(crate) fn softmax_cross_entropy(
    logits: &ndarray::Array2<f64>,
    labels: &[u32],
) -> (f64, ndarray::Array2<f64>) {
    let batch = logits.nrows();
    debug_assert_eq!(batch, labels.len());
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (b, mut row) in grad.rows_mut().into_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        let label = labels[b] as usize;
        loss -= (row[label] / denom).ln();
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v / denom - if c == label { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    (loss / batch as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let logits = array![[0.0, 0.0], [3.5, 3.5]];
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 1]);
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let logits = array![[0.3, -1.2, 0.7], [2.0, 0.1, -0.4]];
        let labels = [2u32, 0];
        let (_, grad) = softmax_cross_entropy(&logits, &labels);
        let h = 1e-6;
        for b in 0..2 {
            for c in 0..3 {
                let mut hi = logits.clone();
                let mut lo = logits.clone();
                hi[[b, c]] += h;
                lo[[b, c]] -= h;
                let fd = (softmax_cross_entropy(&hi, &labels).0
                    - softmax_cross_entropy(&lo, &labels).0)
                    / (2.0 * h);
                assert!((grad[[b, c]] - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn lr_schedule() {
        let s = LrSchedule::StepDecay {
            factor: 0.5,
            period: 2,
        };
        assert_eq!(s.rate_at(1.0, 0), 1.0);
        assert_eq!(s.rate_at(1.0, 1), 1.0);
        assert_eq!(s.rate_at(1.0, 2), 0.5);
        assert_eq!(s.rate_at(1.0, 5), 0.25);
        assert_eq!(LrSchedule::Constant.rate_at(0.1, 9), 0.1);
    }
}
