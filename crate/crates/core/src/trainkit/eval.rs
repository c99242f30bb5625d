//! True integer inference through the accumulator simulator.
//!
//! Weights and activations run as integer codes; each layer's dot products
//! accumulate in a `P`-bit register under the chosen mode. Scales are folded
//! back in only to form the real-valued pre-activations (bias add, ReLU,
//! requantization) and the final logits used for accuracy. `logit_mae`
//! compares the final-layer accumulator outputs of the `P`-bit pipeline
//! against an end-to-end exact pass, in integer units.

use ndarray::Array2;

use super::model::Model;
use super::train::argmax;
use super::{softmax_cross_entropy, ActivationKind, Metrics};
use crate::accsim::{matvec_accumulate, AccMode, SimReport};
use crate::dataio::Dataset;
use crate::error::Result;

/// Reference width used when no accumulator width is requested; wide enough
/// for every desk-scale bound.
pub const DEFAULT_ACC_BITS: u32 = 32;

struct PipelineOutput {
    /// Real-valued logits with scales and biases folded in.
    logits: Array2<f64>,
    /// Raw final-layer accumulator values.
    final_acc: Array2<i64>,
    /// Overflow accounting aggregated over every simulated layer.
    report: SimReport,
}

fn integer_pipeline(
    model: &Model,
    dataset: &Dataset,
    acc_bits: u32,
    mode: AccMode,
) -> Result<PipelineOutput> {
    let mut codes = dataset.inputs.clone();
    let mut input_scale = 1.0f64;
    let mut aggregate: Option<SimReport> = None;
    let layer_count = model.layers.len();
    let mut logits = None;
    let mut final_acc = None;
    for l in 0..layer_count {
        let wf = model.layers[l].forward_weights_strict()?;
        let (acc, layer_report) =
            matvec_accumulate(codes.view(), wf.codes().view(), acc_bits, mode)?;
        match aggregate.as_mut() {
            Some(agg) => agg.absorb(&layer_report),
            None => aggregate = Some(layer_report),
        }
        let scales = wf.scales();
        let bias = &model.layers[l].bias;
        let mut h = Array2::zeros(acc.dim());
        for b in 0..acc.nrows() {
            for c in 0..acc.ncols() {
                h[[b, c]] = input_scale * scales[c] * acc[[b, c]] as f64 + bias[c];
            }
        }
        if l + 1 < layer_count {
            if model.config.activation == ActivationKind::ReluUnsigned {
                h.mapv_inplace(|v| v.max(0.0));
            }
            let (_, next_codes, _) =
                model.act_quants[l].fake_quantize(&h, crate::a2q::ForwardMode::Quantized);
            input_scale = model.act_quants[l].scale();
            codes = next_codes;
        } else {
            logits = Some(h);
            final_acc = Some(acc);
        }
    }
    let mut report = aggregate.expect("at least one layer");
    report.logit_mae = 0.0;
    Ok(PipelineOutput {
        logits: logits.expect("set in final layer"),
        final_acc: final_acc.expect("set in final layer"),
        report,
    })
}

/// Evaluate a trained model on `dataset` with integer inference at the given
/// accumulator width and mode (width defaults to [`DEFAULT_ACC_BITS`]).
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    acc_bits: Option<u32>,
    mode: AccMode,
) -> Result<(Metrics, SimReport)> {
    model.check_dataset(dataset)?;
    let p = acc_bits.unwrap_or(DEFAULT_ACC_BITS);
    let out = integer_pipeline(model, dataset, p, mode)?;
    let mut report = out.report;
    if mode != AccMode::Exact {
        let exact = integer_pipeline(model, dataset, p, AccMode::Exact)?;
        let mut err_sum = 0.0;
        for (a, b) in out.final_acc.iter().zip(exact.final_acc.iter()) {
            err_sum += (a - b).abs() as f64;
        }
        report.logit_mae = err_sum / out.final_acc.len() as f64;
    }
    let (task_loss, _) = softmax_cross_entropy(&out.logits, &dataset.labels);
    let correct = out
        .logits
        .rows()
        .into_iter()
        .zip(&dataset.labels)
        .filter(|(row, &label)| argmax(row) == label as usize)
        .count();
    let metrics = Metrics {
        top1_accuracy: correct as f64 / dataset.len() as f64,
        sparsity: model.sparsity(),
        task_loss,
        reg_loss: model.reg_loss(),
    };
    Ok((metrics, report))
}
