//! The two canned experiments behind `lpacc repro`.
//!
//! `fig2`: train a baseline 8-bit linear classifier, then sweep the
//! accumulator width, comparing wraparound and saturating inference against
//! accumulator-aware models retrained from scratch at each target width with
//! the same seed.
//!
//! `associativity`: take the trained baseline to a sub-bound width and
//! re-order the additions of every dot product under random permutations,
//! measuring how inner-most-loop saturation makes results order-dependent
//! while the exact reference and the outer-most-loop placement are not.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::accsim::{dot_accumulate_order, AccMode};
use crate::dataio::{Dataset, ReportRow};
use crate::error::{Error, Result};
use crate::trainkit::{evaluate, train, Metrics, Model, ModelConfig, TrainConfig};

/// Accumulator widths swept by the fig2 experiment.
pub const FIG2_P_RANGE: (u32, u32) = (8, 20);

/// One (P, variant) cell of the fig2 table.
#[derive(Debug, Clone)]
pub struct Fig2Cell {
    pub acc_bits: u32,
    /// "wraparound" / "saturate" / "exact" for the baseline model, "a2q" for
    /// the retrained accumulator-aware model evaluated at its own width.
    pub variant: String,
    pub metrics: Metrics,
    pub report: crate::accsim::SimReport,
}

impl Fig2Cell {
    pub fn to_report_row(&self) -> ReportRow {
        ReportRow {
            p: self.acc_bits,
            mode: self.variant.clone(),
            overflow_events: self.report.overflow_events,
            total_macs: self.report.total_macs,
            dot_products_with_overflow: self.report.dot_products_with_overflow,
            total_dot_products: self.report.total_dot_products,
            logit_mae: self.report.logit_mae,
            top1_accuracy: self.metrics.top1_accuracy,
            sparsity: self.metrics.sparsity,
        }
    }
}

/// Train the baseline once, retrain with the accumulator constraint at every
/// width in `p_range` (each constrained run is seeded from the trained
/// baseline weights, the usual float-pretrained initialization), and
/// evaluate all variants on the test split.
pub fn fig2(
    train_split: &Dataset,
    test_split: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    p_range: (u32, u32),
) -> Result<Vec<Fig2Cell>> {
    if model_config.acc_bits.is_some() {
        return Err(Error::InvalidParam(
            "fig2 takes the baseline model config; accumulator widths come from p_range".into(),
        ));
    }
    if p_range.0 < 2 || p_range.0 > p_range.1 {
        return Err(Error::InvalidParam(format!("bad width range {p_range:?}")));
    }
    let (baseline, _) = train(model_config, train_config, train_split)?;
    let mut cells = Vec::new();
    for p in p_range.0..=p_range.1 {
        for mode in [AccMode::Exact, AccMode::Wraparound, AccMode::Saturate] {
            let (metrics, report) = evaluate(&baseline, test_split, Some(p), mode)?;
            cells.push(Fig2Cell {
                acc_bits: p,
                variant: mode.as_str().to_string(),
                metrics,
                report,
            });
        }
        let (constrained, _) =
            crate::trainkit::train_from(baseline.to_a2q(p)?, train_config, train_split)?;
        let (metrics, report) = evaluate(&constrained, test_split, Some(p), AccMode::Wraparound)?;
        cells.push(Fig2Cell {
            acc_bits: p,
            variant: "a2q".into(),
            metrics,
            report,
        });
    }
    Ok(cells)
}

/// Outcome of one accumulation order (or of the order-independent variants).
#[derive(Debug, Clone, Copy)]
pub struct TrialOutcome {
    pub logit_mae: f64,
    pub top1_accuracy: f64,
    pub overflow_events: u64,
}

/// Results of the addition-reordering study on a single-layer model.
#[derive(Debug, Clone)]
pub struct AssociativityStudy {
    pub acc_bits: u32,
    pub mode: AccMode,
    pub per_trial: Vec<TrialOutcome>,
    /// The reduction applied once to the final exact sum instead of after
    /// every addition; order-independent by construction.
    pub outer_loop: TrialOutcome,
    /// Accuracy of the unbounded reference.
    pub exact_top1: f64,
}

impl AssociativityStudy {
    pub fn mean_logit_mae(&self) -> f64 {
        self.per_trial.iter().map(|t| t.logit_mae).sum::<f64>() / self.per_trial.len() as f64
    }

    pub fn min_logit_mae(&self) -> f64 {
        self.per_trial
            .iter()
            .map(|t| t.logit_mae)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_logit_mae(&self) -> f64 {
        self.per_trial
            .iter()
            .map(|t| t.logit_mae)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn logit_mae_variance(&self) -> f64 {
        let mean = self.mean_logit_mae();
        self.per_trial
            .iter()
            .map(|t| (t.logit_mae - mean).powi(2))
            .sum::<f64>()
            / self.per_trial.len() as f64
    }

    /// Rows: one per permutation trial, plus the outer-most-loop variant and
    /// the exact reference.
    pub fn to_report_rows(&self, total_dots: u64, total_macs: u64) -> Vec<ReportRow> {
        let mut rows = Vec::with_capacity(self.per_trial.len() + 2);
        let base = |mode: String, t: &TrialOutcome| ReportRow {
            p: self.acc_bits,
            mode,
            overflow_events: t.overflow_events,
            total_macs,
            dot_products_with_overflow: 0,
            total_dot_products: total_dots,
            logit_mae: t.logit_mae,
            top1_accuracy: t.top1_accuracy,
            sparsity: 0.0,
        };
        for (i, t) in self.per_trial.iter().enumerate() {
            rows.push(base(format!("{}-perm-{i}", self.mode), t));
        }
        rows.push(base(format!("{}-outer", self.mode), &self.outer_loop));
        rows.push(base(
            "exact".into(),
            &TrialOutcome {
                logit_mae: 0.0,
                top1_accuracy: self.exact_top1,
                overflow_events: 0,
            },
        ));
        rows
    }
}

/// Re-run every dot product of a single-layer model under `trials` random
/// accumulation orders (one shared permutation per trial). `max_samples`
/// bounds the evaluated test rows to keep the study fast.
pub fn associativity(
    model: &Model,
    test_split: &Dataset,
    acc_bits: u32,
    mode: AccMode,
    trials: u32,
    seed: u64,
    max_samples: usize,
) -> Result<AssociativityStudy> {
    if model.layers.len() != 1 {
        return Err(Error::InvalidParam(
            "the associativity study runs on the single-layer baseline model".into(),
        ));
    }
    if trials == 0 || max_samples == 0 {
        return Err(Error::InvalidParam(
            "trials and max_samples must be >= 1".into(),
        ));
    }
    model.check_dataset(test_split)?;
    let wf = model.layers[0].forward_weights_strict()?;
    let w_codes = wf.codes();
    let scales = wf.scales();
    let bias = &model.layers[0].bias;
    let rows = test_split.len().min(max_samples);
    let x = test_split.inputs.slice(ndarray::s![..rows, ..]).to_owned();
    let labels = &test_split.labels[..rows];
    let k = x.ncols();

    // order-independent exact reference
    let natural: Vec<usize> = (0..k).collect();
    let mut exact = Array2::<i64>::zeros((rows, w_codes.nrows()));
    for (b, xrow) in x.rows().into_iter().enumerate() {
        let xs = xrow.as_slice().expect("row-major");
        for (c, wrow) in w_codes.rows().into_iter().enumerate() {
            let ws = wrow.as_slice().expect("row-major");
            exact[[b, c]] = dot_accumulate_order(xs, ws, &natural, 63, AccMode::Exact)?.0;
        }
    }
    let fold = |acc: &Array2<i64>| -> (f64, f64) {
        // returns (top1, mae vs exact)
        let mut err = 0.0;
        let mut correct = 0usize;
        for b in 0..acc.nrows() {
            let mut best = 0;
            for c in 0..acc.ncols() {
                err += (acc[[b, c]] - exact[[b, c]]).abs() as f64;
                let logit = scales[c] * acc[[b, c]] as f64 + bias[c];
                let best_logit = scales[best] * acc[[b, best]] as f64 + bias[best];
                if logit > best_logit {
                    best = c;
                }
            }
            if best == labels[b] as usize {
                correct += 1;
            }
        }
        (correct as f64 / acc.nrows() as f64, err / acc.len() as f64)
    };
    let (exact_top1, _) = fold(&exact);

    let run_order = |order: &[usize]| -> Result<(Array2<i64>, u64)> {
        let mut out = Array2::<i64>::zeros((rows, w_codes.nrows()));
        let mut events = 0u64;
        for (b, xrow) in x.rows().into_iter().enumerate() {
            let xs = xrow.as_slice().expect("row-major");
            for (c, wrow) in w_codes.rows().into_iter().enumerate() {
                let ws = wrow.as_slice().expect("row-major");
                let (res, ov) = dot_accumulate_order(xs, ws, order, acc_bits, mode)?;
                out[[b, c]] = res;
                events += ov;
            }
        }
        Ok((out, events))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..k).collect();
    let mut per_trial = Vec::with_capacity(trials as usize);
    for _ in 0..trials {
        order.shuffle(&mut rng);
        let (acc, events) = run_order(&order)?;
        let (top1, mae) = fold(&acc);
        per_trial.push(TrialOutcome {
            logit_mae: mae,
            top1_accuracy: top1,
            overflow_events: events,
        });
    }

    // outer-most loop: reduce the exact result once
    let half = 1i128 << (acc_bits - 1);
    let outer_acc = exact.mapv(|v| {
        let v = v as i128;
        let reduced = match mode {
            AccMode::Exact => v,
            AccMode::Saturate => v.clamp(-half, half - 1),
            AccMode::Wraparound => {
                let m = 1i128 << acc_bits;
                let r = ((v % m) + m) % m;
                if r >= half {
                    r - m
                } else {
                    r
                }
            }
        };
        reduced as i64
    });
    let outer_events = exact
        .iter()
        .filter(|&&v| {
            let v = v as i128;
            v < -half || v > half - 1
        })
        .count() as u64;
    let (outer_top1, outer_mae) = fold(&outer_acc);

    Ok(AssociativityStudy {
        acc_bits,
        mode,
        per_trial,
        outer_loop: TrialOutcome {
            logit_mae: outer_mae,
            top1_accuracy: outer_top1,
            overflow_events: if mode == AccMode::Exact {
                0
            } else {
                outer_events
            },
        },
        exact_top1,
    })
}
