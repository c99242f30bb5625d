//! Bit-exact simulation of integer dot products under a narrow accumulator.
//!
//! Products are computed exactly (the multiplier is assumed wide enough);
//! only the accumulation register is narrowed to `P` signed bits. After every
//! addition the running sum is either kept unbounded (`Exact`, the oracle),
//! reduced modulo `2^P` into the signed interval (`Wraparound`, the hardware
//! default), or clamped to the interval (`Saturate`). An overflow event is
//! one addition whose unreduced result left `[-2^(P-1), 2^(P-1) - 1]`.
//!
//! Saturation is applied after every addition, i.e. at the inner-most loop;
//! the variant that applies the reduction only to the final exact sum (the
//! outer-most loop placement) exists inside [`permutation_study`] for
//! comparing the two placements.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accumulation semantics for a `P`-bit signed register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccMode {
    /// Unbounded integer arithmetic; the ground-truth reference.
    Exact,
    /// Two's complement modular reduction after every addition.
    Wraparound,
    /// Clamp to the interval after every addition.
    Saturate,
}

impl AccMode {
    pub const ALL: [AccMode; 3] = [AccMode::Exact, AccMode::Wraparound, AccMode::Saturate];

    pub fn as_str(&self) -> &'static str {
        match self {
            AccMode::Exact => "exact",
            AccMode::Wraparound => "wraparound",
            AccMode::Saturate => "saturate",
        }
    }
}

impl std::fmt::Display for AccMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AccMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact" => Ok(AccMode::Exact),
            "wraparound" | "wrap" => Ok(AccMode::Wraparound),
            "saturate" | "sat" => Ok(AccMode::Saturate),
            other => Err(Error::InvalidParam(format!(
                "unknown accumulator mode '{other}' (exact|wraparound|saturate)"
            ))),
        }
    }
}

/// Aggregate overflow accounting for a batch of simulated dot products.
///
/// The overflow rate is deliberately reported both ways: events per MAC
/// (`overflow_events` / `total_macs`) and the fraction of dot products that
/// saw at least one event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    /// Count of partial-sum range exits across all MACs.
    pub overflow_events: u64,
    /// Dot products with at least one overflow event.
    pub dot_products_with_overflow: u64,
    pub total_dot_products: u64,
    pub total_macs: u64,
    /// Mean absolute error of the `P`-bit results against the exact
    /// reference, in integer (accumulator) units.
    pub logit_mae: f64,
    pub mode: AccMode,
    pub acc_bits: u32,
}

impl SimReport {
    pub fn events_per_mac(&self) -> f64 {
        if self.total_macs == 0 {
            0.0
        } else {
            self.overflow_events as f64 / self.total_macs as f64
        }
    }

    pub fn dot_product_overflow_fraction(&self) -> f64 {
        if self.total_dot_products == 0 {
            0.0
        } else {
            self.dot_products_with_overflow as f64 / self.total_dot_products as f64
        }
    }

    /// Merge accounting from another batch (same mode and width).
    pub fn absorb(&mut self, other: &SimReport) {
        debug_assert_eq!(self.mode, other.mode);
        debug_assert_eq!(self.acc_bits, other.acc_bits);
        self.overflow_events += other.overflow_events;
        self.dot_products_with_overflow += other.dot_products_with_overflow;
        self.total_dot_products += other.total_dot_products;
        self.total_macs += other.total_macs;
    }
}

fn check_acc_bits(acc_bits: u32) -> Result<()> {
    if acc_bits == 0 || acc_bits > 63 {
        return Err(Error::UnsupportedAccWidth(acc_bits));
    }
    Ok(())
}

#[inline]
fn interval(acc_bits: u32) -> (i128, i128) {
    let half = 1i128 << (acc_bits - 1);
    (-half, half - 1)
}

#[inline]
fn wrap_into(v: i128, acc_bits: u32) -> i128 {
    let m = 1i128 << acc_bits;
    let half = 1i128 << (acc_bits - 1);
    let r = ((v % m) + m) % m;
    if r >= half {
        r - m
    } else {
        r
    }
}

/// Accumulate exact products in the given index order under one mode.
fn accumulate<'a>(
    pairs: impl Iterator<Item = (&'a i64, &'a i64)>,
    acc_bits: u32,
    mode: AccMode,
) -> (i128, u64) {
    let (lo, hi) = interval(acc_bits);
    let mut acc: i128 = 0;
    let mut overflows = 0u64;
    for (&x, &w) in pairs {
        let unreduced = acc + (x as i128) * (w as i128);
        acc = match mode {
            AccMode::Exact => unreduced,
            AccMode::Wraparound => {
                if unreduced < lo || unreduced > hi {
                    overflows += 1;
                }
                wrap_into(unreduced, acc_bits)
            }
            AccMode::Saturate => {
                if unreduced < lo || unreduced > hi {
                    overflows += 1;
                }
                unreduced.clamp(lo, hi)
            }
        };
    }
    (acc, overflows)
}

/// [`dot_accumulate`] with an explicit accumulation order: element `order[j]`
/// is added at position `j`. `order` must be a permutation of the indices.
pub fn dot_accumulate_order(
    x: &[i64],
    w: &[i64],
    order: &[usize],
    acc_bits: u32,
    mode: AccMode,
) -> Result<(i64, u64)> {
    check_acc_bits(acc_bits)?;
    if x.len() != w.len() || order.len() != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "lengths differ: x {} w {} order {}",
            x.len(),
            w.len(),
            order.len()
        )));
    }
    let (acc, overflows) = accumulate(order.iter().map(|&i| (&x[i], &w[i])), acc_bits, mode);
    let result = i64::try_from(acc).map_err(|_| Error::ResultTooWide(acc))?;
    Ok((result, overflows))
}

/// One dot product accumulated left-to-right in index order into a `P`-bit
/// signed register. Returns the stored result and the overflow-event count
/// (always zero in `Exact` mode, by definition).
pub fn dot_accumulate(x: &[i64], w: &[i64], acc_bits: u32, mode: AccMode) -> Result<(i64, u64)> {
    check_acc_bits(acc_bits)?;
    if x.len() != w.len() {
        return Err(Error::ShapeMismatch(format!(
            "dot product lengths differ: {} vs {}",
            x.len(),
            w.len()
        )));
    }
    let (acc, overflows) = accumulate(x.iter().zip(w.iter()), acc_bits, mode);
    let result = i64::try_from(acc).map_err(|_| Error::ResultTooWide(acc))?;
    Ok((result, overflows))
}

/// Batched simulation: `X` is `B x K` (one input vector per row), `W` is
/// `C x K` (one weight vector per output channel). Returns the `B x C`
/// result matrix and an aggregate report whose `logit_mae` compares against
/// an exact pass over the same inputs.
pub fn matvec_accumulate(
    x: ArrayView2<'_, i64>,
    w: ArrayView2<'_, i64>,
    acc_bits: u32,
    mode: AccMode,
) -> Result<(Array2<i64>, SimReport)> {
    check_acc_bits(acc_bits)?;
    if x.ncols() != w.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "input K {} vs weight K {}",
            x.ncols(),
            w.ncols()
        )));
    }
    let (b, c) = (x.nrows(), w.nrows());
    let mut y = Array2::zeros((b, c));
    let mut report = SimReport {
        overflow_events: 0,
        dot_products_with_overflow: 0,
        total_dot_products: (b * c) as u64,
        total_macs: (b * c * x.ncols()) as u64,
        logit_mae: 0.0,
        mode,
        acc_bits,
    };
    let mut abs_err_sum = 0.0f64;
    for (bi, xrow) in x.rows().into_iter().enumerate() {
        let xs = xrow.as_slice().expect("row-major layout");
        for (ci, wrow) in w.rows().into_iter().enumerate() {
            let ws = wrow.as_slice().expect("row-major layout");
            let (res, ov) = dot_accumulate(xs, ws, acc_bits, mode)?;
            y[[bi, ci]] = res;
            report.overflow_events += ov;
            if ov > 0 {
                report.dot_products_with_overflow += 1;
            }
            if mode != AccMode::Exact {
                let (exact, _) = accumulate(xs.iter().zip(ws.iter()), acc_bits, AccMode::Exact);
                abs_err_sum += (res as i128 - exact).unsigned_abs() as f64;
            }
        }
    }
    if mode != AccMode::Exact && report.total_dot_products > 0 {
        report.logit_mae = abs_err_sum / report.total_dot_products as f64;
    }
    Ok((y, report))
}

/// Results of re-running one dot product under random accumulation orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationStudy {
    /// Stored result per permutation trial.
    pub results: Vec<i64>,
    /// The unbounded reference result (order-independent).
    pub exact: i64,
    /// The outer-most-loop variant: the reduction applied once, to the final
    /// exact sum. Order-independent by construction.
    pub outer_loop_result: i64,
    pub mean_abs_deviation: f64,
    pub min_deviation: i64,
    pub max_deviation: i64,
}

impl PermutationStudy {
    pub fn distinct_results(&self) -> usize {
        let mut sorted = self.results.clone();
        sorted.sort_unstable();
        sorted.dedup();
        sorted.len()
    }
}

/// Run `trials` uniformly random permutations of the accumulation order
/// (seeded, reproducible) and compare every stored result against the exact
/// reference.
pub fn permutation_study(
    x: &[i64],
    w: &[i64],
    acc_bits: u32,
    mode: AccMode,
    trials: u32,
    seed: u64,
) -> Result<PermutationStudy> {
    check_acc_bits(acc_bits)?;
    if x.len() != w.len() {
        return Err(Error::ShapeMismatch(format!(
            "dot product lengths differ: {} vs {}",
            x.len(),
            w.len()
        )));
    }
    if trials == 0 {
        return Err(Error::InvalidParam("trials must be >= 1".into()));
    }
    let (exact_wide, _) = accumulate(x.iter().zip(w.iter()), acc_bits, AccMode::Exact);
    let exact = i64::try_from(exact_wide).map_err(|_| Error::ResultTooWide(exact_wide))?;
    let outer = match mode {
        AccMode::Exact => exact_wide,
        AccMode::Wraparound => wrap_into(exact_wide, acc_bits),
        AccMode::Saturate => {
            let (lo, hi) = interval(acc_bits);
            exact_wide.clamp(lo, hi)
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut results = Vec::with_capacity(trials as usize);
    let mut abs_sum = 0.0f64;
    let mut min_dev = i64::MAX;
    let mut max_dev = i64::MIN;
    for _ in 0..trials {
        order.shuffle(&mut rng);
        let (acc, _) = accumulate(order.iter().map(|&i| (&x[i], &w[i])), acc_bits, mode);
        let res = i64::try_from(acc).map_err(|_| Error::ResultTooWide(acc))?;
        let dev = res - exact;
        abs_sum += dev.unsigned_abs() as f64;
        min_dev = min_dev.min(dev);
        max_dev = max_dev.max(dev);
        results.push(res);
    }
    Ok(PermutationStudy {
        results,
        exact,
        outer_loop_result: i64::try_from(outer).map_err(|_| Error::ResultTooWide(outer))?,
        mean_abs_deviation: abs_sum / trials as f64,
        min_deviation: min_dev,
        max_deviation: max_dev,
    })
}

/// One row of an accumulator-width sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub report: SimReport,
    pub top1_accuracy: f64,
}

/// Evaluate a model closure over the grid of accumulator widths and modes,
/// producing the overflow-rate / logit-MAE / accuracy table. The closure
/// receives `(acc_bits, mode)` and returns the aggregate report plus task
/// accuracy for that configuration.
pub fn overflow_sweep<F>(
    mut eval: F,
    acc_bits: impl IntoIterator<Item = u32>,
    modes: &[AccMode],
) -> Result<Vec<SweepRow>>
where
    F: FnMut(u32, AccMode) -> Result<(SimReport, f64)>,
{
    let widths: Vec<u32> = acc_bits.into_iter().collect();
    if widths.is_empty() {
        return Err(Error::InvalidParam(
            "accumulator width range is empty".into(),
        ));
    }
    let mut rows = Vec::with_capacity(widths.len() * modes.len());
    for &p in &widths {
        for &mode in modes {
            let (report, top1) = eval(p, mode)?;
            rows.push(SweepRow {
                report,
                top1_accuracy: top1,
            });
        }
    }
    Ok(rows)
}
