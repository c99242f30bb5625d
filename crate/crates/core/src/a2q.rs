//! Accumulator-aware weight quantization (A2Q).
//!
//! Weights are reparameterized per output channel as `w_i = g_i * v_i /
//! ||v_i||_1` with a learned log2 norm `g_i = 2^t_i` and a learned log2 scale
//! `s_i = 2^d_i`. Capping `t_i` at
//!
//! ```text
//! T_i = 1_signed(x) + log2(2^(P-1) - 1) + d_i - N
//! ```
//!
//! makes `g_i <= s_i * (2^(P-1) - 1) * 2^(1_signed - N)`, i.e. the channel's
//! l1 budget for a `P`-bit accumulator. The scaled direction is rounded
//! *toward zero*, so the integer codes can never round upward past the
//! budget: `||q_i||_1 <= g_i / s_i` holds for every parameter setting, not
//! just converged ones, because the effective norm is `2^min(T_i, t_i)`.
//!
//! The hinge penalty `sum_i max(t_i - T_i, 0)` keeps `t` from stalling above
//! the cap, where the min would otherwise block its gradient.

use ndarray::{Array1, Array2, Axis};

use crate::bounds;
use crate::error::{Error, Result};
use crate::quant::{IntRange, Rounding};

/// Floor applied to a channel's l1 direction norm during training so a
/// collapsed channel divides by 1e-10 instead of zero. Inference-path
/// quantization refuses zero norms outright instead of masking them.
pub const NORM_FLOOR: f64 = 1e-10;

/// Largest supported target accumulator width. Keeps the l1 budget and every
/// per-element scaled magnitude exactly analyzable in f64, which the
/// norm-cap guarantee relies on.
pub const MAX_TARGET_ACC_BITS: u32 = 48;

/// Whether a forward pass quantizes for real or substitutes the identity for
/// the rounding step (the straight-through surrogate used by gradient
/// checks). Clipping applies in both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Quantized,
    SteSurrogate,
}

/// Per-layer learnable state: direction rows `v` (one per output channel),
/// per-channel log2 norms `t`, per-channel log2 scales `d`, and the fixed
/// data-type / target-accumulator configuration.
#[derive(Debug, Clone)]
pub struct A2qLayerParams {
    /// Direction parameters, `C x K`.
    pub v: Array2<f64>,
    /// Per-channel log2 of the norm parameter `g`.
    pub t: Array1<f64>,
    /// Per-channel log2 of the quantization scale `s`.
    pub d: Array1<f64>,
    weight_bits: u32,
    acc_bits: u32,
    input_bits: u32,
    input_signed: bool,
}

/// Per-channel caps `T_i` on the log2 norm parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct NormCap {
    pub caps: Array1<f64>,
}

/// Output of quantizing one layer's weights.
#[derive(Debug, Clone)]
pub struct QuantizedWeights {
    /// Integer codes, `C x K`, in the signed `M`-bit range.
    pub codes: Array2<i64>,
    /// Dequantized (fake-quantized) weights used by the training forward
    /// pass; in surrogate mode the rounding step is skipped.
    pub fake: Array2<f64>,
    /// Per-channel scales `s_i = 2^(d_i)`.
    pub scales: Array1<f64>,
    pub range: IntRange,
}

/// Forward-pass cache needed by [`A2qLayerParams::backward`].
#[derive(Debug, Clone)]
pub struct A2qForward {
    pub weights: QuantizedWeights,
    /// Pre-rounding scaled direction `u = (g/s) * v / ||v||_1`, `C x K`.
    pub scaled: Array2<f64>,
    /// True where `u` lies inside `[n, p]` (clipped-STE mask).
    pub in_range: Array2<bool>,
    /// Effective per-channel norm ratio `g/s = 2^(min(T,t) - d)`.
    pub norm_ratio: Array1<f64>,
    /// l1 norms of `v` after the training floor.
    pub norms: Array1<f64>,
    /// True where the min in `g = 2^min(T,t)` selected `t` (ties go to `t`).
    pub t_branch: Array1<bool>,
}

/// Gradients with respect to the learnable parameters.
#[derive(Debug, Clone)]
pub struct A2qGrads {
    pub v: Array2<f64>,
    pub t: Array1<f64>,
    pub d: Array1<f64>,
}

impl A2qLayerParams {
    pub fn new(
        v: Array2<f64>,
        t: Array1<f64>,
        d: Array1<f64>,
        weight_bits: u32,
        acc_bits: u32,
        input_bits: u32,
        input_signed: bool,
    ) -> Result<Self> {
        let channels = v.nrows();
        if channels == 0 || v.ncols() == 0 {
            return Err(Error::InvalidParam(
                "v must be a nonempty C x K matrix".into(),
            ));
        }
        if t.len() != channels || d.len() != channels {
            return Err(Error::ShapeMismatch(format!(
                "t ({}) and d ({}) must have one entry per channel ({channels})",
                t.len(),
                d.len()
            )));
        }
        if weight_bits == 0 || input_bits == 0 {
            return Err(Error::InvalidParam("bit widths must be >= 1".into()));
        }
        if acc_bits < 2 {
            // P = 1 admits only all-zero weights (l1 budget 0), which the
            // log-domain norm parameterization cannot express.
            return Err(Error::InvalidParam(
                "target accumulator width must be >= 2 for A2Q".into(),
            ));
        }
        if acc_bits > MAX_TARGET_ACC_BITS {
            return Err(Error::InvalidParam(format!(
                "target accumulator width must be <= {MAX_TARGET_ACC_BITS}, got {acc_bits}"
            )));
        }
        for x in v.iter().chain(t.iter()).chain(d.iter()) {
            if !x.is_finite() {
                return Err(Error::InvalidParam("parameters must be finite".into()));
            }
        }
        Ok(A2qLayerParams {
            v,
            t,
            d,
            weight_bits,
            acc_bits,
            input_bits,
            input_signed,
        })
    }

    /// Initialize from a pretrained real-valued weight matrix: `v <- W`,
    /// `t_i <- log2(max(||W_i||_1, eps))`, `d_i <- log2(max_j |W_ij| /
    /// (2^(M-1) - 1))`, then `t` clamped to the cap so the initial
    /// fake-quantized weights approximate `W` while already satisfying the
    /// accumulator constraint.
    pub fn from_pretrained(
        w: &Array2<f64>,
        weight_bits: u32,
        acc_bits: u32,
        input_bits: u32,
        input_signed: bool,
    ) -> Result<Self> {
        let p_max = ((1i64 << (weight_bits.min(52) - 1)) - 1).max(1) as f64;
        let t = w
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .map(|x| x.abs())
                    .sum::<f64>()
                    .max(NORM_FLOOR)
                    .log2()
            })
            .collect::<Array1<f64>>();
        let d = w
            .rows()
            .into_iter()
            .map(|row| {
                let amax = row.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                (amax / p_max).max(NORM_FLOOR).log2()
            })
            .collect::<Array1<f64>>();
        let mut params = Self::new(
            w.clone(),
            t,
            d,
            weight_bits,
            acc_bits,
            input_bits,
            input_signed,
        )?;
        let caps = params.norm_cap().caps;
        ndarray::Zip::from(&mut params.t)
            .and(&caps)
            .for_each(|t, &cap| *t = t.min(cap));
        Ok(params)
    }

    pub fn channels(&self) -> usize {
        self.v.nrows()
    }

    pub fn fan_in(&self) -> usize {
        self.v.ncols()
    }

    pub fn weight_bits(&self) -> u32 {
        self.weight_bits
    }

    pub fn acc_bits(&self) -> u32 {
        self.acc_bits
    }

    pub fn input_bits(&self) -> u32 {
        self.input_bits
    }

    pub fn input_signed(&self) -> bool {
        self.input_signed
    }

    pub fn weight_range(&self) -> IntRange {
        IntRange::new(self.weight_bits, true).expect("validated at construction")
    }

    /// Per-channel cap `T_i = 1_signed + log2(2^(P-1) - 1) + d_i - N`.
    /// `g_i <= s_i * l1_budget` exactly when `t_i <= T_i`.
    pub fn norm_cap(&self) -> NormCap {
        let budget_log = (((1u64 << (self.acc_bits - 1)) - 1) as f64).log2();
        let base = self.input_signed as u32 as f64 + budget_log - self.input_bits as f64;
        NormCap {
            caps: self.d.mapv(|d| base + d),
        }
    }

    /// Effective norm-to-scale ratio `g_i / s_i = 2^(min(T_i, t_i) - d_i)`.
    /// When the cap is active this is computed in its exact product form
    /// `(2^(P-1) - 1) * 2^(1_signed - N)` so the budget is never exceeded by
    /// a log/exp round trip.
    fn norm_ratios(&self, caps: &NormCap) -> Array1<f64> {
        let budget = bounds::l1_budget(self.acc_bits, self.input_bits, self.input_signed)
            .expect("validated at construction");
        let mut out = Array1::zeros(self.channels());
        for i in 0..self.channels() {
            out[i] = if self.t[i] <= caps.caps[i] {
                (self.t[i] - self.d[i]).exp2()
            } else {
                budget
            };
        }
        out
    }

    fn floored_norms(&self) -> Array1<f64> {
        self.v
            .rows()
            .into_iter()
            .map(|row| row.iter().map(|x| x.abs()).sum::<f64>().max(NORM_FLOOR))
            .collect()
    }

    /// Full forward pass with cache; `rounding` is toward zero in normal
    /// operation and is swappable only to demonstrate that upward rounding
    /// breaks the norm guarantee.
    fn forward_with_rounding(&self, mode: ForwardMode, rounding: Rounding) -> A2qForward {
        let caps = self.norm_cap();
        let ratios = self.norm_ratios(&caps);
        let norms = self.floored_norms();
        let range = self.weight_range();
        let (n, p) = (range.min() as f64, range.max() as f64);

        let mut scaled = self.v.clone();
        for (i, mut row) in scaled.rows_mut().into_iter().enumerate() {
            let f = ratios[i] / norms[i];
            row.mapv_inplace(|x| x * f);
        }
        let in_range = scaled.mapv(|u| u >= n && u <= p);
        let codes = scaled.mapv(|u| {
            let r = match rounding {
                Rounding::TowardZero => u.trunc(),
                Rounding::HalfWay => u.round_ties_even(),
            };
            r.clamp(n, p) as i64
        });
        let scales = self.d.mapv(f64::exp2);
        let mut fake = match mode {
            ForwardMode::Quantized => codes.mapv(|c| c as f64),
            ForwardMode::SteSurrogate => scaled.mapv(|u| u.clamp(n, p)),
        };
        for (i, mut row) in fake.rows_mut().into_iter().enumerate() {
            let s = scales[i];
            row.mapv_inplace(|x| x * s);
        }
        let t_branch = ndarray::Zip::from(&self.t)
            .and(&caps.caps)
            .map_collect(|&t, &cap| t <= cap);
        A2qForward {
            weights: QuantizedWeights {
                codes,
                fake,
                scales,
                range,
            },
            scaled,
            in_range,
            norm_ratio: ratios,
            norms,
            t_branch,
        }
    }

    pub fn forward(&self, mode: ForwardMode) -> A2qForward {
        self.forward_with_rounding(mode, Rounding::TowardZero)
    }

    /// Quantize with the training-path norm floor: scale, round toward zero,
    /// clip, dequantize. Returns integer codes and fake-quantized weights.
    pub fn quantize_weights(&self) -> QuantizedWeights {
        self.forward(ForwardMode::Quantized).weights
    }

    /// Inference-path quantization: identical except an exactly zero channel
    /// norm is an error rather than being floored away.
    pub fn quantize_weights_strict(&self) -> Result<QuantizedWeights> {
        for (i, row) in self.v.rows().into_iter().enumerate() {
            if row.iter().map(|x| x.abs()).sum::<f64>() == 0.0 {
                return Err(Error::ZeroChannelNorm { channel: i });
            }
        }
        Ok(self.quantize_weights())
    }

    /// Like [`Self::quantize_weights`] but with a caller-chosen rounding
    /// mode. Only `TowardZero` carries the norm guarantee; `HalfWay` is
    /// exposed so tests can exhibit budget violations from upward rounding.
    pub fn quantize_weights_rounding(&self, rounding: Rounding) -> QuantizedWeights {
        self.forward_with_rounding(ForwardMode::Quantized, rounding)
            .weights
    }

    /// Straight-through backward pass. Rounding passes gradients unchanged;
    /// clipped elements pass none (clipped STE). The chain rule runs through
    /// `g = 2^min(T, t)` (to `t` when `t <= T`, otherwise to `d` through the
    /// cap, which is affine in `d`), through `s = 2^d`, and through the l1
    /// normalization with subgradient `sign(v)`, `sign(0) = 0`.
    pub fn backward(&self, fwd: &A2qForward, upstream: &Array2<f64>) -> Result<A2qGrads> {
        if upstream.dim() != self.v.dim() {
            return Err(Error::ShapeMismatch(format!(
                "upstream {:?} vs params {:?}",
                upstream.dim(),
                self.v.dim()
            )));
        }
        let ln2 = std::f64::consts::LN_2;
        let mut grad_v = Array2::zeros(self.v.dim());
        let mut grad_t = Array1::zeros(self.channels());
        let mut grad_d = Array1::zeros(self.channels());

        for i in 0..self.channels() {
            let s = fwd.weights.scales[i];
            let norm = fwd.norms[i];
            let g = fwd.norm_ratio[i] * s;
            let up = upstream.index_axis(Axis(0), i);
            let v = self.v.index_axis(Axis(0), i);
            let u = fwd.scaled.index_axis(Axis(0), i);
            let mask = fwd.in_range.index_axis(Axis(0), i);
            let codes = fwd.weights.codes.index_axis(Axis(0), i);

            // masked_dot = sum_j up_j m_j v_j, the shared normalization term
            let mut masked_dot = 0.0;
            // sum over in-range elements of up_j * (u_j * s) = up_j * w~_j
            let mut surrogate_dot = 0.0;
            // sum over clipped elements of up_j * q_j * s
            let mut clipped_dot = 0.0;
            for j in 0..v.len() {
                if mask[j] {
                    masked_dot += up[j] * v[j];
                    surrogate_dot += up[j] * u[j] * s;
                } else {
                    clipped_dot += up[j] * codes[j] as f64 * s;
                }
            }
            {
                let mut gv = grad_v.index_axis_mut(Axis(0), i);
                for j in 0..v.len() {
                    let direct = if mask[j] { up[j] } else { 0.0 };
                    gv[j] = (g / norm) * (direct - v[j].signum_or_zero() * masked_dot / norm);
                }
            }
            if fwd.t_branch[i] {
                grad_t[i] = ln2 * surrogate_dot;
                grad_d[i] = ln2 * clipped_dot;
            } else {
                // min selected the cap: g = 2^T with T affine in d, so the
                // norm path routes to d instead of t.
                grad_t[i] = 0.0;
                grad_d[i] = ln2 * (surrogate_dot + clipped_dot);
            }
        }
        Ok(A2qGrads {
            v: grad_v,
            t: grad_t,
            d: grad_d,
        })
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}

/// Hinge penalty summed over layers and channels: `sum_l sum_i max(t_i -
/// T_i, 0)`. Zero exactly when every channel's norm parameter sits at or
/// below its cap.
pub fn regularization_penalty<'a>(layers: impl IntoIterator<Item = &'a A2qLayerParams>) -> f64 {
    layers
        .into_iter()
        .map(|layer| {
            let caps = layer.norm_cap().caps;
            layer
                .t
                .iter()
                .zip(caps.iter())
                .map(|(&t, &cap)| (t - cap).max(0.0))
                .sum::<f64>()
        })
        .sum()
}
