//! Uniform affine quantization primitives.
//!
//! Everything downstream (bounds, the A2Q operator, the simulator, the
//! training harness) is phrased in terms of the types here: an integer range
//! `[n, p]` derived from a bit width and signedness, a quantizer spec
//! `(range, scale, zero_point, rounding)`, and integer tensors that are
//! guaranteed by construction to lie inside their range.
//!
//! The quantizer maps `x -> clip(round(x / s) + z, n, p)` and the dequantizer
//! maps `q -> s * (q - z)`. Two rounding modes exist: half-way rounding with
//! ties to even (the conventional choice for weights and activations), and
//! round-toward-zero (truncation), which never increases a magnitude and is
//! what the accumulator-aware weight quantizer relies on.

use ndarray::{Array, ArrayBase, Data, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported bit width for a data type range; keeps `[n, p]` and all
/// products exactly representable in `i64`/`f64` arithmetic.
pub const MAX_RANGE_BITS: u32 = 52;

/// Rounding mode applied after scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rounding {
    /// Round to nearest, ties to even.
    HalfWay,
    /// Truncate toward zero: `|round(x)| <= |x|` always.
    TowardZero,
}

/// Representable integer interval of a `bit_width`-bit (un)signed type.
///
/// Signed: `n = -2^(b-1)`, `p = 2^(b-1) - 1`. Unsigned: `n = 0`,
/// `p = 2^b - 1`. Zero is representable either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    bit_width: u32,
    signed: bool,
}

impl IntRange {
    pub fn new(bit_width: u32, signed: bool) -> Result<Self> {
        if bit_width == 0 || bit_width > MAX_RANGE_BITS {
            return Err(Error::InvalidParam(format!(
                "bit width must be in 1..={MAX_RANGE_BITS}, got {bit_width}"
            )));
        }
        Ok(IntRange { bit_width, signed })
    }

    pub fn bit_width(&self) -> u32 {
        self.bit_width
    }

    pub fn signed(&self) -> bool {
        self.signed
    }

    /// Lower end `n` of the representable interval.
    pub fn min(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.bit_width - 1))
        } else {
            0
        }
    }

    /// Upper end `p` of the representable interval.
    pub fn max(&self) -> i64 {
        if self.signed {
            (1i64 << (self.bit_width - 1)) - 1
        } else {
            (1i64 << self.bit_width) - 1
        }
    }

    pub fn contains(&self, v: i64) -> bool {
        self.min() <= v && v <= self.max()
    }
}

/// One uniform affine quantizer: range, strictly positive scale, zero point,
/// rounding mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    range: IntRange,
    scale: f64,
    zero_point: i64,
    rounding: Rounding,
}

impl QuantSpec {
    pub fn new(range: IntRange, scale: f64, zero_point: i64, rounding: Rounding) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidParam(format!(
                "scale must be finite and > 0, got {scale}"
            )));
        }
        if !range.contains(zero_point) {
            return Err(Error::InvalidParam(format!(
                "zero point {zero_point} outside [{}, {}]",
                range.min(),
                range.max()
            )));
        }
        Ok(QuantSpec {
            range,
            scale,
            zero_point,
            rounding,
        })
    }

    /// Signed weight quantizer: zero point fixed at 0.
    pub fn weight(bit_width: u32, scale: f64, rounding: Rounding) -> Result<Self> {
        Self::new(IntRange::new(bit_width, true)?, scale, 0, rounding)
    }

    pub fn range(&self) -> IntRange {
        self.range
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn zero_point(&self) -> i64 {
        self.zero_point
    }

    pub fn rounding(&self) -> Rounding {
        self.rounding
    }
}

/// Integer-valued tensor tagged with the spec that produced it. Every element
/// lies in the spec's range; construction enforces this.
#[derive(Debug, Clone, PartialEq)]
pub struct IntTensor<D: Dimension> {
    values: Array<i64, D>,
    spec: QuantSpec,
}

impl<D: Dimension> IntTensor<D> {
    pub fn from_parts(values: Array<i64, D>, spec: QuantSpec) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !spec.range().contains(**v)) {
            return Err(Error::InvalidParam(format!(
                "value {bad} outside range [{}, {}]",
                spec.range().min(),
                spec.range().max()
            )));
        }
        Ok(IntTensor { values, spec })
    }

    pub fn values(&self) -> &Array<i64, D> {
        &self.values
    }

    pub fn into_values(self) -> Array<i64, D> {
        self.values
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }
}

/// Round a finite value under the given mode. `TowardZero` truncates
/// (`trunc(-1.7) = -1`, distinct from `floor(-1.7) = -2`); `HalfWay` rounds
/// to nearest with ties to even. Saturates at the `i64` bounds.
pub fn round_value(x: f64, mode: Rounding) -> i64 {
    let r = match mode {
        Rounding::HalfWay => x.round_ties_even(),
        Rounding::TowardZero => x.trunc(),
    };
    r as i64
}

fn quantize_value(x: f64, spec: &QuantSpec) -> i64 {
    let scaled = x / spec.scale();
    let rounded = match spec.rounding() {
        Rounding::HalfWay => scaled.round_ties_even(),
        Rounding::TowardZero => scaled.trunc(),
    };
    // Clamp in f64 so that huge inputs cannot overflow the integer cast;
    // range endpoints are exact in f64 for bit widths <= MAX_RANGE_BITS.
    let shifted = rounded + spec.zero_point() as f64;
    shifted.clamp(spec.range().min() as f64, spec.range().max() as f64) as i64
}

/// Elementwise `clip(round(x / s) + z, n, p)`. Rejects non-finite input.
pub fn quantize<S, D>(x: &ArrayBase<S, D>, spec: &QuantSpec) -> Result<IntTensor<D>>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    if let Some((index, value)) = x.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            value: *value,
            index,
        });
    }
    let values = x.mapv(|v| quantize_value(v, spec));
    Ok(IntTensor {
        values,
        spec: *spec,
    })
}

/// Elementwise `s * (q - z)`.
pub fn dequantize<D: Dimension>(q: &IntTensor<D>) -> Array<f64, D> {
    let s = q.spec().scale();
    let z = q.spec().zero_point();
    q.values().mapv(|v| s * (v - z) as f64)
}

/// Straight-through estimator backward pass for [`quantize`]: the rounding is
/// treated as identity, and the gradient is zeroed wherever the pre-clip
/// value `round(x/s) + z` fell outside `[n, p]` (clipped STE).
pub fn ste_backward<S, D>(
    upstream: &ArrayBase<S, D>,
    x: &ArrayBase<S, D>,
    spec: &QuantSpec,
) -> Result<Array<f64, D>>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    if upstream.shape() != x.shape() {
        return Err(Error::ShapeMismatch(format!(
            "upstream {:?} vs input {:?}",
            upstream.shape(),
            x.shape()
        )));
    }
    let n = spec.range().min() as f64;
    let p = spec.range().max() as f64;
    let mut out = upstream.to_owned();
    ndarray::Zip::from(&mut out).and(x).for_each(|g, &v| {
        let pre_clip = match spec.rounding() {
            Rounding::HalfWay => (v / spec.scale()).round_ties_even(),
            Rounding::TowardZero => (v / spec.scale()).trunc(),
        } + spec.zero_point() as f64;
        if pre_clip < n || pre_clip > p {
            *g = 0.0;
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn spec(bits: u32, signed: bool, scale: f64, z: i64, rounding: Rounding) -> QuantSpec {
        QuantSpec::new(IntRange::new(bits, signed).unwrap(), scale, z, rounding).unwrap()
    }

    #[test]
    fn int_range_endpoints() {
        let s4 = IntRange::new(4, true).unwrap();
        assert_eq!((s4.min(), s4.max()), (-8, 7));
        let u4 = IntRange::new(4, false).unwrap();
        assert_eq!((u4.min(), u4.max()), (0, 15));
        let s1 = IntRange::new(1, true).unwrap();
        assert_eq!((s1.min(), s1.max()), (-1, 0));
        // zero is always representable
        for bits in 1..=16 {
            for signed in [false, true] {
                let r = IntRange::new(bits, signed).unwrap();
                assert!(r.min() <= 0 && 0 <= r.max());
            }
        }
        assert!(IntRange::new(0, true).is_err());
        assert!(IntRange::new(MAX_RANGE_BITS + 1, false).is_err());
    }

    #[test]
    fn quantize_examples() {
        let sp = spec(4, true, 0.5, 0, Rounding::HalfWay);
        let q = quantize(&array![0.0, 1.7, 100.0], &sp).unwrap();
        assert_eq!(q.values(), &array![0, 3, 7]);
    }

    #[test]
    fn quantize_rejects_non_finite() {
        let sp = spec(4, true, 0.5, 0, Rounding::HalfWay);
        assert!(matches!(
            quantize(&array![1.0, f64::NAN], &sp),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(quantize(&array![f64::INFINITY], &sp).is_err());
    }

    #[test]
    fn dequantize_examples() {
        let sp = spec(4, true, 0.5, 0, Rounding::HalfWay);
        let q = IntTensor::from_parts(array![3], sp).unwrap();
        assert_eq!(dequantize(&q), array![1.5]);

        // q = z maps to exactly zero for any spec
        let sp_z = spec(4, false, 0.37, 5, Rounding::HalfWay);
        let q = IntTensor::from_parts(array![5], sp_z).unwrap();
        assert_eq!(dequantize(&q), array![0.0]);

        let sp = spec(4, true, 0.25, 0, Rounding::HalfWay);
        let q = IntTensor::from_parts(array![-8], sp).unwrap();
        assert_eq!(dequantize(&q), array![-2.0]);
    }

    #[test]
    fn round_value_modes() {
        assert_eq!(round_value(-1.7, Rounding::TowardZero), -1);
        assert_eq!((-1.7f64).floor(), -2.0); // truncation is not floor
        assert_eq!(round_value(2.5, Rounding::HalfWay), 2); // ties to even
        assert_eq!(round_value(3.5, Rounding::HalfWay), 4);
        assert_eq!(round_value(-2.5, Rounding::HalfWay), -2);
        assert_eq!(round_value(3.0, Rounding::HalfWay), 3);
        assert_eq!(round_value(3.0, Rounding::TowardZero), 3);
    }

    #[test]
    fn trunc_never_increases_magnitude() {
        for &x in &[-3.99, -1.0, -0.49, 0.0, 0.99, 2.5, 7.01, 1e12 + 0.7] {
            let r = round_value(x, Rounding::TowardZero);
            assert!((r as f64).abs() <= x.abs(), "trunc({x}) = {r}");
        }
    }

    #[test]
    fn ste_examples() {
        let sp = spec(4, true, 0.5, 0, Rounding::HalfWay);
        // inside the range the gradient passes through unchanged
        let g = ste_backward(&array![1.0], &array![1.7], &sp).unwrap();
        assert_eq!(g, array![1.0]);
        // far above p*s the pre-clip value is out of range: zeroed
        let g = ste_backward(&array![1.0], &array![100.0], &sp).unwrap();
        assert_eq!(g, array![0.0]);
        // zero upstream stays zero everywhere
        let g = ste_backward(&array![0.0, 0.0], &array![100.0, 1.0], &sp).unwrap();
        assert_eq!(g, array![0.0, 0.0]);
        // mismatched shapes are rejected
        assert!(ste_backward(&array![1.0, 1.0], &array![1.0], &sp).is_err());
    }

    #[test]
    fn int_tensor_enforces_range() {
        let sp = spec(4, true, 1.0, 0, Rounding::HalfWay);
        assert!(IntTensor::from_parts(array![8], sp).is_err());
        assert!(IntTensor::from_parts(array![-8, 7], sp).is_ok());
    }

    proptest::proptest! {
        /// dequantize(quantize(x)) stays within the rounding error bound of
        /// the clipped input: s/2 for half-way rounding, s for truncation.
        #[test]
        fn roundtrip_error_bound(
            x in proptest::collection::vec(-1e4f64..1e4, 1..32),
            bits in 2u32..10,
            scale_log in -6f64..4.0,
            signed: bool,
            half: bool,
        ) {
            let rounding = if half { Rounding::HalfWay } else { Rounding::TowardZero };
            let scale = scale_log.exp2();
            let sp = spec(bits, signed, scale, 0, rounding);
            let x = ndarray::Array1::from(x);
            let q = quantize(&x, &sp).unwrap();
            let back = dequantize(&q);
            let lo = scale * sp.range().min() as f64;
            let hi = scale * sp.range().max() as f64;
            let tol = if half { scale / 2.0 } else { scale };
            for (xi, bi) in x.iter().zip(back.iter()) {
                let clipped = xi.clamp(lo, hi);
                proptest::prop_assert!(
                    (clipped - bi).abs() <= tol + 1e-12,
                    "x={xi} back={bi} clipped={clipped} tol={tol}"
                );
            }
        }

        /// quantize is idempotent on its own dequantized output. Truncation
        /// sits exactly on integer boundaries, so it gets power-of-two scales
        /// where `(q * s) / s` is exact in f64; half-way rounding tolerates
        /// the 1-ulp division noise of arbitrary scales.
        #[test]
        fn quantize_idempotent(
            x in proptest::collection::vec(-1e4f64..1e4, 1..32),
            bits in 2u32..10,
            scale_log in -6f64..4.0,
            signed: bool,
            half: bool,
        ) {
            let (rounding, scale) = if half {
                (Rounding::HalfWay, scale_log.exp2())
            } else {
                (Rounding::TowardZero, scale_log.round().exp2())
            };
            let sp = spec(bits, signed, scale, 0, rounding);
            let x = ndarray::Array1::from(x);
            let q1 = quantize(&x, &sp).unwrap();
            let q2 = quantize(&dequantize(&q1), &sp).unwrap();
            proptest::prop_assert_eq!(q1.values(), q2.values());
        }

        /// |trunc(x)| <= |x|; this is what lets truncation preserve an
        /// l1-norm budget.
        #[test]
        fn trunc_magnitude(x in -1e9f64..1e9) {
            let r = round_value(x, Rounding::TowardZero) as f64;
            proptest::prop_assert!(r.abs() <= x.abs());
        }

        /// quantize output always satisfies the IntTensor range invariant.
        #[test]
        fn quantized_in_range(
            x in proptest::collection::vec(-1e6f64..1e6, 1..16),
            bits in 1u32..12,
            signed: bool,
        ) {
            let sp = spec(bits, signed, 0.125, 0, Rounding::HalfWay);
            let q = quantize(&ndarray::Array1::from(x), &sp).unwrap();
            for &v in q.values() {
                proptest::prop_assert!(sp.range().contains(v));
            }
        }
    }
}
