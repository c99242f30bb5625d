//! C ABI over the accumulator bound, certificate, simulation, and checkpoint
//! verification routines.
//!
//! Conventions: every function returns an [`LpaccStatus`]; results come back
//! through out-pointers, written only on `LPACC_STATUS_OK`. Checkpoints are
//! opaque handles created by [`lpacc_checkpoint_load`] and released with
//! [`lpacc_checkpoint_free`]. No function panics across the boundary.

use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use lpacc::accsim::AccMode;
use lpacc::bounds::{datatype_bound, l1_budget, weight_bound, worst_case_fits, DotShape};
use lpacc::trainkit::Model;

/// Status codes returned by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpaccStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    IoError = 3,
    FormatError = 4,
    Panic = 5,
}

/// Accumulation semantics for the simulated register.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpaccAccMode {
    Exact = 0,
    Wraparound = 1,
    Saturate = 2,
}

impl From<LpaccAccMode> for AccMode {
    fn from(m: LpaccAccMode) -> AccMode {
        match m {
            LpaccAccMode::Exact => AccMode::Exact,
            LpaccAccMode::Wraparound => AccMode::Wraparound,
            LpaccAccMode::Saturate => AccMode::Saturate,
        }
    }
}

/// Opaque handle to a loaded model checkpoint.
pub struct LpaccCheckpoint {
    model: Model,
}

fn guarded(f: impl FnOnce() -> LpaccStatus) -> LpaccStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => LpaccStatus::Panic,
    }
}

/// Static name for a status code.
#[no_mangle]
pub extern "C" fn lpacc_status_name(status: LpaccStatus) -> *const c_char {
    let name: &'static [u8] = match status {
        LpaccStatus::Ok => b"ok\0",
        LpaccStatus::NullPointer => b"null pointer\0",
        LpaccStatus::InvalidArgument => b"invalid argument\0",
        LpaccStatus::IoError => b"io error\0",
        LpaccStatus::FormatError => b"format error\0",
        LpaccStatus::Panic => b"internal panic\0",
    };
    name.as_ptr().cast()
}

/// Data-type accumulator bound for a `k`-element dot product of
/// `input_bits`-bit inputs and `weight_bits`-bit signed weights. Writes the
/// real-valued bound and its minimal integer width.
///
/// # Safety
/// `out_min_bits` and `out_real_bound` must be valid for writes or null (a
/// null out-pointer is skipped).
#[no_mangle]
pub unsafe extern "C" fn lpacc_datatype_bound(
    k: u64,
    input_bits: u32,
    input_signed: bool,
    weight_bits: u32,
    out_min_bits: *mut u32,
    out_real_bound: *mut f64,
) -> LpaccStatus {
    guarded(|| {
        let shape = match DotShape::new(k, input_bits, input_signed, weight_bits) {
            Ok(s) => s,
            Err(_) => return LpaccStatus::InvalidArgument,
        };
        let b = datatype_bound(&shape);
        if !out_min_bits.is_null() {
            unsafe { *out_min_bits = b.min_bits };
        }
        if !out_real_bound.is_null() {
            unsafe { *out_real_bound = b.real_bound };
        }
        LpaccStatus::Ok
    })
}

/// Weight-norm accumulator bound for one output channel's integer codes.
/// `out_degenerate` is set when the channel is all-zero (the bound is then
/// reported as 1 bit).
///
/// # Safety
/// `weights` must point to `len` readable values; out-pointers as above.
#[no_mangle]
pub unsafe extern "C" fn lpacc_weight_bound(
    weights: *const i64,
    len: usize,
    input_bits: u32,
    input_signed: bool,
    out_min_bits: *mut u32,
    out_real_bound: *mut f64,
    out_degenerate: *mut bool,
) -> LpaccStatus {
    guarded(|| {
        if weights.is_null() && len > 0 {
            return LpaccStatus::NullPointer;
        }
        let w = unsafe { std::slice::from_raw_parts(weights, len) };
        let b = match weight_bound(w, input_bits, input_signed) {
            Ok(b) => b,
            Err(_) => return LpaccStatus::InvalidArgument,
        };
        if !out_min_bits.is_null() {
            unsafe { *out_min_bits = b.min_bits };
        }
        if !out_real_bound.is_null() {
            unsafe { *out_real_bound = b.real_bound };
        }
        if !out_degenerate.is_null() {
            unsafe { *out_degenerate = b.degenerate };
        }
        LpaccStatus::Ok
    })
}

/// Per-channel l1 budget `(2^(P-1) - 1) * 2^(1_signed - N)` for a target
/// accumulator width.
///
/// # Safety
/// `out_budget` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn lpacc_l1_budget(
    acc_bits: u32,
    input_bits: u32,
    input_signed: bool,
    out_budget: *mut f64,
) -> LpaccStatus {
    guarded(|| {
        if out_budget.is_null() {
            return LpaccStatus::NullPointer;
        }
        match l1_budget(acc_bits, input_bits, input_signed) {
            Ok(b) => {
                unsafe { *out_budget = b };
                LpaccStatus::Ok
            }
            Err(_) => LpaccStatus::InvalidArgument,
        }
    })
}

/// Exact-integer overflow-avoidance certificate: true iff the worst-case
/// partial-sum magnitude of these codes fits a signed `acc_bits` register.
///
/// # Safety
/// `weights` must point to `len` readable values; `out_fits` valid for write.
#[no_mangle]
pub unsafe extern "C" fn lpacc_worst_case_fits(
    weights: *const i64,
    len: usize,
    input_bits: u32,
    input_signed: bool,
    acc_bits: u32,
    out_fits: *mut bool,
) -> LpaccStatus {
    guarded(|| {
        if (weights.is_null() && len > 0) || out_fits.is_null() {
            return LpaccStatus::NullPointer;
        }
        let w = unsafe { std::slice::from_raw_parts(weights, len) };
        unsafe { *out_fits = worst_case_fits(w, input_bits, input_signed, acc_bits) };
        LpaccStatus::Ok
    })
}

/// Simulate one dot product accumulated left-to-right into a signed
/// `acc_bits` register under the given mode. Writes the stored result and
/// the overflow-event count.
///
/// # Safety
/// `x` and `w` must point to `len` readable values each; out-pointers valid
/// for writes or null.
#[no_mangle]
pub unsafe extern "C" fn lpacc_dot_accumulate(
    x: *const i64,
    w: *const i64,
    len: usize,
    acc_bits: u32,
    mode: LpaccAccMode,
    out_result: *mut i64,
    out_overflows: *mut u64,
) -> LpaccStatus {
    guarded(|| {
        if (x.is_null() || w.is_null()) && len > 0 {
            return LpaccStatus::NullPointer;
        }
        let xs = unsafe { std::slice::from_raw_parts(x, len) };
        let ws = unsafe { std::slice::from_raw_parts(w, len) };
        match lpacc::accsim::dot_accumulate(xs, ws, acc_bits, mode.into()) {
            Ok((result, overflows)) => {
                if !out_result.is_null() {
                    unsafe { *out_result = result };
                }
                if !out_overflows.is_null() {
                    unsafe { *out_overflows = overflows };
                }
                LpaccStatus::Ok
            }
            Err(_) => LpaccStatus::InvalidArgument,
        }
    })
}

/// Load a JSON checkpoint from `path` into an opaque handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_handle` valid for a write.
/// The returned handle must be released with [`lpacc_checkpoint_free`].
#[no_mangle]
pub unsafe extern "C" fn lpacc_checkpoint_load(
    path: *const c_char,
    out_handle: *mut *mut LpaccCheckpoint,
) -> LpaccStatus {
    guarded(|| {
        if path.is_null() || out_handle.is_null() {
            return LpaccStatus::NullPointer;
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(p) => p,
            Err(_) => return LpaccStatus::InvalidArgument,
        };
        let ck = match lpacc::dataio::load_checkpoint(path) {
            Ok(ck) => ck,
            Err(lpacc::error::Error::Io { .. }) => return LpaccStatus::IoError,
            Err(_) => return LpaccStatus::FormatError,
        };
        match Model::from_checkpoint(&ck) {
            Ok(model) => {
                let handle = Box::new(LpaccCheckpoint { model });
                unsafe { *out_handle = Box::into_raw(handle) };
                LpaccStatus::Ok
            }
            Err(_) => LpaccStatus::FormatError,
        }
    })
}

/// Number of layers in a loaded checkpoint.
///
/// # Safety
/// `handle` must come from [`lpacc_checkpoint_load`]; `out_layers` valid for
/// a write.
#[no_mangle]
pub unsafe extern "C" fn lpacc_checkpoint_layer_count(
    handle: *const LpaccCheckpoint,
    out_layers: *mut usize,
) -> LpaccStatus {
    guarded(|| {
        if handle.is_null() || out_layers.is_null() {
            return LpaccStatus::NullPointer;
        }
        unsafe { *out_layers = (*handle).model.layers.len() };
        LpaccStatus::Ok
    })
}

/// Run the exact overflow-avoidance certificate over every channel of every
/// layer at the given accumulator width. `out_all_pass` receives the verdict.
///
/// # Safety
/// `handle` must come from [`lpacc_checkpoint_load`]; `out_all_pass` valid
/// for a write.
#[no_mangle]
pub unsafe extern "C" fn lpacc_checkpoint_verify(
    handle: *const LpaccCheckpoint,
    acc_bits: u32,
    out_all_pass: *mut bool,
) -> LpaccStatus {
    guarded(|| {
        if handle.is_null() || out_all_pass.is_null() {
            return LpaccStatus::NullPointer;
        }
        let model = unsafe { &(*handle).model };
        let types = model.layer_input_types();
        let mut all = true;
        for (layer, &(input_bits, input_signed)) in model.layers.iter().zip(&types) {
            let codes = match layer.forward_weights_strict() {
                Ok(wf) => wf,
                Err(_) => return LpaccStatus::InvalidArgument,
            };
            for row in codes.codes().rows() {
                let row = row.as_slice().expect("row-major");
                all &= worst_case_fits(row, input_bits, input_signed, acc_bits);
            }
        }
        unsafe { *out_all_pass = all };
        LpaccStatus::Ok
    })
}

/// Release a checkpoint handle. Null is a no-op.
///
/// # Safety
/// `handle` must come from [`lpacc_checkpoint_load`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn lpacc_checkpoint_free(handle: *mut LpaccCheckpoint) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn datatype_bound_matches_library() {
        let mut min_bits = 0u32;
        let mut real = 0.0f64;
        let status = unsafe { lpacc_datatype_bound(784, 1, false, 8, &mut min_bits, &mut real) };
        assert_eq!(status, LpaccStatus::Ok);
        assert_eq!(min_bits, 19);
        assert!((real - 18.6147170).abs() < 1e-6);

        let status = unsafe { lpacc_datatype_bound(0, 1, false, 8, &mut min_bits, &mut real) };
        assert_eq!(status, LpaccStatus::InvalidArgument);
    }

    #[test]
    fn weight_bound_and_certificate() {
        let w = [100i64];
        let mut min_bits = 0u32;
        let mut real = 0.0;
        let mut degenerate = true;
        let status = unsafe {
            lpacc_weight_bound(
                w.as_ptr(),
                1,
                8,
                false,
                &mut min_bits,
                &mut real,
                &mut degenerate,
            )
        };
        assert_eq!(status, LpaccStatus::Ok);
        assert_eq!(min_bits, 16);
        assert!(!degenerate);

        let mut fits = false;
        unsafe {
            assert_eq!(
                lpacc_worst_case_fits(w.as_ptr(), 1, 8, false, 16, &mut fits),
                LpaccStatus::Ok
            );
            assert!(fits);
            assert_eq!(
                lpacc_worst_case_fits(w.as_ptr(), 1, 8, false, 15, &mut fits),
                LpaccStatus::Ok
            );
            assert!(!fits);
        }

        let mut budget = 0.0;
        unsafe {
            assert_eq!(lpacc_l1_budget(9, 4, false, &mut budget), LpaccStatus::Ok);
        }
        assert_eq!(budget, 15.9375);
    }

    #[test]
    fn dot_accumulate_modes() {
        let x = [1i64, 1];
        let w = [7i64, 1];
        let mut result = 0i64;
        let mut overflows = 0u64;
        unsafe {
            assert_eq!(
                lpacc_dot_accumulate(
                    x.as_ptr(),
                    w.as_ptr(),
                    2,
                    4,
                    LpaccAccMode::Wraparound,
                    &mut result,
                    &mut overflows
                ),
                LpaccStatus::Ok
            );
        }
        assert_eq!((result, overflows), (-8, 1));
        unsafe {
            assert_eq!(
                lpacc_dot_accumulate(
                    x.as_ptr(),
                    w.as_ptr(),
                    2,
                    4,
                    LpaccAccMode::Saturate,
                    &mut result,
                    &mut overflows
                ),
                LpaccStatus::Ok
            );
        }
        assert_eq!((result, overflows), (7, 1));
    }

    #[test]
    fn null_pointers_are_rejected() {
        unsafe {
            assert_eq!(
                lpacc_worst_case_fits(std::ptr::null(), 3, 8, false, 16, &mut false),
                LpaccStatus::NullPointer
            );
            assert_eq!(
                lpacc_l1_budget(9, 4, false, std::ptr::null_mut()),
                LpaccStatus::NullPointer
            );
            let mut out = std::ptr::null_mut();
            assert_eq!(
                lpacc_checkpoint_load(std::ptr::null(), &mut out),
                LpaccStatus::NullPointer
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_through_the_abi() {
        use lpacc::dataio::{save_checkpoint, synth_dataset, Split};
        use lpacc::trainkit::{train, ModelConfig, TrainConfig};

        let ds = synth_dataset(16, 2, false, 128, 2, 1, Split::Train, 5).unwrap();
        let config = ModelConfig::linear(6, 2, Some(10));
        let tc = TrainConfig {
            epochs: 3,
            seed: 5,
            ..TrainConfig::default()
        };
        let (model, _) = train(&config, &tc, &ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&model.to_checkpoint(&tc), &path).unwrap();
        let cpath = std::ffi::CString::new(path.to_str().unwrap()).unwrap();

        let mut handle = std::ptr::null_mut();
        unsafe {
            assert_eq!(
                lpacc_checkpoint_load(cpath.as_ptr(), &mut handle),
                LpaccStatus::Ok
            );
            let mut layers = 0usize;
            assert_eq!(
                lpacc_checkpoint_layer_count(handle, &mut layers),
                LpaccStatus::Ok
            );
            assert_eq!(layers, 1);

            let mut pass = false;
            assert_eq!(
                lpacc_checkpoint_verify(handle, 10, &mut pass),
                LpaccStatus::Ok
            );
            assert!(pass, "trained checkpoint certifies at its own width");
            assert_eq!(
                lpacc_checkpoint_verify(handle, 2, &mut pass),
                LpaccStatus::Ok
            );
            assert!(!pass, "2-bit register cannot hold these weights");

            lpacc_checkpoint_free(handle);
        }

        let missing = std::ffi::CString::new("/nonexistent/ck.json").unwrap();
        let mut handle = std::ptr::null_mut();
        unsafe {
            assert_eq!(
                lpacc_checkpoint_load(missing.as_ptr(), &mut handle),
                LpaccStatus::IoError
            );
        }
    }

    #[test]
    fn status_names_are_c_strings() {
        for status in [
            LpaccStatus::Ok,
            LpaccStatus::NullPointer,
            LpaccStatus::InvalidArgument,
            LpaccStatus::IoError,
            LpaccStatus::FormatError,
            LpaccStatus::Panic,
        ] {
            let ptr = lpacc_status_name(status);
            assert!(!ptr.is_null());
            unsafe {
                assert!(!CStr::from_ptr(ptr).to_str().unwrap().is_empty());
            }
        }
    }
}
