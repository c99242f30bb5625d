//! Toolkit for integer dot products with narrow accumulators.
//!
//! Three things live here:
//!
//! * [`bounds`] — guaranteed-safe lower bounds on the accumulator bit width
//!   of an integer dot product, derived either from the data types alone or
//!   from the l1-norm of a frozen weight vector, plus the exact-integer
//!   overflow-avoidance certificate [`bounds::worst_case_fits`].
//! * [`a2q`] + [`trainkit`] — accumulator-aware quantization: a weight
//!   normalization reparameterization that caps each output channel's l1-norm
//!   so a `P`-bit accumulator can never overflow, and a small deterministic
//!   QAT harness (linear / MLP, manual backprop, SGD) that trains with it.
//! * [`accsim`] — a bit-exact simulator of `P`-bit signed accumulation under
//!   wraparound, saturating, and unbounded (exact) semantics, with overflow
//!   accounting and accumulation-order permutation studies.
//!
//! [`quant`] holds the shared uniform affine quantization primitives,
//! [`dataio`] the IDX / checkpoint / report formats, and [`repro`] the two
//! canned experiments exposed by the `lpacc repro` subcommand.

pub mod a2q;
pub mod accsim;
pub mod bounds;
pub mod dataio;
pub mod error;
pub mod quant;
pub mod repro;
pub mod trainkit;

pub use error::{Error, Result};
