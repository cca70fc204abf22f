//! Core math for LASP-style chunked causal linear attention with decay.
//!
//! Causal linear attention computes `o_s = (sum_{i<=s} lambda^{s-i} k_i v_i^T)^T q_s`.
//! Because the key/value product can be folded into a running `d_h x d_h` state,
//! the sequence can be split into chunks that combine a masked left-product over
//! the local chunk with a single state-carried correction for everything before
//! it. This crate provides:
//!
//! - [`matrix`]: a minimal dense row-major `f64` matrix with deterministic
//!   accumulation order, so chunked and serial paths can be compared bit for bit.
//! - [`oracle`]: two independent serial references (dense masked left-product and
//!   step recurrence) plus a central-finite-difference gradient checker.
//! - [`chunk`]: the chunk-level kernels (decay structures, intra/inter forward
//!   and backward, KV/dKV state updates) and single-process chunked drivers.
//! - [`recurrence`]: the generalized recurrent-memory form
//!   `m_t = o_t (*) m_{t-1} + e_t i_t^T` with a registry of linear-complexity
//!   sequence models and a chunked-equivalence bridge.
//! - [`comm`]: analytical communication-volume formulas for LASP, Ring
//!   Attention, DeepSpeed-Ulysses and Megatron-SP, plus trace measurement.
//! - [`rng`]: the splitmix64 fixture generator shared by tests and the CLI.
//!
//! The crate is `no_std` (with `alloc`); everything that touches the OS lives in
//! the companion `lasp-sim` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod chunk;
pub mod comm;
mod error;
pub mod matrix;
pub mod oracle;
pub mod recurrence;
pub mod rng;

pub use error::{Error, Result};

use alloc::format;

/// Decay rates outside (0, 1] make `lambda^(i-j)` and `lambda^C` explode or
/// flip sign; reject them everywhere with one message.
pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda > 0.0 && lambda <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "decay rate must be in (0, 1], got {lambda}"
        )))
    }
}
