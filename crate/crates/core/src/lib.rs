//! Verification-grade implementations of a family of causal attention
//! mechanisms: plain linear attention, the full Mamba-2 block, a simplified
//! Mamba-2 (`mamba2s`), a squared-inner-product variant (`twomamba`), its
//! exponentiated limit (`twomamba_e`), and the softmax baseline.
//!
//! Every variant has three mutually-checking execution paths:
//!
//! * a quadratic reference forward ([`forward`]),
//! * analytic backward kernels checked against a finite-difference oracle
//!   ([`backward`]),
//! * stateful token-by-token inference with exact memory accounting
//!   ([`recurrence`], [`memmodel`]).
//!
//! A desk-scale training harness ([`harness`]) drives the composed
//! forward/backward on synthetic copy and associative-recall tasks.

pub mod backward;
pub mod cli;
pub mod forward;
pub mod harness;
pub mod mask;
pub mod memmodel;
pub mod recurrence;
pub mod tensor;

use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Debug, Error)]
pub enum SeqmixError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value produced in {0}")]
    NonFinite(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, SeqmixError>;

/// Guard added to normalization denominators: the denominator becomes
/// `max(sum, EPS_NORM)`. For well-posed inputs the row sums are untouched
/// (rows sum to exactly 1); a vanishing denominator (e.g. all-zero keys, or
/// `(q0 . k0)^2 = 0` at the first token) yields an all-zero output instead of
/// a division by zero. The same constant is used by the quadratic and the
/// stateful paths so cross-path comparisons are exact contracts.
pub const EPS_NORM: f64 = 1e-9;

/// Epsilon inside the RMS normalization square root.
pub const EPS_RMS: f64 = 1e-6;
