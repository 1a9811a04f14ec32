//! C ABI over the seqmix library: opaque block handles, status codes, and a
//! thread-local last-error message. Every function is panic-safe; panics
//! surface as `SEQMIX_STATUS_INTERNAL` instead of unwinding across the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rand::rngs::StdRng;
use rand::SeedableRng;

use seqmix::forward::{block_forward_cached, BlockWeights, Preset, VariantConfig};
use seqmix::memmodel::{crossover, second_order_state};
use seqmix::recurrence::run_stateful;
use seqmix::tensor::DenseTensor;
use seqmix::SeqmixError;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqmixStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    NonFinite = 4,
    Numeric = 5,
    Io = 6,
    Internal = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_from(err: &SeqmixError) -> SeqmixStatus {
    match err {
        SeqmixError::Dim(_) | SeqmixError::Config(_) | SeqmixError::Parse(_) => {
            SeqmixStatus::InvalidArgument
        }
        SeqmixError::Domain(_) | SeqmixError::Range(_) => SeqmixStatus::Domain,
        SeqmixError::NonFinite(_) => SeqmixStatus::NonFinite,
        SeqmixError::Oracle(_) => SeqmixStatus::Numeric,
        SeqmixError::Io(_) => SeqmixStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> SeqmixStatus) -> SeqmixStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            SeqmixStatus::Internal
        }
    }
}

/// Copy the message for the most recent error on this thread into `buf`
/// (NUL-terminated, truncated to `len`). Returns the full message length in
/// bytes, excluding the terminator; 0 means no error has been recorded.
#[no_mangle]
pub extern "C" fn seqmix_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Opaque handle to one initialized attention block (configuration plus
/// randomly initialized weights).
pub struct SeqmixBlock {
    cfg: VariantConfig,
    weights: BlockWeights,
    d_model: usize,
}

/// Create a block for a named preset (`linear`, `mamba2`, `mamba2s`,
/// `twomamba`, `twomamba_e`, `softmax`) with seeded weight initialization.
/// On success writes the handle to `out` and returns `SEQMIX_STATUS_OK`.
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seqmix_block_new(
    preset: *const c_char,
    d_model: usize,
    heads: usize,
    d_head: usize,
    seed: u64,
    out: *mut *mut SeqmixBlock,
) -> SeqmixStatus {
    guard(|| {
        if preset.is_null() || out.is_null() {
            set_error("null pointer argument");
            return SeqmixStatus::NullPointer;
        }
        let name = match unsafe { CStr::from_ptr(preset) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("preset name is not valid UTF-8");
                return SeqmixStatus::InvalidArgument;
            }
        };
        let p = match Preset::parse(name) {
            Ok(p) => p,
            Err(e) => {
                set_error(e.to_string());
                return SeqmixStatus::InvalidArgument;
            }
        };
        let cfg = VariantConfig::preset(p);
        let mut rng = StdRng::seed_from_u64(seed);
        match BlockWeights::init(&cfg, d_model, heads, d_head, &mut rng) {
            Ok(weights) => {
                let block = Box::new(SeqmixBlock { cfg, weights, d_model });
                unsafe { *out = Box::into_raw(block) };
                SeqmixStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_from(&e)
            }
        }
    })
}

/// Release a block handle. A null handle is a no-op.
///
/// # Safety
/// `block` must be a handle from `seqmix_block_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn seqmix_block_free(block: *mut SeqmixBlock) {
    if !block.is_null() {
        drop(unsafe { Box::from_raw(block) });
    }
}

unsafe fn forward_impl(
    block: *const SeqmixBlock,
    input: *const f64,
    seq_len: usize,
    output: *mut f64,
    stateful: bool,
) -> SeqmixStatus {
    if block.is_null() || input.is_null() || output.is_null() {
        set_error("null pointer argument");
        return SeqmixStatus::NullPointer;
    }
    let b = unsafe { &*block };
    if seq_len == 0 {
        set_error("seq_len must be positive");
        return SeqmixStatus::InvalidArgument;
    }
    let n_elems = seq_len * b.d_model;
    let data = unsafe { std::slice::from_raw_parts(input, n_elems) };
    let mut h = DenseTensor::zeros(&[seq_len, b.d_model]);
    h.data_mut().copy_from_slice(data);
    let result = if stateful {
        run_stateful(&h, &b.cfg, &b.weights).map(|(y, _)| y)
    } else {
        block_forward_cached(&h, &b.cfg, &b.weights).map(|c| c.out)
    };
    match result {
        Ok(y) => {
            unsafe { ptr::copy_nonoverlapping(y.data().as_ptr(), output, n_elems) };
            SeqmixStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            status_from(&e)
        }
    }
}

/// Run the quadratic (materialized score matrix) path. `input` and `output`
/// are row-major `[seq_len, d_model]` buffers of `seq_len * d_model` doubles.
///
/// # Safety
/// Pointers must be valid for `seq_len * d_model` doubles.
#[no_mangle]
pub unsafe extern "C" fn seqmix_block_forward(
    block: *const SeqmixBlock,
    input: *const f64,
    seq_len: usize,
    output: *mut f64,
) -> SeqmixStatus {
    guard(|| unsafe { forward_impl(block, input, seq_len, output, false) })
}

/// Run the stateful token-by-token path; numerically equivalent to
/// `seqmix_block_forward` within 1e-9 relative error.
///
/// # Safety
/// Pointers must be valid for `seq_len * d_model` doubles.
#[no_mangle]
pub unsafe extern "C" fn seqmix_block_forward_stateful(
    block: *const SeqmixBlock,
    input: *const f64,
    seq_len: usize,
    output: *mut f64,
) -> SeqmixStatus {
    guard(|| unsafe { forward_impl(block, input, seq_len, output, true) })
}

/// Fixed per-head second-order recurrent state size in scalar elements:
/// `d (d + 1)^2 / 2 + 3 d`.
#[no_mangle]
pub extern "C" fn seqmix_second_order_state(d_head: u64) -> u64 {
    second_order_state(d_head)
}

/// Smallest sequence length at which a growing KV cache costs strictly more
/// than the fixed second-order state. Writes the answer to `out`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seqmix_kv_crossover(d_head: u64, out: *mut u64) -> SeqmixStatus {
    guard(|| {
        if out.is_null() {
            set_error("null pointer argument");
            return SeqmixStatus::NullPointer;
        }
        match crossover(d_head) {
            Ok(n) => {
                unsafe { *out = n };
                SeqmixStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_from(&e)
            }
        }
    })
}
