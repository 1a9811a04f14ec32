//! Closed-form per-head memory model for the inference paths, plus the
//! crossover length where a growing KV cache overtakes the fixed
//! second-order state, and a curve generator that can be cross-checked
//! against measured traces from the stateful runner.

use crate::recurrence::MemoryTrace;
use crate::{Result, SeqmixError};

/// Number of unique degree-`p` monomials over `d` variables:
/// `binomial(p + d - 1, d - 1)`, exact integer arithmetic. For `p = 2` this
/// is `d (d + 1) / 2`.
pub fn term_count(d: u64, p: u64) -> Result<u64> {
    if d < 1 {
        return Err(SeqmixError::Domain("term_count needs d >= 1".into()));
    }
    // binomial(p + d - 1, p) with the smaller loop over p
    let n = p + d - 1;
    let mut acc: u128 = 1;
    for i in 1..=p.min(n - p) {
        acc = acc
            .checked_mul((n - p.min(n - p) + i) as u128)
            .ok_or_else(|| SeqmixError::Range(format!("term_count overflow at d={d}, p={p}")))?;
        acc /= i as u128;
    }
    u64::try_from(acc)
        .map_err(|_| SeqmixError::Range(format!("term_count overflow at d={d}, p={p}")))
}

/// KV-cache elements per head after `n` tokens: keys + values.
pub fn kv_cache_elems(n: u64, d: u64) -> u64 {
    2 * n * d
}

/// KV-cache elements for the decay-masked exponential variant: keys, values,
/// and one cumulative decay scalar per token.
pub fn kv_e_elems(n: u64, d: u64) -> u64 {
    2 * n * d + n
}

/// Fixed second-order per-head state: `d (d + 1)^2 / 2 + 3 d`
/// (feature-state matrix + normalizer + one conv row at window 2).
pub fn second_order_state(d: u64) -> u64 {
    d * (d + 1) * (d + 1) / 2 + 3 * d
}

/// Smallest `N` with `2 N d > d (d + 1)^2 / 2 + 3 d`, i.e. the sequence
/// length past which the KV cache costs strictly more than the fixed state.
/// Computed in closed form, then verified by scanning `N - 1` and `N`.
pub fn crossover(d: u64) -> Result<u64> {
    if d < 1 {
        return Err(SeqmixError::Domain("crossover needs d >= 1".into()));
    }
    let state = second_order_state(d);
    // minimal N with 2 N d > state  <=>  N = floor(state / (2 d)) + 1
    let n = state / (2 * d) + 1;
    if kv_cache_elems(n, d) <= state || (n > 1 && kv_cache_elems(n - 1, d) > state) {
        return Err(SeqmixError::Oracle(format!(
            "crossover closed form failed scan verification at d={d}"
        )));
    }
    Ok(n)
}

/// One row of the memory curve.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemcurveRow {
    pub n: u64,
    pub kv_elems: u64,
    pub state2_elems: u64,
    pub measured_kv: Option<u64>,
    pub measured_state: Option<u64>,
    /// true iff every present measured value equals its formula value
    pub matches: bool,
}

/// Closed-form per-head memory report for one head dimension.
#[derive(Debug, Clone)]
pub struct MemoryReport {
    pub d_head: u64,
    pub second_order_state: u64,
    pub crossover_n: u64,
}

impl MemoryReport {
    pub fn new(d_head: u64) -> Result<Self> {
        Ok(Self {
            d_head,
            second_order_state: second_order_state(d_head),
            crossover_n: crossover(d_head)?,
        })
    }

    pub fn kv_cache(&self, n: u64) -> u64 {
        kv_cache_elems(n, self.d_head)
    }
}

/// Per-`N` element counts for both methods, optionally merged with measured
/// traces (per-head persisted scalars from the stateful runner, index `t`
/// holding the count after token `t + 1`).
pub fn memcurve(
    d: u64,
    n_max: u64,
    measured_kv: Option<&MemoryTrace>,
    measured_state: Option<&MemoryTrace>,
) -> Result<Vec<MemcurveRow>> {
    if n_max < 1 {
        return Err(SeqmixError::Domain("memcurve needs N_max >= 1".into()));
    }
    let state = second_order_state(d);
    let mut rows = Vec::with_capacity(n_max as usize);
    for n in 1..=n_max {
        let kv = kv_cache_elems(n, d);
        let idx = (n - 1) as usize;
        let mkv = measured_kv.and_then(|t| t.per_step.get(idx).copied());
        let mst = measured_state.and_then(|t| t.per_step.get(idx).copied());
        let matches = mkv.map_or(true, |v| v == kv) && mst.map_or(true, |v| v == state);
        rows.push(MemcurveRow {
            n,
            kv_elems: kv,
            state2_elems: state,
            measured_kv: mkv,
            measured_state: mst,
            matches,
        });
    }
    Ok(rows)
}
