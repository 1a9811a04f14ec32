//! Causal mask and decay-mask construction: per-position decay logits for
//! both mask variants, their cumulative sums, and the materialized
//! semi-separable N x N decay matrix used by the quadratic paths.

use crate::tensor::{cumsum_axis, matmul, softplus, DenseTensor};
use crate::{Result, SeqmixError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayVariant {
    /// `A = -exp(A_log) . dt`, the construction of the full Mamba-2 block.
    Original,
    /// `A = -softplus(h . W_A)`.
    Softplus,
}

/// Per-head, per-position decay log-rates, all entries `<= 0`.
///
/// `a = 0` is admitted as the degenerate no-decay limit; it reduces the decay
/// matrix to the plain causal mask and is what the reduction tests exercise.
#[derive(Debug, Clone)]
pub struct DecayLogits {
    /// `[H, N]`
    pub a: DenseTensor,
    pub variant: DecayVariant,
}

impl DecayLogits {
    pub fn new(a: DenseTensor, variant: DecayVariant) -> Result<Self> {
        if a.rank() != 2 {
            return Err(SeqmixError::Dim(format!(
                "decay logits must be [H, N], got {:?}",
                a.shape()
            )));
        }
        if let Some(bad) = a.data().iter().find(|v| **v > 0.0) {
            return Err(SeqmixError::Domain(format!(
                "decay logits must be <= 0, got {bad}"
            )));
        }
        Ok(Self { a, variant })
    }

    /// All-zero logits: no decay, the mask degenerates to the causal mask.
    pub fn none(heads: usize, n: usize) -> Self {
        Self { a: DenseTensor::zeros(&[heads, n]), variant: DecayVariant::Softplus }
    }

    pub fn heads(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.a.shape()[1]
    }
}

/// Cumulative decay sums plus the dense lower-triangular decay matrix.
///
/// `dense[h,i,j] = exp(a_cs[h,i] - a_cs[h,j])` for `i >= j`, `0` above the
/// diagonal. The exponent is formed as a difference before exponentiation so
/// the entries never overflow; exponents below `-745` underflow to an exact 0.
#[derive(Debug, Clone)]
pub struct DecayMatrix {
    /// `[H, N]`
    pub a_cs: DenseTensor,
    /// `[H, N, N]`
    pub dense: DenseTensor,
}

impl DecayMatrix {
    pub fn heads(&self) -> usize {
        self.a_cs.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.a_cs.shape()[1]
    }
}

/// Original Mamba-2 decay: `a[h,t] = -exp(A_log[h]) * dt[h,t]`.
pub fn decay_original(a_log: &DenseTensor, dt: &DenseTensor) -> Result<DecayLogits> {
    if a_log.rank() != 1 || dt.rank() != 2 || dt.shape()[0] != a_log.shape()[0] {
        return Err(SeqmixError::Dim(format!(
            "decay_original expects A_log [H] and dt [H, N], got {:?} and {:?}",
            a_log.shape(),
            dt.shape()
        )));
    }
    if let Some(bad) = dt.data().iter().find(|v| **v < 0.0) {
        return Err(SeqmixError::Domain(format!(
            "dt must be non-negative (post-softplus), got {bad}"
        )));
    }
    let (h, n) = (dt.shape()[0], dt.shape()[1]);
    let a = DenseTensor::from_fn(&[h, n], |idx| -a_log.at(&[idx[0]]).exp() * dt.at(&[idx[0], idx[1]]));
    DecayLogits::new(a, DecayVariant::Original)
}

/// Softplus decay: `a[h',t] = -softplus((h . W_A)[t, h'])`.
pub fn decay_softplus(h: &DenseTensor, w_a: &DenseTensor) -> Result<DecayLogits> {
    let pre = matmul(h, w_a)?; // [N, H]
    decay_softplus_from_pre(&pre)
}

/// Same as [`decay_softplus`] but starting from the already-projected
/// pre-activation `[N, H]`.
pub fn decay_softplus_from_pre(pre: &DenseTensor) -> Result<DecayLogits> {
    let (n, heads) = (pre.shape()[0], pre.shape()[1]);
    let a = DenseTensor::from_fn(&[heads, n], |idx| -softplus(pre.at(&[idx[1], idx[0]])));
    DecayLogits::new(a, DecayVariant::Softplus)
}

/// Build the cumulative sums and the dense causal decay matrix.
pub fn build_decay_matrix(logits: &DecayLogits) -> Result<DecayMatrix> {
    let a_cs = cumsum_axis(&logits.a, 1)?;
    let dense = dense_from_cumsum(&a_cs);
    Ok(DecayMatrix { a_cs, dense })
}

/// Materialize `exp(a_cs_i - a_cs_j)` on the lower triangle for arbitrary
/// cumulative sums (also used by gradient tests that bypass the logits type).
pub fn dense_from_cumsum(a_cs: &DenseTensor) -> DenseTensor {
    let (h, n) = (a_cs.shape()[0], a_cs.shape()[1]);
    DenseTensor::from_fn(&[h, n, n], |idx| {
        let (hh, i, j) = (idx[0], idx[1], idx[2]);
        if i < j {
            0.0
        } else if i == j {
            1.0
        } else {
            let e = a_cs.at(&[hh, i]) - a_cs.at(&[hh, j]);
            if e < -745.0 {
                0.0
            } else {
                e.exp()
            }
        }
    })
}

/// Max absolute deviation of `log(sigmoid(x))` from `-softplus(-x)` over the
/// grid; the two A-mask constructions differ only by an input sign.
pub fn logsigmoid_softplus_identity_check(grid: &DenseTensor) -> f64 {
    grid.data()
        .iter()
        .map(|&x| {
            let lhs = (1.0 / (1.0 + (-x).exp())).ln();
            let rhs = -softplus(-x);
            (lhs - rhs).abs()
        })
        .fold(0.0, f64::max)
}
