//! Minimal dense-tensor numerics: row-major `f64` storage, matrix products,
//! cumulative sums, causal depthwise convolution, and the scalar
//! nonlinearities used by the attention variants.
//!
//! All verification paths run in double precision. `Precision::Single` exists
//! for the `bench` subcommand only: results are computed in double and rounded
//! to the nearest `f32` after every operation.

use crate::{Result, SeqmixError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Double,
    Single,
}

/// Dense multi-dimensional real array, row-major, batch axes leading.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(SeqmixError::Dim(format!("zero axis extent in {shape:?}")));
        }
        if expected != data.len() {
            return Err(SeqmixError::Dim(format!(
                "shape {shape:?} implies {expected} elements, got {}",
                data.len()
            )));
        }
        let t = Self { shape, data, precision: Precision::Double };
        t.ensure_finite("new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n], precision: Precision::Double }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self { shape: shape.to_vec(), data, precision: Precision::Double }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Switch precision tag; `Single` rounds the current contents to `f32`.
    pub fn with_precision(mut self, p: Precision) -> Self {
        self.precision = p;
        self.quantize();
        self
    }

    fn quantize(&mut self) {
        if self.precision == Precision::Single {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (ax, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[ax]);
            off = off * self.shape[ax] + i;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let off = self.offset(idx);
        self.data[off] = v;
    }

    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(SeqmixError::NonFinite(op.to_string()))
        }
    }

    /// Elementwise map; checks the result stays finite.
    pub fn map(&self, op: &str, f: impl Fn(f64) -> f64) -> Result<Self> {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = f(*v);
        }
        out.quantize();
        out.ensure_finite(op)?;
        Ok(out)
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(SeqmixError::Dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Batched matrix product. Leading batch axes must match, or one operand may
/// be a plain rank-2 matrix broadcast over the other's batch axes.
pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    let ra = a.rank();
    let rb = b.rank();
    if ra < 2 || rb < 2 {
        return Err(SeqmixError::Dim("matmul operands must have rank >= 2".into()));
    }
    let (m, ka) = (a.shape[ra - 2], a.shape[ra - 1]);
    let (kb, n) = (b.shape[rb - 2], b.shape[rb - 1]);
    if ka != kb {
        return Err(SeqmixError::Dim(format!(
            "matmul inner extents {ka} vs {kb} (shapes {:?} x {:?})",
            a.shape, b.shape
        )));
    }
    let batch_a = &a.shape[..ra - 2];
    let batch_b = &b.shape[..rb - 2];
    let batch: Vec<usize> = if batch_a == batch_b {
        batch_a.to_vec()
    } else if batch_a.is_empty() {
        batch_b.to_vec()
    } else if batch_b.is_empty() {
        batch_a.to_vec()
    } else {
        return Err(SeqmixError::Dim(format!(
            "matmul batch axes {batch_a:?} vs {batch_b:?} not broadcastable"
        )));
    };
    let nbatch: usize = batch.iter().product();
    let mut shape = batch.clone();
    shape.push(m);
    shape.push(n);
    let mut data = vec![0.0; nbatch * m * n];
    let stride_a = if batch_a.is_empty() { 0 } else { m * ka };
    let stride_b = if batch_b.is_empty() { 0 } else { kb * n };
    for t in 0..nbatch {
        let pa = &a.data[t * stride_a..t * stride_a + m * ka];
        let pb = &b.data[t * stride_b..t * stride_b + kb * n];
        let po = &mut data[t * m * n..(t + 1) * m * n];
        for i in 0..m {
            for l in 0..ka {
                let av = pa[i * ka + l];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    po[i * n + j] += av * pb[l * n + j];
                }
            }
        }
    }
    let mut out = DenseTensor { shape, data, precision: a.precision };
    out.quantize();
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// Inclusive prefix sums along `axis`.
pub fn cumsum_axis(x: &DenseTensor, axis: usize) -> Result<DenseTensor> {
    if axis >= x.rank() {
        return Err(SeqmixError::Dim(format!(
            "cumsum axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    let mut out = x.clone();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let len = x.shape[axis];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for s in 1..len {
                out.data[base + s * inner] += out.data[base + (s - 1) * inner];
            }
        }
    }
    out.quantize();
    out.ensure_finite("cumsum_axis")?;
    Ok(out)
}

/// Overflow-safe softplus: `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`], `y + log(1 - exp(-y))` for `y > 0`.
pub fn softplus_inverse(y: f64) -> Result<f64> {
    if !(y > 0.0) {
        return Err(SeqmixError::Domain(format!(
            "softplus_inverse requires y > 0, got {y}"
        )));
    }
    if y > 30.0 {
        return Ok(y);
    }
    Ok(y + (-(-y).exp()).ln_1p())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn softplus_t(x: &DenseTensor) -> Result<DenseTensor> {
    x.map("softplus", softplus)
}

pub fn softplus_inverse_t(y: &DenseTensor) -> Result<DenseTensor> {
    if let Some(bad) = y.data.iter().find(|v| **v <= 0.0) {
        return Err(SeqmixError::Domain(format!(
            "softplus_inverse requires positive input, got {bad}"
        )));
    }
    y.map("softplus_inverse", |v| softplus_inverse(v).expect("checked positive"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvActivation {
    #[default]
    None,
    Silu,
}

/// Depthwise causal convolution spec; window is capped at 4.
#[derive(Debug, Clone)]
pub struct ConvSpec {
    pub window: usize,
    /// `[channels, window]`; column 0 multiplies the current token, column
    /// `s` the token `s` steps in the past.
    pub per_channel_weights: DenseTensor,
    pub bias: Option<DenseTensor>,
    pub activation: ConvActivation,
}

impl ConvSpec {
    pub fn new(
        window: usize,
        per_channel_weights: DenseTensor,
        bias: Option<DenseTensor>,
        activation: ConvActivation,
    ) -> Result<Self> {
        if !(1..=4).contains(&window) {
            return Err(SeqmixError::Config(format!(
                "conv window must be in 1..=4, got {window}"
            )));
        }
        if per_channel_weights.rank() != 2 || per_channel_weights.shape()[1] != window {
            return Err(SeqmixError::Dim(format!(
                "conv weights must be [channels, {window}], got {:?}",
                per_channel_weights.shape()
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [per_channel_weights.shape()[0]] {
                return Err(SeqmixError::Dim(format!(
                    "conv bias shape {:?} does not match {} channels",
                    b.shape(),
                    per_channel_weights.shape()[0]
                )));
            }
        }
        Ok(Self { window, per_channel_weights, bias, activation })
    }

    /// Window-1 convolution with unit weight: the identity map.
    pub fn identity(channels: usize) -> Self {
        Self {
            window: 1,
            per_channel_weights: DenseTensor::from_fn(&[channels, 1], |_| 1.0),
            bias: None,
            activation: ConvActivation::None,
        }
    }

    pub fn channels(&self) -> usize {
        self.per_channel_weights.shape()[0]
    }
}

/// Causal depthwise conv over `x: [N, channels]` with zero left-padding.
pub fn causal_conv1d(x: &DenseTensor, spec: &ConvSpec) -> Result<DenseTensor> {
    if x.rank() != 2 || x.shape()[1] != spec.channels() {
        return Err(SeqmixError::Dim(format!(
            "conv input {:?} does not match {} channels",
            x.shape(),
            spec.channels()
        )));
    }
    let n = x.shape()[0];
    let c = spec.channels();
    let w = spec.window;
    let wt = spec.per_channel_weights.data();
    let mut out = DenseTensor::zeros(&[n, c]);
    for t in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            for s in 0..w.min(t + 1) {
                acc += wt[ch * w + s] * x.data[(t - s) * c + ch];
            }
            if let Some(b) = &spec.bias {
                acc += b.data()[ch];
            }
            out.data[t * c + ch] = match spec.activation {
                ConvActivation::None => acc,
                ConvActivation::Silu => silu(acc),
            };
        }
    }
    out.precision = x.precision;
    out.quantize();
    out.ensure_finite("causal_conv1d")?;
    Ok(out)
}
