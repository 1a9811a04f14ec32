//! Stateful token-by-token inference: first-order linear states, compressed
//! second-order feature states, and KV-cache decoding with online-max
//! normalization. Every path is checked token-for-token against the quadratic
//! reference forward.

use std::collections::VecDeque;

use crate::forward::{AMaskKind, NormKind, Order, QkActivation, VariantConfig};
use crate::forward::BlockWeights;
use crate::tensor::{sigmoid, silu, softplus, ConvActivation, DenseTensor};
use crate::{Result, SeqmixError, EPS_NORM, EPS_RMS};

/// Compressed second-order monomial feature map: all unique pairwise products
/// `x_i x_j` for `i <= j`, with sqrt(2) on off-diagonal terms so the inner
/// product of two mapped vectors equals the squared inner product of the
/// originals.
#[derive(Debug, Clone)]
pub struct Phi2Map {
    pub d: usize,
    /// `d * (d + 1) / 2`
    pub f: usize,
    /// Row-major over `i <= j`; fixed so serialized states are portable.
    pub index_table: Vec<(usize, usize)>,
    /// sqrt(2) for `i < j`, 1 for `i = j`.
    pub coeffs: Vec<f64>,
}

impl Phi2Map {
    pub fn new(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(SeqmixError::Dim("feature map needs d >= 1".into()));
        }
        let f = d * (d + 1) / 2;
        let mut index_table = Vec::with_capacity(f);
        let mut coeffs = Vec::with_capacity(f);
        for i in 0..d {
            for j in i..d {
                index_table.push((i, j));
                coeffs.push(if i == j { 1.0 } else { std::f64::consts::SQRT_2 });
            }
        }
        Ok(Self { d, f, index_table, coeffs })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.d);
        self.index_table
            .iter()
            .zip(&self.coeffs)
            .map(|(&(i, j), &c)| c * x[i] * x[j])
            .collect()
    }
}

/// Map a rank-1 tensor `[d]` to its second-order features `[d(d+1)/2]`.
pub fn phi2(x: &DenseTensor) -> Result<DenseTensor> {
    if x.rank() != 1 {
        return Err(SeqmixError::Dim(format!(
            "phi2 expects a rank-1 tensor, got {:?}",
            x.shape()
        )));
    }
    let map = Phi2Map::new(x.shape()[0])?;
    DenseTensor::new(vec![map.f], map.apply(x.data()))
}

/// Per-head recurrent state for the first- and second-order paths.
///
/// `s` accumulates decayed feature/value outer products; `z` (present iff the
/// variant normalizes by causal row sums) accumulates decayed features alone.
/// The conv ring holds the last `window - 1` pre-conv fused QKV rows for this
/// head (`3 * d_head` scalars each).
#[derive(Debug, Clone)]
pub struct RecurrentState {
    /// 1 or 2
    pub order: u32,
    pub d_head: usize,
    /// `d_head` (order 1) or `d_head (d_head + 1) / 2` (order 2)
    pub feat: usize,
    /// `[feat, d_head]`, row-major
    pub s: Vec<f64>,
    pub z: Option<Vec<f64>>,
    pub conv_window: usize,
    /// oldest first; each row has `3 * d_head` scalars
    pub conv_rows: VecDeque<Vec<f64>>,
    pub step: u64,
    map: Option<Phi2Map>,
}

impl RecurrentState {
    pub fn first_order(d_head: usize, with_normalizer: bool, conv_window: usize) -> Self {
        Self {
            order: 1,
            d_head,
            feat: d_head,
            s: vec![0.0; d_head * d_head],
            z: with_normalizer.then(|| vec![0.0; d_head]),
            conv_window,
            conv_rows: VecDeque::new(),
            step: 0,
            map: None,
        }
    }

    pub fn second_order(d_head: usize, conv_window: usize) -> Result<Self> {
        let map = Phi2Map::new(d_head)?;
        let f = map.f;
        Ok(Self {
            order: 2,
            d_head,
            feat: f,
            s: vec![0.0; f * d_head],
            z: Some(vec![0.0; f]),
            conv_window,
            conv_rows: VecDeque::new(),
            step: 0,
            map: Some(map),
        })
    }

    /// Exact count of persisted scalars: state matrix, normalizer, conv rows.
    pub fn persisted_scalars(&self) -> u64 {
        (self.s.len()
            + self.z.as_ref().map_or(0, |z| z.len())
            + self.conv_rows.iter().map(|r| r.len()).sum::<usize>()) as u64
    }

    fn decay(&mut self, a_t: f64) {
        let g = a_t.exp();
        if g != 1.0 {
            for v in &mut self.s {
                *v *= g;
            }
            if let Some(z) = &mut self.z {
                for v in z {
                    *v *= g;
                }
            }
        }
    }

    /// Serialize: fixed header (order, d, feat, window, step) followed by a
    /// flat little-endian double array — S, then z if present, then conv rows
    /// oldest first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.order.to_le_bytes());
        out.extend_from_slice(&(self.d_head as u32).to_le_bytes());
        out.extend_from_slice(&(self.feat as u32).to_le_bytes());
        out.extend_from_slice(&(self.conv_window as u32).to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let mut push = |v: &[f64]| {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        push(&self.s);
        if let Some(z) = &self.z {
            push(z);
        }
        for row in &self.conv_rows {
            push(row);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 * 4 + 8;
        if bytes.len() < HEADER || (bytes.len() - HEADER) % 8 != 0 {
            return Err(SeqmixError::Parse("truncated state blob".into()));
        }
        let u32_at = |off: usize| {
            u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
        };
        let order = u32_at(0) as u32;
        let d_head = u32_at(4);
        let feat = u32_at(8);
        let conv_window = u32_at(12);
        let step = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        if !(order == 1 || order == 2) || d_head == 0 {
            return Err(SeqmixError::Parse(format!("bad state header: order {order}")));
        }
        let want_feat = if order == 2 { d_head * (d_head + 1) / 2 } else { d_head };
        if feat != want_feat || !(1..=4).contains(&conv_window) {
            return Err(SeqmixError::Parse("state header inconsistent".into()));
        }
        let doubles: Vec<f64> = bytes[HEADER..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let s_len = feat * d_head;
        let rows = (step as usize).min(conv_window - 1);
        let conv_len = rows * 3 * d_head;
        let has_z = doubles.len() == s_len + feat + conv_len;
        if !has_z && doubles.len() != s_len + conv_len {
            return Err(SeqmixError::Parse(format!(
                "state payload has {} doubles, expected {} or {}",
                doubles.len(),
                s_len + conv_len,
                s_len + feat + conv_len
            )));
        }
        let s = doubles[..s_len].to_vec();
        let mut off = s_len;
        let z = has_z.then(|| {
            let z = doubles[off..off + feat].to_vec();
            off += feat;
            z
        });
        let mut conv_rows = VecDeque::new();
        for _ in 0..rows {
            conv_rows.push_back(doubles[off..off + 3 * d_head].to_vec());
            off += 3 * d_head;
        }
        Ok(Self {
            order,
            d_head,
            feat,
            s,
            z,
            conv_window,
            conv_rows,
            step,
            map: (order == 2).then(|| Phi2Map::new(d_head).expect("d >= 1")),
        })
    }
}

/// One step of the first-order recurrence:
/// `S <- e^{a_t} S + k_t (dt_t v_t)^T`, `z <- e^{a_t} z + k_t`;
/// returns the pre-normalization read `y_t = q_t^T S`.
pub fn step_first_order(
    state: &mut RecurrentState,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    a_t: f64,
    dt_t: Option<f64>,
) -> Result<Vec<f64>> {
    if state.order != 1 {
        return Err(SeqmixError::Config("state is not first-order".into()));
    }
    let d = state.d_head;
    if q.len() != d || k.len() != d || v.len() != d {
        return Err(SeqmixError::Dim("row length does not match state d_head".into()));
    }
    state.decay(a_t);
    let dt = dt_t.unwrap_or(1.0);
    for b in 0..d {
        let kb = k[b];
        for c in 0..d {
            state.s[b * d + c] += kb * dt * v[c];
        }
    }
    if let Some(z) = &mut state.z {
        for b in 0..d {
            z[b] += k[b];
        }
    }
    state.step += 1;
    let mut y = vec![0.0; d];
    for b in 0..d {
        let qb = q[b];
        if qb == 0.0 {
            continue;
        }
        for c in 0..d {
            y[c] += qb * state.s[b * d + c];
        }
    }
    Ok(y)
}

/// One step of the second-order recurrence with softmax normalization:
/// `S <- e^{a_t} S + phi2(k_t) v_t^T`, `z <- e^{a_t} z + phi2(k_t)`;
/// returns `y_t = (phi2(q_t)^T S) / max(phi2(q_t)^T z, eps)`.
pub fn step_second_order(
    state: &mut RecurrentState,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    a_t: f64,
) -> Result<Vec<f64>> {
    if state.order != 2 {
        return Err(SeqmixError::Config("state is not second-order".into()));
    }
    let d = state.d_head;
    if q.len() != d || k.len() != d || v.len() != d {
        return Err(SeqmixError::Dim("row length does not match state d_head".into()));
    }
    let (fk, fq) = {
        let map = state.map.as_ref().expect("order-2 state has a feature map");
        (map.apply(k), map.apply(q))
    };
    state.decay(a_t);
    for (b, &fkb) in fk.iter().enumerate() {
        for c in 0..d {
            state.s[b * d + c] += fkb * v[c];
        }
    }
    let z = state.z.as_mut().expect("order-2 state has a normalizer");
    for (zb, &fkb) in z.iter_mut().zip(&fk) {
        *zb += fkb;
    }
    state.step += 1;
    let mut num = vec![0.0; d];
    let mut den = 0.0;
    for (b, &fqb) in fq.iter().enumerate() {
        den += fqb * state.z.as_ref().unwrap()[b];
        if fqb == 0.0 {
            continue;
        }
        for c in 0..d {
            num[c] += fqb * state.s[b * d + c];
        }
    }
    let den = den.max(EPS_NORM);
    for x in &mut num {
        *x /= den;
    }
    Ok(num)
}

/// Growing per-head key/value store for the exponential-kernel paths.
#[derive(Debug, Clone, Default)]
pub struct KVCache {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    /// Cumulative decay sums per stored token; empty iff decay is untracked
    /// (pure softmax attention).
    pub a_cs: Vec<f64>,
    pub track_decay: bool,
}

impl KVCache {
    pub fn new(track_decay: bool) -> Self {
        Self { keys: Vec::new(), values: Vec::new(), a_cs: Vec::new(), track_decay }
    }

    pub fn push(&mut self, k: Vec<f64>, v: Vec<f64>, a_cs_t: f64) {
        self.keys.push(k);
        self.values.push(v);
        if self.track_decay {
            self.a_cs.push(a_cs_t);
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Keys and values, plus one decay scalar per token when tracked.
    pub fn persisted_scalars(&self) -> u64 {
        let d = self.keys.first().map_or(0, |k| k.len());
        (2 * self.len() * d + self.a_cs.len()) as u64
    }

    fn a_cs_at(&self, j: usize) -> f64 {
        if self.track_decay {
            self.a_cs[j]
        } else {
            0.0
        }
    }
}

/// Exact exponential-kernel read over the cache in blocks, maintaining a
/// running max `m` and rescaled accumulators so no exponential overflows:
/// `y_t = sum_j exp(q_t.k_j + acs_t - acs_j - m) v_j / sum_j exp(...)`.
/// Any block partition yields the same output to ~1e-12.
pub fn step_kv_exponential(
    cache: &KVCache,
    q: &[f64],
    a_cs_t: f64,
    block: usize,
) -> Result<Vec<f64>> {
    if cache.is_empty() {
        return Err(SeqmixError::Config("KV cache is empty".into()));
    }
    if block == 0 {
        return Err(SeqmixError::Config("block size must be >= 1".into()));
    }
    let d = cache.keys[0].len();
    if q.len() != d {
        return Err(SeqmixError::Dim("query length does not match cache d_head".into()));
    }
    let mut m = f64::NEG_INFINITY;
    let mut num = vec![0.0; d];
    let mut den = 0.0;
    let n = cache.len();
    let mut start = 0;
    while start < n {
        let end = (start + block).min(n);
        let mut local_max = f64::NEG_INFINITY;
        for j in start..end {
            let mut p = 0.0;
            for c in 0..d {
                p += q[c] * cache.keys[j][c];
            }
            local_max = local_max.max(p + a_cs_t - cache.a_cs_at(j));
        }
        let new_m = m.max(local_max);
        if new_m > m && m != f64::NEG_INFINITY {
            let r = (m - new_m).exp();
            den *= r;
            for x in &mut num {
                *x *= r;
            }
        }
        m = new_m;
        for j in start..end {
            let mut p = 0.0;
            for c in 0..d {
                p += q[c] * cache.keys[j][c];
            }
            let e = (p + a_cs_t - cache.a_cs_at(j) - m).exp();
            den += e;
            for c in 0..d {
                num[c] += e * cache.values[j][c];
            }
        }
        start = end;
    }
    let den = den.max(EPS_NORM);
    for x in &mut num {
        *x /= den;
    }
    Ok(num)
}

/// Per-head persisted scalar count after each processed token.
#[derive(Debug, Clone)]
pub struct MemoryTrace {
    pub per_step: Vec<u64>,
}

pub const DEFAULT_BLOCK: usize = 16;

/// Token-by-token execution of a full block: projection, conv via ring
/// buffer, the appropriate state or cache step, gating/normalization, output
/// projection. Outputs match [`crate::forward::variant_forward`] to ~1e-9 per
/// token; the trace counts persisted scalars per head after each step.
pub fn run_stateful(
    h: &DenseTensor,
    cfg: &VariantConfig,
    w: &BlockWeights,
) -> Result<(DenseTensor, MemoryTrace)> {
    run_stateful_blocked(h, cfg, w, DEFAULT_BLOCK)
}

enum HeadPath {
    Recurrent(RecurrentState),
    Cache(KVCache),
}

pub fn run_stateful_blocked(
    h: &DenseTensor,
    cfg: &VariantConfig,
    w: &BlockWeights,
    block: usize,
) -> Result<(DenseTensor, MemoryTrace)> {
    w.validate_for(cfg)?;
    if h.rank() != 2 || h.shape()[1] != w.d_model {
        return Err(SeqmixError::Dim(format!(
            "stateful input must be [N, {}], got {:?}",
            w.d_model,
            h.shape()
        )));
    }
    let n = h.shape()[0];
    let (heads, d_head, inner) = (w.heads, w.d_head, w.inner());
    let needs_dt = cfg.discretize_values || cfg.amask == AMaskKind::Original;
    let softmax_norm = cfg.norm == NormKind::SoftmaxNorm;

    let mut paths: Vec<HeadPath> = (0..heads)
        .map(|_| -> Result<HeadPath> {
            Ok(match cfg.order {
                Order::Linear => HeadPath::Recurrent(RecurrentState::first_order(
                    d_head,
                    softmax_norm,
                    cfg.conv_window,
                )),
                Order::Squared => {
                    if !softmax_norm {
                        return Err(SeqmixError::Config(
                            "squared-order stateful path requires softmax normalization".into(),
                        ));
                    }
                    HeadPath::Recurrent(RecurrentState::second_order(d_head, cfg.conv_window)?)
                }
                Order::Exponential => {
                    if !softmax_norm {
                        return Err(SeqmixError::Config(
                            "exponential-order stateful path requires softmax normalization"
                                .into(),
                        ));
                    }
                    HeadPath::Cache(KVCache::new(cfg.amask != AMaskKind::None))
                }
            })
        })
        .collect::<Result<_>>()?;

    let d_model = w.d_model;
    let channels = 3 * inner;
    let conv_wt = w.conv.per_channel_weights.data();
    let window = w.conv.window;
    // Shared ring of full fused pre-conv rows; most recent at the back.
    let mut ring: VecDeque<Vec<f64>> = VecDeque::with_capacity(window.saturating_sub(1));
    let mut a_cs_acc = vec![0.0f64; heads];
    let scale = if cfg.scale_qk { 1.0 / (d_head as f64).sqrt() } else { 1.0 };

    let mut out = DenseTensor::zeros(&[n, d_model]);
    let mut trace = MemoryTrace { per_step: Vec::with_capacity(n) };

    let row_matvec = |row: &[f64], mat: &DenseTensor| -> Vec<f64> {
        let cols = mat.shape()[1];
        let md = mat.data();
        let mut out = vec![0.0; cols];
        for (l, &hv) in row.iter().enumerate() {
            if hv == 0.0 {
                continue;
            }
            for c in 0..cols {
                out[c] += hv * md[l * cols + c];
            }
        }
        out
    };

    for t in 0..n {
        let hrow = &h.data()[t * d_model..(t + 1) * d_model];
        let pre = row_matvec(hrow, &w.w_qkv);

        // causal depthwise conv against the ring of past rows
        let mut conv = vec![0.0; channels];
        for ch in 0..channels {
            let mut acc = conv_wt[ch * window] * pre[ch];
            for s in 1..window {
                if s <= ring.len() {
                    acc += conv_wt[ch * window + s] * ring[ring.len() - s][ch];
                }
            }
            if let Some(b) = &w.conv.bias {
                acc += b.data()[ch];
            }
            conv[ch] = match w.conv.activation {
                ConvActivation::None => acc,
                ConvActivation::Silu => silu(acc),
            };
        }
        if window > 1 {
            ring.push_back(pre);
            if ring.len() > window - 1 {
                ring.pop_front();
            }
        }

        // per-head dt and decay logit
        let dt_row = needs_dt.then(|| {
            let pre_dt = row_matvec(hrow, w.w_dt.as_ref().unwrap());
            let bias = w.dt_bias.as_ref().unwrap();
            (0..heads)
                .map(|hh| softplus(pre_dt[hh] + bias.at(&[hh])))
                .collect::<Vec<f64>>()
        });
        let a_row: Vec<f64> = match cfg.amask {
            AMaskKind::None => vec![0.0; heads],
            AMaskKind::Softplus => {
                let pre_a = row_matvec(hrow, w.w_a.as_ref().unwrap());
                pre_a.iter().map(|&x| -softplus(x)).collect()
            }
            AMaskKind::Original => {
                let a_log = w.a_log.as_ref().unwrap();
                let dt = dt_row.as_ref().unwrap();
                (0..heads).map(|hh| -a_log.at(&[hh]).exp() * dt[hh]).collect()
            }
        };

        let mut y_vec = vec![0.0; inner];
        for (hh, path) in paths.iter_mut().enumerate() {
            let q_raw = &conv[hh * d_head..(hh + 1) * d_head];
            let k_raw = &conv[inner + hh * d_head..inner + (hh + 1) * d_head];
            let v_raw = &conv[2 * inner + hh * d_head..2 * inner + (hh + 1) * d_head];
            let act = |x: f64| match cfg.qk_activation {
                QkActivation::None => x,
                QkActivation::Relu => x.max(0.0),
                QkActivation::Silu => silu(x),
            };
            let qa: Vec<f64> = q_raw.iter().map(|&x| act(x) * scale).collect();
            let ka: Vec<f64> = k_raw.iter().map(|&x| act(x)).collect();
            let dt_h = dt_row.as_ref().map(|r| r[hh]);
            let v_used: Vec<f64> = if cfg.discretize_values {
                let dt = dt_h.unwrap();
                v_raw.iter().map(|&x| x * dt).collect()
            } else {
                v_raw.to_vec()
            };

            let y_head = match path {
                HeadPath::Recurrent(state) => {
                    if state.order == 1 {
                        // dt enters the values inside the step when the
                        // variant discretizes; pass the raw v then.
                        let (v_in, dt_in) = if cfg.discretize_values {
                            (v_raw, dt_h)
                        } else {
                            (v_raw, None)
                        };
                        let y_pre =
                            step_first_order(state, &qa, &ka, v_in, a_row[hh], dt_in)?;
                        if softmax_norm {
                            let z = state.z.as_ref().unwrap();
                            let den: f64 =
                                qa.iter().zip(z).map(|(a, b)| a * b).sum::<f64>().max(EPS_NORM);
                            y_pre.iter().map(|&x| x / den).collect()
                        } else {
                            y_pre
                        }
                    } else {
                        step_second_order(state, &qa, &ka, &v_used, a_row[hh])?
                    }
                }
                HeadPath::Cache(cache) => {
                    a_cs_acc[hh] += a_row[hh];
                    cache.push(ka.clone(), v_used.clone(), a_cs_acc[hh]);
                    step_kv_exponential(cache, &qa, a_cs_acc[hh], block)?
                }
            };

            for c in 0..d_head {
                let ch = hh * d_head + c;
                let mut val = y_head[c];
                if cfg.d_residual {
                    val += w.d_res.as_ref().unwrap().at(&[ch]) * v_raw[c];
                }
                y_vec[ch] = val;
            }
        }

        let gated: Vec<f64> = if cfg.z_gate {
            let zp = row_matvec(hrow, w.w_z.as_ref().unwrap());
            y_vec.iter().zip(&zp).map(|(&y, &z)| y * sigmoid(z)).collect()
        } else {
            y_vec
        };
        let normed: Vec<f64> = if cfg.norm == NormKind::OutputRmsNorm {
            let ms = gated.iter().map(|v| v * v).sum::<f64>() / inner as f64;
            let r = 1.0 / (ms + EPS_RMS).sqrt();
            gated
                .iter()
                .enumerate()
                .map(|(ch, &v)| v * w.rms_gain.at(&[ch]) * r)
                .collect()
        } else {
            gated
        };
        let out_row = row_matvec(&normed, &w.w_out);
        out.data_mut()[t * d_model..(t + 1) * d_model].copy_from_slice(&out_row);

        // persisted scalars for one head: state/cache plus its conv slice
        let conv_scalars = (ring.len() * 3 * d_head) as u64;
        let head_count = match &paths[0] {
            HeadPath::Recurrent(state) => {
                (state.s.len() + state.z.as_ref().map_or(0, |z| z.len())) as u64 + conv_scalars
            }
            HeadPath::Cache(cache) => cache.persisted_scalars() + conv_scalars,
        };
        trace.per_step.push(head_count);
    }
    out.ensure_finite("run_stateful")?;
    Ok((out, trace))
}
