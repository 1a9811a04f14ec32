//! Analytic gradients for the six attention kernels, chain rules for the
//! surrounding block stages, and the central finite-difference oracle that is
//! the ground truth whenever a printed formula is in doubt.
//!
//! Two transcription corrections, both confirmed by the oracle:
//! * the 2Mamba kernel gradient needs the decay factor `A_M` inside the score
//!   chain (`dP = 2 QK^T A_M M . dY`) and the `1/S` normalizer factor carried
//!   into the decay gradients;
//! * the exponentiated kernel's query gradient is `D K` (not `D K^T`).

use crate::forward::{score_weights, NormKind, Order};
use crate::mask::DecayMatrix;
use crate::tensor::{sigmoid, ConvActivation, ConvSpec, DenseTensor};
use crate::{Result, SeqmixError};

/// Gradients of one attention kernel with respect to its inputs.
#[derive(Debug, Clone)]
pub struct GradBundle {
    /// `[H, N, d_H]`
    pub dq: DenseTensor,
    pub dk: DenseTensor,
    pub dv: DenseTensor,
    /// `[H, N]` gradient w.r.t. the post-cumsum decay `A^CS`
    pub da_cs: DenseTensor,
    /// `[H, N]` gradient w.r.t. the pre-cumsum logits (suffix sums of `da_cs`)
    pub da_logits: DenseTensor,
}

impl GradBundle {
    fn zeros(h: usize, n: usize, d: usize) -> Self {
        Self {
            dq: DenseTensor::zeros(&[h, n, d]),
            dk: DenseTensor::zeros(&[h, n, d]),
            dv: DenseTensor::zeros(&[h, n, d]),
            da_cs: DenseTensor::zeros(&[h, n]),
            da_logits: DenseTensor::zeros(&[h, n]),
        }
    }
}

/// Suffix sums: the backward of an inclusive cumulative sum.
pub fn cumsum_backward(da_cs: &DenseTensor) -> DenseTensor {
    let (h, n) = (da_cs.shape()[0], da_cs.shape()[1]);
    let mut out = da_cs.clone();
    for hh in 0..h {
        let row = &mut out.data_mut()[hh * n..(hh + 1) * n];
        for t in (0..n.saturating_sub(1)).rev() {
            row[t] += row[t + 1];
        }
    }
    out
}

/// Forward of a bare attention kernel (no projections, no activations): the
/// differentiable map the analytic kernels and the oracle both probe.
pub fn attn_kernel_forward(
    order: Order,
    normalized: bool,
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    dm: &DecayMatrix,
) -> Result<DenseTensor> {
    let (h, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let p = raw_inner(q, k);
    let norm = if normalized { NormKind::SoftmaxNorm } else { NormKind::OutputRmsNorm };
    let (w, _, _) = score_weights(order, norm, &p, dm)?;
    let mut out = DenseTensor::zeros(&[h, n, d]);
    for hh in 0..h {
        for i in 0..n {
            for j in 0..=i {
                let wij = w.at(&[hh, i, j]);
                for c in 0..d {
                    let cur = out.at(&[hh, i, c]);
                    out.set(&[hh, i, c], cur + wij * v.at(&[hh, j, c]));
                }
            }
        }
    }
    Ok(out)
}

fn raw_inner(q: &DenseTensor, k: &DenseTensor) -> DenseTensor {
    let (h, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    DenseTensor::from_fn(&[h, n, n], |idx| {
        let (hh, i, j) = (idx[0], idx[1], idx[2]);
        let mut acc = 0.0;
        for l in 0..d {
            acc += q.at(&[hh, i, l]) * k.at(&[hh, j, l]);
        }
        acc
    })
}

/// Shared backward for all kernels. `scale` multiplies the inner products
/// (1 everywhere except a scaled softmax baseline).
pub(crate) fn kernel_backward_core(
    order: Order,
    normalized: bool,
    scale: f64,
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    dm: &DecayMatrix,
    p: &DenseTensor,
    weights: &DenseTensor,
    den: &DenseTensor,
    d_out: &DenseTensor,
) -> GradBundle {
    let (h, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let mut g = GradBundle::zeros(h, n, d);
    for hh in 0..h {
        let pd = &p.data()[hh * n * n..(hh + 1) * n * n];
        let wd = &weights.data()[hh * n * n..(hh + 1) * n * n];
        let ad = &dm.dense.data()[hh * n * n..(hh + 1) * n * n];
        let qd = &q.data()[hh * n * d..(hh + 1) * n * d];
        let kd = &k.data()[hh * n * d..(hh + 1) * n * d];
        let vd = &v.data()[hh * n * d..(hh + 1) * n * d];
        let od = &d_out.data()[hh * n * d..(hh + 1) * n * d];
        // dV = weights^T dO
        for i in 0..n {
            for j in 0..=i {
                let wij = wd[i * n + j];
                if wij == 0.0 {
                    continue;
                }
                for c in 0..d {
                    let cur = g.dv.at(&[hh, j, c]);
                    g.dv.set(&[hh, j, c], cur + wij * od[i * d + c]);
                }
            }
        }
        for i in 0..n {
            // w_row[j] = dO_i . v_j
            let mut wrow = vec![0.0; i + 1];
            for j in 0..=i {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += od[i * d + c] * vd[j * d + c];
                }
                wrow[j] = acc;
            }
            // dY (gradient w.r.t. the pre-normalization masked scores)
            let mut dy = vec![0.0; i + 1];
            if normalized {
                let mut rowdot = 0.0;
                for j in 0..=i {
                    rowdot += wd[i * n + j] * wrow[j];
                }
                let deni = den.at(&[hh, i]);
                for j in 0..=i {
                    dy[j] = (wrow[j] - rowdot) / deni;
                }
            } else {
                dy[..=i].copy_from_slice(&wrow);
            }
            // chain into inner products and decay cumsums
            for j in 0..=i {
                let (dp, t_ij) = match order {
                    Order::Linear => {
                        let a = ad[i * n + j];
                        (a * dy[j], pd[i * n + j] * scale * a * dy[j])
                    }
                    Order::Squared => {
                        let a = ad[i * n + j];
                        let ps = pd[i * n + j] * scale;
                        (2.0 * ps * a * dy[j], ps * ps * a * dy[j])
                    }
                    Order::Exponential => {
                        // raw score = exp(l - m); weights already hold the
                        // normalized value, so recover the raw one.
                        let raw = if normalized {
                            wd[i * n + j] * den.at(&[hh, i])
                        } else {
                            wd[i * n + j]
                        };
                        (raw * dy[j], raw * dy[j])
                    }
                };
                if dp != 0.0 {
                    let dp_scaled = dp * scale;
                    for c in 0..d {
                        let cur = g.dq.at(&[hh, i, c]);
                        g.dq.set(&[hh, i, c], cur + dp_scaled * kd[j * d + c]);
                        let cur = g.dk.at(&[hh, j, c]);
                        g.dk.set(&[hh, j, c], cur + dp_scaled * qd[i * d + c]);
                    }
                }
                if t_ij != 0.0 {
                    let cur = g.da_cs.at(&[hh, i]);
                    g.da_cs.set(&[hh, i], cur + t_ij);
                    let cur = g.da_cs.at(&[hh, j]);
                    g.da_cs.set(&[hh, j], cur - t_ij);
                }
            }
        }
    }
    g.da_logits = cumsum_backward(&g.da_cs);
    g
}

fn kernel_backward(
    order: Order,
    normalized: bool,
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    dm: &DecayMatrix,
    d_out: &DenseTensor,
) -> Result<GradBundle> {
    let p = raw_inner(q, k);
    let norm = if normalized { NormKind::SoftmaxNorm } else { NormKind::OutputRmsNorm };
    let (w, den, _) = score_weights(order, norm, &p, dm)?;
    Ok(kernel_backward_core(order, normalized, 1.0, q, k, v, dm, &p, &w, &den, d_out))
}

fn ones_mask(h: usize, n: usize) -> DecayMatrix {
    crate::mask::build_decay_matrix(&crate::mask::DecayLogits::none(h, n)).expect("zeros are valid")
}

/// `O = (Q K^T . M) V`
pub fn grad_linear(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    d_out: &DenseTensor,
) -> Result<GradBundle> {
    let dm = ones_mask(q.shape()[0], q.shape()[1]);
    let mut g = kernel_backward(Order::Linear, false, q, k, v, &dm, d_out)?;
    g.da_cs = DenseTensor::zeros(&[q.shape()[0], q.shape()[1]]);
    g.da_logits = g.da_cs.clone();
    Ok(g)
}

/// `O = [(Q K^T . M) / row-sum] V`
pub fn grad_linear_smnorm(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    d_out: &DenseTensor,
) -> Result<GradBundle> {
    let dm = ones_mask(q.shape()[0], q.shape()[1]);
    let mut g = kernel_backward(Order::Linear, true, q, k, v, &dm, d_out)?;
    g.da_cs = DenseTensor::zeros(&[q.shape()[0], q.shape()[1]]);
    g.da_logits = g.da_cs.clone();
    Ok(g)
}

/// `O = (Q K^T . M . A_M) V`
pub fn grad_linear_amask(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    dm: &DecayMatrix,
    d_out: &DenseTensor,
) -> Result<GradBundle> {
    kernel_backward(Order::Linear, false, q, k, v, dm, d_out)
}

/// `O = ((Q K^T)^2 . M . A_M) V`
pub fn grad_squared_amask(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    dm: &DecayMatrix,
    d_out: &DenseTensor,
) -> Result<GradBundle> {
    kernel_backward(Order::Squared, false, q, k, v, dm, d_out)
}

/// The 2Mamba kernel: squared scores, decay mask, softmax normalization.
pub fn grad_twomamba(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    dm: &DecayMatrix,
    d_out: &DenseTensor,
) -> Result<GradBundle> {
    kernel_backward(Order::Squared, true, q, k, v, dm, d_out)
}

/// The 2Mamba-E kernel: exponentiated scores, decay mask, softmax
/// normalization; scores carry the decay inside the max-subtracted logits.
pub fn grad_twomamba_e(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    dm: &DecayMatrix,
    d_out: &DenseTensor,
) -> Result<GradBundle> {
    kernel_backward(Order::Exponential, true, q, k, v, dm, d_out)
}

/// Central finite differences `(f(x+he) - f(x-he)) / 2h` contracted with
/// `d_out`, per scalar of every parameter tensor. The forward must be
/// deterministic; this is verified by evaluating it twice.
pub fn finite_diff_oracle(
    forward: &dyn Fn(&[DenseTensor]) -> Result<DenseTensor>,
    params: &[DenseTensor],
    d_out: &DenseTensor,
    step: f64,
) -> Result<Vec<DenseTensor>> {
    if !(step > 0.0) {
        return Err(SeqmixError::Domain(format!("FD step must be > 0, got {step}")));
    }
    let base = forward(params)?;
    let again = forward(params)?;
    if base.data() != again.data() {
        return Err(SeqmixError::Oracle(
            "forward is not deterministic: two identical calls differ".into(),
        ));
    }
    let loss = |out: &DenseTensor| -> f64 {
        out.data().iter().zip(d_out.data()).map(|(a, b)| a * b).sum()
    };
    let mut grads = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let mut g = DenseTensor::zeros(p.shape());
        for e in 0..p.len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[e] += step;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[e] -= step;
            let lp = loss(&forward(&plus)?);
            let lm = loss(&forward(&minus)?);
            g.data_mut()[e] = (lp - lm) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Relative-error metric used by every gradient check:
/// `max|a-b| / (max(inf-norm a, inf-norm b) + 1e-8)`.
pub fn rel_err(a: &DenseTensor, b: &DenseTensor) -> f64 {
    let na = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let nb = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dev = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    dev / (na.max(nb) + 1e-8)
}

// ---------------------------------------------------------------------------
// Stage backwards (used by the composed block/model backward)
// ---------------------------------------------------------------------------

/// Backward of `rmsnorm`; `inv` is the cached per-row `1/sqrt(mean+eps)`.
pub fn rmsnorm_backward(
    x: &DenseTensor,
    gain: &DenseTensor,
    inv: &[f64],
    d_out: &DenseTensor,
) -> (DenseTensor, DenseTensor) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let mut dx = DenseTensor::zeros(&[n, c]);
    let mut dgain = DenseTensor::zeros(&[c]);
    for t in 0..n {
        let r = inv[t];
        let row = &x.data()[t * c..(t + 1) * c];
        let drow = &d_out.data()[t * c..(t + 1) * c];
        let mut dot = 0.0;
        for ch in 0..c {
            dot += drow[ch] * gain.data()[ch] * row[ch];
            dgain.data_mut()[ch] += drow[ch] * row[ch] * r;
        }
        for ch in 0..c {
            dx.data_mut()[ch + t * c] =
                drow[ch] * gain.data()[ch] * r - row[ch] * dot * r * r * r / c as f64;
        }
    }
    (dx, dgain)
}

/// Backward of [`crate::tensor::causal_conv1d`]; recomputes the
/// pre-activation accumulators internally.
pub fn conv_backward(
    x: &DenseTensor,
    spec: &ConvSpec,
    d_out: &DenseTensor,
) -> (DenseTensor, DenseTensor, Option<DenseTensor>) {
    let n = x.shape()[0];
    let c = spec.channels();
    let w = spec.window;
    let wt = spec.per_channel_weights.data();
    let mut dx = DenseTensor::zeros(&[n, c]);
    let mut dw = DenseTensor::zeros(&[c, w]);
    let mut db = spec.bias.as_ref().map(|_| DenseTensor::zeros(&[c]));
    for t in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            for s in 0..w.min(t + 1) {
                acc += wt[ch * w + s] * x.data()[(t - s) * c + ch];
            }
            if let Some(b) = &spec.bias {
                acc += b.data()[ch];
            }
            let dact = match spec.activation {
                ConvActivation::None => 1.0,
                ConvActivation::Silu => crate::tensor::silu_deriv(acc),
            };
            let d_acc = d_out.data()[t * c + ch] * dact;
            if d_acc == 0.0 {
                continue;
            }
            if let Some(db) = &mut db {
                db.data_mut()[ch] += d_acc;
            }
            for s in 0..w.min(t + 1) {
                dw.data_mut()[ch * w + s] += d_acc * x.data()[(t - s) * c + ch];
                dx.data_mut()[(t - s) * c + ch] += d_acc * wt[ch * w + s];
            }
        }
    }
    (dx, dw, db)
}

pub fn sigmoid_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

// ---------------------------------------------------------------------------
// Composed block backward
// ---------------------------------------------------------------------------

use crate::forward::{AMaskKind, BlockCache, BlockWeights, QkActivation, VariantConfig};

/// Gradients for every learnable array of a block; fields mirror
/// [`BlockWeights`] presence.
#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub w_qkv: DenseTensor,
    pub w_out: DenseTensor,
    pub w_a: Option<DenseTensor>,
    pub w_dt: Option<DenseTensor>,
    pub dt_bias: Option<DenseTensor>,
    pub a_log: Option<DenseTensor>,
    pub d_res: Option<DenseTensor>,
    pub w_z: Option<DenseTensor>,
    pub conv_w: DenseTensor,
    pub conv_b: Option<DenseTensor>,
    pub rms_gain: DenseTensor,
}

pub(crate) fn matmul_t_left(a: &DenseTensor, b: &DenseTensor) -> DenseTensor {
    // a^T b for rank-2 a [n, m], b [n, k] -> [m, k]
    let (n, m) = (a.shape()[0], a.shape()[1]);
    let k = b.shape()[1];
    let mut out = DenseTensor::zeros(&[m, k]);
    for t in 0..n {
        for i in 0..m {
            let av = a.data()[t * m + i];
            if av == 0.0 {
                continue;
            }
            for j in 0..k {
                out.data_mut()[i * k + j] += av * b.data()[t * k + j];
            }
        }
    }
    out
}

pub(crate) fn matmul_t_right(a: &DenseTensor, b: &DenseTensor) -> DenseTensor {
    // a b^T for rank-2 a [n, k], b [m, k] -> [n, m]
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[0];
    let mut out = DenseTensor::zeros(&[n, m]);
    for t in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a.data()[t * k + l] * b.data()[j * k + l];
            }
            out.data_mut()[t * m + j] = acc;
        }
    }
    out
}

/// Full backward of [`crate::forward::block_forward_cached`]: returns the
/// gradient w.r.t. the block input plus all weight gradients. Shared
/// activations (dt feeding both decay and values in the full Mamba-2 preset)
/// accumulate their contributions.
pub fn block_backward(
    h: &DenseTensor,
    cfg: &VariantConfig,
    w: &BlockWeights,
    cache: &BlockCache,
    d_out: &DenseTensor,
) -> Result<(DenseTensor, BlockGrads)> {
    let n = h.shape()[0];
    let heads = w.heads;
    let d_head = w.d_head;
    let inner = w.inner();
    let mut dh = DenseTensor::zeros(&[n, w.d_model]);

    // out = normed . W_out
    let d_normed = matmul_t_right(d_out, &w.w_out);
    let g_w_out = matmul_t_left(&cache.normed, d_out);

    // optional RMS norm
    let (d_gated, g_rms_gain) = if cfg.norm == crate::forward::NormKind::OutputRmsNorm {
        let (dx, dg) = rmsnorm_backward(
            &cache.gated,
            &w.rms_gain,
            cache.rms_inv.as_ref().unwrap(),
            &d_normed,
        );
        (dx, dg)
    } else {
        (d_normed, DenseTensor::zeros(&[inner]))
    };

    // optional z gate
    let (d_yvec, g_w_z) = if cfg.z_gate {
        let zp = cache.z_pre.as_ref().unwrap();
        let mut d_yvec = DenseTensor::zeros(&[n, inner]);
        let mut d_zpre = DenseTensor::zeros(&[n, inner]);
        for t in 0..n {
            for ch in 0..inner {
                let g = sigmoid(zp.at(&[t, ch]));
                d_yvec.set(&[t, ch], d_gated.at(&[t, ch]) * g);
                d_zpre.set(
                    &[t, ch],
                    d_gated.at(&[t, ch]) * cache.y_vec.at(&[t, ch]) * sigmoid_deriv(zp.at(&[t, ch])),
                );
            }
        }
        let g_w_z = matmul_t_left(h, &d_zpre);
        accumulate(&mut dh, &matmul_t_right(&d_zpre, w.w_z.as_ref().unwrap()));
        (d_yvec, Some(g_w_z))
    } else {
        (d_gated, None)
    };

    // un-concatenate heads; D residual
    let mut d_y_heads = DenseTensor::zeros(&[heads, n, d_head]);
    let mut dv = DenseTensor::zeros(&[heads, n, d_head]);
    let mut g_d_res = cfg.d_residual.then(|| DenseTensor::zeros(&[inner]));
    for hh in 0..heads {
        for t in 0..n {
            for c in 0..d_head {
                let dyv = d_yvec.at(&[t, hh * d_head + c]);
                d_y_heads.set(&[hh, t, c], dyv);
                if cfg.d_residual {
                    let ch = hh * d_head + c;
                    let dd = g_d_res.as_mut().unwrap();
                    dd.data_mut()[ch] += dyv * cache.v.at(&[hh, t, c]);
                    let cur = dv.at(&[hh, t, c]);
                    dv.set(&[hh, t, c], cur + w.d_res.as_ref().unwrap().at(&[ch]) * dyv);
                }
            }
        }
    }

    // attention kernel
    let scale = if cfg.scale_qk { 1.0 / (d_head as f64).sqrt() } else { 1.0 };
    let normalized = cfg.norm == crate::forward::NormKind::SoftmaxNorm;
    let kb = kernel_backward_core(
        cfg.order,
        normalized,
        scale,
        &cache.qa,
        &cache.ka,
        &cache.v_used,
        &cache.dm,
        &raw_inner_unscaled(&cache.p, scale),
        &cache.y_n,
        &cache.row_den,
        &d_y_heads,
    );

    // value discretization
    let mut d_dt = DenseTensor::zeros(&[heads, n]);
    if cfg.discretize_values {
        let dt = cache.dt.as_ref().unwrap();
        for hh in 0..heads {
            for t in 0..n {
                let mut acc = 0.0;
                for c in 0..d_head {
                    let g = kb.dv.at(&[hh, t, c]);
                    acc += g * cache.v.at(&[hh, t, c]);
                    let cur = dv.at(&[hh, t, c]);
                    dv.set(&[hh, t, c], cur + g * dt.at(&[hh, t]));
                }
                d_dt.set(&[hh, t], acc);
            }
        }
    } else {
        accumulate(&mut dv, &kb.dv);
    }

    // decay chain
    let mut g_w_a = None;
    let mut g_a_log = None;
    match cfg.amask {
        AMaskKind::None => {}
        AMaskKind::Softplus => {
            let pre = cache.a_pre.as_ref().unwrap(); // [N, H]
            let mut d_pre = DenseTensor::zeros(&[n, heads]);
            for hh in 0..heads {
                for t in 0..n {
                    d_pre.set(
                        &[t, hh],
                        -sigmoid(pre.at(&[t, hh])) * kb.da_logits.at(&[hh, t]),
                    );
                }
            }
            g_w_a = Some(matmul_t_left(h, &d_pre));
            accumulate(&mut dh, &matmul_t_right(&d_pre, w.w_a.as_ref().unwrap()));
        }
        AMaskKind::Original => {
            let a_log = w.a_log.as_ref().unwrap();
            let dt = cache.dt.as_ref().unwrap();
            let mut g = DenseTensor::zeros(&[heads]);
            for hh in 0..heads {
                let rate = a_log.at(&[hh]).exp();
                for t in 0..n {
                    let dal = kb.da_logits.at(&[hh, t]);
                    let cur = d_dt.at(&[hh, t]);
                    d_dt.set(&[hh, t], cur - rate * dal);
                    g.data_mut()[hh] -= rate * dt.at(&[hh, t]) * dal;
                }
            }
            g_a_log = Some(g);
        }
    }

    // dt chain
    let mut g_w_dt = None;
    let mut g_dt_bias = None;
    let needs_dt = cfg.discretize_values || cfg.amask == AMaskKind::Original;
    if needs_dt {
        let pre = cache.dt_pre.as_ref().unwrap(); // [N, H]
        let bias = w.dt_bias.as_ref().unwrap();
        let mut d_pre = DenseTensor::zeros(&[n, heads]);
        let mut db = DenseTensor::zeros(&[heads]);
        for hh in 0..heads {
            for t in 0..n {
                let d = sigmoid(pre.at(&[t, hh]) + bias.at(&[hh])) * d_dt.at(&[hh, t]);
                d_pre.set(&[t, hh], d);
                db.data_mut()[hh] += d;
            }
        }
        g_w_dt = Some(matmul_t_left(h, &d_pre));
        g_dt_bias = Some(db);
        accumulate(&mut dh, &matmul_t_right(&d_pre, w.w_dt.as_ref().unwrap()));
    }

    // qk activation
    let (dq, dk) = match cfg.qk_activation {
        QkActivation::None => (kb.dq, kb.dk),
        QkActivation::Relu => (
            mask_deriv(&kb.dq, &cache.q, |x| if x > 0.0 { 1.0 } else { 0.0 }),
            mask_deriv(&kb.dk, &cache.k, |x| if x > 0.0 { 1.0 } else { 0.0 }),
        ),
        QkActivation::Silu => (
            mask_deriv(&kb.dq, &cache.q, crate::tensor::silu_deriv),
            mask_deriv(&kb.dk, &cache.k, crate::tensor::silu_deriv),
        ),
    };

    // reassemble conv-output gradient and run the conv/projection chain
    let mut d_conv_out = DenseTensor::zeros(&[n, 3 * inner]);
    for hh in 0..heads {
        for t in 0..n {
            for c in 0..d_head {
                d_conv_out.set(&[t, hh * d_head + c], dq.at(&[hh, t, c]));
                d_conv_out.set(&[t, inner + hh * d_head + c], dk.at(&[hh, t, c]));
                d_conv_out.set(&[t, 2 * inner + hh * d_head + c], dv.at(&[hh, t, c]));
            }
        }
    }
    let (d_qkv_pre, g_conv_w, g_conv_b) = conv_backward(&cache.qkv_pre, &w.conv, &d_conv_out);
    let g_w_qkv = matmul_t_left(h, &d_qkv_pre);
    accumulate(&mut dh, &matmul_t_right(&d_qkv_pre, &w.w_qkv));

    Ok((
        dh,
        BlockGrads {
            w_qkv: g_w_qkv,
            w_out: g_w_out,
            w_a: g_w_a,
            w_dt: g_w_dt,
            dt_bias: g_dt_bias,
            a_log: g_a_log,
            d_res: g_d_res,
            w_z: g_w_z,
            conv_w: g_conv_w,
            conv_b: g_conv_b,
            rms_gain: g_rms_gain,
        },
    ))
}

pub(crate) fn accumulate(into: &mut DenseTensor, from: &DenseTensor) {
    for (a, b) in into.data_mut().iter_mut().zip(from.data()) {
        *a += b;
    }
}

fn mask_deriv(g: &DenseTensor, pre: &DenseTensor, d: impl Fn(f64) -> f64) -> DenseTensor {
    let mut out = g.clone();
    for (o, p) in out.data_mut().iter_mut().zip(pre.data()) {
        *o *= d(*p);
    }
    out
}

/// `cache.p` already carries the scale factor; the kernel core wants the
/// unscaled products so it can re-apply the scale on both chain legs.
fn raw_inner_unscaled(p: &DenseTensor, scale: f64) -> DenseTensor {
    if scale == 1.0 {
        p.clone()
    } else {
        p.map("unscale", |v| v / scale).expect("finite")
    }
}
