//! Quadratic-form reference forwards: the configurable ablation block, the
//! literal full Mamba-2 transcription, plus the standalone attention kernels
//! (softmax baseline, both linear-attention compute orders, 2Mamba scores).

use crate::mask::{
    build_decay_matrix, decay_original, decay_softplus_from_pre, DecayLogits, DecayMatrix,
};
use crate::tensor::{
    causal_conv1d, matmul, relu, sigmoid, silu, softplus, ConvActivation, ConvSpec, DenseTensor,
};
use crate::{Result, SeqmixError, EPS_NORM, EPS_RMS};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    Linear,
    Squared,
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QkActivation {
    None,
    Relu,
    Silu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AMaskKind {
    None,
    Original,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    OutputRmsNorm,
    SoftmaxNorm,
}

/// The ablation record: which components a block uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantConfig {
    pub order: Order,
    pub qk_activation: QkActivation,
    pub amask: AMaskKind,
    pub conv_window: usize,
    pub conv_activation: ConvActivation,
    pub norm: NormKind,
    pub discretize_values: bool,
    pub d_residual: bool,
    pub z_gate: bool,
    /// 1/sqrt(d_H) on the scores; off by default everywhere.
    pub scale_qk: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Linear,
    Mamba2,
    Mamba2s,
    TwoMamba,
    TwoMambaE,
    Softmax,
}

impl Preset {
    pub fn all() -> [Preset; 6] {
        [
            Preset::Linear,
            Preset::Mamba2,
            Preset::Mamba2s,
            Preset::TwoMamba,
            Preset::TwoMambaE,
            Preset::Softmax,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Linear => "linear",
            Preset::Mamba2 => "mamba2",
            Preset::Mamba2s => "mamba2s",
            Preset::TwoMamba => "twomamba",
            Preset::TwoMambaE => "twomamba_e",
            Preset::Softmax => "softmax",
        }
    }

    pub fn parse(name: &str) -> Result<Preset> {
        Preset::all()
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| {
                SeqmixError::Config(format!(
                    "unknown preset '{name}'; valid: linear, mamba2, mamba2s, twomamba, twomamba_e, softmax"
                ))
            })
    }
}

impl VariantConfig {
    pub fn preset(p: Preset) -> Self {
        let base = VariantConfig {
            order: Order::Linear,
            qk_activation: QkActivation::None,
            amask: AMaskKind::None,
            conv_window: 1,
            conv_activation: ConvActivation::None,
            norm: NormKind::SoftmaxNorm,
            discretize_values: false,
            d_residual: false,
            z_gate: false,
            scale_qk: false,
        };
        match p {
            Preset::Linear => VariantConfig { qk_activation: QkActivation::Relu, ..base },
            Preset::Mamba2 => VariantConfig {
                amask: AMaskKind::Original,
                conv_window: 4,
                conv_activation: ConvActivation::Silu,
                norm: NormKind::OutputRmsNorm,
                discretize_values: true,
                d_residual: true,
                z_gate: true,
                ..base
            },
            Preset::Mamba2s => VariantConfig {
                amask: AMaskKind::Softplus,
                conv_window: 2,
                norm: NormKind::OutputRmsNorm,
                discretize_values: true,
                ..base
            },
            Preset::TwoMamba => VariantConfig {
                order: Order::Squared,
                amask: AMaskKind::Softplus,
                conv_window: 2,
                ..base
            },
            Preset::TwoMambaE => VariantConfig {
                order: Order::Exponential,
                amask: AMaskKind::Softplus,
                conv_window: 2,
                ..base
            },
            Preset::Softmax => VariantConfig { order: Order::Exponential, ..base },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.conv_window) {
            return Err(SeqmixError::Config(format!(
                "conv_window must be in 1..=4, got {}",
                self.conv_window
            )));
        }
        if self.norm == NormKind::SoftmaxNorm {
            let ok = matches!(self.order, Order::Squared | Order::Exponential)
                || (self.order == Order::Linear && self.qk_activation == QkActivation::Relu);
            if !ok {
                return Err(SeqmixError::Config(
                    "softmax normalization requires a non-negative score image: \
                     order squared/exponential, or linear with relu activation"
                        .into(),
                ));
            }
        }
        Ok(())
    }
}

/// All learnable arrays of one block; optional fields are present iff the
/// config needs them.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    /// `[d, 3*H*d_H]`
    pub w_qkv: DenseTensor,
    /// `[H*d_H, d]`
    pub w_out: DenseTensor,
    /// `[d, H]`
    pub w_a: Option<DenseTensor>,
    /// `[d, H]`
    pub w_dt: Option<DenseTensor>,
    /// `[H]`
    pub dt_bias: Option<DenseTensor>,
    /// `[H]`
    pub a_log: Option<DenseTensor>,
    /// `[H*d_H]`
    pub d_res: Option<DenseTensor>,
    /// `[d, H*d_H]`
    pub w_z: Option<DenseTensor>,
    pub conv: ConvSpec,
    /// `[H*d_H]`
    pub rms_gain: DenseTensor,
}

pub const DT_MIN: f64 = 0.001;
pub const DT_MAX: f64 = 0.1;

fn gaussian(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> DenseTensor {
    let std = 1.0 / (fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    DenseTensor::from_fn(shape, |_| normal.sample(rng))
}

impl BlockWeights {
    /// Random initialization: Gaussian 1/sqrt(fan_in) projections, identity
    /// conv start, `dt` log-uniform in `[DT_MIN, DT_MAX]` through the bias,
    /// `A_log = log(U[1,16])`, `D = 1`, unit RMS gain.
    pub fn init(
        cfg: &VariantConfig,
        d_model: usize,
        heads: usize,
        d_head: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let inner = heads * d_head;
        let channels = 3 * inner;
        let conv = if cfg.conv_window == 1 {
            ConvSpec::identity(channels)
        } else {
            // Identity start: current-token weight 1, history weights 0.
            let w = DenseTensor::from_fn(&[channels, cfg.conv_window], |idx| {
                if idx[1] == 0 {
                    1.0
                } else {
                    0.0
                }
            });
            ConvSpec::new(cfg.conv_window, w, Some(DenseTensor::zeros(&[channels])), cfg.conv_activation)?
        };
        let needs_dt = cfg.discretize_values || cfg.amask == AMaskKind::Original;
        let dt_bias = if needs_dt {
            let span = DT_MAX.ln() - DT_MIN.ln();
            let t = DenseTensor::from_fn(&[heads], |_| {
                let dt_init = (rng.gen_range(0.0..1.0) * span + DT_MIN.ln()).exp();
                crate::tensor::softplus_inverse(dt_init).expect("dt_init > 0")
            });
            Some(t)
        } else {
            None
        };
        Ok(Self {
            d_model,
            heads,
            d_head,
            w_qkv: {
                // Damp the Q and K columns so raw scores start near unit
                // variance; squared or exponentiated normalized scores are
                // otherwise close to one-hot at initialization, which makes
                // training outcomes depend heavily on the seed.
                let damp = 1.0 / (d_head as f64).sqrt().sqrt();
                let mut t = gaussian(rng, &[d_model, channels], d_model);
                for row in 0..d_model {
                    for ch in 0..2 * inner {
                        let v = t.at(&[row, ch]);
                        t.set(&[row, ch], v * damp);
                    }
                }
                t
            },
            w_out: gaussian(rng, &[inner, d_model], inner),
            w_a: (cfg.amask == AMaskKind::Softplus)
                .then(|| gaussian(rng, &[d_model, heads], d_model)),
            w_dt: needs_dt.then(|| gaussian(rng, &[d_model, heads], d_model)),
            dt_bias,
            a_log: (cfg.amask == AMaskKind::Original).then(|| {
                DenseTensor::from_fn(&[heads], |_| (rng.gen_range(1.0..16.0) as f64).ln())
            }),
            d_res: cfg.d_residual.then(|| DenseTensor::from_fn(&[inner], |_| 1.0)),
            w_z: cfg.z_gate.then(|| gaussian(rng, &[d_model, inner], d_model)),
            conv,
            rms_gain: DenseTensor::from_fn(&[inner], |_| 1.0),
        })
    }

    pub fn validate_for(&self, cfg: &VariantConfig) -> Result<()> {
        cfg.validate()?;
        let missing = |name: &str| {
            Err(SeqmixError::Config(format!(
                "config requires weight '{name}' but it is absent"
            )))
        };
        if cfg.amask == AMaskKind::Softplus && self.w_a.is_none() {
            return missing("W_A");
        }
        if cfg.amask == AMaskKind::Original && self.a_log.is_none() {
            return missing("A_log");
        }
        let needs_dt = cfg.discretize_values || cfg.amask == AMaskKind::Original;
        if needs_dt && (self.w_dt.is_none() || self.dt_bias.is_none()) {
            return missing("W_dt / dt_bias");
        }
        if cfg.d_residual && self.d_res.is_none() {
            return missing("D");
        }
        if cfg.z_gate && self.w_z.is_none() {
            return missing("W_z");
        }
        if self.conv.window != cfg.conv_window {
            return Err(SeqmixError::Config(format!(
                "conv window {} does not match config window {}",
                self.conv.window, cfg.conv_window
            )));
        }
        Ok(())
    }

    pub fn inner(&self) -> usize {
        self.heads * self.d_head
    }
}

/// Everything the backward pass and the harness need from a forward run.
#[derive(Debug, Clone)]
pub struct BlockCache {
    /// `[N, 3*H*d_H]` pre-conv fused projection
    pub qkv_pre: DenseTensor,
    /// `[N, 3*H*d_H]` post conv + conv activation
    pub conv_out: DenseTensor,
    /// `[H, N, d_H]` split, before the qk activation
    pub q: DenseTensor,
    pub k: DenseTensor,
    pub v: DenseTensor,
    /// `[H, N, d_H]` after the qk activation
    pub qa: DenseTensor,
    pub ka: DenseTensor,
    /// `[N, H]`
    pub dt_pre: Option<DenseTensor>,
    /// `[H, N]`
    pub dt: Option<DenseTensor>,
    /// `[N, H]` pre-softplus decay projection
    pub a_pre: Option<DenseTensor>,
    pub logits: DecayLogits,
    pub dm: DecayMatrix,
    /// `[H, N, N]` raw (possibly scaled) inner products
    pub p: DenseTensor,
    /// `[H, N, N]` the weights actually multiplied into the values
    pub y_n: DenseTensor,
    /// `[H, N]` normalization denominators (1 where no softmax norm)
    pub row_den: DenseTensor,
    /// `[H, N]` per-row max of the exponential logits
    pub row_max: Option<DenseTensor>,
    /// `[H, N, d_H]` values after optional discretization
    pub v_used: DenseTensor,
    /// `[H, N, d_H]` attention output per head (before D residual)
    pub y_heads: DenseTensor,
    /// `[N, H*d_H]` after D residual and head concatenation
    pub y_vec: DenseTensor,
    /// `[N, H*d_H]`
    pub z_pre: Option<DenseTensor>,
    /// `[N, H*d_H]` after the optional z gate
    pub gated: DenseTensor,
    /// per-row `1/sqrt(mean(x^2)+eps)` of the RMS norm input
    pub rms_inv: Option<Vec<f64>>,
    /// `[N, H*d_H]` post normalization (equals `gated` for softmax norm)
    pub normed: DenseTensor,
    /// `[N, d]`
    pub out: DenseTensor,
}

/// RMS normalization over the channel axis: `x * g / sqrt(mean(x^2) + eps)`.
pub fn rmsnorm(x: &DenseTensor, gain: &DenseTensor) -> (DenseTensor, Vec<f64>) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let mut out = DenseTensor::zeros(&[n, c]);
    let mut inv = Vec::with_capacity(n);
    for t in 0..n {
        let row = &x.data()[t * c..(t + 1) * c];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
        let r = 1.0 / (ms + EPS_RMS).sqrt();
        inv.push(r);
        for ch in 0..c {
            out.data_mut()[t * c + ch] = row[ch] * gain.data()[ch] * r;
        }
    }
    (out, inv)
}

fn apply_qk_activation(x: &DenseTensor, act: QkActivation) -> DenseTensor {
    match act {
        QkActivation::None => x.clone(),
        QkActivation::Relu => x.map("relu", relu).expect("relu is finite"),
        QkActivation::Silu => x.map("silu", silu).expect("silu is finite"),
    }
}

/// Raw inner products `p[h,i,j] = q_i . k_j` (optionally `/ sqrt(d_H)`),
/// materialized for all pairs (the causal mask is applied later).
fn inner_products(q: &DenseTensor, k: &DenseTensor, scale: bool) -> DenseTensor {
    let (h, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let s = if scale { 1.0 / (d as f64).sqrt() } else { 1.0 };
    let mut p = DenseTensor::zeros(&[h, n, n]);
    for hh in 0..h {
        let qd = &q.data()[hh * n * d..(hh + 1) * n * d];
        let kd = &k.data()[hh * n * d..(hh + 1) * n * d];
        let pd = &mut p.data_mut()[hh * n * n..(hh + 1) * n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..d {
                    acc += qd[i * d + l] * kd[j * d + l];
                }
                pd[i * n + j] = acc * s;
            }
        }
    }
    p
}

/// Masked, decayed, optionally normalized score matrix.
///
/// Returns `(weights, denominators, row_max)` where `weights[h,i,j]` is the
/// coefficient multiplied into `v_j`. For the exponential order the scores
/// are computed in log space with per-row max subtraction; the decay enters
/// the logits as `a_cs_i - a_cs_j` so the max statistic covers it.
pub fn score_weights(
    order: Order,
    norm: NormKind,
    p: &DenseTensor,
    dm: &DecayMatrix,
) -> Result<(DenseTensor, DenseTensor, Option<DenseTensor>)> {
    let (h, n) = (p.shape()[0], p.shape()[1]);
    let mut w = DenseTensor::zeros(&[h, n, n]);
    let mut den = DenseTensor::from_fn(&[h, n], |_| 1.0);
    let mut row_max = (order == Order::Exponential).then(|| DenseTensor::zeros(&[h, n]));
    for hh in 0..h {
        let pd = &p.data()[hh * n * n..(hh + 1) * n * n];
        let ad = &dm.dense.data()[hh * n * n..(hh + 1) * n * n];
        let acs = &dm.a_cs.data()[hh * n..(hh + 1) * n];
        let wd = &mut w.data_mut()[hh * n * n..(hh + 1) * n * n];
        for i in 0..n {
            match order {
                Order::Linear | Order::Squared => {
                    for j in 0..=i {
                        let base = pd[i * n + j];
                        let sc = if order == Order::Squared { base * base } else { base };
                        wd[i * n + j] = sc * ad[i * n + j];
                    }
                }
                Order::Exponential => {
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..=i {
                        m = m.max(pd[i * n + j] + acs[i] - acs[j]);
                    }
                    row_max.as_mut().unwrap().set(&[hh, i], m);
                    for j in 0..=i {
                        wd[i * n + j] = (pd[i * n + j] + acs[i] - acs[j] - m).exp();
                    }
                }
            }
            if norm == NormKind::SoftmaxNorm {
                let s: f64 = (0..=i).map(|j| wd[i * n + j]).sum();
                let d = s.max(EPS_NORM);
                den.set(&[hh, i], d);
                for j in 0..=i {
                    wd[i * n + j] /= d;
                }
            } else if order == Order::Exponential {
                // No normalization requested: undo the max shift.
                let m = row_max.as_ref().unwrap().at(&[hh, i]);
                for j in 0..=i {
                    wd[i * n + j] *= m.exp();
                }
            }
        }
    }
    w.ensure_finite("score_weights")?;
    Ok((w, den, row_max))
}

fn split_heads(conv_out: &DenseTensor, heads: usize, d_head: usize) -> (DenseTensor, DenseTensor, DenseTensor) {
    let n = conv_out.shape()[0];
    let inner = heads * d_head;
    let pick = |which: usize| {
        DenseTensor::from_fn(&[heads, n, d_head], |idx| {
            conv_out.at(&[idx[1], which * inner + idx[0] * d_head + idx[2]])
        })
    };
    (pick(0), pick(1), pick(2))
}

/// Full configurable forward with all intermediates cached.
pub fn block_forward_cached(
    h: &DenseTensor,
    cfg: &VariantConfig,
    w: &BlockWeights,
) -> Result<BlockCache> {
    w.validate_for(cfg)?;
    if h.rank() != 2 || h.shape()[1] != w.d_model {
        return Err(SeqmixError::Dim(format!(
            "block input must be [N, {}], got {:?}",
            w.d_model,
            h.shape()
        )));
    }
    let n = h.shape()[0];
    let heads = w.heads;
    let d_head = w.d_head;
    let inner = w.inner();

    let qkv_pre = matmul(h, &w.w_qkv)?;
    let conv_out = causal_conv1d(&qkv_pre, &w.conv)?;
    let (q, k, v) = split_heads(&conv_out, heads, d_head);
    let qa = apply_qk_activation(&q, cfg.qk_activation);
    let ka = apply_qk_activation(&k, cfg.qk_activation);

    let needs_dt = cfg.discretize_values || cfg.amask == AMaskKind::Original;
    let (dt_pre, dt) = if needs_dt {
        let pre = matmul(h, w.w_dt.as_ref().unwrap())?; // [N, H]
        let bias = w.dt_bias.as_ref().unwrap();
        let dt = DenseTensor::from_fn(&[heads, n], |idx| {
            softplus(pre.at(&[idx[1], idx[0]]) + bias.at(&[idx[0]]))
        });
        (Some(pre), Some(dt))
    } else {
        (None, None)
    };

    let (a_pre, logits) = match cfg.amask {
        AMaskKind::None => (None, DecayLogits::none(heads, n)),
        AMaskKind::Original => (
            None,
            decay_original(w.a_log.as_ref().unwrap(), dt.as_ref().unwrap())?,
        ),
        AMaskKind::Softplus => {
            let pre = matmul(h, w.w_a.as_ref().unwrap())?; // [N, H]
            let lg = decay_softplus_from_pre(&pre)?;
            (Some(pre), lg)
        }
    };
    let dm = build_decay_matrix(&logits)?;

    let p = inner_products(&qa, &ka, cfg.scale_qk);
    let (y_n, row_den, row_max) = score_weights(cfg.order, cfg.norm, &p, &dm)?;

    let v_used = if cfg.discretize_values {
        let dt = dt.as_ref().unwrap();
        DenseTensor::from_fn(&[heads, n, d_head], |idx| {
            v.at(idx) * dt.at(&[idx[0], idx[1]])
        })
    } else {
        v.clone()
    };

    let mut y_heads = DenseTensor::zeros(&[heads, n, d_head]);
    for hh in 0..heads {
        let wd = &y_n.data()[hh * n * n..(hh + 1) * n * n];
        let vd = &v_used.data()[hh * n * d_head..(hh + 1) * n * d_head];
        let yd = &mut y_heads.data_mut()[hh * n * d_head..(hh + 1) * n * d_head];
        for i in 0..n {
            for j in 0..=i {
                let wij = wd[i * n + j];
                if wij == 0.0 {
                    continue;
                }
                for c in 0..d_head {
                    yd[i * d_head + c] += wij * vd[j * d_head + c];
                }
            }
        }
    }

    // D residual + head concatenation.
    let mut y_vec = DenseTensor::zeros(&[n, inner]);
    for hh in 0..heads {
        for t in 0..n {
            for c in 0..d_head {
                let mut val = y_heads.at(&[hh, t, c]);
                if cfg.d_residual {
                    let ch = hh * d_head + c;
                    val += w.d_res.as_ref().unwrap().at(&[ch]) * v.at(&[hh, t, c]);
                }
                y_vec.set(&[t, hh * d_head + c], val);
            }
        }
    }

    let (z_pre, gated) = if cfg.z_gate {
        let zp = matmul(h, w.w_z.as_ref().unwrap())?; // [N, inner]
        let g = DenseTensor::from_fn(&[n, inner], |idx| y_vec.at(idx) * sigmoid(zp.at(idx)));
        (Some(zp), g)
    } else {
        (None, y_vec.clone())
    };

    let (normed, rms_inv) = if cfg.norm == NormKind::OutputRmsNorm {
        let (nm, inv) = rmsnorm(&gated, &w.rms_gain);
        (nm, Some(inv))
    } else {
        (gated.clone(), None)
    };

    let out = matmul(&normed, &w.w_out)?;

    Ok(BlockCache {
        qkv_pre,
        conv_out,
        q,
        k,
        v,
        qa,
        ka,
        dt_pre,
        dt,
        a_pre,
        logits,
        dm,
        p,
        y_n,
        row_den,
        row_max,
        v_used,
        y_heads,
        y_vec,
        z_pre,
        gated,
        rms_inv,
        normed,
        out,
    })
}

/// Configurable block forward; see [`block_forward_cached`] for internals.
pub fn variant_forward(h: &DenseTensor, cfg: &VariantConfig, w: &BlockWeights) -> Result<DenseTensor> {
    Ok(block_forward_cached(h, cfg, w)?.out)
}

/// Literal transcription of the full Mamba-2 forward pass with every
/// inductive bias; must agree with the `mamba2` preset of [`variant_forward`].
pub fn mamba2_full_forward(h: &DenseTensor, w: &BlockWeights) -> Result<DenseTensor> {
    let cfg = VariantConfig::preset(Preset::Mamba2);
    w.validate_for(&cfg)?;
    let n = h.shape()[0];
    let (heads, d_head, inner) = (w.heads, w.d_head, w.inner());

    // Q, K, V = silu(conv_1d(h . W_QKV))
    let qkv = causal_conv1d(&matmul(h, &w.w_qkv)?, &w.conv)?;
    let (q, k, v) = split_heads(&qkv, heads, d_head);
    // dt = softplus(h . W_dt + dt_bias)
    let dt_p = matmul(h, w.w_dt.as_ref().unwrap())?;
    let bias = w.dt_bias.as_ref().unwrap();
    let dt = DenseTensor::from_fn(&[heads, n], |idx| {
        softplus(dt_p.at(&[idx[1], idx[0]]) + bias.at(&[idx[0]]))
    });
    // A = -exp(A_log); A^CS = cumsum(A . dt); A^M
    let dm = build_decay_matrix(&decay_original(w.a_log.as_ref().unwrap(), &dt)?)?;
    // V . dt and the D residual input
    let v_dt = DenseTensor::from_fn(&[heads, n, d_head], |idx| {
        v.at(idx) * dt.at(&[idx[0], idx[1]])
    });
    // y = (Q K^T . A^M . M) V_dt
    let p = inner_products(&q, &k, false);
    let (weights, _, _) = score_weights(Order::Linear, NormKind::OutputRmsNorm, &p, &dm)?;
    let mut y = DenseTensor::zeros(&[heads, n, d_head]);
    for hh in 0..heads {
        for i in 0..n {
            for j in 0..=i {
                let wij = weights.at(&[hh, i, j]);
                if wij == 0.0 {
                    continue;
                }
                for c in 0..d_head {
                    let cur = y.at(&[hh, i, c]);
                    y.set(&[hh, i, c], cur + wij * v_dt.at(&[hh, j, c]));
                }
            }
        }
    }
    // y_D = y + V . D, concatenated heads
    let d_res = w.d_res.as_ref().unwrap();
    let mut y_d = DenseTensor::zeros(&[n, inner]);
    for hh in 0..heads {
        for t in 0..n {
            for c in 0..d_head {
                let ch = hh * d_head + c;
                y_d.set(&[t, ch], y.at(&[hh, t, c]) + d_res.at(&[ch]) * v.at(&[hh, t, c]));
            }
        }
    }
    // y_N = RMSNorm(y_D . sigmoid(Z)); out = y_N . W_out
    let z = matmul(h, w.w_z.as_ref().unwrap())?;
    let gated = DenseTensor::from_fn(&[n, inner], |idx| y_d.at(idx) * sigmoid(z.at(idx)));
    let (y_norm, _) = rmsnorm(&gated, &w.rms_gain);
    matmul(&y_norm, &w.w_out)
}

/// Causal softmax attention with per-row max subtraction; weight rows sum to
/// exactly 1 (no epsilon: the diagonal term keeps the denominator positive).
pub fn softmax_attention(q: &DenseTensor, k: &DenseTensor, v: &DenseTensor) -> Result<DenseTensor> {
    let (h, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let p = inner_products(q, k, false);
    let mut out = DenseTensor::zeros(&[h, n, d]);
    for hh in 0..h {
        for i in 0..n {
            let mut m = f64::NEG_INFINITY;
            for j in 0..=i {
                m = m.max(p.at(&[hh, i, j]));
            }
            let mut den = 0.0;
            let mut num = vec![0.0; d];
            for j in 0..=i {
                let e = (p.at(&[hh, i, j]) - m).exp();
                den += e;
                for c in 0..d {
                    num[c] += e * v.at(&[hh, j, c]);
                }
            }
            for c in 0..d {
                out.set(&[hh, i, c], num[c] / den);
            }
        }
    }
    Ok(out)
}

/// Eq.-2-order linear attention: materialize `phi(Q) phi(K)^T`, mask,
/// normalize by the causal row sums.
pub fn linear_attention_qk_first(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    activation: QkActivation,
) -> Result<DenseTensor> {
    let (h, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let qa = apply_qk_activation(q, activation);
    let ka = apply_qk_activation(k, activation);
    let p = inner_products(&qa, &ka, false);
    let mut out = DenseTensor::zeros(&[h, n, d]);
    for hh in 0..h {
        for i in 0..n {
            let s: f64 = (0..=i).map(|j| p.at(&[hh, i, j])).sum();
            let den = s.max(EPS_NORM);
            for j in 0..=i {
                let wij = p.at(&[hh, i, j]) / den;
                for c in 0..d {
                    let cur = out.at(&[hh, i, c]);
                    out.set(&[hh, i, c], cur + wij * v.at(&[hh, j, c]));
                }
            }
        }
    }
    Ok(out)
}

/// Eq.-3-order linear attention: running prefix sums `S_t = S_{t-1} +
/// phi(k_t) v_t^T` and `z_t = z_{t-1} + phi(k_t)`.
pub fn linear_attention_kv_first(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    activation: QkActivation,
) -> Result<DenseTensor> {
    let (h, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let qa = apply_qk_activation(q, activation);
    let ka = apply_qk_activation(k, activation);
    let mut out = DenseTensor::zeros(&[h, n, d]);
    for hh in 0..h {
        let mut s = vec![0.0; d * d]; // [feature, value]
        let mut z = vec![0.0; d];
        for t in 0..n {
            for b in 0..d {
                let kb = ka.at(&[hh, t, b]);
                z[b] += kb;
                for c in 0..d {
                    s[b * d + c] += kb * v.at(&[hh, t, c]);
                }
            }
            let mut den = 0.0;
            for b in 0..d {
                den += qa.at(&[hh, t, b]) * z[b];
            }
            let den = den.max(EPS_NORM);
            for c in 0..d {
                let mut num = 0.0;
                for b in 0..d {
                    num += qa.at(&[hh, t, b]) * s[b * d + c];
                }
                out.set(&[hh, t, c], num / den);
            }
        }
    }
    Ok(out)
}

/// Normalized 2Mamba score matrix `[(q_i.k_j)^2 A^M M] / row-sum`.
pub fn two_mamba_scores(q: &DenseTensor, k: &DenseTensor, dm: &DecayMatrix) -> Result<DenseTensor> {
    if q.shape()[0] != dm.heads() || q.shape()[1] != dm.seq_len() {
        return Err(SeqmixError::Dim(format!(
            "decay matrix [{}, {}] does not match Q {:?}",
            dm.heads(),
            dm.seq_len(),
            q.shape()
        )));
    }
    let p = inner_products(q, k, false);
    let (w, _, _) = score_weights(Order::Squared, NormKind::SoftmaxNorm, &p, dm)?;
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::DecayVariant;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    pub(crate) fn rng(seed: u64) -> StdRng {
        StdRng::seed_from_u64(seed)
    }

    fn rand_t(r: &mut StdRng, shape: &[usize], lo: f64, hi: f64) -> DenseTensor {
        DenseTensor::from_fn(shape, |_| r.gen_range(lo..hi))
    }

    fn max_rel_dev(a: &DenseTensor, b: &DenseTensor) -> f64 {
        let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
        a.data()
            .iter()
            .zip(b.data())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
            / scale
    }

    #[test]
    fn softmax_attention_single_token() {
        let mut r = rng(1);
        let q = rand_t(&mut r, &[1, 1, 3], -1.0, 1.0);
        let k = rand_t(&mut r, &[1, 1, 3], -1.0, 1.0);
        let v = rand_t(&mut r, &[1, 1, 3], -1.0, 1.0);
        let o = softmax_attention(&q, &k, &v).unwrap();
        assert!(max_rel_dev(&o, &v) < 1e-15);
    }

    #[test]
    fn softmax_attention_zero_queries_average() {
        let mut r = rng(2);
        let n = 5;
        let q = DenseTensor::zeros(&[1, n, 2]);
        let k = rand_t(&mut r, &[1, n, 2], -1.0, 1.0);
        let v = rand_t(&mut r, &[1, n, 2], -1.0, 1.0);
        let o = softmax_attention(&q, &k, &v).unwrap();
        for i in 0..n {
            for c in 0..2 {
                let mean: f64 = (0..=i).map(|j| v.at(&[0, j, c])).sum::<f64>() / (i + 1) as f64;
                assert!((o.at(&[0, i, c]) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn softmax_attention_matches_loop_oracle() {
        let mut r = rng(3);
        let (h, n, d) = (1, 4, 3);
        let q = rand_t(&mut r, &[h, n, d], -2.0, 2.0);
        let k = rand_t(&mut r, &[h, n, d], -2.0, 2.0);
        let v = rand_t(&mut r, &[h, n, d], -2.0, 2.0);
        let o = softmax_attention(&q, &k, &v).unwrap();
        // plain exp/normalize without max subtraction
        for i in 0..n {
            for c in 0..d {
                let mut den = 0.0;
                let mut num = 0.0;
                for j in 0..=i {
                    let mut p = 0.0;
                    for l in 0..d {
                        p += q.at(&[0, i, l]) * k.at(&[0, j, l]);
                    }
                    let e = p.exp();
                    den += e;
                    num += e * v.at(&[0, j, c]);
                }
                assert!((o.at(&[0, i, c]) - num / den).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn linear_attention_orders_agree() {
        let mut r = rng(4);
        for _ in 0..5 {
            let (h, n, d) = (2, 16, 4);
            let q = rand_t(&mut r, &[h, n, d], -1.0, 1.0);
            let k = rand_t(&mut r, &[h, n, d], -1.0, 1.0);
            let v = rand_t(&mut r, &[h, n, d], -1.0, 1.0);
            let a = linear_attention_qk_first(&q, &k, &v, QkActivation::Relu).unwrap();
            let b = linear_attention_kv_first(&q, &k, &v, QkActivation::Relu).unwrap();
            assert!(max_rel_dev(&a, &b) < 1e-12);
        }
    }

    #[test]
    fn linear_attention_single_token_and_zero_keys() {
        let mut r = rng(5);
        let q = rand_t(&mut r, &[1, 1, 3], 0.1, 1.0);
        let k = rand_t(&mut r, &[1, 1, 3], 0.1, 1.0);
        let v = rand_t(&mut r, &[1, 1, 3], -1.0, 1.0);
        let o = linear_attention_qk_first(&q, &k, &v, QkActivation::Relu).unwrap();
        assert!(max_rel_dev(&o, &v) < 1e-9);
        // K = 0: all scores zero, guard yields zero output.
        let kz = DenseTensor::zeros(&[1, 1, 3]);
        let o = linear_attention_qk_first(&q, &kz, &v, QkActivation::Relu).unwrap();
        assert!(o.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_attention_two_token_hand_expansion() {
        // All-positive inputs, N=2: weighted average with weights p0, p1.
        let q = DenseTensor::new(vec![1, 2, 2], vec![0.5, 1.0, 0.7, 0.3]).unwrap();
        let k = DenseTensor::new(vec![1, 2, 2], vec![0.2, 0.4, 0.9, 0.6]).unwrap();
        let v = DenseTensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let o = linear_attention_kv_first(&q, &k, &v, QkActivation::Relu).unwrap();
        let p10 = 0.7 * 0.2 + 0.3 * 0.4;
        let p11 = 0.7 * 0.9 + 0.3 * 0.6;
        let w0 = p10 / (p10 + p11);
        let w1 = p11 / (p10 + p11);
        assert!((o.at(&[0, 1, 0]) - (w0 * 1.0 + w1 * 3.0)).abs() < 1e-12);
        assert!((o.at(&[0, 1, 1]) - (w0 * 2.0 + w1 * 4.0)).abs() < 1e-12);
    }

    fn random_logits(r: &mut StdRng, h: usize, n: usize) -> DecayLogits {
        DecayLogits::new(
            DenseTensor::from_fn(&[h, n], |_| -r.gen_range(0.0..1.0f64)),
            DecayVariant::Softplus,
        )
        .unwrap()
    }

    #[test]
    fn two_mamba_scores_rows() {
        let mut r = rng(6);
        let (h, n, d) = (1, 4, 3);
        let q = rand_t(&mut r, &[h, n, d], -1.0, 1.0);
        let k = rand_t(&mut r, &[h, n, d], -1.0, 1.0);
        let dm = build_decay_matrix(&random_logits(&mut r, h, n)).unwrap();
        let w = two_mamba_scores(&q, &k, &dm).unwrap();
        // row 0 is [1, 0, ...] when q0.k0 != 0
        assert!((w.at(&[0, 0, 0]) - 1.0).abs() < 1e-9);
        for i in 0..n {
            let s: f64 = (0..=i).map(|j| w.at(&[0, i, j])).sum();
            assert!((s - 1.0).abs() < 1e-10);
            for j in i + 1..n {
                assert_eq!(w.at(&[0, i, j]), 0.0);
            }
        }
    }

    #[test]
    fn two_mamba_scores_uniform_when_equal() {
        // all q.k equal and no decay -> row i uniform 1/(i+1)
        let n = 5;
        let q = DenseTensor::from_fn(&[1, n, 2], |_| 0.5);
        let k = DenseTensor::from_fn(&[1, n, 2], |_| 0.5);
        let dm = build_decay_matrix(&DecayLogits::none(1, n)).unwrap();
        let w = two_mamba_scores(&q, &k, &dm).unwrap();
        for i in 0..n {
            for j in 0..=i {
                assert!((w.at(&[0, i, j]) - 1.0 / (i + 1) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_mamba_scores_matches_entry_oracle() {
        let mut r = rng(7);
        let (h, n, d) = (2, 8, 4);
        let q = rand_t(&mut r, &[h, n, d], -1.0, 1.0);
        let k = rand_t(&mut r, &[h, n, d], -1.0, 1.0);
        let dm = build_decay_matrix(&random_logits(&mut r, h, n)).unwrap();
        let w = two_mamba_scores(&q, &k, &dm).unwrap();
        for hh in 0..h {
            for i in 0..n {
                let mut den = 0.0;
                for j in 0..=i {
                    let mut p = 0.0;
                    for l in 0..d {
                        p += q.at(&[hh, i, l]) * k.at(&[hh, j, l]);
                    }
                    den += p * p * dm.dense.at(&[hh, i, j]);
                }
                for j in 0..=i {
                    let mut p = 0.0;
                    for l in 0..d {
                        p += q.at(&[hh, i, l]) * k.at(&[hh, j, l]);
                    }
                    let want = p * p * dm.dense.at(&[hh, i, j]) / den.max(EPS_NORM);
                    assert!((w.at(&[hh, i, j]) - want).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn square_applied_before_mask() {
        // With a non-trivial decay, squaring before vs after masking differ.
        let mut r = rng(8);
        let (h, n, d) = (1, 4, 2);
        let q = rand_t(&mut r, &[h, n, d], 0.2, 1.0);
        let k = rand_t(&mut r, &[h, n, d], 0.2, 1.0);
        let dm = build_decay_matrix(&random_logits(&mut r, h, n)).unwrap();
        let p = inner_products(&q, &k, false);
        let (w, den, _) = score_weights(Order::Squared, NormKind::SoftmaxNorm, &p, &dm).unwrap();
        let mut differs = false;
        for i in 0..n {
            for j in 0..=i {
                let pre = p.at(&[0, i, j]);
                let am = dm.dense.at(&[0, i, j]);
                // unnormalized weight must be (q.k)^2 * A, never (q.k * A)^2
                let un = w.at(&[0, i, j]) * den.at(&[0, i]);
                assert!((un - pre * pre * am).abs() <= 1e-12 * un.abs().max(1.0));
                if am != 1.0 && am != 0.0 {
                    let squared_after = (pre * am) * (pre * am);
                    if (squared_after - pre * pre * am).abs() > 1e-12 {
                        differs = true;
                    }
                }
            }
        }
        assert!(differs);
    }

    fn forward_pair(
        preset: Preset,
        d_model: usize,
        heads: usize,
        d_head: usize,
        n: usize,
        seed: u64,
    ) -> (DenseTensor, VariantConfig, BlockWeights, DenseTensor) {
        let cfg = VariantConfig::preset(preset);
        let mut r = rng(seed);
        let w = BlockWeights::init(&cfg, d_model, heads, d_head, &mut r).unwrap();
        let h = rand_t(&mut r, &[n, d_model], -1.0, 1.0);
        let out = variant_forward(&h, &cfg, &w).unwrap();
        (h, cfg, w, out)
    }

    #[test]
    fn mamba2_preset_matches_literal_transcription() {
        let (h, _, w, out) = forward_pair(Preset::Mamba2, 8, 2, 4, 12, 11);
        let lit = mamba2_full_forward(&h, &w).unwrap();
        assert_eq!(out.data(), lit.data());
    }

    #[test]
    fn mamba2_zero_input_zero_output() {
        let cfg = VariantConfig::preset(Preset::Mamba2);
        let mut r = rng(12);
        let w = BlockWeights::init(&cfg, 6, 1, 4, &mut r).unwrap();
        let h = DenseTensor::zeros(&[5, 6]);
        let out = mamba2_full_forward(&h, &w).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mamba2_reduces_to_conv_linear_attention_when_decay_off() {
        // A_log = -50 makes exp(A_log)*dt ~ 0 (no decay); D = 0 and sigma(Z)~1
        // leave conv'd linear attention + RMSNorm.
        let cfg = VariantConfig::preset(Preset::Mamba2);
        let mut r = rng(13);
        let (d_model, heads, d_head, n) = (6, 1, 4, 8);
        let mut w = BlockWeights::init(&cfg, d_model, heads, d_head, &mut r).unwrap();
        w.a_log = Some(DenseTensor::from_fn(&[heads], |_| -50.0));
        w.d_res = Some(DenseTensor::zeros(&[heads * d_head]));
        // sigma(z) ~ 1 via a huge constant: replace W_z with zeros and inject
        // the saturation through an input-independent route is not available,
        // so drive it with large weights against a constant-positive input.
        let h = rand_t(&mut r, &[n, d_model], 0.5, 1.0);
        w.w_z = Some(DenseTensor::from_fn(&[d_model, heads * d_head], |_| 100.0));
        let full = mamba2_full_forward(&h, &w).unwrap();

        // Reference: same conv'd Q,K,V, dt on values, RMSNorm, W_out; no decay.
        let qkv = causal_conv1d(&matmul(&h, &w.w_qkv).unwrap(), &w.conv).unwrap();
        let (q, k, v) = split_heads(&qkv, heads, d_head);
        let dt_p = matmul(&h, w.w_dt.as_ref().unwrap()).unwrap();
        let bias = w.dt_bias.as_ref().unwrap();
        let v_dt = DenseTensor::from_fn(&[heads, n, d_head], |idx| {
            v.at(idx) * softplus(dt_p.at(&[idx[1], idx[0]]) + bias.at(&[idx[0]]))
        });
        let p = inner_products(&q, &k, false);
        let mut y = DenseTensor::zeros(&[n, heads * d_head]);
        for hh in 0..heads {
            for i in 0..n {
                for j in 0..=i {
                    for c in 0..d_head {
                        let cur = y.at(&[i, hh * d_head + c]);
                        y.set(&[i, hh * d_head + c], cur + p.at(&[hh, i, j]) * v_dt.at(&[hh, j, c]));
                    }
                }
            }
        }
        let (yn, _) = rmsnorm(&y, &w.rms_gain);
        let want = matmul(&yn, &w.w_out).unwrap();
        assert!(max_rel_dev(&full, &want) < 1e-10);
    }

    #[test]
    fn twomamba_single_token() {
        let (_, _, w, out) = forward_pair(Preset::TwoMamba, 6, 2, 3, 1, 14);
        // At N=1 the normalized weight is 1, so out = v0 . W_out.
        let cfg = VariantConfig::preset(Preset::TwoMamba);
        let cache = block_forward_cached(
            &{
                let mut r = rng(14);
                let _ = BlockWeights::init(&cfg, 6, 2, 3, &mut r).unwrap();
                rand_t(&mut r, &[1, 6], -1.0, 1.0)
            },
            &cfg,
            &w,
        )
        .unwrap();
        let mut vrow = DenseTensor::zeros(&[1, 6]);
        for hh in 0..2 {
            for c in 0..3 {
                vrow.set(&[0, hh * 3 + c], cache.v.at(&[hh, 0, c]));
            }
        }
        let want = matmul(&vrow, &w.w_out).unwrap();
        assert!(max_rel_dev(&out, &want) < 1e-9);
    }

    #[test]
    fn twomamba_zero_decay_reduces_to_squared_linear_attention() {
        let cfg = VariantConfig {
            conv_window: 1,
            ..VariantConfig::preset(Preset::TwoMamba)
        };
        let mut r = rng(15);
        let (d_model, heads, d_head, n) = (6, 2, 3, 10);
        let mut w = BlockWeights::init(&cfg, d_model, heads, d_head, &mut r).unwrap();
        // Force decay logits to 0: softplus(-inf) is unreachable, so drop the
        // mask instead; the dense matrix becomes lower-triangular ones.
        let cfg_nomask = VariantConfig { amask: AMaskKind::None, ..cfg };
        w.w_a = None;
        let h = rand_t(&mut r, &[n, d_model], -1.0, 1.0);
        let cache = block_forward_cached(&h, &cfg_nomask, &w).unwrap();

        // Squared linear attention with softmax norm on the same Q,K,V.
        let p = inner_products(&cache.q, &cache.k, false);
        let mut want = DenseTensor::zeros(&[n, heads * d_head]);
        for hh in 0..heads {
            for i in 0..n {
                let den: f64 = (0..=i)
                    .map(|j| {
                        let x = p.at(&[hh, i, j]);
                        x * x
                    })
                    .sum::<f64>()
                    .max(EPS_NORM);
                for j in 0..=i {
                    let x = p.at(&[hh, i, j]);
                    for c in 0..d_head {
                        let cur = want.at(&[i, hh * d_head + c]);
                        want.set(
                            &[i, hh * d_head + c],
                            cur + x * x / den * cache.v.at(&[hh, j, c]),
                        );
                    }
                }
            }
        }
        let want = matmul(&want, &w.w_out).unwrap();
        assert!(max_rel_dev(&cache.out, &want) < 1e-10);
    }

    #[test]
    fn variant_causality() {
        for preset in Preset::all() {
            let (h, cfg, w, base) = forward_pair(preset, 6, 2, 3, 8, 16);
            let mut h2 = h.clone();
            let t = 5;
            h2.set(&[t, 1], h.at(&[t, 1]) + 0.7);
            let pert = variant_forward(&h2, &cfg, &w).unwrap();
            for i in 0..t {
                for c in 0..6 {
                    assert_eq!(base.at(&[i, c]), pert.at(&[i, c]), "preset {}", preset.name());
                }
            }
        }
    }

    #[test]
    fn normalized_rows_sum_to_one() {
        let mut r = rng(17);
        for preset in [Preset::TwoMamba, Preset::TwoMambaE, Preset::Softmax] {
            let cfg = VariantConfig::preset(preset);
            let w = BlockWeights::init(&cfg, 6, 2, 3, &mut r).unwrap();
            let h = rand_t(&mut r, &[9, 6], -3.0, 3.0);
            let cache = block_forward_cached(&h, &cfg, &w).unwrap();
            for hh in 0..2 {
                for i in 0..9 {
                    let mut s = 0.0;
                    for j in 0..9 {
                        let y = cache.y_n.at(&[hh, i, j]);
                        if j > i {
                            assert_eq!(y, 0.0);
                        } else {
                            assert!(y >= 0.0);
                            s += y;
                        }
                    }
                    assert!((s - 1.0).abs() < 1e-10, "{} row {i}: {s}", preset.name());
                }
            }
        }
    }

    #[test]
    fn head_permutation_permutes_outputs() {
        let mut r = rng(18);
        let cfg = VariantConfig::preset(Preset::TwoMamba);
        let (d_model, heads, d_head, n) = (8, 2, 4, 6);
        let w = BlockWeights::init(&cfg, d_model, heads, d_head, &mut r).unwrap();
        let h = rand_t(&mut r, &[n, d_model], -1.0, 1.0);
        let cache = block_forward_cached(&h, &cfg, &w).unwrap();

        // Swap the two heads' slices in every per-head weight.
        let mut w2 = w.clone();
        let inner = heads * d_head;
        let swap_cols = |t: &DenseTensor, block: usize, per: usize| {
            DenseTensor::from_fn(t.shape(), |idx| {
                let col = idx[1];
                let which = col / block;
                let within = col % block;
                let head = within / per;
                let c = within % per;
                let new_head = 1 - head;
                t.at(&[idx[0], which * block + new_head * per + c])
            })
        };
        w2.w_qkv = swap_cols(&w.w_qkv, inner, d_head);
        w2.w_a = w.w_a.as_ref().map(|t| {
            DenseTensor::from_fn(t.shape(), |idx| t.at(&[idx[0], 1 - idx[1]]))
        });
        let wt = &w.conv.per_channel_weights;
        let win = w.conv.window;
        let swapped_wt = DenseTensor::from_fn(wt.shape(), |idx| {
            let ch = idx[0];
            let which = ch / inner;
            let within = ch % inner;
            let head = within / d_head;
            let c = within % d_head;
            wt.at(&[which * inner + (1 - head) * d_head + c, idx[1]])
        });
        w2.conv = ConvSpec::new(win, swapped_wt, w.conv.bias.clone(), w.conv.activation).unwrap();
        let cache2 = block_forward_cached(&h, &cfg, &w2).unwrap();
        for t in 0..n {
            for hh in 0..heads {
                for c in 0..d_head {
                    let a = cache.y_heads.at(&[hh, t, c]);
                    let b = cache2.y_heads.at(&[1 - hh, t, c]);
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = VariantConfig {
            order: Order::Linear,
            qk_activation: QkActivation::Silu,
            norm: NormKind::SoftmaxNorm,
            ..VariantConfig::preset(Preset::Linear)
        };
        assert!(matches!(cfg.validate(), Err(SeqmixError::Config(_))));
    }

    #[test]
    fn missing_weights_rejected() {
        let cfg = VariantConfig::preset(Preset::Mamba2s);
        let mut r = rng(19);
        let mut w = BlockWeights::init(&cfg, 6, 1, 4, &mut r).unwrap();
        w.w_a = None;
        let h = DenseTensor::zeros(&[3, 6]);
        assert!(matches!(
            variant_forward(&h, &cfg, &w),
            Err(SeqmixError::Config(_))
        ));
    }
}
