//! Desk-scale end-to-end training: a tiny block-stack language model over
//! synthetic copy / associative-recall tasks, driving the composed forward
//! and analytic backward for every attention variant.
//!
//! The model is deliberately small: tied embedding head, pre-norm residual
//! blocks (attention + silu MLP), cross-entropy on masked target positions.
//! Training is bitwise reproducible given (seed, config).

use std::io::Write as _;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::backward::{
    accumulate, block_backward, matmul_t_left, matmul_t_right, rmsnorm_backward, BlockGrads,
};
use crate::forward::{block_forward_cached, rmsnorm, BlockCache, BlockWeights, VariantConfig};
use crate::tensor::{matmul, silu, silu_deriv, DenseTensor};
use crate::{Result, SeqmixError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// AdamW with betas (0.9, 0.999) and decoupled weight decay.
    AdamW,
    Sgd,
}

#[derive(Debug, Clone)]
pub struct TinyModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub n_layers: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub variant: VariantConfig,
    pub mlp_mult: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub batch: usize,
    pub eval_every: usize,
    pub eval_sequences: usize,
}

impl TinyModelConfig {
    /// The documented associative-recall configuration: 2 layers at
    /// d_model 64, 2k steps, warmup 5% of the budget, AdamW defaults.
    pub fn recall_default(variant: VariantConfig) -> Self {
        Self {
            d_model: 64,
            n_heads: 2,
            d_head: 32,
            n_layers: 2,
            vocab: 32,
            seq_len: 64,
            variant,
            mlp_mult: 2,
            optimizer: OptimizerKind::AdamW,
            lr: 3e-3,
            warmup_steps: 100,
            total_steps: 2000,
            weight_decay: 0.01,
            seed: 7,
            batch: 24,
            eval_every: 200,
            eval_sequences: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.d_head {
            return Err(SeqmixError::Config(format!(
                "d_model {} must equal n_heads*d_head {}",
                self.d_model,
                self.n_heads * self.d_head
            )));
        }
        if self.vocab < 4 || self.seq_len < 4 || self.batch == 0 || self.mlp_mult == 0 {
            return Err(SeqmixError::Config("degenerate harness config".into()));
        }
        self.variant.validate()
    }
}

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    AssocRecall,
}

impl TaskKind {
    pub fn parse(name: &str) -> Result<TaskKind> {
        match name {
            "copy" => Ok(TaskKind::Copy),
            "assoc_recall" => Ok(TaskKind::AssocRecall),
            other => Err(SeqmixError::Config(format!(
                "unknown task '{other}'; valid: copy, assoc_recall"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::AssocRecall => "assoc_recall",
        }
    }
}

/// Token 0 is reserved as pad/delimiter for both tasks.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    /// key/value pairs for recall; ignored by copy
    pub n_pairs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub tokens: Vec<Vec<usize>>,
    /// next-token targets, aligned with positions (target[t] for position t)
    pub targets: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::Copy => {
                if self.vocab < 3 || self.seq_len < 3 {
                    return Err(SeqmixError::Config("copy needs vocab >= 3, N >= 3".into()));
                }
            }
            TaskKind::AssocRecall => {
                let keys = (self.vocab - 1) / 2;
                if self.vocab < 5 || keys < self.n_pairs || self.n_pairs == 0 {
                    return Err(SeqmixError::Config(format!(
                        "recall with {} pairs needs vocab >= {}",
                        self.n_pairs,
                        2 * self.n_pairs + 1
                    )));
                }
                if self.seq_len < 2 * self.n_pairs + 2 {
                    return Err(SeqmixError::Config("sequence too short for pairs".into()));
                }
            }
        }
        Ok(())
    }
}

/// Deterministic batch generation: the same task (including seed) always
/// yields the same batch.
pub fn generate_batch(task: &SyntheticTask, batch: usize) -> Result<TaskBatch> {
    task.validate()?;
    let mut r = StdRng::seed_from_u64(task.seed);
    let n = task.seq_len;
    let mut tokens = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    let mut mask = Vec::with_capacity(batch);
    for _ in 0..batch {
        let (tk, tg, mk) = match task.kind {
            TaskKind::Copy => {
                // [p_1..p_L, 0, p_1..p_L, pad]; loss on the repetition.
                let l = (n - 1) / 2;
                let prefix: Vec<usize> =
                    (0..l).map(|_| r.gen_range(1..task.vocab)).collect();
                let mut tk = vec![0usize; n];
                tk[..l].copy_from_slice(&prefix);
                tk[l] = 0; // delimiter
                tk[l + 1..2 * l + 1].copy_from_slice(&prefix);
                let mut tg = vec![0usize; n];
                let mut mk = vec![false; n];
                for t in 0..n - 1 {
                    tg[t] = tk[t + 1];
                }
                // positions L..2L-1 predict the repeated prefix
                for t in l..2 * l {
                    mk[t] = true;
                }
                (tk, tg, mk)
            }
            TaskKind::AssocRecall => {
                // [pad..., k_1, v_1, ..., k_p, v_p, k_query, v_answer];
                // loss only where the query predicts the answer.
                let key_span = (task.vocab - 1) / 2;
                let val_base = 1 + key_span;
                // distinct keys via partial shuffle
                let mut pool: Vec<usize> = (1..1 + key_span).collect();
                for i in 0..task.n_pairs {
                    let j = r.gen_range(i..pool.len());
                    pool.swap(i, j);
                }
                let keys = &pool[..task.n_pairs];
                let vals: Vec<usize> = (0..task.n_pairs)
                    .map(|_| val_base + r.gen_range(0..task.vocab - val_base))
                    .collect();
                let query_idx = r.gen_range(0..task.n_pairs);
                let mut tk = vec![0usize; n];
                let start = n - (2 * task.n_pairs + 2);
                for (i, (&k, &v)) in keys.iter().zip(&vals).enumerate() {
                    tk[start + 2 * i] = k;
                    tk[start + 2 * i + 1] = v;
                }
                tk[n - 2] = keys[query_idx];
                tk[n - 1] = vals[query_idx];
                let mut tg = vec![0usize; n];
                let mut mk = vec![false; n];
                for t in 0..n - 1 {
                    tg[t] = tk[t + 1];
                }
                mk[n - 2] = true;
                (tk, tg, mk)
            }
        };
        tokens.push(tk);
        targets.push(tg);
        mask.push(mk);
    }
    Ok(TaskBatch { tokens, targets, mask })
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Layer {
    pub ln1: DenseTensor,
    pub block: BlockWeights,
    pub ln2: DenseTensor,
    /// `[d_model, mlp_mult*d_model]`
    pub w1: DenseTensor,
    /// `[mlp_mult*d_model, d_model]`
    pub w2: DenseTensor,
}

#[derive(Debug, Clone)]
pub struct TinyModel {
    pub cfg: TinyModelConfig,
    /// `[vocab, d_model]`; also the (tied) output head
    pub embed: DenseTensor,
    pub layers: Vec<Layer>,
    pub final_gain: DenseTensor,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub ln1: DenseTensor,
    pub block: BlockGrads,
    pub ln2: DenseTensor,
    pub w1: DenseTensor,
    pub w2: DenseTensor,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub embed: DenseTensor,
    pub layers: Vec<LayerGrads>,
    pub final_gain: DenseTensor,
}

fn add_opt(a: &mut Option<DenseTensor>, b: &Option<DenseTensor>) {
    if let (Some(x), Some(y)) = (a.as_mut(), b.as_ref()) {
        accumulate(x, y);
    }
}

impl ModelGrads {
    pub fn add(&mut self, other: &ModelGrads) {
        accumulate(&mut self.embed, &other.embed);
        accumulate(&mut self.final_gain, &other.final_gain);
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            accumulate(&mut a.ln1, &b.ln1);
            accumulate(&mut a.ln2, &b.ln2);
            accumulate(&mut a.w1, &b.w1);
            accumulate(&mut a.w2, &b.w2);
            accumulate(&mut a.block.w_qkv, &b.block.w_qkv);
            accumulate(&mut a.block.w_out, &b.block.w_out);
            add_opt(&mut a.block.w_a, &b.block.w_a);
            add_opt(&mut a.block.w_dt, &b.block.w_dt);
            add_opt(&mut a.block.dt_bias, &b.block.dt_bias);
            add_opt(&mut a.block.a_log, &b.block.a_log);
            add_opt(&mut a.block.d_res, &b.block.d_res);
            add_opt(&mut a.block.w_z, &b.block.w_z);
            accumulate(&mut a.block.conv_w, &b.block.conv_w);
            add_opt(&mut a.block.conv_b, &b.block.conv_b);
            accumulate(&mut a.block.rms_gain, &b.block.rms_gain);
        }
    }

    pub fn scale(&mut self, s: f64) {
        let apply = |t: &mut DenseTensor| {
            for v in t.data_mut() {
                *v *= s;
            }
        };
        apply(&mut self.embed);
        apply(&mut self.final_gain);
        for l in &mut self.layers {
            apply(&mut l.ln1);
            apply(&mut l.ln2);
            apply(&mut l.w1);
            apply(&mut l.w2);
            apply(&mut l.block.w_qkv);
            apply(&mut l.block.w_out);
            for t in [
                &mut l.block.w_a,
                &mut l.block.w_dt,
                &mut l.block.dt_bias,
                &mut l.block.a_log,
                &mut l.block.d_res,
                &mut l.block.w_z,
                &mut l.block.conv_b,
            ]
            .into_iter()
            .flatten()
            {
                apply(t);
            }
            apply(&mut l.block.conv_w);
            apply(&mut l.block.rms_gain);
        }
    }
}

/// Visit every learnable tensor of a block zipped with its gradient, in a
/// fixed order shared by the optimizer, the serializer, and the FD checker.
fn visit_block(
    w: &mut BlockWeights,
    g: Option<&BlockGrads>,
    f: &mut impl FnMut(&mut DenseTensor, Option<&DenseTensor>),
) {
    f(&mut w.w_qkv, g.map(|g| &g.w_qkv));
    f(&mut w.w_out, g.map(|g| &g.w_out));
    if let Some(t) = w.w_a.as_mut() {
        f(t, g.map(|g| g.w_a.as_ref().expect("gradient presence mirrors weights")));
    }
    if let Some(t) = w.w_dt.as_mut() {
        f(t, g.map(|g| g.w_dt.as_ref().expect("gradient presence mirrors weights")));
    }
    if let Some(t) = w.dt_bias.as_mut() {
        f(t, g.map(|g| g.dt_bias.as_ref().expect("gradient presence mirrors weights")));
    }
    if let Some(t) = w.a_log.as_mut() {
        f(t, g.map(|g| g.a_log.as_ref().expect("gradient presence mirrors weights")));
    }
    if let Some(t) = w.d_res.as_mut() {
        f(t, g.map(|g| g.d_res.as_ref().expect("gradient presence mirrors weights")));
    }
    if let Some(t) = w.w_z.as_mut() {
        f(t, g.map(|g| g.w_z.as_ref().expect("gradient presence mirrors weights")));
    }
    f(&mut w.conv.per_channel_weights, g.map(|g| &g.conv_w));
    if let Some(t) = w.conv.bias.as_mut() {
        f(t, g.map(|g| g.conv_b.as_ref().expect("gradient presence mirrors weights")));
    }
    f(&mut w.rms_gain, g.map(|g| &g.rms_gain));
}

fn visit_model(
    m: &mut TinyModel,
    g: Option<&ModelGrads>,
    f: &mut impl FnMut(&mut DenseTensor, Option<&DenseTensor>),
) {
    f(&mut m.embed, g.map(|g| &g.embed));
    for (i, layer) in m.layers.iter_mut().enumerate() {
        let lg = g.map(|g| &g.layers[i]);
        f(&mut layer.ln1, lg.map(|l| &l.ln1));
        visit_block(&mut layer.block, lg.map(|l| &l.block), f);
        f(&mut layer.ln2, lg.map(|l| &l.ln2));
        f(&mut layer.w1, lg.map(|l| &l.w1));
        f(&mut layer.w2, lg.map(|l| &l.w2));
    }
    f(&mut m.final_gain, g.map(|g| &g.final_gain));
}

struct SeqCache {
    x_in: Vec<DenseTensor>,
    ln1_out: Vec<DenseTensor>,
    ln1_inv: Vec<Vec<f64>>,
    block: Vec<BlockCache>,
    x_mid: Vec<DenseTensor>,
    ln2_out: Vec<DenseTensor>,
    ln2_inv: Vec<Vec<f64>>,
    m1: Vec<DenseTensor>,
    h_act: Vec<DenseTensor>,
    x_final_in: DenseTensor,
    final_inv: Vec<f64>,
    xf: DenseTensor,
    /// `[N, vocab]` row-wise softmax probabilities
    probs: DenseTensor,
}

impl TinyModel {
    pub fn init(cfg: TinyModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = StdRng::seed_from_u64(cfg.seed);
        let normal = |r: &mut StdRng, shape: &[usize], fan_in: usize| {
            let n = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
            DenseTensor::from_fn(shape, |_| n.sample(r))
        };
        let embed = normal(&mut r, &[cfg.vocab, cfg.d_model], cfg.d_model);
        let mlp = cfg.mlp_mult * cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|_| -> Result<Layer> {
                Ok(Layer {
                    ln1: DenseTensor::from_fn(&[cfg.d_model], |_| 1.0),
                    block: BlockWeights::init(
                        &cfg.variant,
                        cfg.d_model,
                        cfg.n_heads,
                        cfg.d_head,
                        &mut r,
                    )?,
                    ln2: DenseTensor::from_fn(&[cfg.d_model], |_| 1.0),
                    w1: normal(&mut r, &[cfg.d_model, mlp], cfg.d_model),
                    w2: normal(&mut r, &[mlp, cfg.d_model], mlp),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_gain = DenseTensor::from_fn(&[cfg.d_model], |_| 1.0);
        Ok(Self { cfg, embed, layers, final_gain })
    }

    fn forward_seq(&self, tokens: &[usize]) -> Result<SeqCache> {
        let n = tokens.len();
        let d = self.cfg.d_model;
        for &t in tokens {
            if t >= self.cfg.vocab {
                return Err(SeqmixError::Range(format!("token {t} out of vocab")));
            }
        }
        let mut x = DenseTensor::from_fn(&[n, d], |idx| self.embed.at(&[tokens[idx[0]], idx[1]]));
        let mut cache = SeqCache {
            x_in: Vec::new(),
            ln1_out: Vec::new(),
            ln1_inv: Vec::new(),
            block: Vec::new(),
            x_mid: Vec::new(),
            ln2_out: Vec::new(),
            ln2_inv: Vec::new(),
            m1: Vec::new(),
            h_act: Vec::new(),
            x_final_in: DenseTensor::zeros(&[1, 1]),
            final_inv: Vec::new(),
            xf: DenseTensor::zeros(&[1, 1]),
            probs: DenseTensor::zeros(&[1, 1]),
        };
        for layer in &self.layers {
            cache.x_in.push(x.clone());
            let (l1, inv1) = rmsnorm(&x, &layer.ln1);
            let bc = block_forward_cached(&l1, &self.cfg.variant, &layer.block)?;
            let mut x_mid = x.clone();
            accumulate(&mut x_mid, &bc.out);
            cache.ln1_out.push(l1);
            cache.ln1_inv.push(inv1);
            cache.block.push(bc);
            cache.x_mid.push(x_mid.clone());
            let (l2, inv2) = rmsnorm(&x_mid, &layer.ln2);
            let m1 = matmul(&l2, &layer.w1)?;
            let h = m1.map("silu", silu)?;
            let m2 = matmul(&h, &layer.w2)?;
            let mut x_out = x_mid;
            accumulate(&mut x_out, &m2);
            cache.ln2_out.push(l2);
            cache.ln2_inv.push(inv2);
            cache.m1.push(m1);
            cache.h_act.push(h);
            x = x_out;
        }
        cache.x_final_in = x.clone();
        let (xf, inv_f) = rmsnorm(&x, &self.final_gain);
        // tied head: logits = xf . E^T
        let logits = matmul_t_right(&xf, &self.embed); // [N, vocab]
        let mut probs = DenseTensor::zeros(&[n, self.cfg.vocab]);
        for t in 0..n {
            let row = &logits.data()[t * self.cfg.vocab..(t + 1) * self.cfg.vocab];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut den = 0.0;
            for (c, &l) in row.iter().enumerate() {
                let e = (l - m).exp();
                probs.set(&[t, c], e);
                den += e;
            }
            for c in 0..self.cfg.vocab {
                let v = probs.at(&[t, c]) / den;
                probs.set(&[t, c], v);
            }
        }
        cache.final_inv = inv_f;
        cache.xf = xf;
        cache.probs = probs;
        Ok(cache)
    }

    /// Row-wise next-token probabilities for one sequence.
    pub fn predict(&self, tokens: &[usize]) -> Result<DenseTensor> {
        Ok(self.forward_seq(tokens)?.probs)
    }

    fn zero_grads(&self) -> ModelGrads {
        let zero_like = |t: &DenseTensor| DenseTensor::zeros(t.shape());
        ModelGrads {
            embed: zero_like(&self.embed),
            final_gain: zero_like(&self.final_gain),
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrads {
                    ln1: zero_like(&l.ln1),
                    ln2: zero_like(&l.ln2),
                    w1: zero_like(&l.w1),
                    w2: zero_like(&l.w2),
                    block: BlockGrads {
                        w_qkv: zero_like(&l.block.w_qkv),
                        w_out: zero_like(&l.block.w_out),
                        w_a: l.block.w_a.as_ref().map(zero_like),
                        w_dt: l.block.w_dt.as_ref().map(zero_like),
                        dt_bias: l.block.dt_bias.as_ref().map(zero_like),
                        a_log: l.block.a_log.as_ref().map(zero_like),
                        d_res: l.block.d_res.as_ref().map(zero_like),
                        w_z: l.block.w_z.as_ref().map(zero_like),
                        conv_w: zero_like(&l.block.conv.per_channel_weights),
                        conv_b: l.block.conv.bias.as_ref().map(zero_like),
                        rms_gain: zero_like(&l.block.rms_gain),
                    },
                })
                .collect(),
        }
    }

    /// Cross-entropy over masked positions of one sequence plus full
    /// parameter gradients (un-normalized sums; the caller averages).
    fn seq_loss_and_grads(
        &self,
        tokens: &[usize],
        targets: &[usize],
        mask: &[bool],
    ) -> Result<(f64, usize, ModelGrads)> {
        let n = tokens.len();
        let vocab = self.cfg.vocab;
        let cache = self.forward_seq(tokens)?;
        let count = mask.iter().filter(|&&m| m).count();
        let mut loss = 0.0;
        let mut dlogits = DenseTensor::zeros(&[n, vocab]);
        for t in 0..n {
            if !mask[t] {
                continue;
            }
            let p = cache.probs.at(&[t, targets[t]]).max(1e-300);
            loss -= p.ln();
            for c in 0..vocab {
                let grad = cache.probs.at(&[t, c]) - if c == targets[t] { 1.0 } else { 0.0 };
                dlogits.set(&[t, c], grad);
            }
        }

        let mut grads = self.zero_grads();
        // head: logits = xf . E^T
        let dxf = matmul(&dlogits, &self.embed)?; // [N, d]
        let d_embed_head = matmul_t_left(&dlogits, &cache.xf); // [vocab, d]
        accumulate(&mut grads.embed, &d_embed_head);
        let (mut dx, dgain_f) =
            rmsnorm_backward(&cache.x_final_in, &self.final_gain, &cache.final_inv, &dxf);
        accumulate(&mut grads.final_gain, &dgain_f);

        for (li, layer) in self.layers.iter().enumerate().rev() {
            let lg = &mut grads.layers[li];
            // MLP residual
            let dh = {
                let dm2 = &dx;
                let dw2 = matmul_t_left(&cache.h_act[li], dm2);
                accumulate(&mut lg.w2, &dw2);
                matmul_t_right(dm2, &layer.w2)
            };
            let mut dm1 = dh;
            for (g, &pre) in dm1.data_mut().iter_mut().zip(cache.m1[li].data()) {
                *g *= silu_deriv(pre);
            }
            let dw1 = matmul_t_left(&cache.ln2_out[li], &dm1);
            accumulate(&mut lg.w1, &dw1);
            let dl2 = matmul_t_right(&dm1, &layer.w1);
            let (dx_mid_branch, dg2) =
                rmsnorm_backward(&cache.x_mid[li], &layer.ln2, &cache.ln2_inv[li], &dl2);
            accumulate(&mut lg.ln2, &dg2);
            let mut dx_mid = dx; // residual path
            accumulate(&mut dx_mid, &dx_mid_branch);

            // attention residual
            let (dl1, bg) = block_backward(
                &cache.ln1_out[li],
                &self.cfg.variant,
                &layer.block,
                &cache.block[li],
                &dx_mid,
            )?;
            add_block_grads(&mut lg.block, &bg);
            let (dx_branch, dg1) =
                rmsnorm_backward(&cache.x_in[li], &layer.ln1, &cache.ln1_inv[li], &dl1);
            accumulate(&mut lg.ln1, &dg1);
            dx = dx_mid;
            accumulate(&mut dx, &dx_branch);
        }

        // embedding scatter
        let d = self.cfg.d_model;
        for (t, &tok) in tokens.iter().enumerate() {
            for c in 0..d {
                let cur = grads.embed.at(&[tok, c]);
                grads.embed.set(&[tok, c], cur + dx.at(&[t, c]));
            }
        }
        Ok((loss, count, grads))
    }

    /// Mean masked cross-entropy and averaged gradients over a batch.
    pub fn loss_and_grads(&self, batch: &TaskBatch) -> Result<(f64, ModelGrads)> {
        let mut total = 0.0;
        let mut count = 0usize;
        let mut grads = self.zero_grads();
        for ((tk, tg), mk) in batch.tokens.iter().zip(&batch.targets).zip(&batch.mask) {
            let (l, c, g) = self.seq_loss_and_grads(tk, tg, mk)?;
            total += l;
            count += c;
            grads.add(&g);
        }
        if count == 0 {
            return Err(SeqmixError::Config("batch has no masked targets".into()));
        }
        grads.scale(1.0 / count as f64);
        Ok((total / count as f64, grads))
    }

    /// Mean masked loss and argmax accuracy on a batch, no gradients.
    pub fn evaluate(&self, batch: &TaskBatch) -> Result<(f64, f64)> {
        let mut loss = 0.0;
        let mut correct = 0usize;
        let mut count = 0usize;
        for ((tk, tg), mk) in batch.tokens.iter().zip(&batch.targets).zip(&batch.mask) {
            let probs = self.predict(tk)?;
            for (t, &m) in mk.iter().enumerate() {
                if !m {
                    continue;
                }
                count += 1;
                loss -= probs.at(&[t, tg[t]]).max(1e-300).ln();
                let mut best = 0;
                for c in 1..self.cfg.vocab {
                    if probs.at(&[t, c]) > probs.at(&[t, best]) {
                        best = c;
                    }
                }
                if best == tg[t] {
                    correct += 1;
                }
            }
        }
        if count == 0 {
            return Err(SeqmixError::Config("eval batch has no masked targets".into()));
        }
        Ok((loss / count as f64, correct as f64 / count as f64))
    }

    /// Flat little-endian serialization of every parameter, visit order.
    pub fn to_bytes(&mut self) -> Vec<u8> {
        let mut out = Vec::new();
        visit_model(self, None, &mut |t, _| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        });
        out
    }
}

fn add_block_grads(into: &mut BlockGrads, from: &BlockGrads) {
    accumulate(&mut into.w_qkv, &from.w_qkv);
    accumulate(&mut into.w_out, &from.w_out);
    add_opt(&mut into.w_a, &from.w_a);
    add_opt(&mut into.w_dt, &from.w_dt);
    add_opt(&mut into.dt_bias, &from.dt_bias);
    add_opt(&mut into.a_log, &from.a_log);
    add_opt(&mut into.d_res, &from.d_res);
    add_opt(&mut into.w_z, &from.w_z);
    accumulate(&mut into.conv_w, &from.conv_w);
    add_opt(&mut into.conv_b, &from.conv_b);
    accumulate(&mut into.rms_gain, &from.rms_gain);
}

// ---------------------------------------------------------------------------
// Optimizer + training loop
// ---------------------------------------------------------------------------

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

/// One optimizer step with linear warmup. Weight decay (AdamW, decoupled) is
/// applied to matrices only, not to gains/biases/per-head scalars.
fn optimizer_step(
    model: &mut TinyModel,
    grads: &ModelGrads,
    adam: &mut Option<AdamState>,
    step: usize,
) {
    let cfg = model.cfg.clone();
    let warm = if cfg.warmup_steps > 0 {
        ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
    } else {
        1.0
    };
    let lr = cfg.lr * warm;
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            visit_model(model, Some(grads), &mut |t, g| {
                let g = g.expect("grads provided");
                let decay = if t.rank() >= 2 { cfg.weight_decay } else { 0.0 };
                for (w, &gv) in t.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * (gv + decay * *w);
                }
            });
        }
        OptimizerKind::AdamW => {
            let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
            if adam.is_none() {
                let mut m = Vec::new();
                visit_model(model, None, &mut |t, _| m.push(vec![0.0; t.len()]));
                let v = m.clone();
                *adam = Some(AdamState { m, v, t: 0 });
            }
            let st = adam.as_mut().unwrap();
            st.t += 1;
            let bc1 = 1.0 - b1.powi(st.t as i32);
            let bc2 = 1.0 - b2.powi(st.t as i32);
            let mut idx = 0usize;
            let (ms, vs) = (&mut st.m, &mut st.v);
            visit_model(model, Some(grads), &mut |t, g| {
                let g = g.expect("grads provided");
                let decay = if t.rank() >= 2 { cfg.weight_decay } else { 0.0 };
                let m = &mut ms[idx];
                let v = &mut vs[idx];
                for ((w, &gv), (mi, vi)) in t
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    *mi = b1 * *mi + (1.0 - b1) * gv;
                    *vi = b2 * *vi + (1.0 - b2) * gv * gv;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *w -= lr * (mhat / (vhat.sqrt() + eps) + decay * *w);
                }
                idx += 1;
            });
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRow {
    pub step: usize,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub eval_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub rows: Vec<TrainRow>,
    pub final_eval_loss: f64,
    pub final_acc: f64,
    pub diverged: bool,
}

fn eval_task(task: &SyntheticTask, offset: u64) -> SyntheticTask {
    SyntheticTask { seed: task.seed.wrapping_add(0x5EED_0000).wrapping_add(offset), ..task.clone() }
}

/// Full training run: deterministic given (config, task). Divergence (NaN
/// loss) aborts with a diagnostic record instead of an error.
pub fn train(cfg: &TinyModelConfig, task: &SyntheticTask) -> Result<(TinyModel, TrainRecord)> {
    cfg.validate()?;
    task.validate()?;
    let mut model = TinyModel::init(cfg.clone())?;
    let mut adam: Option<AdamState> = None;
    let mut rows = Vec::new();
    let eval_batch = generate_batch(&eval_task(task, 1), cfg.eval_sequences)?;
    for step in 0..cfg.total_steps {
        let step_task = SyntheticTask { seed: task.seed.wrapping_add(step as u64), ..task.clone() };
        let batch = generate_batch(&step_task, cfg.batch)?;
        let (loss, grads) = model.loss_and_grads(&batch)?;
        if !loss.is_finite() {
            rows.push(TrainRow { step, train_loss: loss, eval_loss: None, eval_acc: None });
            return Ok((
                model,
                TrainRecord { rows, final_eval_loss: f64::NAN, final_acc: 0.0, diverged: true },
            ));
        }
        optimizer_step(&mut model, &grads, &mut adam, step);
        let do_eval = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        if do_eval {
            let (el, ea) = model.evaluate(&eval_batch)?;
            rows.push(TrainRow { step, train_loss: loss, eval_loss: Some(el), eval_acc: Some(ea) });
        } else {
            rows.push(TrainRow { step, train_loss: loss, eval_loss: None, eval_acc: None });
        }
    }
    let (final_eval_loss, final_acc) = model.evaluate(&eval_batch)?;
    Ok((
        model,
        TrainRecord { rows, final_eval_loss, final_acc, diverged: false },
    ))
}

/// Write the run directory: config snapshot, loss CSV, final weights.
pub fn write_run_artifacts(
    dir: &Path,
    cfg: &TinyModelConfig,
    task: &SyntheticTask,
    record: &TrainRecord,
    model: &mut TinyModel,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut cfg_file = std::fs::File::create(dir.join("config.txt"))?;
    writeln!(cfg_file, "task={}", task.kind.name())?;
    writeln!(cfg_file, "vocab={}", cfg.vocab)?;
    writeln!(cfg_file, "seq_len={}", cfg.seq_len)?;
    writeln!(cfg_file, "n_pairs={}", task.n_pairs)?;
    writeln!(cfg_file, "d_model={}", cfg.d_model)?;
    writeln!(cfg_file, "n_heads={}", cfg.n_heads)?;
    writeln!(cfg_file, "d_head={}", cfg.d_head)?;
    writeln!(cfg_file, "n_layers={}", cfg.n_layers)?;
    writeln!(cfg_file, "mlp_mult={}", cfg.mlp_mult)?;
    writeln!(cfg_file, "lr={}", cfg.lr)?;
    writeln!(cfg_file, "warmup_steps={}", cfg.warmup_steps)?;
    writeln!(cfg_file, "total_steps={}", cfg.total_steps)?;
    writeln!(cfg_file, "weight_decay={}", cfg.weight_decay)?;
    writeln!(cfg_file, "batch={}", cfg.batch)?;
    writeln!(cfg_file, "seed={}", cfg.seed)?;
    writeln!(cfg_file, "task_seed={}", task.seed)?;

    let mut csv = std::fs::File::create(dir.join("loss.csv"))?;
    writeln!(csv, "step,train_loss,eval_loss,eval_acc")?;
    for row in &record.rows {
        writeln!(
            csv,
            "{},{:.6},{},{}",
            row.step,
            row.train_loss,
            row.eval_loss.map_or(String::new(), |v| format!("{v:.6}")),
            row.eval_acc.map_or(String::new(), |v| format!("{v:.4}")),
        )?;
    }
    std::fs::write(dir.join("weights.bin"), model.to_bytes())?;
    Ok(())
}
