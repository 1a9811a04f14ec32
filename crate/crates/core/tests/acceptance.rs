//! The ten release gates, one test each. Every test prints a single
//! `PASS: ...` line on success (visible with `--nocapture`); a failure
//! panics with the measured value.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use seqmix::backward::{grad_twomamba_e, rel_err, GradBundle};
use seqmix::cli::{gradcheck_instance, GRADCHECK_SHAPES, KERNEL_NAMES};
use seqmix::forward::{
    block_forward_cached, linear_attention_kv_first, linear_attention_qk_first, softmax_attention,
    variant_forward, AMaskKind, BlockWeights, NormKind, Order, Preset, QkActivation, VariantConfig,
};
use seqmix::harness::{
    generate_batch, train, SyntheticTask, TaskKind, TinyModel, TinyModelConfig,
};
use seqmix::mask::{
    build_decay_matrix, logsigmoid_softplus_identity_check, DecayLogits, DecayMatrix, DecayVariant,
};
use seqmix::memmodel::{crossover, second_order_state};
use seqmix::recurrence::{run_stateful, run_stateful_blocked, Phi2Map};
use seqmix::tensor::DenseTensor;

fn rand_t(r: &mut StdRng, shape: &[usize], lo: f64, hi: f64) -> DenseTensor {
    DenseTensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

fn random_dm(r: &mut StdRng, h: usize, n: usize) -> DecayMatrix {
    let logits = DenseTensor::from_fn(&[h, n], |_| -r.gen_range(0.01..0.5f64));
    build_decay_matrix(&DecayLogits::new(logits, DecayVariant::Softplus).unwrap()).unwrap()
}

fn zero_dm(h: usize, n: usize) -> DecayMatrix {
    build_decay_matrix(&DecayLogits::none(h, n)).unwrap()
}

/// 1. All six kernel gradients match finite differences, rel < 1e-6,
///    20 random small instances each (H <= 2, N <= 16, d <= 8).
#[test]
fn criterion_01_gradient_suite() {
    let tol = 1e-6;
    let mut worst = 0.0f64;
    for kernel in KERNEL_NAMES {
        for rep in 0..4u64 {
            for (i, &(h, n, d)) in GRADCHECK_SHAPES.iter().enumerate() {
                let seed = 1000 + rep * 100 + i as u64;
                let err = gradcheck_instance(kernel, seed, h, n, d).unwrap();
                assert!(err < tol, "{kernel} seed {seed}: rel err {err}");
                worst = worst.max(err);
            }
        }
    }
    println!("PASS: criterion 1 — gradient suite, 6 kernels x 20 instances, worst rel err {worst:.2e} < 1e-6");
}

/// 2. Stateful inference equals the quadratic reference for every preset,
///    rel < 1e-9, N = 256, d_H = 16, 2 heads, 10 seeds.
#[test]
fn criterion_02_cross_path_equivalence() {
    let (heads, n, d_head) = (2usize, 256usize, 16usize);
    let d_model = heads * d_head;
    let mut worst = 0.0f64;
    for preset in Preset::all() {
        let cfg = VariantConfig::preset(preset);
        for seed in 0..10u64 {
            let mut r = StdRng::seed_from_u64(2000 + seed);
            let w = BlockWeights::init(&cfg, d_model, heads, d_head, &mut r).unwrap();
            let h = rand_t(&mut r, &[n, d_model], -0.5, 0.5);
            let quad = block_forward_cached(&h, &cfg, &w).unwrap().out;
            let (rec, _) = run_stateful(&h, &cfg, &w).unwrap();
            let err = rel_err(&quad, &rec);
            assert!(err < 1e-9, "{} seed {seed}: rel err {err}", preset.name());
            worst = worst.max(err);
        }
    }
    println!("PASS: criterion 2 — cross-path equivalence, 6 presets x 10 seeds at N=256, worst rel err {worst:.2e} < 1e-9");
}

/// 3. dot(phi2(x), phi2(y)) = (x . y)^2 within 1e-12 over 10^4 random pairs,
///    d in {2, 4, 8, 64}; feature length d(d+1)/2 (2080 at d = 64).
#[test]
fn criterion_03_phi2_identity() {
    let mut r = StdRng::seed_from_u64(3000);
    let mut worst = 0.0f64;
    for d in [2usize, 4, 8, 64] {
        let map = Phi2Map::new(d).unwrap();
        assert_eq!(map.f, d * (d + 1) / 2);
        for _ in 0..2500 {
            let x: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
            let fx = map.apply(&x);
            let fy = map.apply(&y);
            let lhs: f64 = fx.iter().zip(&fy).map(|(a, b)| a * b).sum();
            let dot: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs = dot * dot;
            let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0);
            assert!(rel < 1e-12, "d={d}: {lhs} vs {rhs}");
            worst = worst.max(rel);
        }
    }
    assert_eq!(Phi2Map::new(64).unwrap().f, 2080);
    println!("PASS: criterion 3 — phi2 kernel identity over 10^4 pairs, worst rel dev {worst:.2e} < 1e-12; f(64) = 2080");
}

/// 4. crossover(64) = 1058; measured per-step traces equal the closed-form
///    counts exactly; the memcurve CSV's curves cross at that N.
#[test]
fn criterion_04_memory_crossover() {
    assert_eq!(crossover(64).unwrap(), 1058);

    // measured traces from real stateful runs, integer equality
    let mut r = StdRng::seed_from_u64(4000);
    let (d, n) = (64usize, 24usize);
    let h = rand_t(&mut r, &[n, d], -0.5, 0.5);
    let cfg_kv = VariantConfig::preset(Preset::Softmax);
    let w_kv = BlockWeights::init(&cfg_kv, d, 1, d, &mut r).unwrap();
    let (_, trace_kv) = run_stateful(&h, &cfg_kv, &w_kv).unwrap();
    let cfg_st = VariantConfig::preset(Preset::TwoMamba);
    let w_st = BlockWeights::init(&cfg_st, d, 1, d, &mut r).unwrap();
    let (_, trace_st) = run_stateful(&h, &cfg_st, &w_st).unwrap();
    for (t, (&kv, &st)) in trace_kv.per_step.iter().zip(&trace_st.per_step).enumerate() {
        let toks = (t + 1) as u64;
        assert_eq!(kv, 2 * toks * d as u64, "measured KV at token {toks}");
        assert_eq!(st, second_order_state(d as u64), "measured state at token {toks}");
    }

    // the CLI CSV reproduces the crossing
    let out = std::env::temp_dir().join("seqmix_acceptance_memcurve.csv");
    let code = seqmix::cli::run([
        "seqmix",
        "memcurve",
        "--d",
        "64",
        "--nmax",
        "1100",
        "--seed",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(&out).unwrap();
    let crossing = csv
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with("summary"))
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (
                f[0].parse::<u64>().unwrap(),
                f[1].parse::<u64>().unwrap(),
                f[2].parse::<u64>().unwrap(),
            )
        })
        .find(|&(_, kv, st)| kv > st)
        .map(|(n, _, _)| n)
        .unwrap();
    assert_eq!(crossing, 1058);
    println!("PASS: criterion 4 — crossover(64) = 1058, measured traces exact, CSV curves cross at N=1058");
}

/// 5. log(sigmoid(x)) = -softplus(-x) within 1e-12 over [-30, 30] step 0.01.
#[test]
fn criterion_05_logsigmoid_softplus_identity() {
    let grid = DenseTensor::from_fn(&[6001], |idx| -30.0 + idx[0] as f64 * 0.01);
    let dev = logsigmoid_softplus_identity_check(&grid);
    assert!(dev < 1e-12, "max deviation {dev}");
    println!("PASS: criterion 5 — log-sigmoid/softplus identity, max dev {dev:.2e} < 1e-12 over [-30,30]");
}

/// Hand-rolled reference: causal squared scores, row-normalized, times V.
fn squared_softmax_reference(q: &DenseTensor, k: &DenseTensor, v: &DenseTensor) -> DenseTensor {
    let (h, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let mut out = DenseTensor::zeros(&[h, n, d]);
    for hh in 0..h {
        for i in 0..n {
            let mut w = vec![0.0; i + 1];
            let mut den = 0.0;
            for (j, wj) in w.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += q.at(&[hh, i, c]) * k.at(&[hh, j, c]);
                }
                *wj = dot * dot;
                den += *wj;
            }
            for (j, wj) in w.iter().enumerate() {
                for c in 0..d {
                    let cur = out.at(&[hh, i, c]);
                    out.set(&[hh, i, c], cur + wj / den * v.at(&[hh, j, c]));
                }
            }
        }
    }
    out
}

/// Hand-rolled analytic backward for plain causal softmax attention.
fn softmax_attention_reference_grads(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    d_out: &DenseTensor,
) -> GradBundle {
    let (h, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let mut dq = DenseTensor::zeros(&[h, n, d]);
    let mut dk = DenseTensor::zeros(&[h, n, d]);
    let mut dv = DenseTensor::zeros(&[h, n, d]);
    for hh in 0..h {
        for i in 0..n {
            let mut logits = vec![0.0; i + 1];
            for (j, l) in logits.iter_mut().enumerate() {
                for c in 0..d {
                    *l += q.at(&[hh, i, c]) * k.at(&[hh, j, c]);
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let den: f64 = w.iter().sum();
            for wj in &mut w {
                *wj /= den;
            }
            // dW_ij = dO_i . V_j, dS = softmax Jacobian applied to dW
            let dw: Vec<f64> = (0..=i)
                .map(|j| (0..d).map(|c| d_out.at(&[hh, i, c]) * v.at(&[hh, j, c])).sum())
                .collect();
            let inner: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            for j in 0..=i {
                let ds = w[j] * (dw[j] - inner);
                for c in 0..d {
                    let cur = dq.at(&[hh, i, c]);
                    dq.set(&[hh, i, c], cur + ds * k.at(&[hh, j, c]));
                    let cur = dk.at(&[hh, j, c]);
                    dk.set(&[hh, j, c], cur + ds * q.at(&[hh, i, c]));
                    let cur = dv.at(&[hh, j, c]);
                    dv.set(&[hh, j, c], cur + w[j] * d_out.at(&[hh, i, c]));
                }
            }
        }
    }
    let zeros = DenseTensor::zeros(&[h, n]);
    GradBundle { dq, dk, dv, da_cs: zeros.clone(), da_logits: zeros }
}

/// 6. Reduction chain: the squared-score preset with zero decay and window-1
///    conv equals squared linear attention with softmax normalization
///    (1e-10); the exponentiated preset with zero decay equals plain softmax
///    attention, forward and gradient (1e-10).
#[test]
fn criterion_06_reduction_chain() {
    let mut r = StdRng::seed_from_u64(6000);
    let (heads, n, d_head) = (2usize, 32usize, 8usize);
    let d_model = heads * d_head;

    // block-level: strip decay and conv from the squared preset
    let mut cfg = VariantConfig::preset(Preset::TwoMamba);
    cfg.amask = AMaskKind::None;
    cfg.conv_window = 1;
    let w = BlockWeights::init(&cfg, d_model, heads, d_head, &mut r).unwrap();
    let h = rand_t(&mut r, &[n, d_model], -0.5, 0.5);
    let full = variant_forward(&h, &cfg, &w).unwrap();
    // reference: project, attend with hand-rolled squared+normalized, W_out
    let cache = block_forward_cached(&h, &cfg, &w).unwrap();
    let y_ref = squared_softmax_reference(&cache.q, &cache.k, &cache.v);
    let mut concat = DenseTensor::zeros(&[n, d_model]);
    for hh in 0..heads {
        for t in 0..n {
            for c in 0..d_head {
                concat.set(&[t, hh * d_head + c], y_ref.at(&[hh, t, c]));
            }
        }
    }
    let out_ref = seqmix::tensor::matmul(&concat, &w.w_out).unwrap();
    let e1 = rel_err(&full, &out_ref);
    assert!(e1 < 1e-10, "squared reduction: rel err {e1}");

    // kernel-level: exponentiated scores with zero decay = softmax attention
    let q = rand_t(&mut r, &[heads, n, d_head], -1.0, 1.0);
    let k = rand_t(&mut r, &[heads, n, d_head], -1.0, 1.0);
    let v = rand_t(&mut r, &[heads, n, d_head], -1.0, 1.0);
    let d_out = rand_t(&mut r, &[heads, n, d_head], -1.0, 1.0);
    let dm = zero_dm(heads, n);
    let fwd = seqmix::backward::attn_kernel_forward(Order::Exponential, true, &q, &k, &v, &dm)
        .unwrap();
    let sm = softmax_attention(&q, &k, &v).unwrap();
    let e2 = rel_err(&fwd, &sm);
    assert!(e2 < 1e-10, "exponential forward reduction: rel err {e2}");

    let g = grad_twomamba_e(&q, &k, &v, &dm, &d_out).unwrap();
    let g_ref = softmax_attention_reference_grads(&q, &k, &v, &d_out);
    let e3 = rel_err(&g.dq, &g_ref.dq)
        .max(rel_err(&g.dk, &g_ref.dk))
        .max(rel_err(&g.dv, &g_ref.dv));
    assert!(e3 < 1e-10, "exponential gradient reduction: rel err {e3}");
    println!("PASS: criterion 6 — reduction chain, squared {e1:.2e} / softmax fwd {e2:.2e} / softmax grad {e3:.2e}, all < 1e-10");
}

/// 7. (Q K^T . M) V computed score-matrix-first equals Q (K^T V accumulated
///    causally) within 1e-12 rel, N up to 256.
#[test]
fn criterion_07_compute_order_equivalence() {
    let mut r = StdRng::seed_from_u64(7000);
    let mut worst = 0.0f64;
    for n in [8usize, 64, 256] {
        for act in [QkActivation::None, QkActivation::Relu] {
            let (h, d) = (2usize, 16usize);
            let q = rand_t(&mut r, &[h, n, d], -1.0, 1.0);
            let k = rand_t(&mut r, &[h, n, d], -1.0, 1.0);
            let v = rand_t(&mut r, &[h, n, d], -1.0, 1.0);
            let a = linear_attention_qk_first(&q, &k, &v, act).unwrap();
            let b = linear_attention_kv_first(&q, &k, &v, act).unwrap();
            let e = rel_err(&a, &b);
            assert!(e < 1e-12, "N={n}: rel err {e}");
            worst = worst.max(e);
        }
    }
    println!("PASS: criterion 7 — qk-first vs kv-first linear attention, worst rel err {worst:.2e} < 1e-12 up to N=256");
}

/// 8. Softmax-normalized score rows sum to 1 +/- 1e-10, entries are
///    non-negative, and the strict upper triangle is exactly zero.
#[test]
fn criterion_08_normalized_rows() {
    let mut r = StdRng::seed_from_u64(8000);
    let (h, n, d) = (2usize, 48usize, 8usize);
    for order in [Order::Squared, Order::Exponential] {
        // magnitudes bounded away from zero keep the denominator guard inert
        let q = rand_t(&mut r, &[h, n, d], 0.2, 1.0);
        let k = rand_t(&mut r, &[h, n, d], 0.2, 1.0);
        let p = DenseTensor::from_fn(&[h, n, n], |idx| {
            (0..d).map(|c| q.at(&[idx[0], idx[1], c]) * k.at(&[idx[0], idx[2], c])).sum()
        });
        let dm = random_dm(&mut r, h, n);
        let (w, _, _) = seqmix::forward::score_weights(order, NormKind::SoftmaxNorm, &p, &dm).unwrap();
        for hh in 0..h {
            for i in 0..n {
                let mut sum = 0.0;
                for j in 0..n {
                    let wij = w.at(&[hh, i, j]);
                    if j > i {
                        assert_eq!(wij, 0.0, "strict upper entry ({i},{j}) not exactly zero");
                    } else {
                        assert!(wij >= 0.0, "negative weight at ({i},{j}): {wij}");
                        sum += wij;
                    }
                }
                assert!((sum - 1.0).abs() < 1e-10, "row {i} sums to {sum}");
            }
        }
    }
    println!("PASS: criterion 8 — normalized rows sum to 1 +/- 1e-10, non-negative, strict upper exactly 0");
}

/// 9. The online-max KV path gives identical output (1e-12) for block sizes
///    {1, 4, 16, full}.
#[test]
fn criterion_09_blocking_invariance() {
    let mut r = StdRng::seed_from_u64(9000);
    let (heads, n, d_head) = (2usize, 64usize, 8usize);
    let d_model = heads * d_head;
    let cfg = VariantConfig::preset(Preset::TwoMambaE);
    let w = BlockWeights::init(&cfg, d_model, heads, d_head, &mut r).unwrap();
    let h = rand_t(&mut r, &[n, d_model], -0.5, 0.5);
    let reference = run_stateful_blocked(&h, &cfg, &w, n).unwrap().0;
    let mut worst = 0.0f64;
    for block in [1usize, 4, 16] {
        let out = run_stateful_blocked(&h, &cfg, &w, block).unwrap().0;
        let e = rel_err(&out, &reference);
        assert!(e < 1e-12, "block {block}: rel err {e}");
        worst = worst.max(e);
    }
    println!("PASS: criterion 9 — online-max blocking invariance across {{1,4,16,full}}, worst rel err {worst:.2e} < 1e-12");
}

/// 10. The squared-score model exceeds 90% associative-recall accuracy
///     within 2k steps at the documented configuration, and the end-to-end
///     model gradient matches FD at rel 1e-5 on a miniature instance.
///     The >0.9 threshold was fixed from the first converged oracle run of
///     this configuration (seed 1: final accuracy recorded in
///     docs/recall_oracle.md) and is asserted unchanged here.
#[test]
fn criterion_10_harness() {
    // miniature FD: vocab 8, N = 6, 1 layer — probe a sample of parameters
    let cfg = TinyModelConfig {
        d_model: 4,
        n_heads: 1,
        d_head: 4,
        n_layers: 1,
        vocab: 8,
        seq_len: 6,
        variant: VariantConfig::preset(Preset::TwoMamba),
        mlp_mult: 2,
        optimizer: seqmix::harness::OptimizerKind::Sgd,
        lr: 1e-2,
        warmup_steps: 0,
        total_steps: 1,
        weight_decay: 0.0,
        seed: 13,
        batch: 2,
        eval_every: 0,
        eval_sequences: 8,
    };
    let task = SyntheticTask {
        kind: TaskKind::AssocRecall,
        vocab: 8,
        seq_len: 6,
        n_pairs: 1,
        seed: 17,
    };
    let batch = generate_batch(&task, 2).unwrap();
    let mut model = TinyModel::init(cfg).unwrap();
    let (_, grads) = model.loss_and_grads(&batch).unwrap();
    let step = 1e-5;
    let mut worst = 0.0f64;
    // every entry of the embedding, attention projections, and MLP weights
    let mut probe = |get: &mut dyn FnMut(&mut TinyModel) -> &mut DenseTensor, g: &DenseTensor| {
        for e in 0..g.len() {
            get(&mut model).data_mut()[e] += step;
            let (lp, _) = model.loss_and_grads(&batch).unwrap();
            get(&mut model).data_mut()[e] -= 2.0 * step;
            let (lm, _) = model.loss_and_grads(&batch).unwrap();
            get(&mut model).data_mut()[e] += step;
            let fd = (lp - lm) / (2.0 * step);
            let an = g.data()[e];
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1.0);
            worst = worst.max(rel);
        }
    };
    probe(&mut |m| &mut m.embed, &grads.embed);
    probe(&mut |m| &mut m.layers[0].block.w_qkv, &grads.layers[0].block.w_qkv);
    probe(
        &mut |m| m.layers[0].block.w_a.as_mut().unwrap(),
        grads.layers[0].block.w_a.as_ref().unwrap(),
    );
    probe(&mut |m| &mut m.layers[0].w1, &grads.layers[0].w1);
    probe(&mut |m| &mut m.layers[0].ln1, &grads.layers[0].ln1);
    probe(&mut |m| &mut m.final_gain, &grads.final_gain);
    assert!(worst < 1e-5, "miniature model FD: worst rel deviation {worst}");

    // convergence at the documented config (mirrors `seqmix train`)
    let mut cfg = TinyModelConfig::recall_default(VariantConfig::preset(Preset::TwoMamba));
    cfg.seed = 1;
    let task = SyntheticTask {
        kind: TaskKind::AssocRecall,
        vocab: cfg.vocab,
        seq_len: cfg.seq_len,
        n_pairs: 2,
        seed: 1001,
    };
    let (_, record) = train(&cfg, &task).unwrap();
    assert!(!record.diverged, "training diverged");
    assert!(
        record.final_acc > 0.9,
        "associative recall accuracy {} after {} steps",
        record.final_acc,
        cfg.total_steps
    );
    println!(
        "PASS: criterion 10 — harness: miniature FD worst {worst:.2e} < 1e-5; recall accuracy {:.3} > 0.9 within 2k steps",
        record.final_acc
    );
}
