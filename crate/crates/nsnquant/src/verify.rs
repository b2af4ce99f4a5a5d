//! Invariant registry behind the `verify` subcommand. Each check runs a
//! brute-force or paired comparison against the library and reports a
//! pass/fail line.

use std::cell::OnceCell;
use std::time::Instant;

use anyhow::ensure;
use nsnquant_core::attention::{reference_attention, rope, scores_quantized, unrope_in_place};
use nsnquant_core::codebook::{
    finetune, kmeans_init, mean_quantization_cosine, synthetic_samples, tuning_step, BitMode,
    Codebook, SUB_DIM,
};
use nsnquant_core::dq::rtn4_group;
use nsnquant_core::hadamard::{apply_rows, fwht, fwht_in_place, Rotation};
use nsnquant_core::kvcache::{CacheConfig, KvCacheState};
use nsnquant_core::math::{self, dot, norm, softmax_scaled};
use nsnquant_core::nsn::{nsn_forward, nsn_restore};
use nsnquant_core::stats::{channel_kl, mean_abs_correlation, offdiag_frobenius, DEFAULT_KL_BINS};
use nsnquant_core::tensor::{col_means, sample_standard_normal};
use nsnquant_core::vq::{
    adjust_scale, bit_ledger, quantize_chunk, QuantConfig, ScalarPrecision, ScaleStrategy,
};
use nsnquant_core::{SeededRng, Tensor2D};

use crate::config::bit_mode_name;
use crate::formats::{encode_chunk, CHUNK_HEADER_BYTES};
use crate::report::{CheckResult, VerifyReport};
use crate::simulate::{final_comparison, synthetic_workload};

/// Upper bound on the d=4096 / d=128 per-vector transform time ratio.
pub const RUNTIME_RATIO_LIMIT: f64 = 48.0;

pub struct Context {
    pub codebook: Codebook,
    pub seed: u64,
    quick: [OnceCell<Codebook>; 2],
}

impl Context {
    pub fn new(codebook: Codebook, seed: u64) -> Self {
        Self {
            codebook,
            seed,
            quick: [OnceCell::new(), OnceCell::new()],
        }
    }

    fn rng(&self, stream: u64) -> SeededRng {
        SeededRng::new(self.seed).split(stream)
    }

    /// The loaded codebook when its mode matches, else a small K-Means
    /// codebook for the other mode.
    pub fn codebook_for(&self, mode: BitMode) -> &Codebook {
        if self.codebook.bit_mode() == mode {
            return &self.codebook;
        }
        let slot = &self.quick[usize::from(mode == BitMode::TwoBit)];
        slot.get_or_init(|| {
            kmeans_init(&mut SeededRng::new(self.seed).split(99), mode, 16384, 20)
                .expect("valid k-means parameters")
        })
    }
}

type Outcome = anyhow::Result<String>;

pub struct Check {
    pub id: &'static str,
    pub module: &'static str,
    run: fn(&Context) -> Outcome,
}

macro_rules! checks {
    ($($module:literal => [$($id:literal : $f:ident),* $(,)?]),* $(,)?) => {
        vec![$($(Check { id: $id, module: $module, run: $f }),*),*]
    };
}

pub fn registry() -> Vec<Check> {
    checks![
        "hadamard" => [
            "hadamard.norm_preservation": hadamard_norm,
            "hadamard.involution": hadamard_involution,
            "hadamard.naive_oracle": hadamard_naive,
            "hadamard.runtime_scaling": hadamard_runtime,
        ],
        "nsn" => [
            "nsn.restore_roundtrip": nsn_roundtrip,
            "nsn.row_norm": nsn_row_norm,
            "nsn.exact_centering": nsn_exact_centering,
            "nsn.near_centering": nsn_near_centering,
            "nsn.outlier_suppression": nsn_outlier,
        ],
        "codebook" => [
            "codebook.match_optimality": codebook_match,
            "codebook.fold_correctness": codebook_fold,
            "codebook.tuning_monotonicity": codebook_tuning,
            "codebook.data_independence": codebook_data_independence,
        ],
        "vq" => [
            "vq.s3_orthogonality": vq_s3_orthogonality,
            "vq.s3_parallel": vq_s3_parallel,
            "vq.s1_optimality": vq_s1_optimality,
            "vq.scale_invariance": vq_scale_invariance,
            "vq.dq_half_step": vq_dq_half_step,
            "vq.ledger_consistency": vq_ledger_consistency,
        ],
        "kvcache" => [
            "kvcache.chunking": kv_chunking,
            "kvcache.prefill_decode_equivalence": kv_equivalence,
            "kvcache.monotone_fidelity": kv_monotone,
        ],
        "attention" => [
            "attention.softmax_rows": attn_softmax,
            "attention.byproduct_identity": attn_identity,
            "attention.rope_on_shift": attn_rope_shift,
            "attention.bitmode_monotonicity": attn_bitmode,
        ],
        "stats" => [
            "stats.kl_nonnegative": stats_kl,
            "stats.oracles": stats_oracles,
            "stats.pipeline_improvement": stats_pipeline,
        ],
    ]
}

pub fn run_all(ctx: &Context) -> VerifyReport {
    let checks: Vec<CheckResult> = registry()
        .into_iter()
        .map(|c| {
            let (passed, detail) = match (c.run)(ctx) {
                Ok(d) => (true, d),
                Err(e) => (false, format!("{e:#}")),
            };
            CheckResult {
                id: c.id,
                module: c.module,
                passed,
                detail,
            }
        })
        .collect();
    let passed = checks.iter().filter(|c| c.passed).count();
    VerifyReport {
        codebook_bit_mode: bit_mode_name(ctx.codebook.bit_mode()).into(),
        codebook_seed: ctx.codebook.seed(),
        seed: ctx.seed,
        passed,
        failed: checks.len() - passed,
        checks,
    }
}

fn random_vec(rng: &mut SeededRng, d: usize) -> Vec<f32> {
    let mut v = vec![0.0; d];
    rng.fill_normal(&mut v);
    v
}

// ---- hadamard ----

fn hadamard_norm(ctx: &Context) -> Outcome {
    let mut rng = ctx.rng(1);
    let mut worst = 0.0f32;
    for i in 0..2000 {
        let d = 1usize << (1 + i % 11);
        let x = random_vec(&mut rng, d);
        let y = fwht(&x)?;
        worst = worst.max((norm(&y) - norm(&x)).abs() / norm(&x));
    }
    ensure!(worst <= 1e-5, "relative norm error {worst:e}");
    Ok(format!("max relative norm error {worst:.2e}"))
}

fn hadamard_involution(ctx: &Context) -> Outcome {
    let mut rng = ctx.rng(2);
    let mut worst = 0.0f32;
    for i in 0..2000 {
        let d = 1usize << (1 + i % 11);
        let x = random_vec(&mut rng, d);
        let y = fwht(&fwht(&x)?)?;
        let err = x
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        worst = worst.max(err / norm(&x).max(1.0));
    }
    ensure!(worst <= 1e-5, "involution error {worst:e}");
    Ok(format!("max error {worst:.2e}"))
}

/// Entry `(i, j)` of the Sylvester matrix is `(-1)^popcount(i & j)`.
fn sylvester_product(x: &[f32]) -> Vec<f64> {
    let d = x.len();
    let s = 1.0 / (d as f64).sqrt();
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    if (i & j).count_ones() % 2 == 0 {
                        x[j] as f64
                    } else {
                        -(x[j] as f64)
                    }
                })
                .sum::<f64>()
                * s
        })
        .collect()
}

fn hadamard_naive(ctx: &Context) -> Outcome {
    let mut rng = ctx.rng(3);
    let mut worst = 0.0f64;
    for log_d in 1..=7 {
        for _ in 0..20 {
            let x = random_vec(&mut rng, 1 << log_d);
            let fast = fwht(&x)?;
            let slow = sylvester_product(&x);
            for (a, b) in fast.iter().zip(&slow) {
                worst = worst.max((*a as f64 - b).abs());
            }
        }
    }
    ensure!(worst <= 1e-5, "max deviation {worst:e}");
    Ok(format!("max deviation {worst:.2e} for d = 2..128"))
}

/// Best-of-several per-vector time for `n` transforms of size `d`.
fn time_fwht(d: usize, n: usize, rng: &mut SeededRng) -> anyhow::Result<f64> {
    let mut data = random_vec(rng, d * n);
    let mut best = f64::INFINITY;
    for _ in 0..7 {
        let t = Instant::now();
        for row in data.chunks_exact_mut(d) {
            fwht_in_place(row)?;
        }
        best = best.min(t.elapsed().as_secs_f64() / n as f64);
        std::hint::black_box(&data);
    }
    Ok(best)
}

/// Per-vector cost ratio between d = 4096 and d = 128 at equal total
/// element counts.
pub fn runtime_ratio(rng: &mut SeededRng) -> anyhow::Result<f64> {
    let small = time_fwht(128, 8192, rng)?;
    let large = time_fwht(4096, 256, rng)?;
    Ok(large / small)
}

fn hadamard_runtime(ctx: &Context) -> Outcome {
    let ratio = runtime_ratio(&mut ctx.rng(4))?;
    ensure!(
        ratio <= RUNTIME_RATIO_LIMIT,
        "time(d=4096)/time(d=128) = {ratio:.1} exceeds {RUNTIME_RATIO_LIMIT}"
    );
    Ok(format!("time(d=4096)/time(d=128) = {ratio:.1}"))
}

// ---- nsn ----

fn heavy_chunk(rng: &mut SeededRng, n: usize, d: usize) -> Tensor2D {
    let mut t = sample_standard_normal(rng, n, d);
    for row in t.as_mut_slice().chunks_exact_mut(d) {
        row[1] = row[1] * 10.0 + 3.0;
        row[d / 2] += 5.0;
    }
    t
}

fn nsn_roundtrip(ctx: &Context) -> Outcome {
    let mut rng = ctx.rng(5);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let v = heavy_chunk(&mut rng, 64, 128);
        let out = nsn_forward(&v)?;
        let back = nsn_restore(&out.normalized, &out.byproducts)?;
        let inf = v.as_slice().iter().fold(0.0f32, |m, x| m.max(x.abs()));
        let err = v
            .as_slice()
            .iter()
            .zip(back.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        worst = worst.max(err / inf);
    }
    ensure!(worst <= 1e-5, "relative restore error {worst:e}");
    Ok(format!("max relative error {worst:.2e}"))
}

fn nsn_row_norm(ctx: &Context) -> Outcome {
    let mut rng = ctx.rng(6);
    let sd = (128f32).sqrt();
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let out = nsn_forward(&heavy_chunk(&mut rng, 64, 128))?;
        for row in out.normalized.iter_rows() {
            worst = worst.max((norm(row) - sd).abs() / sd);
        }
    }
    ensure!(worst <= 1e-4, "row norm deviation {worst:e}·√d");
    Ok(format!("max deviation {worst:.2e}·√d"))
}

fn nsn_exact_centering(ctx: &Context) -> Outcome {
    let mut rng = ctx.rng(7);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let out = nsn_forward(&heavy_chunk(&mut rng, 64, 128))?;
        // v_ns = s2 · v_nsn.
        let mut v_ns = out.normalized.clone();
        for (t, &s2) in out.byproducts.s2.iter().enumerate() {
            math::scale_in_place(v_ns.row_mut(t), s2);
        }
        worst = worst.max(col_means(&v_ns).iter().fold(0.0, |m, x| m.max(x.abs())));
    }
    ensure!(worst <= 1e-5, "column mean {worst:e}");
    Ok(format!("max |column mean| {worst:.2e}"))
}

fn nsn_near_centering(ctx: &Context) -> Outcome {
    let mut rng = ctx.rng(8);
    let mut worst = 0.0f32;
    for _ in 0..50 {
        let out = nsn_forward(&sample_standard_normal(&mut rng, 64, 128))?;
        let eps = col_means(&out.normalized)
            .iter()
            .map(|m| m * m)
            .sum::<f32>()
            / 128.0;
        worst = worst.max(eps);
    }
    ensure!(worst <= 0.01, "epsilon {worst}");
    Ok(format!("max epsilon {worst:.2e}"))
}

fn nsn_outlier(ctx: &Context) -> Outcome {
    let mut rng = ctx.rng(9);
    let mut v = sample_standard_normal(&mut rng, 64, 128);
    math::scale_in_place(v.row_mut(17), 100.0);
    let out = nsn_forward(&v)?;
    let n = norm(out.normalized.row(17));
    let sd = (128f32).sqrt();
    ensure!((n - sd).abs() <= 1e-4 * sd, "outlier row norm {n}");
    Ok(format!("outlier row norm {n:.5} (√d = {sd:.5})"))
}

// ---- codebook ----

/// Exhaustive best cosine over all entries and, for two-bit codebooks, all
/// 256 sign patterns of each entry.
fn brute_best(cb: &Codebook, v: &[f32]) -> (usize, u8, f64) {
    let mut best = (0usize, 0u8, f64::NEG_INFINITY);
    let patterns: u16 = if cb.bit_mode().folds_signs() { 256 } else { 1 };
    for (k, e) in cb.active_entries().iter().enumerate() {
        let en: f64 = e.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if en == 0.0 {
            continue;
        }
        for s in 0..patterns {
            let score: f64 = (0..SUB_DIM)
                .map(|i| {
                    let x = if s & (1 << i) != 0 { -e[i] } else { e[i] };
                    x as f64 * v[i] as f64
                })
                .sum::<f64>()
                / en;
            if score > best.2 {
                best = (k, s as u8, score);
            }
        }
    }
    best
}

fn codebook_match(ctx: &Context) -> Outcome {
    let mut rng = ctx.rng(10);
    let mut ties = 0;
    for mode in [BitMode::OneBit, BitMode::TwoBit] {
        let cb = ctx.codebook_for(mode);
        let n = if mode.folds_signs() { 300 } else { 3000 };
        for _ in 0..n {
            let v = random_vec(&mut rng, SUB_DIM);
            let m = cb.match_subvector(&v)?;
            let (k, _, best) = brute_best(cb, &v);
            if m.index as usize != k {
                let e = cb.lookup(m.index as usize, m.signs)?;
                let got = dot(&v, &e) as f64 / norm(&e) as f64;
                ensure!(
                    best - got <= 1e-6 * best.abs().max(1.0),
                    "{mode:?}: match {} vs exhaustive {k}",
                    m.index
                );
                ties += 1;
            }
        }
    }
    Ok(format!("3300 vectors, {ties} float-level ties"))
}

fn codebook_fold(ctx: &Context) -> Outcome {
    let cb = ctx.codebook_for(BitMode::TwoBit);
    let mut rng = ctx.rng(11);
    for _ in 0..5000 {
        let v = random_vec(&mut rng, SUB_DIM);
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        let a = cb.quantize_subvector(&v)?;
        let b = cb.quantize_subvector(&neg)?;
        ensure!(
            a.iter().zip(&b).all(|(x, y)| *x == -*y),
            "fold mismatch for {v:?}"
        );
    }
    Ok("5000 vectors".into())
}

fn codebook_tuning(ctx: &Context) -> Outcome {
    let mut rng = ctx.rng(12);
    for mode in [BitMode::OneBit, BitMode::TwoBit] {
        let mut cb = ctx.codebook_for(mode).clone();
        for step in 0..10 {
            let batch = synthetic_samples(&mut rng, 4096, mode.folds_signs());
            let (next, before) = tuning_step(&cb, &batch, 0.5)?;
            let after = mean_quantization_cosine(&next, &batch);
            ensure!(
                after >= before - 1e-6,
                "{mode:?} step {step}: batch cossim {before} -> {after}"
            );
            cb = next;
        }
        let (_, report) = finetune(ctx.codebook_for(mode), &mut rng, 2048, 100, 0.5)?;
        let mut best = f32::NEG_INFINITY;
        for &(_, c) in &report.checkpoints {
            best = best.max(c);
        }
        ensure!(
            report.final_mean_cossim >= report.initial_mean_cossim
                && report.final_mean_cossim == best,
            "{mode:?}: returned {} vs best checkpoint {best}",
            report.final_mean_cossim
        );
    }
    Ok("per-step batch objective non-decreasing; best checkpoint returned".into())
}

fn codebook_data_independence(ctx: &Context) -> Outcome {
    let build = || {
        kmeans_init(
            &mut SeededRng::new(ctx.seed).split(13),
            BitMode::TwoBit,
            2048,
            5,
        )
    };
    ensure!(
        build()? == build()?,
        "same seed produced different codebooks"
    );
    Ok("codebook is a function of (mode, seed, hyperparameters)".into())
}

// ---- vq ----

fn quantized_pairs(
    ctx: &Context,
    stream: u64,
    n: usize,
) -> anyhow::Result<Vec<(Vec<f32>, Vec<f32>)>> {
    let mut rng = ctx.rng(stream);
    let cb = &ctx.codebook;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let chunk = sample_standard_normal(&mut rng, 64, 128);
        let nsn = nsn_forward(&chunk)?;
        for row in nsn.normalized.iter_rows() {
            let mut q = Vec::with_capacity(128);
            for sub in row.chunks_exact(SUB_DIM) {
                q.extend_from_slice(&cb.quantize_subvector(sub)?);
            }
            out.push((row.to_vec(), q));
        }
    }
    out.truncate(n);
    Ok(out)
}

fn vq_s3_orthogonality(ctx: &Context) -> Outcome {
    let mut worst = 0.0f64;
    for (v, q) in quantized_pairs(ctx, 14, 10_000)? {
        let f = adjust_scale(&v, &q, ScaleStrategy::ParallelPreserving)?;
        let diff: Vec<f64> = q.iter().zip(&v).map(|(a, b)| (f * a - b) as f64).collect();
        let along: f64 = diff.iter().zip(&v).map(|(a, b)| a * *b as f64).sum();
        let dn = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
        let vn = norm(&v) as f64;
        worst = worst.max(along.abs() / (vn * dn));
    }
    ensure!(worst <= 1e-4, "|(v_Q'-v)·v| / (‖v‖‖v_Q'-v‖) = {worst:e}");
    Ok(format!("max normalized projection {worst:.2e}"))
}

fn vq_s3_parallel(ctx: &Context) -> Outcome {
    let mut worst = 0.0f64;
    for (v, q) in quantized_pairs(ctx, 15, 10_000)? {
        let f = adjust_scale(&v, &q, ScaleStrategy::ParallelPreserving)? as f64;
        let num: f64 = v
            .iter()
            .zip(&q)
            .map(|(a, b)| *a as f64 * *b as f64 * f)
            .sum();
        let den: f64 = v.iter().map(|a| (*a as f64).powi(2)).sum();
        worst = worst.max((num / den - 1.0).abs());
    }
    ensure!(worst <= 1e-5, "parallel component off by {worst:e}");
    Ok(format!("max |ratio - 1| {worst:.2e}"))
}

fn vq_s1_optimality(ctx: &Context) -> Outcome {
    for (v, q) in quantized_pairs(ctx, 16, 500)? {
        let f = adjust_scale(&v, &q, ScaleStrategy::MinL2)?;
        let err = |t: f32| -> f64 {
            q.iter()
                .zip(&v)
                .map(|(a, b)| ((t * a - b) as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let at_f = err(f);
        for k in -40..=40 {
            let t = f * (1.0 + k as f32 * 0.01) + k as f32 * 1e-3;
            ensure!(
                err(t) >= at_f - 1e-4 * at_f.max(1.0),
                "t = {t} beats the L2 factor {f}"
            );
        }
    }
    Ok("500 tokens × 81 grid points".into())
}

fn vq_scale_invariance(ctx: &Context) -> Outcome {
    let mut rng = ctx.rng(17);
    for _ in 0..5000 {
        let v = random_vec(&mut rng, SUB_DIM);
        let a = 0.01 + 100.0 * rng.uniform();
        let scaled: Vec<f32> = v.iter().map(|x| x * a).collect();
        ensure!(
            ctx.codebook.match_subvector(&v)? == ctx.codebook.match_subvector(&scaled)?,
            "index changed under scale {a}"
        );
    }
    Ok("5000 vectors".into())
}

fn vq_dq_half_step(ctx: &Context) -> Outcome {
    let mut rng = ctx.rng(18);
    for _ in 0..200 {
        let n = 1 + rng.below(200);
        let group = 1 + rng.below(64);
        let mut x = random_vec(&mut rng, n);
        math::scale_in_place(&mut x, 10.0 * rng.uniform());
        let q = rtn4_group(&x, group)?;
        let back = q.dequantize();
        for (i, (a, b)) in x.iter().zip(&back).enumerate() {
            let half = q.params()[i / group].scale / 2.0;
            ensure!(
                (a - b).abs() <= half * (1.0 + 1e-5) + 1e-6,
                "value {a} -> {b}, half step {half}"
            );
        }
    }
    let constant = rtn4_group(&[0.37; 40], 32)?;
    ensure!(
        constant.dequantize() == vec![0.37; 40],
        "constant group not exact"
    );
    Ok("200 random groups within half a step; constant groups exact".into())
}

fn vq_ledger_consistency(ctx: &Context) -> Outcome {
    let mut rng = ctx.rng(19);
    let mut lines = Vec::new();
    for mode in [BitMode::OneBit, BitMode::TwoBit] {
        let cb = ctx.codebook_for(mode);
        let chunk = sample_standard_normal(&mut rng, 64, 128);
        let nsn = nsn_forward(&chunk)?;
        let qc = quantize_chunk(
            &nsn.normalized,
            &nsn.byproducts,
            cb,
            &QuantConfig::default(),
        )?;
        let ledger = bit_ledger(&qc, 64);
        let wire = encode_chunk(&qc, 64)?;
        let counted = 8 * (wire.len() - CHUNK_HEADER_BYTES) as u64;
        ensure!(
            counted.abs_diff(ledger.total_bits()) <= 1,
            "{mode:?}: serialized {counted} bits, ledger {}",
            ledger.total_bits()
        );
        lines.push(format!(
            "{}: {} bits, {:.3} bits/value",
            bit_mode_name(mode),
            counted,
            ledger.avg_bits_per_value
        ));
    }
    Ok(lines.join("; "))
}

// ---- kvcache ----

fn small_cache(d: usize, r: usize, mode: BitMode) -> CacheConfig {
    CacheConfig {
        d,
        residual_size: r,
        bit_mode: mode,
        ..CacheConfig::default()
    }
}

fn kv_chunking(ctx: &Context) -> Outcome {
    let mut rng = ctx.rng(20);
    let cb = &ctx.codebook;
    for _ in 0..5 {
        let r = 1 + rng.below(40);
        let mut state = KvCacheState::new(small_cache(32, r, cb.bit_mode()))?;
        let mut seen = 0;
        while seen < 300 {
            let n = 1 + rng.below(50);
            let k = sample_standard_normal(&mut rng, n, 32);
            let v = sample_standard_normal(&mut rng, n, 32);
            state.append(&k, &v, cb, cb)?;
            seen += n;
            ensure!(
                state.n_quantized() == seen / r * r && state.n_residual() == seen % r,
                "after {seen} tokens with R = {r}"
            );
        }
    }
    Ok("randomized schedules, R in 1..=40".into())
}

fn kv_equivalence(ctx: &Context) -> Outcome {
    let mut rng = ctx.rng(21);
    let cb = &ctx.codebook;
    let k = sample_standard_normal(&mut rng, 512, 128);
    let v = sample_standard_normal(&mut rng, 512, 128);
    let mut whole = KvCacheState::new(small_cache(128, 64, cb.bit_mode()))?;
    whole.append(&k, &v, cb, cb)?;
    for _ in 0..10 {
        let mut state = KvCacheState::new(small_cache(128, 64, cb.bit_mode()))?;
        let mut at = 0;
        while at < 512 {
            let end = (at + 1 + rng.below(100)).min(512);
            state.append(&k.slice_rows(at, end), &v.slice_rows(at, end), cb, cb)?;
            at = end;
        }
        ensure!(state == whole, "partitioned stream diverged");
    }
    Ok("10 random partitions of 512 tokens".into())
}

/// Mean output relative error at residual sizes 32, 64, 128 over fixed
/// synthetic workloads of 383 tokens.
pub fn residual_sweep(cb: &Codebook, seed: u64, workloads: usize) -> anyhow::Result<[f64; 3]> {
    let mut errs = [0.0f64; 3];
    let root = SeededRng::new(seed);
    for i in 0..workloads {
        let w = synthetic_workload(&mut root.split(i as u64), 383, 128);
        for (slot, r) in [32usize, 64, 128].into_iter().enumerate() {
            let cmp = final_comparison(&w, small_cache(128, r, cb.bit_mode()), cb, cb)?;
            let (a, b) = &cmp.outputs;
            let num: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
            let den: f64 = b.iter().map(|y| (*y as f64).powi(2)).sum();
            errs[slot] += (num / den).sqrt() / workloads as f64;
        }
    }
    Ok(errs)
}

fn kv_monotone(ctx: &Context) -> Outcome {
    let e = residual_sweep(&ctx.codebook, ctx.seed, 20)?;
    ensure!(
        e[0] >= e[1] && e[1] >= e[2],
        "output error by R=32/64/128: {e:?}"
    );
    Ok(format!(
        "output error R=32 {:.4}, R=64 {:.4}, R=128 {:.4}",
        e[0], e[1], e[2]
    ))
}

// ---- attention ----

fn lossless_config(d: usize, r: usize) -> CacheConfig {
    CacheConfig {
        d,
        residual_size: r,
        double_quant: false,
        precision: ScalarPrecision::Single,
        bypass_vq: true,
        ..CacheConfig::default()
    }
}

fn attn_softmax(ctx: &Context) -> Outcome {
    let mut rng = ctx.rng(22);
    let w = synthetic_workload(&mut rng, 200, 64);
    let rope_params = lossless_config(64, 64).rope();
    let r = reference_attention(&w.queries, &w.keys, &w.values, &rope_params)?;
    let mut worst = 0.0f32;
    for row in r.weights.iter_rows() {
        ensure!(row.iter().all(|&x| x >= 0.0), "negative weight");
        worst = worst.max((row.iter().sum::<f32>() - 1.0).abs());
    }
    let cmp = final_comparison(
        &w,
        small_cache(64, 32, ctx.codebook.bit_mode()),
        &ctx.codebook,
        &ctx.codebook,
    )?;
    let qw = softmax_scaled(&cmp.scores.0, 1.0 / 8.0);
    worst = worst.max((qw.iter().sum::<f32>() - 1.0).abs());
    ensure!(worst <= 1e-5, "row sum off by {worst:e}");
    Ok(format!("max |row sum - 1| {worst:.2e}"))
}

fn attn_identity(ctx: &Context) -> Outcome {
    let mut rng = ctx.rng(23);
    let mut worst = 0.0f32;
    for _ in 0..5 {
        let w = synthetic_workload(&mut rng, 256, 128);
        let cmp = final_comparison(&w, lossless_config(128, 64), &ctx.codebook, &ctx.codebook)?;
        for (a, b) in cmp.scores.0.iter().zip(&cmp.scores.1) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    ensure!(worst <= 1e-4, "score deviation {worst:e}");
    Ok(format!("max relative score deviation {worst:.2e}"))
}

fn attn_rope_shift(ctx: &Context) -> Outcome {
    let mut rng = ctx.rng(24);
    let cfg = lossless_config(64, 32);
    let rope_params = cfg.rope();
    let cb = &ctx.codebook;
    let w = synthetic_workload(&mut rng, 100, 64);
    let mut state = KvCacheState::new(cfg)?;
    state.append(&w.keys, &apply_rows(&w.values, Rotation::Plain)?, cb, cb)?;
    let q = random_vec(&mut rng, 64);
    let got = scores_quantized(&q, &state, cb)?;
    let mut worst = 0.0f32;
    let mut pos = 0;
    for chunk in state.key_chunks() {
        let s1 = chunk.s1().dequantize();
        let o = chunk.shift().dequantize();
        let stored = chunk.scaled_reconstruction(cb)?;
        for t in 0..chunk.n_tokens() {
            let mut v = stored.row(t).to_vec();
            fwht_in_place(&mut v)?;
            unrope_in_place(&mut v, pos, &rope_params)?;
            let key: Vec<f32> = v.iter().zip(&o).map(|(x, m)| s1[t] * (x + m)).collect();
            let expect = dot(&q, &rope(&key, pos, &rope_params)?);
            worst = worst.max((got[pos] - expect).abs() / expect.abs().max(1.0));
            pos += 1;
        }
    }
    ensure!(pos > 0, "no quantized keys");
    ensure!(worst <= 1e-4, "deviation {worst:e}");
    Ok(format!("{pos} keys, max relative deviation {worst:.2e}"))
}

/// Mean final-query output cosine similarity for one-bit and two-bit caches
/// over the same synthetic workloads.
pub fn bitmode_pair(
    cb1: &Codebook,
    cb2: &Codebook,
    seed: u64,
    trials: usize,
    tokens: usize,
) -> anyhow::Result<(f64, f64)> {
    let (mut one, mut two) = (0.0f64, 0.0f64);
    let root = SeededRng::new(seed);
    for i in 0..trials {
        let w = synthetic_workload(&mut root.split(i as u64), tokens, 128);
        one += final_comparison(&w, small_cache(128, 64, BitMode::OneBit), cb1, cb1)?
            .output_cossim() as f64;
        two += final_comparison(&w, small_cache(128, 64, BitMode::TwoBit), cb2, cb2)?
            .output_cossim() as f64;
    }
    Ok((one / trials as f64, two / trials as f64))
}

fn attn_bitmode(ctx: &Context) -> Outcome {
    let (one, two) = bitmode_pair(
        ctx.codebook_for(BitMode::OneBit),
        ctx.codebook_for(BitMode::TwoBit),
        ctx.seed,
        100,
        256,
    )?;
    ensure!(two > one, "2b {two} vs 1b {one}");
    Ok(format!("mean output cossim 2b {two:.5} > 1b {one:.5}"))
}

// ---- stats ----

fn stats_kl(ctx: &Context) -> Outcome {
    let mut rng = ctx.rng(25);
    let mut inputs = vec![
        sample_standard_normal(&mut rng, 500, 16),
        Tensor2D::new(200, 2, vec![0.0; 400])?,
        Tensor2D::new(200, 1, vec![1e9; 200])?,
    ];
    let mut skew = sample_standard_normal(&mut rng, 300, 8);
    skew.as_mut_slice().iter_mut().for_each(|x| *x = x.exp());
    inputs.push(skew);
    for t in &inputs {
        let r = channel_kl(t, DEFAULT_KL_BINS)?;
        ensure!(
            r.per_channel_kl.iter().all(|k| k.is_finite() && *k >= 0.0),
            "non-finite or negative KL"
        );
    }
    Ok(format!("{} inputs, all KL finite and ≥ 0", inputs.len()))
}

fn stats_oracles(ctx: &Context) -> Outcome {
    let mut rng = ctx.rng(26);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let t = sample_standard_normal(&mut rng, 64, 32);
        let cov = |i: usize, j: usize| {
            let mi = (0..64).map(|r| t.get(r, i) as f64).sum::<f64>() / 64.0;
            let mj = (0..64).map(|r| t.get(r, j) as f64).sum::<f64>() / 64.0;
            (0..64)
                .map(|r| (t.get(r, i) as f64 - mi) * (t.get(r, j) as f64 - mj))
                .sum::<f64>()
                / 64.0
        };
        let (mut fro, mut mac, mut pairs) = (0.0, 0.0, 0.0);
        for i in 0..32 {
            for j in 0..32 {
                if i == j {
                    continue;
                }
                let c = cov(i, j);
                fro += c * c;
                if i < j && i / 8 == j / 8 {
                    mac += (c / (cov(i, i) * cov(j, j)).sqrt()).abs();
                    pairs += 1.0;
                }
            }
        }
        worst = worst.max((offdiag_frobenius(&t)? - fro.sqrt()).abs());
        worst = worst.max((mean_abs_correlation(&t, 8)? - mac / pairs).abs());
    }
    ensure!(worst <= 1e-6, "deviation {worst:e}");
    Ok(format!("max deviation {worst:.2e}"))
}

/// Mean KL after `normalize → HT` versus `NSN (per chunk) → HT`, plus the
/// KL of true Gaussian samples of the same size.
pub fn pipeline_kls(seed: u64) -> anyhow::Result<(f64, f64, f64)> {
    let root = SeededRng::new(seed);
    let w = synthetic_workload(&mut root.split(0), 4096, 128);
    let d = 128;
    let mut n_ht = Tensor2D::zeros(0, d);
    let mut nsn_ht = Tensor2D::zeros(0, d);
    for c in 0..4096 / 64 {
        let chunk = w.keys.slice_rows(c * 64, c * 64 + 64);
        let mut normalized = chunk.clone();
        for row in normalized.as_mut_slice().chunks_exact_mut(d) {
            let s = norm(row) / (d as f32).sqrt();
            math::scale_in_place(row, 1.0 / s);
        }
        n_ht.append_rows(&apply_rows(&normalized, Rotation::Plain)?)?;
        nsn_ht.append_rows(&apply_rows(
            &nsn_forward(&chunk)?.normalized,
            Rotation::Plain,
        )?)?;
    }
    let oracle = channel_kl(
        &sample_standard_normal(&mut root.split(1), 4096, d),
        DEFAULT_KL_BINS,
    )?
    .mean_kl;
    Ok((
        channel_kl(&n_ht, DEFAULT_KL_BINS)?.mean_kl,
        channel_kl(&nsn_ht, DEFAULT_KL_BINS)?.mean_kl,
        oracle,
    ))
}

fn stats_pipeline(ctx: &Context) -> Outcome {
    let (n, nsn, oracle) = pipeline_kls(ctx.seed)?;
    ensure!(nsn <= n, "NSN+HT {nsn} above N+HT {n}");
    ensure!(nsn <= 3.0 * oracle, "NSN+HT {nsn} above 3x oracle {oracle}");
    Ok(format!("N+HT {n:.4}, NSN+HT {nsn:.4}, oracle {oracle:.4}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nsnquant_core::codebook::N_ENTRIES;

    #[test]
    fn brute_matches_entry_count() {
        let cb = kmeans_init(&mut SeededRng::new(1), BitMode::OneBit, 1024, 2).unwrap();
        assert_eq!(cb.active_entries().len(), N_ENTRIES);
        let v = [1.0f32, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let (k, _, _) = brute_best(&cb, &v);
        assert_eq!(cb.match_subvector(&v).unwrap().index as usize, k);
    }

    #[test]
    fn sylvester_matches_small_case() {
        let y = sylvester_product(&[1.0, 0.0]);
        let s = 1.0 / 2f64.sqrt();
        assert!((y[0] - s).abs() < 1e-12 && (y[1] - s).abs() < 1e-12);
    }
}
