//! Prefill + decode simulation comparing the quantized cache against the
//! full-precision reference, one head at a time.

use std::io::Write;

use anyhow::{ensure, Context};
use nsnquant_core::attention::{output_quantized, reference_scores, rope, scores_quantized};
use nsnquant_core::codebook::Codebook;
use nsnquant_core::hadamard::{apply_rows, Rotation};
use nsnquant_core::kvcache::{CacheConfig, KvCacheState};
use nsnquant_core::math::{cosine, softmax_scaled, sqrt};
use nsnquant_core::vq::bit_ledger;
use nsnquant_core::{SeededRng, Tensor2D};
use serde::Serialize;

/// Raw queries (RoPE is applied at each query's position), pre-RoPE keys
/// and values in the model basis; one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub queries: Tensor2D,
    pub keys: Tensor2D,
    pub values: Tensor2D,
}

impl Workload {
    pub fn new(queries: Tensor2D, keys: Tensor2D, values: Tensor2D) -> anyhow::Result<Self> {
        ensure!(
            queries.rows() == keys.rows()
                && keys.rows() == values.rows()
                && queries.cols() == keys.cols()
                && keys.cols() == values.cols(),
            "Q, K and V must have the same shape"
        );
        Ok(Self {
            queries,
            keys,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.rows() == 0
    }
}

/// Activations with per-channel scale outliers, nonzero channel means and
/// per-token magnitude spread.
pub fn synthetic_workload(rng: &mut SeededRng, n_tokens: usize, d: usize) -> Workload {
    let mut channel = |outlier_scale: f32, mean_scale: f32| -> (Vec<f32>, Vec<f32>) {
        let scales = (0..d)
            .map(|_| {
                if rng.below(16) == 0 {
                    outlier_scale * (0.5 + rng.uniform())
                } else {
                    1.0
                }
            })
            .collect();
        let means = (0..d).map(|_| mean_scale * rng.normal()).collect();
        (scales, means)
    };
    let (k_scale, k_mean) = channel(8.0, 1.0);
    let (v_scale, v_mean) = channel(3.0, 0.3);
    let mut draw = |scales: &[f32], means: &[f32]| {
        let mut t = Tensor2D::zeros(n_tokens, d);
        for r in 0..n_tokens {
            let token = (0.3 * rng.normal()).exp();
            for (c, x) in t.row_mut(r).iter_mut().enumerate() {
                *x = token * (scales[c] * rng.normal() + means[c]);
            }
        }
        t
    };
    let keys = draw(&k_scale, &k_mean);
    let values = draw(&v_scale, &v_mean);
    let ones = vec![1.0f32; d];
    let zeros = vec![0.0f32; d];
    let queries = draw(&ones, &zeros);
    Workload {
        queries,
        keys,
        values,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub head: usize,
    pub position: usize,
    pub n_quantized: usize,
    pub n_residual: usize,
    pub score_cossim: f32,
    pub output_cossim: f32,
    pub score_l2_rel: f32,
    pub output_l2_rel: f32,
    pub clamps: usize,
    pub fallbacks: usize,
    pub zero_vectors: usize,
    pub avg_bits: f64,
}

fn l2_rel(approx: &[f32], exact: &[f32]) -> f32 {
    let num: f32 = approx
        .iter()
        .zip(exact)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let den: f32 = exact.iter().map(|b| b * b).sum();
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { f32::INFINITY };
    }
    sqrt(num / den)
}

fn similarity(approx: &[f32], exact: &[f32]) -> f32 {
    if approx == exact {
        1.0
    } else {
        cosine(approx, exact)
    }
}

/// Quantized-vs-reference comparison for the query at `position`, using
/// keys and values `0..=position`.
pub struct Comparison {
    pub scores: (Vec<f32>, Vec<f32>),
    pub outputs: (Vec<f32>, Vec<f32>),
}

impl Comparison {
    pub fn score_cossim(&self) -> f32 {
        similarity(&self.scores.0, &self.scores.1)
    }

    pub fn output_cossim(&self) -> f32 {
        similarity(&self.outputs.0, &self.outputs.1)
    }
}

pub fn compare_at(
    w: &Workload,
    state: &KvCacheState,
    cb_k: &Codebook,
    cb_v: &Codebook,
    position: usize,
    exact_cache: bool,
) -> anyhow::Result<Comparison> {
    let rope_params = state.config().rope();
    let n = position + 1;
    ensure!(
        state.len() == n,
        "cache holds {} tokens, expected {n}",
        state.len()
    );
    let q = rope(w.queries.row(position), position, &rope_params)?;
    let keys = w.keys.slice_rows(0, n);
    let ref_scores = reference_scores(&q, &keys, &rope_params)?;
    let weights = softmax_scaled(&ref_scores, 1.0 / sqrt(w.keys.cols() as f32));
    let mut ref_out = vec![0.0f32; w.values.cols()];
    for (wt, v) in weights.iter().zip(w.values.iter_rows()) {
        nsnquant_core::math::axpy(&mut ref_out, *wt, v);
    }
    let (scores, out) = if exact_cache {
        (ref_scores.clone(), ref_out.clone())
    } else {
        let scores = scores_quantized(&q, state, cb_k)?;
        let weights = softmax_scaled(&scores, 1.0 / sqrt(w.keys.cols() as f32));
        let out = output_quantized(&weights, state, cb_v)?;
        (scores, out)
    };
    Ok(Comparison {
        scores: (scores, ref_scores),
        outputs: (out, ref_out),
    })
}

fn hadamard_values(w: &Workload, start: usize, end: usize) -> anyhow::Result<Tensor2D> {
    Ok(apply_rows(
        &w.values.slice_rows(start, end),
        Rotation::Plain,
    )?)
}

/// Loads the whole workload and compares the final query. Used for paired
/// fidelity comparisons.
pub fn final_comparison(
    w: &Workload,
    cfg: CacheConfig,
    cb_k: &Codebook,
    cb_v: &Codebook,
) -> anyhow::Result<Comparison> {
    ensure!(!w.is_empty(), "empty workload");
    let mut state = KvCacheState::new(cfg)?;
    state.append(&w.keys, &hadamard_values(w, 0, w.len())?, cb_k, cb_v)?;
    compare_at(w, &state, cb_k, cb_v, w.len() - 1, false)
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub cache: CacheConfig,
    pub n_prefill: usize,
    pub n_decode: usize,
    /// Score the post-prefill query against the exact cache.
    pub fp_prefill: bool,
}

/// Step 0 follows the prefill; step `s ≥ 1` follows decode token `s`.
pub fn simulate_head(
    w: &Workload,
    opts: &SimOptions,
    cb_k: &Codebook,
    cb_v: &Codebook,
    head: usize,
) -> anyhow::Result<Vec<StepMetrics>> {
    let total = opts.n_prefill + opts.n_decode;
    ensure!(
        w.len() >= total,
        "workload has {} tokens, need {total}",
        w.len()
    );
    let mut state = KvCacheState::new(opts.cache)?;
    let mut steps = Vec::new();
    if opts.n_prefill > 0 {
        state.append(
            &w.keys.slice_rows(0, opts.n_prefill),
            &hadamard_values(w, 0, opts.n_prefill)?,
            cb_k,
            cb_v,
        )?;
    }
    for step in 0..=opts.n_decode {
        if step > 0 {
            let t = opts.n_prefill + step - 1;
            state.append(
                &w.keys.slice_rows(t, t + 1),
                &hadamard_values(w, t, t + 1)?,
                cb_k,
                cb_v,
            )?;
        }
        if state.is_empty() {
            continue;
        }
        let position = state.len() - 1;
        let cmp = compare_at(
            w,
            &state,
            cb_k,
            cb_v,
            position,
            step == 0 && opts.fp_prefill,
        )?;
        let counters = state.counters();
        let nq = state.n_quantized();
        let avg_bits = if nq == 0 {
            0.0
        } else {
            let bits: u64 = state
                .key_chunks()
                .iter()
                .map(|c| bit_ledger(c, opts.cache.residual_size).total_bits())
                .sum();
            bits as f64 / (nq * opts.cache.d) as f64
        };
        steps.push(StepMetrics {
            step,
            head,
            position,
            n_quantized: nq,
            n_residual: state.n_residual(),
            score_cossim: cmp.score_cossim(),
            output_cossim: cmp.output_cossim(),
            score_l2_rel: l2_rel(&cmp.scores.0, &cmp.scores.1),
            output_l2_rel: l2_rel(&cmp.outputs.0, &cmp.outputs.1),
            clamps: counters.clamps,
            fallbacks: counters.scale_fallbacks,
            zero_vectors: counters.zero_subvectors,
            avg_bits,
        });
    }
    Ok(steps)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSummary {
    pub steps: usize,
    pub mean_score_cossim: f64,
    pub mean_output_cossim: f64,
    pub mean_score_l2_rel: f64,
    pub mean_output_l2_rel: f64,
    pub total_clamps: usize,
    pub total_fallbacks: usize,
    pub total_zero_vectors: usize,
}

pub fn summarize(steps: &[StepMetrics]) -> SimSummary {
    let n = steps.len().max(1) as f64;
    let mean = |f: fn(&StepMetrics) -> f32| steps.iter().map(|s| f(s) as f64).sum::<f64>() / n;
    // Counters are cumulative per head; take each head's last step.
    let mut last: std::collections::BTreeMap<usize, &StepMetrics> = Default::default();
    for s in steps {
        last.insert(s.head, s);
    }
    SimSummary {
        steps: steps.len(),
        mean_score_cossim: mean(|s| s.score_cossim),
        mean_output_cossim: mean(|s| s.output_cossim),
        mean_score_l2_rel: mean(|s| s.score_l2_rel),
        mean_output_l2_rel: mean(|s| s.output_l2_rel),
        total_clamps: last.values().map(|s| s.clamps).sum(),
        total_fallbacks: last.values().map(|s| s.fallbacks).sum(),
        total_zero_vectors: last.values().map(|s| s.zero_vectors).sum(),
    }
}

/// Runs `n_heads` independent synthetic heads sharing one codebook. Head
/// `h` draws its data from stream `h` of `seed`.
pub fn simulate_synthetic(
    opts: &SimOptions,
    n_heads: usize,
    seed: u64,
    cb: &Codebook,
) -> anyhow::Result<Vec<StepMetrics>> {
    let root = SeededRng::new(seed);
    let mut steps = Vec::new();
    for head in 0..n_heads {
        let mut rng = root.split(head as u64);
        let w = synthetic_workload(&mut rng, opts.n_prefill + opts.n_decode, opts.cache.d);
        steps
            .extend(simulate_head(&w, opts, cb, cb, head).with_context(|| format!("head {head}"))?);
    }
    Ok(steps)
}

pub fn write_csv<W: Write>(steps: &[StepMetrics], out: W) -> anyhow::Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for s in steps {
        wtr.serialize(s)?;
    }
    wtr.flush()?;
    Ok(())
}
