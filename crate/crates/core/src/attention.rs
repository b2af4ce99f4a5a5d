//! Rotary embeddings and attention over a split (quantized + residual)
//! cache, computed directly from the NSN byproducts.
//!
//! For a quantized key at absolute position `t` in chunk `c`:
//!
//! ```text
//! q·RoPE(k_t) = s1·s2 · HT(q)·v_Q[t] + s1 · q·RoPE(o_c, t)
//! ```
//!
//! and values are accumulated in the Hadamard domain as
//! `Σ w_t · s1·(s2·v_Q[t] + o_c)`, with one inverse transform at the end.

use alloc::vec;
use alloc::vec::Vec;

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::hadamard::fwht_in_place;
use crate::kvcache::KvCacheState;
use crate::math;
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeParams {
    pub base: f32,
    pub d: usize,
}

impl RopeParams {
    pub fn new(d: usize) -> Self {
        Self { base: 10000.0, d }
    }

    pub fn with_base(d: usize, base: f32) -> Self {
        Self { base, d }
    }

    fn inv_freq(&self, pair: usize) -> f64 {
        libm::pow(self.base as f64, -2.0 * pair as f64 / self.d as f64)
    }
}

fn rotate(x: &mut [f32], position: usize, p: &RopeParams, direction: f64) {
    for (j, pair) in x.chunks_exact_mut(2).enumerate() {
        let angle = direction * position as f64 * p.inv_freq(j);
        let (s, c) = (libm::sin(angle) as f32, libm::cos(angle) as f32);
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
}

/// Rotates channel pairs `(2j, 2j+1)` by `position · base^(−2j/d)`.
pub fn rope_in_place(x: &mut [f32], position: usize, p: &RopeParams) -> Result<()> {
    check_rope(x, p)?;
    rotate(x, position, p, 1.0);
    Ok(())
}

pub fn rope(x: &[f32], position: usize, p: &RopeParams) -> Result<Vec<f32>> {
    let mut out = x.to_vec();
    rope_in_place(&mut out, position, p)?;
    Ok(out)
}

/// Inverse rotation of [`rope_in_place`].
pub fn unrope_in_place(x: &mut [f32], position: usize, p: &RopeParams) -> Result<()> {
    check_rope(x, p)?;
    rotate(x, position, p, -1.0);
    Ok(())
}

fn check_rope(x: &[f32], p: &RopeParams) -> Result<()> {
    if x.len() != p.d || !p.d.is_multiple_of(2) {
        return Err(Error::ShapeMismatch {
            expected: "even d matching the rope parameters",
            actual: x.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    /// `l_q × l_k`, rows sum to one.
    pub weights: Tensor2D,
    /// `l_q × d`.
    pub output: Tensor2D,
}

/// Raw `q · K^T` against the whole cache (quantized chunks first, then the
/// residual). `q` is the post-RoPE query.
pub fn scores_quantized(q: &[f32], state: &KvCacheState, cb_k: &Codebook) -> Result<Vec<f32>> {
    let cfg = state.config();
    let d = cfg.d;
    if q.len() != d {
        return Err(Error::ShapeMismatch {
            expected: "query of length d",
            actual: q.len(),
        });
    }
    let rope_params = cfg.rope();
    let mut q_had = q.to_vec();
    fwht_in_place(&mut q_had)?;

    let mut scores = Vec::with_capacity(state.len());
    let mut v_q = vec![0.0f32; d];
    let mut shift_rot = vec![0.0f32; d];
    let mut position = 0usize;
    for chunk in state.key_chunks() {
        let s1 = chunk.s1().dequantize();
        let shift = chunk.shift().dequantize();
        let s2 = chunk.s2();
        for t in 0..chunk.n_tokens() {
            chunk.token_reconstruction(cb_k, t, &mut v_q)?;
            // o is stored un-rotated; rotate it at this token's position.
            shift_rot.copy_from_slice(&shift);
            rope_in_place(&mut shift_rot, position, &rope_params)?;
            let score = s1[t] * s2[t] * math::dot(&q_had, &v_q) + s1[t] * math::dot(q, &shift_rot);
            scores.push(score);
            position += 1;
        }
    }
    let mut k = vec![0.0f32; d];
    for row in state.key_residual().iter_rows() {
        k.copy_from_slice(row);
        rope_in_place(&mut k, position, &rope_params)?;
        scores.push(math::dot(q, &k));
        position += 1;
    }
    Ok(scores)
}

/// `Σ_t w_t · v_t` over the cache, returned in the model basis.
pub fn output_quantized(
    weights: &[f32],
    state: &KvCacheState,
    cb_v: &Codebook,
) -> Result<Vec<f32>> {
    let d = state.config().d;
    if weights.len() != state.len() {
        return Err(Error::ShapeMismatch {
            expected: "one weight per cached token",
            actual: weights.len(),
        });
    }
    let mut acc = vec![0.0f32; d];
    let mut v_q = vec![0.0f32; d];
    let mut w_iter = weights.iter();
    for chunk in state.value_chunks() {
        let s1 = chunk.s1().dequantize();
        let shift = chunk.shift().dequantize();
        let s2 = chunk.s2();
        let mut shift_weight = 0.0f32;
        for t in 0..chunk.n_tokens() {
            let w = *w_iter.next().unwrap_or(&0.0);
            chunk.token_reconstruction(cb_v, t, &mut v_q)?;
            math::axpy(&mut acc, w * s1[t] * s2[t], &v_q);
            shift_weight += w * s1[t];
        }
        math::axpy(&mut acc, shift_weight, &shift);
    }
    for row in state.value_residual().iter_rows() {
        let w = *w_iter.next().unwrap_or(&0.0);
        math::axpy(&mut acc, w, row);
    }
    // Values live in the Hadamard domain; the transform is its own inverse.
    fwht_in_place(&mut acc)?;
    Ok(acc)
}

/// Softmax weights (temperature 1/√d) and output for one query.
pub fn attend_quantized(
    q: &[f32],
    state: &KvCacheState,
    cb_k: &Codebook,
    cb_v: &Codebook,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let scores = scores_quantized(q, state, cb_k)?;
    let weights = math::softmax_scaled(&scores, 1.0 / math::sqrt(state.config().d as f32));
    let output = output_quantized(&weights, state, cb_v)?;
    Ok((weights, output))
}

/// Full-precision `q · RoPE(K)^T`, keys at positions `0..l_k`.
pub fn reference_scores(q: &[f32], keys: &Tensor2D, rope_params: &RopeParams) -> Result<Vec<f32>> {
    let mut k = vec![0.0f32; keys.cols()];
    keys.iter_rows()
        .enumerate()
        .map(|(t, row)| {
            k.copy_from_slice(row);
            rope_in_place(&mut k, t, rope_params)?;
            Ok(math::dot(q, &k))
        })
        .collect()
}

/// Exact `softmax(q · RoPE(K)^T / √d) · V`. Queries are post-RoPE; keys are
/// pre-RoPE at positions `0..l_k`; values are in the model basis.
pub fn reference_attention(
    queries: &Tensor2D,
    keys: &Tensor2D,
    values: &Tensor2D,
    rope_params: &RopeParams,
) -> Result<AttentionResult> {
    let d = queries.cols();
    if keys.cols() != d || keys.rows() != values.rows() || keys.rows() == 0 {
        return Err(Error::ShapeMismatch {
            expected: "consistent q/k/v shapes with at least one key",
            actual: keys.rows(),
        });
    }
    let temperature = 1.0 / math::sqrt(d as f32);
    let mut weights = Tensor2D::zeros(queries.rows(), keys.rows());
    let mut output = Tensor2D::zeros(queries.rows(), values.cols());
    for (i, q) in queries.iter_rows().enumerate() {
        let scores = reference_scores(q, keys, rope_params)?;
        let w = math::softmax_scaled(&scores, temperature);
        let out = output.row_mut(i);
        for (wt, v) in w.iter().zip(values.iter_rows()) {
            math::axpy(out, *wt, v);
        }
        weights.row_mut(i).copy_from_slice(&w);
    }
    Ok(AttentionResult { weights, output })
}
