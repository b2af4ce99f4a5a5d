//! Chunk-level quantization of NSN output: 8-dim sub-vector matching, scale
//! adjustment of `s2`, double quantization of `s1` and `o`, and bit
//! accounting.

use alloc::vec;
use alloc::vec::Vec;

use crate::codebook::{BitMode, Codebook, MatchMetric, SUB_DIM};
use crate::dq::{self, Rtn4Groups};
use crate::error::{Error, Result};
use crate::math;
use crate::nsn::NsnByproducts;
use crate::tensor::Tensor2D;

/// Group size for double quantization of the channel shift.
pub const SHIFT_GROUP: usize = 32;
/// Bits of a stored full-precision scalar and of each DQ scale/zero.
pub const SCALAR_BITS: u64 = 16;

/// How the reconstructed token `v_Q` is rescaled against the original `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleStrategy {
    None,
    /// Minimize `‖t·v_Q − v‖`.
    MinL2,
    /// Match `‖v‖`.
    NormMatch,
    /// Keep the component along `v`, so the error is orthogonal to `v`.
    #[default]
    ParallelPreserving,
}

impl ScaleStrategy {
    pub fn code(self) -> u8 {
        match self {
            ScaleStrategy::None => 0,
            ScaleStrategy::MinL2 => 1,
            ScaleStrategy::NormMatch => 2,
            ScaleStrategy::ParallelPreserving => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ScaleStrategy::None,
            1 => ScaleStrategy::MinL2,
            2 => ScaleStrategy::NormMatch,
            3 => ScaleStrategy::ParallelPreserving,
            _ => return None,
        })
    }
}

/// Factor that multiplies `v_q` (equivalently `s2`).
pub fn adjust_scale(v: &[f32], v_q: &[f32], strategy: ScaleStrategy) -> Result<f32> {
    if v.len() != v_q.len() {
        return Err(Error::ShapeMismatch {
            expected: "v and v_q of equal length",
            actual: v_q.len(),
        });
    }
    let q_sq = math::norm_sq(v_q);
    match strategy {
        ScaleStrategy::None => Ok(1.0),
        _ if q_sq == 0.0 => Err(Error::DegenerateProjection),
        ScaleStrategy::MinL2 => Ok(math::dot(v, v_q) / q_sq),
        ScaleStrategy::NormMatch => Ok(math::norm(v) / math::sqrt(q_sq)),
        ScaleStrategy::ParallelPreserving => {
            let vq = math::dot(v, v_q);
            let v_sq = math::norm_sq(v);
            if vq.abs() < 1e-10 * math::sqrt(v_sq) * math::sqrt(q_sq) || vq == 0.0 {
                return Err(Error::DegenerateProjection);
            }
            Ok(v_sq / vq)
        }
    }
}

/// Storage precision for byproducts that are not 4-bit quantized (`s2`,
/// and `s1`/`o` when double quantization is off) and for DQ parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScalarPrecision {
    /// IEEE half floats; the layout the bit ledger accounts for.
    #[default]
    Half,
    /// f32, for lossless validation paths.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    pub strategy: ScaleStrategy,
    pub double_quant: bool,
    pub precision: ScalarPrecision,
    /// Group size for `s1` double quantization.
    pub residual_size: usize,
    pub metric: MatchMetric,
    /// Store `v_nsn` itself instead of codebook indices.
    pub bypass_vq: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            strategy: ScaleStrategy::ParallelPreserving,
            double_quant: true,
            precision: ScalarPrecision::Half,
            residual_size: 64,
            metric: MatchMetric::Cosine,
            bypass_vq: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// One index byte per sub-vector; one sign byte per sub-vector in two-bit mode.
    Codes {
        indices: Vec<u8>,
        signs: Option<Vec<u8>>,
    },
    /// Unquantized rows (validation only; has no wire encoding).
    Exact(Tensor2D),
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredValues {
    Rtn4(Rtn4Groups),
    Plain(Vec<f32>),
}

impl StoredValues {
    fn encode(values: &[f32], group: usize, cfg: &QuantConfig) -> Result<Self> {
        Ok(match (cfg.double_quant, cfg.precision) {
            (true, ScalarPrecision::Half) => {
                StoredValues::Rtn4(dq::rtn4_group_half(values, group)?)
            }
            (true, ScalarPrecision::Single) => StoredValues::Rtn4(dq::rtn4_group(values, group)?),
            (false, p) => StoredValues::Plain(round_to(values, p)),
        })
    }

    pub fn len(&self) -> usize {
        match self {
            StoredValues::Rtn4(g) => g.len(),
            StoredValues::Plain(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dequantize(&self) -> Vec<f32> {
        match self {
            StoredValues::Rtn4(g) => g.dequantize(),
            StoredValues::Plain(v) => v.clone(),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, StoredValues::Rtn4(_))
    }
}

fn round_to(values: &[f32], precision: ScalarPrecision) -> Vec<f32> {
    match precision {
        ScalarPrecision::Half => values.iter().map(|&x| dq::round_to_f16(x)).collect(),
        ScalarPrecision::Single => values.to_vec(),
    }
}

/// Events absorbed during quantization instead of failing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChunkFlags {
    /// Sub-vectors that were zero and got index 0 with `+` signs.
    pub zero_subvectors: u32,
    /// Tokens whose strategy fell back (parallel-preserving → norm-match → 0).
    pub scale_fallbacks: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedChunk {
    n_tokens: usize,
    d: usize,
    bit_mode: BitMode,
    strategy: ScaleStrategy,
    precision: ScalarPrecision,
    payload: Payload,
    s1: StoredValues,
    shift: StoredValues,
    /// Adjusted per-token `s2`; exactly 0 flags a token without a direction.
    s2: Vec<f32>,
    flags: ChunkFlags,
}

impl QuantizedChunk {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        d: usize,
        bit_mode: BitMode,
        strategy: ScaleStrategy,
        precision: ScalarPrecision,
        payload: Payload,
        s1: StoredValues,
        shift: StoredValues,
        s2: Vec<f32>,
    ) -> Result<Self> {
        let n = s2.len();
        if !d.is_multiple_of(SUB_DIM) || d == 0 {
            return Err(Error::ShapeMismatch {
                expected: "d divisible by 8",
                actual: d,
            });
        }
        let subs = n * d / SUB_DIM;
        let payload_ok = match &payload {
            Payload::Codes { indices, signs } => {
                indices.len() == subs
                    && match signs {
                        Some(s) => bit_mode.folds_signs() && s.len() == subs,
                        None => !bit_mode.folds_signs(),
                    }
            }
            Payload::Exact(t) => t.rows() == n && t.cols() == d,
        };
        if !payload_ok || s1.len() != n || shift.len() != d {
            return Err(Error::ShapeMismatch {
                expected: "payload and byproducts consistent with n_tokens and d",
                actual: n,
            });
        }
        Ok(Self {
            n_tokens: n,
            d,
            bit_mode,
            strategy,
            precision,
            payload,
            s1,
            shift,
            s2,
            flags: ChunkFlags::default(),
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn bit_mode(&self) -> BitMode {
        self.bit_mode
    }

    pub fn strategy(&self) -> ScaleStrategy {
        self.strategy
    }

    pub fn precision(&self) -> ScalarPrecision {
        self.precision
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn s1(&self) -> &StoredValues {
        &self.s1
    }

    pub fn shift(&self) -> &StoredValues {
        &self.shift
    }

    pub fn s2(&self) -> &[f32] {
        &self.s2
    }

    pub fn flags(&self) -> ChunkFlags {
        self.flags
    }

    pub fn is_double_quantized(&self) -> bool {
        self.s1.is_quantized()
    }

    /// Writes the (unscaled) reconstruction `v_Q` of token `t` into `out`.
    pub fn token_reconstruction(&self, cb: &Codebook, t: usize, out: &mut [f32]) -> Result<()> {
        if out.len() != self.d || t >= self.n_tokens {
            return Err(Error::ShapeMismatch {
                expected: "token within chunk and output of length d",
                actual: out.len(),
            });
        }
        match &self.payload {
            Payload::Exact(rows) => out.copy_from_slice(rows.row(t)),
            Payload::Codes { indices, signs } => {
                if cb.bit_mode() != self.bit_mode {
                    return Err(Error::InvalidArgument(
                        "codebook bit mode differs from chunk",
                    ));
                }
                let per_token = self.d / SUB_DIM;
                for (j, dst) in out.chunks_exact_mut(SUB_DIM).enumerate() {
                    let k = t * per_token + j;
                    let sign = signs.as_ref().map_or(0, |s| s[k]);
                    dst.copy_from_slice(&cb.lookup(indices[k] as usize, sign)?);
                }
            }
        }
        Ok(())
    }

    /// `s2 · v_Q` for every token: the reconstruction of `v_nsn`.
    pub fn scaled_reconstruction(&self, cb: &Codebook) -> Result<Tensor2D> {
        let mut out = Tensor2D::zeros(self.n_tokens, self.d);
        for t in 0..self.n_tokens {
            let row = out.row_mut(t);
            self.token_reconstruction(cb, t, row)?;
            math::scale_in_place(row, self.s2[t]);
        }
        Ok(out)
    }
}

pub fn quantize_chunk(
    normalized: &Tensor2D,
    b: &NsnByproducts,
    cb: &Codebook,
    cfg: &QuantConfig,
) -> Result<QuantizedChunk> {
    let (n, d) = (normalized.rows(), normalized.cols());
    if n == 0 {
        return Err(Error::ShapeMismatch {
            expected: "at least one token",
            actual: 0,
        });
    }
    if d % SUB_DIM != 0 {
        return Err(Error::ShapeMismatch {
            expected: "d divisible by 8",
            actual: d,
        });
    }
    if b.n_tokens() != n || b.s2.len() != n || b.dim() != d {
        return Err(Error::ShapeMismatch {
            expected: "byproducts matching the chunk",
            actual: b.n_tokens(),
        });
    }
    if cfg.residual_size == 0 {
        return Err(Error::InvalidArgument("residual size must be >= 1"));
    }
    let mode = cb.bit_mode();
    let subs = n * d / SUB_DIM;
    let mut flags = ChunkFlags::default();
    let mut indices = Vec::with_capacity(subs);
    let mut signs = Vec::with_capacity(if mode.folds_signs() { subs } else { 0 });
    let mut s2 = Vec::with_capacity(n);
    let mut v_q = vec![0.0f32; d];

    for t in 0..n {
        let v = normalized.row(t);
        if cfg.bypass_vq {
            v_q.copy_from_slice(v);
        } else {
            for (sub, dst) in v.chunks_exact(SUB_DIM).zip(v_q.chunks_exact_mut(SUB_DIM)) {
                let m = match cb.match_with(sub, cfg.metric) {
                    Ok(m) => m,
                    Err(Error::ZeroVector) => {
                        flags.zero_subvectors += 1;
                        crate::codebook::Match { index: 0, signs: 0 }
                    }
                    Err(e) => return Err(e),
                };
                indices.push(m.index);
                if mode.folds_signs() {
                    signs.push(m.signs);
                }
                dst.copy_from_slice(&cb.lookup(m.index as usize, m.signs)?);
            }
        }
        let factor = if math::norm_sq(v) == 0.0 {
            0.0
        } else {
            match adjust_scale(v, &v_q, cfg.strategy) {
                Ok(f) => f,
                Err(_) => {
                    flags.scale_fallbacks += 1;
                    adjust_scale(v, &v_q, ScaleStrategy::NormMatch).unwrap_or(0.0)
                }
            }
        };
        s2.push(factor * b.s2[t]);
    }

    let payload = if cfg.bypass_vq {
        Payload::Exact(normalized.clone())
    } else {
        Payload::Codes {
            indices,
            signs: mode.folds_signs().then_some(signs),
        }
    };
    let s1 = StoredValues::encode(&b.s1, cfg.residual_size, cfg)?;
    let shift = StoredValues::encode(&b.shift, SHIFT_GROUP, cfg)?;
    let mut qc = QuantizedChunk::from_parts(
        d,
        mode,
        cfg.strategy,
        cfg.precision,
        payload,
        s1,
        shift,
        round_to(&s2, cfg.precision),
    )?;
    qc.flags = flags;
    Ok(qc)
}

/// `s1 ⊙ (s2 ⊙ v_Q + o)` per token, in the domain the chunk was quantized in.
pub fn dequantize_chunk(qc: &QuantizedChunk, cb: &Codebook) -> Result<Tensor2D> {
    let mut out = qc.scaled_reconstruction(cb)?;
    let s1 = qc.s1.dequantize();
    let shift = qc.shift.dequantize();
    for (t, &s) in s1.iter().enumerate() {
        for (x, o) in out.row_mut(t).iter_mut().zip(&shift) {
            *x = s * (*x + o);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BitLedger {
    pub payload_bits: u64,
    pub sign_bits: u64,
    pub s1_bits: u64,
    pub s2_bits: u64,
    pub o_bits: u64,
    pub dq_param_bits: u64,
    pub avg_bits_per_value: f64,
}

impl BitLedger {
    pub fn total_bits(&self) -> u64 {
        self.payload_bits
            + self.sign_bits
            + self.s1_bits
            + self.s2_bits
            + self.o_bits
            + self.dq_param_bits
    }
}

/// Storage cost of a chunk. Payload and signs take 8 bits per sub-vector
/// each, `s2` is 16-bit, and `s1`/`o` are 4-bit with a 16-bit scale and
/// zero per group (or 16-bit each without double quantization).
pub fn bit_ledger(qc: &QuantizedChunk, residual_size: usize) -> BitLedger {
    ledger_for(
        qc.n_tokens,
        qc.d,
        qc.bit_mode,
        qc.is_double_quantized(),
        residual_size,
    )
}

/// [`bit_ledger`] for a chunk shape without building the chunk.
pub fn ledger_for(
    n: usize,
    d: usize,
    mode: BitMode,
    double_quant: bool,
    residual_size: usize,
) -> BitLedger {
    let (n64, d64) = (n as u64, d as u64);
    let subs = n64 * d64 / SUB_DIM as u64;
    let payload_bits = subs * 8;
    let sign_bits = if mode.folds_signs() { subs * 8 } else { 0 };
    let s2_bits = n64 * SCALAR_BITS;
    let (s1_bits, o_bits, dq_param_bits) = if double_quant {
        let s1_groups = n.div_ceil(residual_size.max(1)) as u64;
        let o_groups = d.div_ceil(SHIFT_GROUP) as u64;
        (n64 * 4, d64 * 4, 2 * SCALAR_BITS * (s1_groups + o_groups))
    } else {
        (n64 * SCALAR_BITS, d64 * SCALAR_BITS, 0)
    };
    let mut ledger = BitLedger {
        payload_bits,
        sign_bits,
        s1_bits,
        s2_bits,
        o_bits,
        dq_param_bits,
        avg_bits_per_value: 0.0,
    };
    ledger.avg_bits_per_value = ledger.total_bits() as f64 / (n64 * d64).max(1) as f64;
    ledger
}
