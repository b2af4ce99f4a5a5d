//! Split KV cache: quantized residual-size chunks plus a full-precision
//! residual buffer per stream.

use alloc::vec::Vec;

use crate::attention::{rope_in_place, RopeParams};
use crate::codebook::{BitMode, Codebook, MatchMetric, SUB_DIM};
use crate::error::{Error, Result};
use crate::hadamard::{check_dim, fwht_in_place};
use crate::nsn::{nsn_forward_with, ClampWarning, ShiftMode};
use crate::tensor::Tensor2D;
use crate::vq::{quantize_chunk, QuantConfig, QuantizedChunk, ScalarPrecision, ScaleStrategy};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheConfig {
    pub d: usize,
    pub residual_size: usize,
    pub bit_mode: BitMode,
    pub strategy: ScaleStrategy,
    pub rope_base: f32,
    pub double_quant: bool,
    pub precision: ScalarPrecision,
    pub metric: MatchMetric,
    pub bypass_vq: bool,
    pub shift_mode: ShiftMode,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            d: 128,
            residual_size: 64,
            bit_mode: BitMode::TwoBit,
            strategy: ScaleStrategy::ParallelPreserving,
            rope_base: 10000.0,
            double_quant: true,
            precision: ScalarPrecision::Half,
            metric: MatchMetric::Cosine,
            bypass_vq: false,
            shift_mode: ShiftMode::Mean,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<()> {
        check_dim(self.d)?;
        if !self.d.is_multiple_of(SUB_DIM) {
            return Err(Error::ShapeMismatch {
                expected: "d divisible by 8",
                actual: self.d,
            });
        }
        if self.residual_size == 0 {
            return Err(Error::InvalidArgument("residual size must be at least 1"));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return Err(Error::InvalidArgument("rope base must be finite and > 1"));
        }
        Ok(())
    }

    pub fn quant_config(&self) -> QuantConfig {
        QuantConfig {
            strategy: self.strategy,
            double_quant: self.double_quant,
            precision: self.precision,
            residual_size: self.residual_size,
            metric: self.metric,
            bypass_vq: self.bypass_vq,
        }
    }

    pub fn rope(&self) -> RopeParams {
        RopeParams::with_base(self.d, self.rope_base)
    }
}

/// Up to `capacity` most recent tokens in full precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBuffer {
    tokens: Tensor2D,
    capacity: usize,
}

impl ResidualBuffer {
    pub fn new(capacity: usize, d: usize) -> Self {
        Self {
            tokens: Tensor2D::zeros(0, d),
            capacity,
        }
    }

    pub fn tokens(&self) -> &Tensor2D {
        &self.tokens
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.capacity
    }

    fn push_rows(&mut self, rows: &Tensor2D) -> Result<()> {
        if self.len() + rows.rows() > self.capacity {
            return Err(Error::InvalidArgument("residual buffer overflow"));
        }
        self.tokens.append_rows(rows)
    }

    fn take(&mut self) -> Tensor2D {
        let d = self.tokens.cols();
        core::mem::replace(&mut self.tokens, Tensor2D::zeros(0, d))
    }
}

/// A flushed key chunk and the clamp events its NSN pass raised.
#[derive(Debug, Clone, PartialEq)]
pub struct Flushed {
    pub chunk: QuantizedChunk,
    pub clamps: ClampWarning,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CacheCounters {
    pub clamps: usize,
    pub scale_fallbacks: usize,
    pub zero_subvectors: usize,
}

impl CacheCounters {
    fn record(&mut self, f: &Flushed) {
        let flags = f.chunk.flags();
        self.clamps += f.clamps.count();
        self.scale_fallbacks += flags.scale_fallbacks as usize;
        self.zero_subvectors += flags.zero_subvectors as usize;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCacheState {
    config: CacheConfig,
    key_chunks: Vec<QuantizedChunk>,
    value_chunks: Vec<QuantizedChunk>,
    key_residual: ResidualBuffer,
    value_residual: ResidualBuffer,
    position: usize,
    counters: CacheCounters,
}

impl KvCacheState {
    pub fn new(config: CacheConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            key_residual: ResidualBuffer::new(config.residual_size, config.d),
            value_residual: ResidualBuffer::new(config.residual_size, config.d),
            config,
            key_chunks: Vec::new(),
            value_chunks: Vec::new(),
            position: 0,
            counters: CacheCounters::default(),
        })
    }

    /// Rebuilds a state from its parts (snapshot loading).
    pub fn from_parts(
        config: CacheConfig,
        key_chunks: Vec<QuantizedChunk>,
        value_chunks: Vec<QuantizedChunk>,
        key_residual: Tensor2D,
        value_residual: Tensor2D,
        counters: CacheCounters,
    ) -> Result<Self> {
        config.validate()?;
        let r = config.residual_size;
        let chunks_ok = key_chunks.len() == value_chunks.len()
            && key_chunks
                .iter()
                .chain(&value_chunks)
                .all(|c| c.n_tokens() == r && c.dim() == config.d);
        let residual_ok = key_residual.rows() == value_residual.rows()
            && key_residual.rows() < r
            && key_residual.cols() == config.d
            && value_residual.cols() == config.d;
        if !chunks_ok || !residual_ok {
            return Err(Error::ShapeMismatch {
                expected: "full chunks and a partial residual matching the config",
                actual: key_chunks.len(),
            });
        }
        let mut state = Self::new(config)?;
        state.position = key_chunks.len() * r + key_residual.rows();
        state.key_chunks = key_chunks;
        state.value_chunks = value_chunks;
        state.key_residual.push_rows(&key_residual)?;
        state.value_residual.push_rows(&value_residual)?;
        state.counters = counters;
        Ok(state)
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn key_chunks(&self) -> &[QuantizedChunk] {
        &self.key_chunks
    }

    pub fn value_chunks(&self) -> &[QuantizedChunk] {
        &self.value_chunks
    }

    pub fn key_residual(&self) -> &Tensor2D {
        self.key_residual.tokens()
    }

    pub fn value_residual(&self) -> &Tensor2D {
        self.value_residual.tokens()
    }

    /// Dequantized, un-rotated `o^k` of key chunk `c`.
    pub fn key_shift(&self, c: usize) -> Option<Vec<f32>> {
        self.key_chunks.get(c).map(|ch| ch.shift().dequantize())
    }

    /// Next absolute token position (tokens seen so far).
    pub fn len(&self) -> usize {
        self.position
    }

    pub fn is_empty(&self) -> bool {
        self.position == 0
    }

    pub fn n_quantized(&self) -> usize {
        self.key_chunks.iter().map(|c| c.n_tokens()).sum()
    }

    pub fn n_residual(&self) -> usize {
        self.key_residual.len()
    }

    pub fn counters(&self) -> &CacheCounters {
        &self.counters
    }

    /// Appends tokens row by row, flushing each stream whenever its residual
    /// fills. Keys are pre-RoPE; values are already Hadamard-transformed.
    pub fn append(
        &mut self,
        keys: &Tensor2D,
        values: &Tensor2D,
        cb_k: &Codebook,
        cb_v: &Codebook,
    ) -> Result<()> {
        let d = self.config.d;
        if keys.rows() == 0
            || keys.rows() != values.rows()
            || keys.cols() != d
            || values.cols() != d
        {
            return Err(Error::ShapeMismatch {
                expected: "matching non-empty key/value rows of width d",
                actual: keys.rows(),
            });
        }
        if !self.config.bypass_vq
            && (cb_k.bit_mode() != self.config.bit_mode || cb_v.bit_mode() != self.config.bit_mode)
        {
            return Err(Error::InvalidArgument(
                "codebook bit mode differs from cache config",
            ));
        }
        let r = self.config.residual_size;
        let mut start = 0;
        while start < keys.rows() {
            let take = (r - self.key_residual.len()).min(keys.rows() - start);
            let end = start + take;
            self.key_residual.push_rows(&keys.slice_rows(start, end))?;
            self.value_residual
                .push_rows(&values.slice_rows(start, end))?;
            self.position += take;
            start = end;
            if self.key_residual.is_full() {
                self.flush(cb_k, cb_v)?;
            }
        }
        Ok(())
    }

    fn flush(&mut self, cb_k: &Codebook, cb_v: &Codebook) -> Result<()> {
        let chunk_start = self.position - self.key_residual.len();
        let positions: Vec<usize> = (chunk_start..self.position).collect();
        let keys = flush_chunk_keys(self.key_residual.tokens(), &positions, cb_k, &self.config)?;
        let values = flush_chunk_values(self.value_residual.tokens(), cb_v, &self.config)?;
        self.key_residual.take();
        self.value_residual.take();
        self.counters.record(&keys);
        self.counters.record(&values);
        self.key_chunks.push(keys.chunk);
        self.value_chunks.push(values.chunk);
        Ok(())
    }
}

/// NSN on pre-RoPE keys, RoPE on `v_nsn` rows at `positions`, Hadamard, VQ.
/// The stored shift stays un-rotated.
pub fn flush_chunk_keys(
    chunk: &Tensor2D,
    positions: &[usize],
    cb: &Codebook,
    config: &CacheConfig,
) -> Result<Flushed> {
    if positions.len() != chunk.rows() {
        return Err(Error::ShapeMismatch {
            expected: "one position per key row",
            actual: positions.len(),
        });
    }
    let nsn = nsn_forward_with(chunk, config.shift_mode)?;
    let rope = config.rope();
    let mut rotated = nsn.normalized;
    for (t, &pos) in positions.iter().enumerate() {
        let row = rotated.row_mut(t);
        rope_in_place(row, pos, &rope)?;
        fwht_in_place(row)?;
    }
    let chunk = quantize_chunk(&rotated, &nsn.byproducts, cb, &config.quant_config())?;
    Ok(Flushed {
        chunk,
        clamps: nsn.clamps,
    })
}

/// NSN then VQ on rows that are already in the Hadamard domain.
pub fn flush_chunk_values(
    chunk: &Tensor2D,
    cb: &Codebook,
    config: &CacheConfig,
) -> Result<Flushed> {
    if chunk.rows() == 0 {
        return Err(Error::ShapeMismatch {
            expected: "at least one value row",
            actual: 0,
        });
    }
    let nsn = nsn_forward_with(chunk, config.shift_mode)?;
    let chunk = quantize_chunk(&nsn.normalized, &nsn.byproducts, cb, &config.quant_config())?;
    Ok(Flushed {
        chunk,
        clamps: nsn.clamps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::kmeans_init;
    use crate::hadamard::apply_rows;
    use crate::hadamard::Rotation;
    use crate::tensor::{col_means, sample_standard_normal, SeededRng};
    use crate::vq::dequantize_chunk;
    use std::sync::OnceLock;

    fn codebooks() -> &'static (Codebook, Codebook) {
        static CB: OnceLock<(Codebook, Codebook)> = OnceLock::new();
        CB.get_or_init(|| {
            let mut rng = SeededRng::new(11);
            (
                kmeans_init(&mut rng, BitMode::TwoBit, 4096, 10).unwrap(),
                kmeans_init(&mut rng, BitMode::OneBit, 4096, 10).unwrap(),
            )
        })
    }

    fn config(d: usize, r: usize) -> CacheConfig {
        CacheConfig {
            d,
            residual_size: r,
            ..CacheConfig::default()
        }
    }

    #[test]
    fn counting_examples() {
        let (cb, _) = codebooks();
        let mut rng = SeededRng::new(1);
        for (t, chunks, resid) in [(130usize, 2usize, 2usize), (64, 1, 0)] {
            let mut s = KvCacheState::new(config(32, 64)).unwrap();
            let k = sample_standard_normal(&mut rng, t, 32);
            let v = sample_standard_normal(&mut rng, t, 32);
            s.append(&k, &v, cb, cb).unwrap();
            assert_eq!(s.key_chunks().len(), chunks);
            assert_eq!(s.value_chunks().len(), chunks);
            assert_eq!(s.n_quantized(), chunks * 64);
            assert_eq!(s.n_residual(), resid);
            assert_eq!(s.len(), t);
        }
    }

    #[test]
    fn decode_matches_prefill() {
        let (cb, _) = codebooks();
        let mut rng = SeededRng::new(2);
        let k = sample_standard_normal(&mut rng, 128, 32);
        let v = sample_standard_normal(&mut rng, 128, 32);
        let mut prefill = KvCacheState::new(config(32, 64)).unwrap();
        prefill.append(&k, &v, cb, cb).unwrap();
        let mut decode = KvCacheState::new(config(32, 64)).unwrap();
        for t in 0..128 {
            decode
                .append(&k.slice_rows(t, t + 1), &v.slice_rows(t, t + 1), cb, cb)
                .unwrap();
        }
        assert_eq!(prefill, decode);
    }

    #[test]
    fn append_rejects_bad_shapes() {
        let (cb, _) = codebooks();
        let mut s = KvCacheState::new(config(32, 8)).unwrap();
        assert!(s
            .append(&Tensor2D::zeros(0, 32), &Tensor2D::zeros(0, 32), cb, cb)
            .is_err());
        assert!(s
            .append(&Tensor2D::zeros(2, 32), &Tensor2D::zeros(3, 32), cb, cb)
            .is_err());
        assert!(s
            .append(&Tensor2D::zeros(2, 16), &Tensor2D::zeros(2, 16), cb, cb)
            .is_err());
    }

    #[test]
    fn codebook_mode_must_match() {
        let (cb2, cb1) = codebooks();
        let mut s = KvCacheState::new(config(32, 8)).unwrap();
        let k = Tensor2D::zeros(1, 32);
        assert!(s.append(&k, &k, cb1, cb2).is_err());
    }

    #[test]
    fn stored_key_shift_is_unrotated_mean() {
        let (cb, _) = codebooks();
        let cfg = CacheConfig {
            double_quant: false,
            precision: ScalarPrecision::Single,
            ..config(32, 16)
        };
        let mut rng = SeededRng::new(3);
        let chunk = sample_standard_normal(&mut rng, 16, 32);
        let positions: Vec<usize> = (100..116).collect();
        let flushed = flush_chunk_keys(&chunk, &positions, cb, &cfg).unwrap();
        let mut first = chunk.clone();
        for row in first.as_mut_slice().chunks_exact_mut(32) {
            let n = crate::math::norm(row) / crate::math::sqrt(32.0);
            crate::math::scale_in_place(row, 1.0 / n);
        }
        let expected = col_means(&first);
        for (a, b) in flushed.chunk.shift().dequantize().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_rotation_keys_match_value_pipeline() {
        let cfg = CacheConfig {
            double_quant: false,
            precision: ScalarPrecision::Single,
            bypass_vq: true,
            strategy: ScaleStrategy::None,
            ..config(32, 16)
        };
        let (cb, _) = codebooks();
        let mut rng = SeededRng::new(4);
        let chunk = sample_standard_normal(&mut rng, 16, 32);
        let keys = flush_chunk_keys(&chunk, &[0; 16], cb, &cfg).unwrap();
        let had = apply_rows(&chunk, Rotation::Plain).unwrap();
        let values = flush_chunk_values(&had, cb, &cfg).unwrap();
        let rk = keys.chunk.scaled_reconstruction(cb).unwrap();
        let rv = values.chunk.scaled_reconstruction(cb).unwrap();
        for (a, b) in rk.as_slice().iter().zip(rv.as_slice()) {
            assert!((a - b).abs() < 1e-4);
        }
        // The key path leaves o un-transformed; bring it to the same basis.
        let mut o = keys.chunk.shift().dequantize();
        fwht_in_place(&mut o).unwrap();
        let vo = values.chunk.shift().dequantize();
        for (a, b) in o.iter().zip(&vo) {
            assert!((a - b).abs() < 1e-4);
        }
        for t in 0..16 {
            let sk = keys.chunk.s1().dequantize()[t] * keys.chunk.s2()[t];
            let sv = values.chunk.s1().dequantize()[t] * values.chunk.s2()[t];
            assert!((sk - sv).abs() < 1e-4 * sk.abs().max(1.0));
        }
    }

    #[test]
    fn hadamard_commutes_with_nsn() {
        let mut rng = SeededRng::new(5);
        let mut x = sample_standard_normal(&mut rng, 64, 64);
        for row in x.as_mut_slice().chunks_exact_mut(64) {
            row[3] += 4.0;
            row[9] *= 6.0;
        }
        let a =
            nsn_forward_with(&apply_rows(&x, Rotation::Plain).unwrap(), ShiftMode::Mean).unwrap();
        let b = nsn_forward_with(&x, ShiftMode::Mean).unwrap();
        let b_norm = apply_rows(&b.normalized, Rotation::Plain).unwrap();
        let mut b_shift = b.byproducts.shift.clone();
        fwht_in_place(&mut b_shift).unwrap();
        for (p, q) in a.normalized.as_slice().iter().zip(b_norm.as_slice()) {
            assert!((p - q).abs() < 1e-4);
        }
        for (p, q) in a.byproducts.shift.iter().zip(&b_shift) {
            assert!((p - q).abs() < 1e-4);
        }
    }

    #[test]
    fn empty_value_chunk_is_rejected() {
        let (cb, _) = codebooks();
        assert!(matches!(
            flush_chunk_values(&Tensor2D::zeros(0, 32), cb, &config(32, 8)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn in_codebook_values_reconstruct() {
        let (cb, _) = codebooks();
        let cfg = CacheConfig {
            double_quant: false,
            precision: ScalarPrecision::Single,
            ..config(16, 4)
        };
        // Zero column mean, so NSN keeps the rows on codebook directions.
        let e0 = cb.entries()[3];
        let e1 = cb.entries()[77];
        let mut rows = Vec::new();
        for sign in [1.0f32, -1.0] {
            let mut r = [0.0f32; 16];
            for i in 0..8 {
                r[i] = sign * e0[i];
                r[8 + i] = sign * e1[i];
            }
            rows.push(r);
        }
        let chunk = Tensor2D::from_rows(&rows).unwrap();
        let f = flush_chunk_values(&chunk, cb, &cfg).unwrap();
        let recon = dequantize_chunk(&f.chunk, cb).unwrap();
        for (a, b) in recon.as_slice().iter().zip(chunk.as_slice()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
