//! Binary formats: tensor dumps, codebook files, quantized-chunk wire
//! blocks and cache snapshots. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use half::f16;
use nsnquant_core::codebook::{BitMode, Codebook, Entry, MatchMetric, N_ENTRIES, SUB_DIM};
use nsnquant_core::dq::{GroupParams, Rtn4Groups};
use nsnquant_core::kvcache::{CacheConfig, CacheCounters, KvCacheState};
use nsnquant_core::nsn::ShiftMode;
use nsnquant_core::vq::{
    Payload, QuantizedChunk, ScalarPrecision, ScaleStrategy, StoredValues, SHIFT_GROUP,
};
use nsnquant_core::Tensor2D;
use serde::{Deserialize, Serialize};

pub const TENSOR_MAGIC: &[u8; 4] = b"NSNT";
pub const CODEBOOK_MAGIC: &[u8; 4] = b"NSNC";
pub const SNAPSHOT_MAGIC: &[u8; 4] = b"NSNS";
pub const CODEBOOK_VERSION: u16 = 1;
pub const SNAPSHOT_VERSION: u16 = 1;
/// Bytes before the payload in a chunk wire block.
pub const CHUNK_HEADER_BYTES: usize = 9;

const FLAG_DQ: u8 = 1;
const FLAG_SINGLE: u8 = 2;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("empty input")]
    Empty,
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated input while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid field: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] nsnquant_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type FormatResult<T> = Result<T, FormatError>;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> FormatResult<Self> {
        if buf.is_empty() {
            return Err(FormatError::Empty);
        }
        Ok(Self { buf, pos: 0 })
    }

    fn bytes(&mut self, n: usize, what: &'static str) -> FormatResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(FormatError::Truncated(what))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> FormatResult<[u8; N]> {
        Ok(self.bytes(N, what)?.try_into().expect("length checked"))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> FormatResult<()> {
        let found = self.bytes(4.min(self.buf.len() - self.pos), "magic")?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: *expected,
                found: found.to_vec(),
            });
        }
        Ok(())
    }

    fn u8(&mut self, what: &'static str) -> FormatResult<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> FormatResult<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &'static str) -> FormatResult<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &'static str) -> FormatResult<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f32(&mut self, what: &'static str) -> FormatResult<f32> {
        Ok(f32::from_le_bytes(self.array(what)?))
    }

    fn f16(&mut self, what: &'static str) -> FormatResult<f32> {
        Ok(f16::from_bits(self.u16(what)?).to_f32())
    }

    fn scalar(&mut self, p: ScalarPrecision, what: &'static str) -> FormatResult<f32> {
        match p {
            ScalarPrecision::Half => self.f16(what),
            ScalarPrecision::Single => self.f32(what),
        }
    }

    fn finish(&self) -> FormatResult<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

fn put_scalar(out: &mut Vec<u8>, x: f32, p: ScalarPrecision) {
    match p {
        ScalarPrecision::Half => out.extend_from_slice(&f16::from_f32(x).to_bits().to_le_bytes()),
        ScalarPrecision::Single => out.extend_from_slice(&x.to_le_bytes()),
    }
}

fn bit_mode_code(m: BitMode) -> u8 {
    match m {
        BitMode::OneBit => 1,
        BitMode::TwoBit => 2,
    }
}

fn bit_mode_from(code: u8) -> FormatResult<BitMode> {
    match code {
        1 => Ok(BitMode::OneBit),
        2 => Ok(BitMode::TwoBit),
        c => Err(FormatError::Invalid(format!("bit mode {c}"))),
    }
}

// ---- tensor dumps ----

/// `"NSNT"`, u32 rows, u32 cols, then `rows·cols` f32 values.
pub fn encode_tensor(t: &Tensor2D) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.as_slice().len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for x in t.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn read_tensor(r: &mut Reader<'_>) -> FormatResult<Tensor2D> {
    r.magic(TENSOR_MAGIC)?;
    let rows = r.u32("tensor rows")? as usize;
    let cols = r.u32("tensor cols")? as usize;
    let len = rows
        .checked_mul(cols)
        .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.buf.len() - r.pos))
        .ok_or(FormatError::Truncated("tensor data"))?;
    let data = r
        .bytes(len * 4, "tensor data")?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")))
        .collect();
    Ok(Tensor2D::new(rows, cols, data)?)
}

pub fn decode_tensor(bytes: &[u8]) -> FormatResult<Tensor2D> {
    let mut r = Reader::new(bytes)?;
    let t = read_tensor(&mut r)?;
    r.finish()?;
    Ok(t)
}

/// Human-editable tensor form used for fixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl From<&Tensor2D> for TensorJson {
    fn from(t: &Tensor2D) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data: t.as_slice().to_vec(),
        }
    }
}

impl TryFrom<TensorJson> for Tensor2D {
    type Error = FormatError;

    fn try_from(j: TensorJson) -> FormatResult<Self> {
        Ok(Tensor2D::new(j.rows, j.cols, j.data)?)
    }
}

/// Reads a binary dump, or JSON when the file starts with `{`.
pub fn read_tensor_file(path: &Path) -> FormatResult<Tensor2D> {
    let bytes = fs::read(path)?;
    if bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'{') {
        let j: TensorJson = serde_json::from_slice(&bytes)?;
        return j.try_into();
    }
    decode_tensor(&bytes)
}

pub fn write_tensor_file(path: &Path, t: &Tensor2D) -> FormatResult<()> {
    Ok(fs::write(path, encode_tensor(t))?)
}

// ---- codebooks ----

/// `"NSNC"`, u16 version, u8 bit mode (1 or 2), u64 seed, u8 tuned,
/// 256·8 f32 entries, u8 packed flag, and when packed an f32 scale plus
/// 1024 bytes of 4-bit codes.
pub fn encode_codebook(cb: &Codebook) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + N_ENTRIES * SUB_DIM * 4 + 5 + N_ENTRIES * SUB_DIM / 2);
    out.extend_from_slice(CODEBOOK_MAGIC);
    out.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
    out.push(bit_mode_code(cb.bit_mode()));
    out.extend_from_slice(&cb.seed().to_le_bytes());
    out.push(u8::from(cb.is_tuned()));
    for x in cb.entries().iter().flatten() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    match cb.packed4() {
        Some(p) => {
            out.push(1);
            out.extend_from_slice(&p.scale().to_le_bytes());
            out.extend_from_slice(p.nibbles());
        }
        None => out.push(0),
    }
    out
}

pub fn decode_codebook(bytes: &[u8]) -> FormatResult<Codebook> {
    let mut r = Reader::new(bytes)?;
    r.magic(CODEBOOK_MAGIC)?;
    let version = r.u16("codebook version")?;
    if version != CODEBOOK_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let mode = bit_mode_from(r.u8("bit mode")?)?;
    let seed = r.u64("seed")?;
    let tuned = match r.u8("tuned flag")? {
        0 => false,
        1 => true,
        x => return Err(FormatError::Invalid(format!("tuned flag {x}"))),
    };
    let mut entries = Vec::with_capacity(N_ENTRIES);
    for _ in 0..N_ENTRIES {
        let mut e: Entry = [0.0; SUB_DIM];
        for x in &mut e {
            *x = r.f32("codebook entries")?;
        }
        entries.push(e);
    }
    let cb = Codebook::new(entries, mode, seed, tuned)?;
    let cb = match r.u8("packed flag")? {
        0 => cb,
        1 => {
            let scale = r.f32("packed scale")?;
            let nibbles = r.bytes(N_ENTRIES * SUB_DIM / 2, "packed codes")?.to_vec();
            cb.with_packed(scale, nibbles)?
        }
        x => return Err(FormatError::Invalid(format!("packed flag {x}"))),
    };
    r.finish()?;
    Ok(cb)
}

pub fn read_codebook_file(path: &Path) -> FormatResult<Codebook> {
    decode_codebook(&fs::read(path)?)
}

pub fn write_codebook_file(path: &Path, cb: &Codebook) -> FormatResult<()> {
    Ok(fs::write(path, encode_codebook(cb))?)
}

// ---- chunk wire blocks ----

fn put_stored(out: &mut Vec<u8>, v: &StoredValues, p: ScalarPrecision) {
    match v {
        StoredValues::Rtn4(g) => {
            out.extend_from_slice(g.packed());
            for gp in g.params() {
                put_scalar(out, gp.scale, p);
                put_scalar(out, gp.zero, p);
            }
        }
        StoredValues::Plain(xs) => xs.iter().for_each(|&x| put_scalar(out, x, p)),
    }
}

fn read_stored(
    r: &mut Reader<'_>,
    len: usize,
    group: usize,
    dq: bool,
    p: ScalarPrecision,
    what: &'static str,
) -> FormatResult<StoredValues> {
    if !dq {
        return Ok(StoredValues::Plain(
            (0..len)
                .map(|_| r.scalar(p, what))
                .collect::<FormatResult<_>>()?,
        ));
    }
    let packed = r.bytes(len.div_ceil(2), what)?.to_vec();
    let params = (0..len.div_ceil(group))
        .map(|_| {
            Ok(GroupParams {
                scale: r.scalar(p, what)?,
                zero: r.scalar(p, what)?,
            })
        })
        .collect::<FormatResult<_>>()?;
    Ok(StoredValues::Rtn4(Rtn4Groups::from_parts(
        packed, len, group, params,
    )?))
}

/// Header: u16 n_tokens, u16 d, u16 residual size, u8 bit mode, u8
/// strategy, u8 flags (bit 0 double quantization, bit 1 f32 scalars).
/// Body: indices, signs (two-bit only), `s1`, `o`, `s2`.
pub fn encode_chunk(qc: &QuantizedChunk, residual_size: usize) -> FormatResult<Vec<u8>> {
    let (indices, signs) = match qc.payload() {
        Payload::Codes { indices, signs } => (indices, signs),
        Payload::Exact(_) => {
            return Err(FormatError::Invalid(
                "unquantized chunks have no wire form".into(),
            ))
        }
    };
    let fits =
        |x: usize| u16::try_from(x).map_err(|_| FormatError::Invalid(format!("{x} exceeds u16")));
    let p = qc.precision();
    let mut flags = 0u8;
    if qc.is_double_quantized() {
        flags |= FLAG_DQ;
    }
    if p == ScalarPrecision::Single {
        flags |= FLAG_SINGLE;
    }
    let mut out = Vec::new();
    out.extend_from_slice(&fits(qc.n_tokens())?.to_le_bytes());
    out.extend_from_slice(&fits(qc.dim())?.to_le_bytes());
    out.extend_from_slice(&fits(residual_size)?.to_le_bytes());
    out.push(bit_mode_code(qc.bit_mode()));
    out.push(qc.strategy().code());
    out.push(flags);
    out.extend_from_slice(indices);
    if let Some(s) = signs {
        out.extend_from_slice(s);
    }
    put_stored(&mut out, qc.s1(), p);
    put_stored(&mut out, qc.shift(), p);
    qc.s2().iter().for_each(|&x| put_scalar(&mut out, x, p));
    Ok(out)
}

fn read_chunk(r: &mut Reader<'_>) -> FormatResult<(QuantizedChunk, usize)> {
    let n = r.u16("n_tokens")? as usize;
    let d = r.u16("d")? as usize;
    let residual = r.u16("residual size")? as usize;
    let mode = bit_mode_from(r.u8("bit mode")?)?;
    let strategy_code = r.u8("strategy")?;
    let strategy = ScaleStrategy::from_code(strategy_code)
        .ok_or_else(|| FormatError::Invalid(format!("strategy {strategy_code}")))?;
    let flags = r.u8("flags")?;
    if flags & !(FLAG_DQ | FLAG_SINGLE) != 0 {
        return Err(FormatError::Invalid(format!("flags {flags:#04x}")));
    }
    if d == 0 || !d.is_multiple_of(SUB_DIM) || residual == 0 {
        return Err(FormatError::Invalid(format!(
            "d = {d}, residual size = {residual}"
        )));
    }
    let dq = flags & FLAG_DQ != 0;
    let p = if flags & FLAG_SINGLE != 0 {
        ScalarPrecision::Single
    } else {
        ScalarPrecision::Half
    };
    let subs = n * d / SUB_DIM;
    let indices = r.bytes(subs, "indices")?.to_vec();
    let signs = match mode {
        BitMode::TwoBit => Some(r.bytes(subs, "sign bits")?.to_vec()),
        BitMode::OneBit => None,
    };
    let s1 = read_stored(r, n, residual, dq, p, "s1")?;
    let shift = read_stored(r, d, SHIFT_GROUP, dq, p, "shift")?;
    let s2 = (0..n)
        .map(|_| r.scalar(p, "s2"))
        .collect::<FormatResult<_>>()?;
    let qc = QuantizedChunk::from_parts(
        d,
        mode,
        strategy,
        p,
        Payload::Codes { indices, signs },
        s1,
        shift,
        s2,
    )?;
    Ok((qc, residual))
}

/// Returns the chunk and the residual size recorded in its header.
pub fn decode_chunk(bytes: &[u8]) -> FormatResult<(QuantizedChunk, usize)> {
    let mut r = Reader::new(bytes)?;
    let out = read_chunk(&mut r)?;
    r.finish()?;
    Ok(out)
}

// ---- cache snapshots ----

fn strategy_or_err(code: u8) -> FormatResult<ScaleStrategy> {
    ScaleStrategy::from_code(code).ok_or_else(|| FormatError::Invalid(format!("strategy {code}")))
}

/// `"NSNS"`, u16 version, cache config, three u64 counters, u32 chunk count, then per chunk a
/// length-prefixed key block and value block, then the key and value
/// residuals as tensor dumps.
pub fn encode_snapshot(state: &KvCacheState) -> FormatResult<Vec<u8>> {
    let cfg = state.config();
    if cfg.bypass_vq {
        return Err(FormatError::Invalid(
            "unquantized caches have no snapshot form".into(),
        ));
    }
    let mut out = Vec::new();
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.d as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.residual_size as u32).to_le_bytes());
    out.push(bit_mode_code(cfg.bit_mode));
    out.push(cfg.strategy.code());
    out.extend_from_slice(&cfg.rope_base.to_le_bytes());
    out.push(u8::from(cfg.double_quant));
    out.push(u8::from(cfg.precision == ScalarPrecision::Single));
    out.push(u8::from(cfg.metric == MatchMetric::Euclidean));
    match cfg.shift_mode {
        ShiftMode::Mean => out.extend_from_slice(&[0; 9]),
        ShiftMode::GeometricMedian { max_iters, tol } => {
            out.push(1);
            out.extend_from_slice(&(max_iters as u32).to_le_bytes());
            out.extend_from_slice(&tol.to_le_bytes());
        }
    }
    let c = state.counters();
    for n in [c.clamps, c.scale_fallbacks, c.zero_subvectors] {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    out.extend_from_slice(&(state.key_chunks().len() as u32).to_le_bytes());
    for (k, v) in state.key_chunks().iter().zip(state.value_chunks()) {
        for block in [
            encode_chunk(k, cfg.residual_size)?,
            encode_chunk(v, cfg.residual_size)?,
        ] {
            out.extend_from_slice(&(block.len() as u32).to_le_bytes());
            out.extend_from_slice(&block);
        }
    }
    out.extend_from_slice(&encode_tensor(state.key_residual()));
    out.extend_from_slice(&encode_tensor(state.value_residual()));
    Ok(out)
}

pub fn decode_snapshot(bytes: &[u8]) -> FormatResult<KvCacheState> {
    let mut r = Reader::new(bytes)?;
    r.magic(SNAPSHOT_MAGIC)?;
    let version = r.u16("snapshot version")?;
    if version != SNAPSHOT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let d = r.u32("d")? as usize;
    let residual_size = r.u32("residual size")? as usize;
    let bit_mode = bit_mode_from(r.u8("bit mode")?)?;
    let strategy = strategy_or_err(r.u8("strategy")?)?;
    let rope_base = r.f32("rope base")?;
    let double_quant = r.u8("dq flag")? != 0;
    let precision = if r.u8("precision")? != 0 {
        ScalarPrecision::Single
    } else {
        ScalarPrecision::Half
    };
    let metric = if r.u8("metric")? != 0 {
        MatchMetric::Euclidean
    } else {
        MatchMetric::Cosine
    };
    let mode = r.u8("shift mode")?;
    let max_iters = r.u32("shift iterations")? as usize;
    let tol = r.f32("shift tolerance")?;
    let shift_mode = match mode {
        0 => ShiftMode::Mean,
        1 => ShiftMode::GeometricMedian { max_iters, tol },
        x => return Err(FormatError::Invalid(format!("shift mode {x}"))),
    };
    let config = CacheConfig {
        d,
        residual_size,
        bit_mode,
        strategy,
        rope_base,
        double_quant,
        precision,
        metric,
        bypass_vq: false,
        shift_mode,
    };
    let counters = CacheCounters {
        clamps: r.u64("counters")? as usize,
        scale_fallbacks: r.u64("counters")? as usize,
        zero_subvectors: r.u64("counters")? as usize,
    };
    let n_chunks = r.u32("chunk count")? as usize;
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for _ in 0..n_chunks {
        for list in [&mut keys, &mut values] {
            let len = r.u32("chunk length")? as usize;
            let (qc, _) = decode_chunk(r.bytes(len, "chunk block")?)?;
            list.push(qc);
        }
    }
    let key_residual = read_tensor(&mut r)?;
    let value_residual = read_tensor(&mut r)?;
    r.finish()?;
    Ok(KvCacheState::from_parts(
        config,
        keys,
        values,
        key_residual,
        value_residual,
        counters,
    )?)
}
