//! 4-bit round-to-nearest group quantization used for double quantization
//! of the NSN byproducts.

use alloc::vec::Vec;

use half::f16;

use crate::error::{Error, Result};

pub const LEVELS: u8 = 16;
const MAX_CODE: f32 = (LEVELS - 1) as f32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupParams {
    pub scale: f32,
    pub zero: f32,
}

/// Values quantized to 4-bit codes with one `(scale, zero)` per group.
/// Codes are packed two per byte, low nibble first.
#[derive(Debug, Clone, PartialEq)]
pub struct Rtn4Groups {
    packed: Vec<u8>,
    len: usize,
    group_size: usize,
    params: Vec<GroupParams>,
}

impl Rtn4Groups {
    pub fn from_parts(
        packed: Vec<u8>,
        len: usize,
        group_size: usize,
        params: Vec<GroupParams>,
    ) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::InvalidArgument("group size must be >= 1"));
        }
        if packed.len() != len.div_ceil(2) || params.len() != len.div_ceil(group_size) {
            return Err(Error::ShapeMismatch {
                expected: "packed codes and params consistent with length",
                actual: packed.len(),
            });
        }
        Ok(Self {
            packed,
            len,
            group_size,
            params,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn params(&self) -> &[GroupParams] {
        &self.params
    }

    pub fn code(&self, i: usize) -> u8 {
        nibble(&self.packed, i)
    }

    pub fn value(&self, i: usize) -> f32 {
        let p = self.params[i / self.group_size];
        p.zero + self.code(i) as f32 * p.scale
    }

    pub fn dequantize(&self) -> Vec<f32> {
        (0..self.len).map(|i| self.value(i)).collect()
    }
}

pub fn nibble(packed: &[u8], i: usize) -> u8 {
    let b = packed[i / 2];
    if i.is_multiple_of(2) {
        b & 0x0f
    } else {
        b >> 4
    }
}

/// Packs 4-bit codes two per byte, low nibble first.
pub fn pack_nibbles(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| (pair[0] & 0x0f) | (pair.get(1).copied().unwrap_or(0) << 4))
        .collect()
}

/// Per group: `zero = min`, `scale = (max − min) / 15` (1 for a constant
/// group), code `= round((x − zero) / scale)` clamped to `[0, 15]`.
pub fn rtn4_group(values: &[f32], group_size: usize) -> Result<Rtn4Groups> {
    quantize(values, group_size, |min, max| {
        let scale = if max > min {
            (max - min) / MAX_CODE
        } else {
            1.0
        };
        GroupParams { scale, zero: min }
    })
}

/// Same as [`rtn4_group`] but with `scale` and `zero` representable as IEEE
/// half floats, rounded outward so the group range stays covered.
pub fn rtn4_group_half(values: &[f32], group_size: usize) -> Result<Rtn4Groups> {
    quantize(values, group_size, |min, max| {
        let zero = f16_at_most(min);
        let scale = if max > min {
            f16_at_least((max - zero) / MAX_CODE)
        } else {
            1.0
        };
        GroupParams { scale, zero }
    })
}

fn quantize(
    values: &[f32],
    group_size: usize,
    params_for: impl Fn(f32, f32) -> GroupParams,
) -> Result<Rtn4Groups> {
    if group_size == 0 {
        return Err(Error::InvalidArgument("group size must be >= 1"));
    }
    let mut codes = Vec::with_capacity(values.len());
    let mut params = Vec::with_capacity(values.len().div_ceil(group_size));
    for group in values.chunks(group_size) {
        let (min, max) = group
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            });
        let p = params_for(min, max);
        for &x in group {
            let q = libm::roundf((x - p.zero) / p.scale).clamp(0.0, MAX_CODE);
            codes.push(q as u8);
        }
        params.push(p);
    }
    Ok(Rtn4Groups {
        packed: pack_nibbles(&codes),
        len: values.len(),
        group_size,
        params,
    })
}

/// Nearest half-float value, widened back to f32.
pub fn round_to_f16(x: f32) -> f32 {
    f16::from_f32(x).to_f32()
}

/// Largest f16-representable value `<= x`.
pub fn f16_at_most(x: f32) -> f32 {
    let h = f16::from_f32(x);
    if h.to_f32() <= x {
        return h.to_f32();
    }
    f16_step(h, false).to_f32()
}

/// Smallest f16-representable value `>= x`.
pub fn f16_at_least(x: f32) -> f32 {
    let h = f16::from_f32(x);
    if h.to_f32() >= x {
        return h.to_f32();
    }
    f16_step(h, true).to_f32()
}

fn f16_step(h: f16, up: bool) -> f16 {
    let bits = h.to_bits();
    let negative = bits & 0x8000 != 0;
    let magnitude = bits & 0x7fff;
    let next = match (negative, up) {
        (false, true) => bits + 1,
        (false, false) if magnitude == 0 => 0x8001,
        (false, false) => bits - 1,
        (true, false) => bits + 1,
        (true, true) if magnitude == 0 => 0x0001,
        (true, true) => bits - 1,
    };
    f16::from_bits(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;
    use alloc::vec;

    #[test]
    fn constant_group_is_exact() {
        let g = rtn4_group(&[0.37; 10], 4).unwrap();
        assert_eq!(g.dequantize(), vec![0.37; 10]);
        assert!(g.params().iter().all(|p| p.scale == 1.0));
    }

    #[test]
    fn sixteen_levels_are_exact() {
        let vals: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let g = rtn4_group(&vals, 16).unwrap();
        assert_eq!(g.dequantize(), vals);
        assert_eq!(g.params()[0].scale, 1.0);
    }

    #[test]
    fn uniform_group_half_step_bound() {
        let mut rng = SeededRng::new(21);
        for _ in 0..200 {
            let vals: Vec<f32> = (0..64).map(|_| rng.uniform() * 10.0 - 3.0).collect();
            for g in [
                rtn4_group(&vals, 32).unwrap(),
                rtn4_group_half(&vals, 32).unwrap(),
            ] {
                for (i, (&x, y)) in vals.iter().zip(g.dequantize()).enumerate() {
                    let step = g.params()[i / 32].scale;
                    assert!((x - y).abs() <= step / 2.0 + 1e-6, "{x} {y} {step}");
                }
            }
        }
    }

    #[test]
    fn half_params_are_representable() {
        let vals = [0.1234f32, 7.77, -2.5, 3.25, 0.0001];
        let g = rtn4_group_half(&vals, 5).unwrap();
        let p = g.params()[0];
        assert_eq!(round_to_f16(p.scale), p.scale);
        assert_eq!(round_to_f16(p.zero), p.zero);
        assert!(p.zero <= -2.5);
        assert!(p.zero + 15.0 * p.scale >= 7.77);
    }

    #[test]
    fn outward_rounding() {
        for x in [0.1f32, -0.1, 1e-9, -1e-9, 0.0, 1000.3, -1000.3] {
            assert!(f16_at_most(x) <= x);
            assert!(f16_at_least(x) >= x);
        }
    }

    #[test]
    fn nibbles_low_first() {
        assert_eq!(pack_nibbles(&[1, 2, 3]), vec![0x21, 0x03]);
        let packed = pack_nibbles(&[1, 2, 3]);
        assert_eq!(
            (nibble(&packed, 0), nibble(&packed, 1), nibble(&packed, 2)),
            (1, 2, 3)
        );
    }

    #[test]
    fn zero_group_size_rejected() {
        assert!(rtn4_group(&[1.0], 0).is_err());
    }

    #[test]
    fn ragged_last_group() {
        let vals = [0.0f32, 1.0, 2.0, 3.0, 10.0];
        let g = rtn4_group(&vals, 2).unwrap();
        assert_eq!(g.params().len(), 3);
        assert_eq!(g.value(4), 10.0);
    }
}
