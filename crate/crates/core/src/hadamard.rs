//! Orthonormal fast Walsh–Hadamard transform and its randomized (sign
//! flipped) variant, applied per token row.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor2D};

pub fn check_dim(d: usize) -> Result<()> {
    if d < 2 || !d.is_power_of_two() {
        return Err(Error::NonPowerOfTwoDim(d));
    }
    Ok(())
}

/// In-place `H_d · x / √d` (Sylvester ordering). Butterflies run unscaled;
/// the 1/√d factor is applied once at the end.
pub fn fwht_in_place(x: &mut [f32]) -> Result<()> {
    let d = x.len();
    check_dim(d)?;
    let mut h = 1;
    while h < d {
        for block in x.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (u, v) = (*a, *b);
                *a = u + v;
                *b = u - v;
            }
        }
        h *= 2;
    }
    let scale = 1.0 / libm::sqrtf(d as f32);
    for v in x.iter_mut() {
        *v *= scale;
    }
    Ok(())
}

pub fn fwht(row: &[f32]) -> Result<Vec<f32>> {
    let mut out = row.to_vec();
    fwht_in_place(&mut out)?;
    Ok(out)
}

/// Random ±1 diagonal of the randomized Hadamard transform.
#[derive(Debug, Clone, PartialEq)]
pub struct SignVector {
    signs: Vec<f32>,
    seed: u64,
}

impl SignVector {
    pub fn from_seed(seed: u64, d: usize) -> Self {
        let mut rng = SeededRng::new(seed);
        Self::sample(&mut rng, d)
    }

    pub fn sample(rng: &mut SeededRng, d: usize) -> Self {
        let signs = (0..d)
            .map(|_| if rng.coin() { 1.0 } else { -1.0 })
            .collect();
        Self {
            signs,
            seed: rng.seed(),
        }
    }

    pub fn ones(d: usize) -> Self {
        Self {
            signs: alloc::vec![1.0; d],
            seed: 0,
        }
    }

    pub fn signs(&self) -> &[f32] {
        &self.signs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }
}

fn check_signs(d: usize, sv: &SignVector) -> Result<()> {
    if sv.len() != d {
        return Err(Error::ShapeMismatch {
            expected: "sign vector of row length",
            actual: sv.len(),
        });
    }
    Ok(())
}

/// `fwht(signs ⊙ row)`.
pub fn rht_in_place(row: &mut [f32], sv: &SignVector) -> Result<()> {
    check_signs(row.len(), sv)?;
    for (x, s) in row.iter_mut().zip(&sv.signs) {
        *x *= s;
    }
    fwht_in_place(row)
}

pub fn rht(row: &[f32], sv: &SignVector) -> Result<Vec<f32>> {
    let mut out = row.to_vec();
    rht_in_place(&mut out, sv)?;
    Ok(out)
}

/// Inverse of [`rht`]: inverse transform, then undo the sign flip.
pub fn inverse_rht_in_place(row: &mut [f32], sv: &SignVector) -> Result<()> {
    check_signs(row.len(), sv)?;
    fwht_in_place(row)?;
    for (x, s) in row.iter_mut().zip(&sv.signs) {
        *x *= s;
    }
    Ok(())
}

/// Which per-row rotation to apply.
#[derive(Debug, Clone, Copy)]
pub enum Rotation<'a> {
    Plain,
    Randomized(&'a SignVector),
}

pub fn apply_rows(t: &Tensor2D, rotation: Rotation<'_>) -> Result<Tensor2D> {
    check_dim(t.cols())?;
    let mut out = t.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        match rotation {
            Rotation::Plain => fwht_in_place(row)?,
            Rotation::Randomized(sv) => rht_in_place(row, sv)?,
        }
    }
    Ok(out)
}

pub fn apply_rows_inverse(t: &Tensor2D, rotation: Rotation<'_>) -> Result<Tensor2D> {
    check_dim(t.cols())?;
    let mut out = t.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        match rotation {
            Rotation::Plain => fwht_in_place(row)?,
            Rotation::Randomized(sv) => inverse_rht_in_place(row, sv)?,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::norm;
    use crate::tensor::{col_means, sample_standard_normal};
    use alloc::vec;
    use proptest::prelude::*;

    /// Explicit Sylvester matrix, scaled by 1/√d.
    fn naive_hadamard(d: usize) -> Vec<Vec<f64>> {
        let s = 1.0 / (d as f64).sqrt();
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| if (i & j).count_ones() % 2 == 0 { s } else { -s })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn constant_vector_maps_to_first_axis() {
        assert_eq!(fwht(&[1.0, 1.0, 1.0, 1.0]).unwrap(), [2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert_eq!(fwht(&[1.0, 2.0, 3.0]), Err(Error::NonPowerOfTwoDim(3)));
        assert_eq!(fwht(&[1.0]), Err(Error::NonPowerOfTwoDim(1)));
    }

    #[test]
    fn matches_naive_product() {
        let mut rng = SeededRng::new(11);
        let mut d = 2;
        while d <= 128 {
            let h = naive_hadamard(d);
            let mut x = vec![0.0f32; d];
            rng.fill_normal(&mut x);
            let fast = fwht(&x).unwrap();
            for i in 0..d {
                let slow: f64 = (0..d).map(|j| h[i][j] * x[j] as f64).sum();
                assert!((fast[i] as f64 - slow).abs() < 1e-5, "d={d}");
            }
            d *= 2;
        }
    }

    #[test]
    fn all_plus_signs_equal_plain() {
        let mut rng = SeededRng::new(1);
        let mut x = vec![0.0f32; 64];
        rng.fill_normal(&mut x);
        assert_eq!(rht(&x, &SignVector::ones(64)).unwrap(), fwht(&x).unwrap());
    }

    #[test]
    fn rht_inverse_roundtrip() {
        let mut rng = SeededRng::new(2);
        let sv = SignVector::sample(&mut rng, 128);
        let mut x = vec![0.0f32; 128];
        rng.fill_normal(&mut x);
        let mut y = rht(&x, &sv).unwrap();
        assert!((norm(&y) - norm(&x)).abs() <= 1e-5 * norm(&x));
        inverse_rht_in_place(&mut y, &sv).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn sign_vector_is_seed_deterministic() {
        let a = SignVector::from_seed(5, 32);
        assert_eq!(a, SignVector::from_seed(5, 32));
        assert!(a.signs().iter().all(|&s| s == 1.0 || s == -1.0));
    }

    #[test]
    fn apply_rows_examples() {
        let t = Tensor2D::from_rows(&[[1.0f32, 1.0, 1.0, 1.0]]).unwrap();
        let out = apply_rows(&t, Rotation::Plain).unwrap();
        assert_eq!(out.row(0), [2.0, 0.0, 0.0, 0.0]);

        let empty = Tensor2D::zeros(0, 8);
        let out = apply_rows(&empty, Rotation::Plain).unwrap();
        assert_eq!((out.rows(), out.cols()), (0, 8));
    }

    #[test]
    fn gaussian_stays_isotropic() {
        let t = sample_standard_normal(&mut SeededRng::new(3), 1000, 128);
        let out = apply_rows(&t, Rotation::Plain).unwrap();
        let means = col_means(&out);
        for j in 0..128 {
            let var: f32 = out
                .iter_rows()
                .map(|r| (r[j] - means[j]) * (r[j] - means[j]))
                .sum::<f32>()
                / 1000.0;
            assert!((0.8..=1.2).contains(&var), "channel {j} var {var}");
        }
    }

    proptest! {
        #[test]
        fn norm_preserving_involution(seed in any::<u64>(), log_d in 1u32..9) {
            let d = 1usize << log_d;
            let mut x = vec![0.0f32; d];
            SeededRng::new(seed).fill_normal(&mut x);
            let y = fwht(&x).unwrap();
            let nx = norm(&x);
            prop_assert!((norm(&y) - nx).abs() <= 1e-5 * nx);
            let z = fwht(&y).unwrap();
            for (a, b) in x.iter().zip(&z) {
                prop_assert!((a - b).abs() <= 1e-5 * nx.max(1.0));
            }
        }
    }
}
