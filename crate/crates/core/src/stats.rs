//! Distribution diagnostics: channel-wise KL to the standard normal, a
//! Monte-Carlo check of the post-rotation variance band, off-diagonal
//! covariance mass and within-group correlation.
//!
//! Covariances use the `1/n` (population) normalization throughout.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::hadamard::{rht_in_place, SignVector};
use crate::tensor::{SeededRng, Tensor2D};

/// Histogram range for [`channel_kl`]; two extra bins take the tails.
pub const KL_RANGE: f64 = 5.0;
pub const DEFAULT_KL_BINS: usize = 64;

/// Frozen stand-in for the unknown tail constant in the variance band.
/// See [`calibrate_band_constant`].
pub const DEFAULT_BAND_CONSTANT: f64 = 0.40;

#[derive(Debug, Clone, PartialEq)]
pub struct KlReport {
    pub per_channel_kl: Vec<f64>,
    pub mean_kl: f64,
    pub n_bins: usize,
    pub n_samples: usize,
    /// Mass assigned to empty bins before renormalizing.
    pub smoothing: f64,
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / core::f64::consts::SQRT_2))
}

/// Reference mass of each bin: `n_bins` equal-width bins over `[-5, 5]`
/// followed by the lower and upper tails.
fn reference_masses(n_bins: usize) -> Vec<f64> {
    let width = 2.0 * KL_RANGE / n_bins as f64;
    let mut q: Vec<f64> = (0..n_bins)
        .map(|b| {
            let lo = -KL_RANGE + b as f64 * width;
            normal_cdf(lo + width) - normal_cdf(lo)
        })
        .collect();
    let tail = normal_cdf(-KL_RANGE);
    q.push(tail);
    q.push(tail);
    q
}

fn bin_of(x: f64, n_bins: usize) -> usize {
    if x < -KL_RANGE {
        n_bins
    } else if x >= KL_RANGE {
        n_bins + 1
    } else {
        let b = ((x + KL_RANGE) / (2.0 * KL_RANGE) * n_bins as f64) as usize;
        b.min(n_bins - 1)
    }
}

/// KL(empirical ‖ N(0,1)) per column.
pub fn channel_kl(t: &Tensor2D, n_bins: usize) -> Result<KlReport> {
    let n = t.rows();
    if n < 100 {
        return Err(Error::InvalidArgument("channel_kl needs at least 100 rows"));
    }
    if n_bins < 10 {
        return Err(Error::InvalidArgument("channel_kl needs at least 10 bins"));
    }
    let q = reference_masses(n_bins);
    let smoothing = 1.0 / (2.0 * n as f64);
    let mut per_channel_kl = Vec::with_capacity(t.cols());
    let mut counts = vec![0usize; n_bins + 2];
    for c in 0..t.cols() {
        counts.iter_mut().for_each(|x| *x = 0);
        for r in 0..n {
            counts[bin_of(t.get(r, c) as f64, n_bins)] += 1;
        }
        let mut p: Vec<f64> = counts
            .iter()
            .map(|&k| {
                if k == 0 {
                    smoothing
                } else {
                    k as f64 / n as f64
                }
            })
            .collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= total);
        let kl: f64 = p
            .iter()
            .zip(&q)
            .map(|(&pi, &qi)| pi * libm::log(pi / qi))
            .sum();
        per_channel_kl.push(kl.max(0.0));
    }
    let mean_kl = per_channel_kl.iter().sum::<f64>() / per_channel_kl.len().max(1) as f64;
    Ok(KlReport {
        per_channel_kl,
        mean_kl,
        n_bins,
        n_samples: n,
        smoothing,
    })
}

/// Column means and `1/n` covariance, in f64.
pub fn covariance(t: &Tensor2D) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (t.rows(), t.cols());
    let mut mean = vec![0.0f64; d];
    for row in t.iter_rows() {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut cov = vec![0.0f64; d * d];
    let mut centered = vec![0.0f64; d];
    for row in t.iter_rows() {
        for ((c, &x), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = x as f64 - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / n.max(1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    (mean, cov)
}

/// `‖Cov − diag(Cov)‖_F`.
pub fn offdiag_frobenius(t: &Tensor2D) -> Result<f64> {
    if t.rows() < 2 {
        return Err(Error::InvalidArgument("covariance needs at least 2 rows"));
    }
    let d = t.cols();
    let (_, cov) = covariance(t);
    let mut sum = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                sum += cov[i * d + j] * cov[i * d + j];
            }
        }
    }
    Ok(libm::sqrt(sum))
}

/// Mean `|corr(i, j)|` over channel pairs inside each consecutive group.
/// A constant channel has zero correlation with everything.
pub fn mean_abs_correlation(t: &Tensor2D, group: usize) -> Result<f64> {
    let d = t.cols();
    if group < 2 || !d.is_multiple_of(group) {
        return Err(Error::InvalidArgument(
            "group must be >= 2 and divide the column count",
        ));
    }
    if t.rows() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least 2 rows"));
    }
    let (_, cov) = covariance(t);
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for g in (0..d).step_by(group) {
        for i in g..g + group {
            for j in i + 1..g + group {
                let denom = libm::sqrt(cov[i * d + i] * cov[j * d + j]);
                if denom > 0.0 {
                    sum += (cov[i * d + j] / denom).abs();
                }
                pairs += 1;
            }
        }
    }
    Ok(sum / pairs as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaCheck {
    /// `(1/d) Σ mean(X_i)²`.
    pub epsilon: f64,
    /// Off-diagonal Frobenius norm of the input covariance.
    pub gamma: f64,
    pub alpha: f64,
    /// Tail constant the band was built with.
    pub constant: f64,
    /// `√(ln(2/α)/c) / d`.
    pub beta_alpha_scaled: f64,
    pub lower: f64,
    pub upper: f64,
    /// Fraction of (trial, channel) variances inside `[lower, upper]`.
    pub coverage: f64,
    pub mean_variance: f64,
    pub min_variance: f64,
    pub max_variance: f64,
    pub trials: usize,
    pub n_samples: usize,
}

/// Per-channel `1/n` variances of `RHT(x)` for one sign draw.
fn rotated_variances(t: &Tensor2D, signs: &SignVector) -> Result<Vec<f64>> {
    let (n, d) = (t.rows(), t.cols());
    let mut sum = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    let mut y = vec![0.0f32; d];
    for row in t.iter_rows() {
        y.copy_from_slice(row);
        rht_in_place(&mut y, signs)?;
        for ((s, q), &v) in sum.iter_mut().zip(sq.iter_mut()).zip(&y) {
            *s += v as f64;
            *q += v as f64 * v as f64;
        }
    }
    let n = n as f64;
    Ok(sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| q / n - (s / n) * (s / n))
        .collect())
}

fn epsilon_gamma(t: &Tensor2D) -> Result<(f64, f64)> {
    let (mean, _) = covariance(t);
    let eps = mean.iter().map(|m| m * m).sum::<f64>() / t.cols() as f64;
    Ok((eps, offdiag_frobenius(t)?))
}

/// Draws `trials` random sign vectors and checks how many rotated channel
/// variances fall inside `[1 − ε − Γβ, 1 + Γβ]`, where
/// `β = √(ln(2/α)/constant) / d`. Rows are expected to have squared norm
/// `d` on average (first-normalized data).
pub fn lemma_band_check(
    t: &Tensor2D,
    alpha: f64,
    trials: usize,
    rng: &mut SeededRng,
    constant: f64,
) -> Result<LemmaCheck> {
    let d = t.cols();
    if trials < 30 {
        return Err(Error::InvalidArgument(
            "band check needs at least 30 trials",
        ));
    }
    if alpha.is_nan() || alpha <= 0.0 || alpha >= 1.0 || constant.is_nan() || constant <= 0.0 {
        return Err(Error::InvalidArgument(
            "alpha must be in (0, 1) and the constant positive",
        ));
    }
    crate::hadamard::check_dim(d)?;
    let (epsilon, gamma) = epsilon_gamma(t)?;
    let beta = libm::sqrt(libm::log(2.0 / alpha) / constant) / d as f64;
    let lower = 1.0 - epsilon - gamma * beta;
    let upper = 1.0 + gamma * beta;
    let (mut inside, mut total, mut sum) = (0usize, 0usize, 0.0f64);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..trials {
        let signs = SignVector::sample(rng, d);
        for v in rotated_variances(t, &signs)? {
            inside += usize::from(v >= lower && v <= upper);
            total += 1;
            sum += v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    Ok(LemmaCheck {
        epsilon,
        gamma,
        alpha,
        constant,
        beta_alpha_scaled: beta,
        lower,
        upper,
        coverage: inside as f64 / total as f64,
        mean_variance: sum / total as f64,
        min_variance: lo,
        max_variance: hi,
        trials,
        n_samples: t.rows(),
    })
}

/// Largest tail constant whose band covers a `1 − α` fraction of rotated
/// variances on `t`: `c = ln(2/α) / z²` with `z` the `1 − α` quantile of
/// `d·|Var(Y_i) − (1 − ε)| / Γ`.
pub fn calibrate_band_constant(
    t: &Tensor2D,
    alpha: f64,
    trials: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    let d = t.cols();
    let (epsilon, gamma) = epsilon_gamma(t)?;
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::InvalidArgument(
            "calibration needs correlated noise (gamma > 0)",
        ));
    }
    let mut z = Vec::with_capacity(trials * d);
    for _ in 0..trials {
        let signs = SignVector::sample(rng, d);
        for v in rotated_variances(t, &signs)? {
            z.push(d as f64 * (v - (1.0 - epsilon)).abs() / gamma);
        }
    }
    z.sort_by(|a, b| a.total_cmp(b));
    let idx = ((1.0 - alpha) * z.len() as f64).ceil() as usize;
    let q = z[idx.min(z.len() - 1)];
    Ok(libm::log(2.0 / alpha) / (q * q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nsn::nsn_forward;
    use crate::tensor::sample_standard_normal;
    use proptest::prelude::*;

    fn brute_cov(t: &Tensor2D, i: usize, j: usize) -> f64 {
        let n = t.rows() as f64;
        let mi: f64 = (0..t.rows()).map(|r| t.get(r, i) as f64).sum::<f64>() / n;
        let mj: f64 = (0..t.rows()).map(|r| t.get(r, j) as f64).sum::<f64>() / n;
        (0..t.rows())
            .map(|r| (t.get(r, i) as f64 - mi) * (t.get(r, j) as f64 - mj))
            .sum::<f64>()
            / n
    }

    #[test]
    fn reference_masses_sum_to_one() {
        let total: f64 = reference_masses(64).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_kl_is_small() {
        let mut rng = SeededRng::new(1);
        let t = sample_standard_normal(&mut rng, 4096, 32);
        let r = channel_kl(&t, 64).unwrap();
        assert!(r.mean_kl > 0.0 && r.mean_kl < 0.03, "{}", r.mean_kl);
    }

    #[test]
    fn constant_channel_kl_is_finite() {
        let t = Tensor2D::new(200, 1, vec![0.3; 200]).unwrap();
        let r = channel_kl(&t, 64).unwrap();
        assert!(r.mean_kl.is_finite() && r.mean_kl > 2.0);
    }

    #[test]
    fn kl_rejects_small_inputs() {
        assert!(channel_kl(&Tensor2D::zeros(99, 2), 64).is_err());
        assert!(channel_kl(&Tensor2D::zeros(100, 2), 9).is_err());
    }

    #[test]
    fn duplicated_unit_channels_give_sqrt2() {
        let rows: Vec<[f32; 2]> = (0..100)
            .map(|i| if i % 2 == 0 { [1.0, 1.0] } else { [-1.0, -1.0] })
            .collect();
        let t = Tensor2D::from_rows(&rows).unwrap();
        assert!((offdiag_frobenius(&t).unwrap() - core::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn perfectly_correlated_group_has_mac_one() {
        let mut rng = SeededRng::new(2);
        let base = sample_standard_normal(&mut rng, 200, 1);
        let rows: Vec<Vec<f32>> = base
            .iter_rows()
            .map(|r| {
                (0..8)
                    .map(|k| if k % 2 == 0 { r[0] } else { -2.0 * r[0] })
                    .collect()
            })
            .collect();
        let t = Tensor2D::from_rows(&rows).unwrap();
        assert!((mean_abs_correlation(&t, 8).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn independent_channels_are_nearly_uncorrelated() {
        let mut rng = SeededRng::new(3);
        let t = sample_standard_normal(&mut rng, 20000, 16);
        assert!(mean_abs_correlation(&t, 8).unwrap() < 0.02);
        assert!(offdiag_frobenius(&t).unwrap() < 0.2);
    }

    #[test]
    fn mac_rejects_bad_group() {
        assert!(mean_abs_correlation(&Tensor2D::zeros(4, 12), 8).is_err());
    }

    #[test]
    fn variance_identity_holds_exactly() {
        // With first-normalized rows, mean variance over channels after any
        // rotation is exactly 1 − ε.
        let mut rng = SeededRng::new(4);
        let mut t = sample_standard_normal(&mut rng, 512, 64);
        for row in t.as_mut_slice().chunks_exact_mut(64) {
            row[0] += 2.0;
            let s = crate::math::norm(row) / 8.0;
            crate::math::scale_in_place(row, 1.0 / s);
        }
        let (eps, _) = epsilon_gamma(&t).unwrap();
        let signs = SignVector::sample(&mut rng, 64);
        let v = rotated_variances(&t, &signs).unwrap();
        let mean = v.iter().sum::<f64>() / 64.0;
        assert!((mean - (1.0 - eps)).abs() < 1e-5, "{mean} vs {}", 1.0 - eps);
    }

    #[test]
    fn gaussian_band_covers() {
        let mut rng = SeededRng::new(5);
        let t = nsn_forward(&sample_standard_normal(&mut rng, 2048, 64))
            .unwrap()
            .normalized;
        let check = lemma_band_check(&t, 0.05, 30, &mut rng, DEFAULT_BAND_CONSTANT).unwrap();
        assert!(check.coverage >= 0.95, "{check:?}");
        assert!((0.0..=1.0).contains(&check.coverage));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn covariance_matches_brute_force(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let t = sample_standard_normal(&mut rng, 64, 32);
            let mut fro = 0.0;
            let mut mac = 0.0;
            for i in 0..32 {
                for j in 0..32 {
                    if i != j {
                        fro += brute_cov(&t, i, j).powi(2);
                    }
                }
            }
            for g in (0..32).step_by(8) {
                for i in g..g + 8 {
                    for j in i + 1..g + 8 {
                        mac += (brute_cov(&t, i, j) / (brute_cov(&t, i, i) * brute_cov(&t, j, j)).sqrt()).abs();
                    }
                }
            }
            mac /= 4.0 * 28.0;
            prop_assert!((offdiag_frobenius(&t).unwrap() - fro.sqrt()).abs() < 1e-6);
            prop_assert!((mean_abs_correlation(&t, 8).unwrap() - mac).abs() < 1e-6);
        }
    }
}
