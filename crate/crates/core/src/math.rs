//! Small f32 vector helpers shared by the pipeline.

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f32]) -> f32 {
    a.iter().map(|x| x * x).sum()
}

#[inline]
pub fn norm(a: &[f32]) -> f32 {
    libm::sqrtf(norm_sq(a))
}

#[inline]
pub fn sqrt(x: f32) -> f32 {
    libm::sqrtf(x)
}

/// Cosine similarity; 0 when either side is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

pub fn scale_in_place(a: &mut [f32], s: f32) {
    for x in a {
        *x *= s;
    }
}

/// `a += s * b`
pub fn axpy(a: &mut [f32], s: f32, b: &[f32]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += s * y;
    }
}

/// Numerically stable softmax of `scores * temperature`.
pub fn softmax_scaled(scores: &[f32], temperature: f32) -> alloc::vec::Vec<f32> {
    let max = scores
        .iter()
        .map(|s| s * temperature)
        .fold(f32::NEG_INFINITY, f32::max);
    let mut out: alloc::vec::Vec<f32> = scores
        .iter()
        .map(|s| libm::expf(s * temperature - max))
        .collect();
    let total: f32 = out.iter().sum();
    for w in &mut out {
        *w /= total;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one() {
        let w = softmax_scaled(&[1.0, 2.0, 3.0, 1000.0], 1.0);
        assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(w[3] > 0.999);
    }

    #[test]
    fn cosine_of_zero_is_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((cosine(&[1.0, 1.0], &[2.0, 2.0]) - 1.0).abs() < 1e-6);
    }
}
