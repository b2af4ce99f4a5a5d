//! Normalize–Shift–Normalize over one residual-size chunk of tokens.
//!
//! ```text
//! s1 = ‖v‖ / √d        v_n   = v / s1
//! o  = mean(v_n)       v_ns  = v_n − o
//! s2 = ‖v_ns‖ / √d     v_nsn = v_ns / s2
//! ```
//!
//! The byproducts `(s1, o, s2)` restore the chunk exactly through
//! `v = s1 · (s2 · v_nsn + o)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{col_means, Tensor2D};

/// Per-token norms below `CLAMP_FACTOR · √d` are clamped to that value.
pub const CLAMP_FACTOR: f32 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct NsnByproducts {
    /// First-normalize scale per token.
    pub s1: Vec<f32>,
    /// Channel shift, length d.
    pub shift: Vec<f32>,
    /// Second-normalize scale per token.
    pub s2: Vec<f32>,
}

impl NsnByproducts {
    pub fn n_tokens(&self) -> usize {
        self.s1.len()
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }
}

/// Tokens whose norm hit the clamp, per normalization step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClampWarning {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
}

impl ClampWarning {
    pub fn is_empty(&self) -> bool {
        self.first.is_empty() && self.second.is_empty()
    }

    pub fn count(&self) -> usize {
        self.first.len() + self.second.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NsnOutput {
    pub normalized: Tensor2D,
    pub byproducts: NsnByproducts,
    pub clamps: ClampWarning,
}

/// How the Shift step picks its center.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ShiftMode {
    #[default]
    Mean,
    GeometricMedian {
        max_iters: usize,
        tol: f32,
    },
}

pub fn nsn_forward(chunk: &Tensor2D) -> Result<NsnOutput> {
    nsn_forward_with(chunk, ShiftMode::Mean)
}

pub fn nsn_forward_with(chunk: &Tensor2D, mode: ShiftMode) -> Result<NsnOutput> {
    let d = chunk.cols();
    if chunk.rows() == 0 {
        return Err(Error::ShapeMismatch {
            expected: "at least one token",
            actual: 0,
        });
    }
    if d < 2 {
        return Err(Error::ShapeMismatch {
            expected: "at least two channels",
            actual: d,
        });
    }
    if let Some(bad) = chunk
        .iter_rows()
        .position(|r| !r.iter().all(|x| x.is_finite()))
    {
        return Err(Error::DegenerateToken { token: bad });
    }

    let mut clamps = ClampWarning::default();
    let mut work = chunk.clone();
    let s1 = normalize_rows(&mut work, &mut clamps.first);
    let shift = match mode {
        ShiftMode::Mean => col_means(&work),
        ShiftMode::GeometricMedian { max_iters, tol } => {
            weiszfeld_shift(&work, max_iters, tol)?.shift
        }
    };
    for i in 0..work.rows() {
        for (x, o) in work.row_mut(i).iter_mut().zip(&shift) {
            *x -= o;
        }
    }
    let s2 = normalize_rows(&mut work, &mut clamps.second);
    Ok(NsnOutput {
        normalized: work,
        byproducts: NsnByproducts { s1, shift, s2 },
        clamps,
    })
}

/// Rescales every row to norm √d and returns the per-row `norm / √d`.
fn normalize_rows(t: &mut Tensor2D, clamped: &mut Vec<usize>) -> Vec<f32> {
    let sqrt_d = math::sqrt(t.cols() as f32);
    let floor = CLAMP_FACTOR * sqrt_d;
    let mut scales = Vec::with_capacity(t.rows());
    for i in 0..t.rows() {
        let row = t.row_mut(i);
        let mut n = math::norm(row);
        if n < floor {
            n = floor;
            clamped.push(i);
        }
        let s = n / sqrt_d;
        for x in row.iter_mut() {
            *x /= s;
        }
        scales.push(s);
    }
    scales
}

/// `s1 ⊙ (s2 ⊙ v_nsn + o)` with per-token `s1, s2` and per-channel `o`.
pub fn nsn_restore(normalized: &Tensor2D, b: &NsnByproducts) -> Result<Tensor2D> {
    let (n, d) = (normalized.rows(), normalized.cols());
    if b.s1.len() != n || b.s2.len() != n {
        return Err(Error::ShapeMismatch {
            expected: "one s1/s2 per token",
            actual: b.s1.len().min(b.s2.len()),
        });
    }
    if b.shift.len() != d {
        return Err(Error::ShapeMismatch {
            expected: "shift of length d",
            actual: b.shift.len(),
        });
    }
    let mut out = normalized.clone();
    for i in 0..n {
        let (s1, s2) = (b.s1[i], b.s2[i]);
        for (x, o) in out.row_mut(i).iter_mut().zip(&b.shift) {
            *x = s1 * (s2 * *x + o);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeiszfeldResult {
    pub shift: Vec<f32>,
    pub iterations: usize,
    /// False when `max_iters` ran out before the step fell below `tol`.
    pub converged: bool,
}

/// Geometric median of the rows of `points` (minimizer of `Σ ‖t_i − o‖`)
/// by Weiszfeld iteration, started from the arithmetic mean.
pub fn weiszfeld_shift(points: &Tensor2D, max_iters: usize, tol: f32) -> Result<WeiszfeldResult> {
    if points.rows() == 0 || max_iters == 0 {
        return Err(Error::InvalidArgument(
            "weiszfeld needs points and max_iters >= 1",
        ));
    }
    let d = points.cols();
    let nudge = 1e-7 / math::sqrt(d as f32);
    let mut center: Vec<f64> = col_means(points).into_iter().map(f64::from).collect();
    let mut next = vec![0.0f64; d];

    for iter in 1..=max_iters {
        // An iterate sitting on a data point has no defined gradient.
        let on_point = points.iter_rows().any(|row| dist(row, &center) < 1e-12);
        if on_point {
            for c in &mut center {
                *c += nudge as f64;
            }
        }
        next.iter_mut().for_each(|x| *x = 0.0);
        let mut weight_sum = 0.0f64;
        for row in points.iter_rows() {
            let w = 1.0 / dist(row, &center).max(1e-30);
            weight_sum += w;
            for (acc, &x) in next.iter_mut().zip(row) {
                *acc += w * x as f64;
            }
        }
        let mut step_sq = 0.0f64;
        for (c, acc) in center.iter_mut().zip(&next) {
            let v = acc / weight_sum;
            step_sq += (v - *c) * (v - *c);
            *c = v;
        }
        if step_sq.sqrt() < tol as f64 {
            return Ok(WeiszfeldResult {
                shift: center.iter().map(|&c| c as f32).collect(),
                iterations: iter,
                converged: true,
            });
        }
    }
    Ok(WeiszfeldResult {
        shift: center.iter().map(|&c| c as f32).collect(),
        iterations: max_iters,
        converged: false,
    })
}

fn dist(row: &[f32], center: &[f64]) -> f64 {
    row.iter()
        .zip(center)
        .map(|(&x, c)| {
            let t = x as f64 - c;
            t * t
        })
        .sum::<f64>()
        .sqrt()
}

/// `Σ_i ‖t_i − o‖`, the objective the geometric median minimizes.
pub fn sum_of_distances(points: &Tensor2D, center: &[f32]) -> f64 {
    let c: Vec<f64> = center.iter().map(|&x| x as f64).collect();
    points.iter_rows().map(|r| dist(r, &c)).sum()
}
