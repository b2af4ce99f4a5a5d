//! The single global 256 × 8 codebook shared by every layer and head.
//!
//! In [`BitMode::TwoBit`] the input sub-vector is folded into the
//! nonnegative orthant: its 8 sign bits are stored next to the 8-bit index
//! and the entries themselves are constrained to be nonnegative. In
//! [`BitMode::OneBit`] only the index is stored.
//!
//! The codebook is built from synthetic standard-normal samples only
//! (K-Means, then cosine fine-tuning), so it never sees model data.

use alloc::vec;
use alloc::vec::Vec;

use crate::dq::{nibble, pack_nibbles};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::SeededRng;

pub const N_ENTRIES: usize = 256;
pub const SUB_DIM: usize = 8;

pub type Entry = [f32; SUB_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BitMode {
    OneBit,
    TwoBit,
}

impl BitMode {
    /// Payload bits per channel (excluding byproducts).
    pub fn payload_bits(self) -> u32 {
        match self {
            BitMode::OneBit => 1,
            BitMode::TwoBit => 2,
        }
    }

    pub fn folds_signs(self) -> bool {
        matches!(self, BitMode::TwoBit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchMetric {
    #[default]
    Cosine,
    Euclidean,
}

/// Result of matching one 8-dim sub-vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Match {
    pub index: u8,
    /// Bit `i` set means component `i` was negative. Always 0 in one-bit mode.
    pub signs: u8,
}

/// Round-to-nearest 4-bit copy of the entries with a single codebook-wide
/// scale. Two-bit codebooks use codes `0..=15` over `[0, scale]`; one-bit
/// codebooks use codes `0..=14` over `[-scale, scale]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Packed4 {
    scale: f32,
    nibbles: Vec<u8>,
}

impl Packed4 {
    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn nibbles(&self) -> &[u8] {
        &self.nibbles
    }

    /// Reconstruction error bound per component.
    pub fn half_step(&self, mode: BitMode) -> f32 {
        self.scale / levels(mode) / 2.0
    }
}

fn levels(mode: BitMode) -> f32 {
    match mode {
        BitMode::TwoBit => 15.0,
        BitMode::OneBit => 7.0,
    }
}

fn code_offset(mode: BitMode) -> f32 {
    match mode {
        BitMode::TwoBit => 0.0,
        BitMode::OneBit => 7.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Vec<Entry>,
    bit_mode: BitMode,
    seed: u64,
    tuned: bool,
    packed4: Option<Packed4>,
    /// Entries used for matching and lookup (dequantized when packed).
    active: Vec<Entry>,
    active_norms: Vec<f32>,
}

impl Codebook {
    pub fn new(entries: Vec<Entry>, bit_mode: BitMode, seed: u64, tuned: bool) -> Result<Self> {
        if entries.len() != N_ENTRIES {
            return Err(Error::ShapeMismatch {
                expected: "256 codebook entries",
                actual: entries.len(),
            });
        }
        for e in &entries {
            if !e.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidArgument("codebook entry is not finite"));
            }
            if e.iter().all(|&x| x == 0.0) {
                return Err(Error::InvalidArgument("codebook entry is the zero vector"));
            }
            if bit_mode.folds_signs() && e.iter().any(|&x| x < 0.0) {
                return Err(Error::InvalidArgument(
                    "two-bit codebook entries must be nonnegative",
                ));
            }
        }
        let active_norms = entries.iter().map(|e| math::norm(e)).collect();
        Ok(Self {
            active: entries.clone(),
            entries,
            bit_mode,
            seed,
            tuned,
            packed4: None,
            active_norms,
        })
    }

    /// Rebuilds a packed codebook from stored nibbles (used by readers).
    pub fn with_packed(mut self, scale: f32, nibbles: Vec<u8>) -> Result<Self> {
        if nibbles.len() != N_ENTRIES * SUB_DIM / 2 {
            return Err(Error::ShapeMismatch {
                expected: "1024 packed bytes",
                actual: nibbles.len(),
            });
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidArgument("packed scale must be positive"));
        }
        self.install_packed(Packed4 { scale, nibbles });
        Ok(self)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    /// Entries as seen by [`Codebook::match_subvector`] and [`Codebook::lookup`].
    pub fn active_entries(&self) -> &[Entry] {
        &self.active
    }

    pub fn bit_mode(&self) -> BitMode {
        self.bit_mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_tuned(&self) -> bool {
        self.tuned
    }

    pub fn packed4(&self) -> Option<&Packed4> {
        self.packed4.as_ref()
    }

    /// Round-to-nearest 4-bit packing with one codebook-wide scale.
    pub fn pack4(&self) -> Codebook {
        let mode = self.bit_mode;
        let scale = self
            .entries
            .iter()
            .flatten()
            .fold(0.0f32, |m, x| m.max(x.abs()));
        let lv = levels(mode);
        let off = code_offset(mode);
        let codes: Vec<u8> = self
            .entries
            .iter()
            .flatten()
            .map(|&x| (libm::roundf(x / scale * lv) + off).clamp(0.0, lv + off) as u8)
            .collect();
        let mut out = self.clone();
        out.install_packed(Packed4 {
            scale,
            nibbles: pack_nibbles(&codes),
        });
        out
    }

    /// Drops the packed form and matches against full-precision entries again.
    pub fn unpacked(&self) -> Codebook {
        let mut out = self.clone();
        out.packed4 = None;
        out.active = out.entries.clone();
        out.active_norms = out.entries.iter().map(|e| math::norm(e)).collect();
        out
    }

    fn install_packed(&mut self, packed: Packed4) {
        let lv = levels(self.bit_mode);
        let off = code_offset(self.bit_mode);
        let mut active = vec![[0.0f32; SUB_DIM]; N_ENTRIES];
        for (k, e) in active.iter_mut().enumerate() {
            for (j, x) in e.iter_mut().enumerate() {
                let q = nibble(&packed.nibbles, k * SUB_DIM + j) as f32;
                *x = (q - off) / lv * packed.scale;
            }
        }
        self.active_norms = active.iter().map(|e| math::norm(e)).collect();
        self.active = active;
        self.packed4 = Some(packed);
    }

    pub fn match_subvector(&self, v: &[f32]) -> Result<Match> {
        self.match_with(v, MatchMetric::Cosine)
    }

    /// Closest entry to `v` (to `|v|` in two-bit mode). Ties go to the
    /// lowest index.
    pub fn match_with(&self, v: &[f32], metric: MatchMetric) -> Result<Match> {
        if v.len() != SUB_DIM {
            return Err(Error::ShapeMismatch {
                expected: "8-dim sub-vector",
                actual: v.len(),
            });
        }
        if math::norm(v) < 1e-12 {
            return Err(Error::ZeroVector);
        }
        let mut folded = [0.0f32; SUB_DIM];
        let mut signs = 0u8;
        if self.bit_mode.folds_signs() {
            for (i, (&x, f)) in v.iter().zip(folded.iter_mut()).enumerate() {
                if x < 0.0 {
                    signs |= 1 << i;
                }
                *f = x.abs();
            }
        } else {
            folded.copy_from_slice(v);
        }

        let mut best = 0usize;
        let mut best_score = f32::NEG_INFINITY;
        for (k, (e, &n)) in self.active.iter().zip(&self.active_norms).enumerate() {
            if n == 0.0 {
                continue;
            }
            let score = match metric {
                MatchMetric::Cosine => math::dot(&folded, e) / n,
                MatchMetric::Euclidean => -folded
                    .iter()
                    .zip(e)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f32>(),
            };
            if score > best_score {
                best_score = score;
                best = k;
            }
        }
        Ok(Match {
            index: best as u8,
            signs,
        })
    }

    pub fn lookup(&self, index: usize, signs: u8) -> Result<Entry> {
        let mut out = *self
            .active
            .get(index)
            .ok_or(Error::IndexOutOfRange(index))?;
        if self.bit_mode.folds_signs() {
            for (i, x) in out.iter_mut().enumerate() {
                if signs & (1 << i) != 0 {
                    *x = -*x;
                }
            }
        }
        Ok(out)
    }

    /// Quantize-then-reconstruct one sub-vector.
    pub fn quantize_subvector(&self, v: &[f32]) -> Result<Entry> {
        let m = self.match_subvector(v)?;
        self.lookup(m.index as usize, m.signs)
    }
}

/// Mean cosine similarity between each sample and its reconstruction.
pub fn mean_quantization_cosine(cb: &Codebook, samples: &[Entry]) -> f32 {
    let mut total = 0.0f64;
    for v in samples {
        let cos = match cb.quantize_subvector(v) {
            Ok(q) => math::cosine(v, &q),
            Err(_) => 0.0,
        };
        total += cos as f64;
    }
    (total / samples.len().max(1) as f64) as f32
}

/// `n` standard-normal 8-dim samples, folded to `|v|` in two-bit mode.
pub fn synthetic_samples(rng: &mut SeededRng, n: usize, fold: bool) -> Vec<Entry> {
    let mut out = vec![[0.0f32; SUB_DIM]; n];
    for v in &mut out {
        rng.fill_normal(v);
        if fold {
            for x in v.iter_mut() {
                *x = x.abs();
            }
        }
    }
    out
}

/// Lloyd's algorithm from 256 distinct random samples. Empty clusters are
/// reseeded from the sample farthest from its centroid.
pub fn lloyd_centroids(
    samples: &[Entry],
    n_iters: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Entry>> {
    if samples.len() < N_ENTRIES {
        return Err(Error::InvalidArgument("k-means needs at least 256 samples"));
    }
    if n_iters == 0 {
        return Err(Error::InvalidArgument(
            "k-means needs at least one iteration",
        ));
    }
    // Partial Fisher–Yates for the initial picks.
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for i in 0..N_ENTRIES {
        let j = i + rng.below(samples.len() - i);
        order.swap(i, j);
    }
    let mut centroids: Vec<Entry> = order[..N_ENTRIES].iter().map(|&i| samples[i]).collect();
    let mut assign = vec![0usize; samples.len()];
    let mut dist = vec![0.0f32; samples.len()];

    for _ in 0..n_iters {
        let half_norms: Vec<f32> = centroids.iter().map(|c| 0.5 * math::norm_sq(c)).collect();
        let mut changed = false;
        for (s, v) in samples.iter().enumerate() {
            let mut best = 0;
            let mut best_score = f32::INFINITY;
            for (k, c) in centroids.iter().enumerate() {
                let score = half_norms[k] - math::dot(v, c);
                if score < best_score {
                    best_score = score;
                    best = k;
                }
            }
            if assign[s] != best {
                changed = true;
            }
            assign[s] = best;
            dist[s] = (2.0 * best_score + math::norm_sq(v)).max(0.0);
        }

        let mut sums = vec![[0.0f64; SUB_DIM]; N_ENTRIES];
        let mut counts = vec![0usize; N_ENTRIES];
        for (v, &k) in samples.iter().zip(&assign) {
            counts[k] += 1;
            for (acc, &x) in sums[k].iter_mut().zip(v) {
                *acc += x as f64;
            }
        }
        let mut reseeded = false;
        for k in 0..N_ENTRIES {
            if counts[k] > 0 {
                for (c, s) in centroids[k].iter_mut().zip(&sums[k]) {
                    *c = (*s / counts[k] as f64) as f32;
                }
                continue;
            }
            let far = (0..samples.len())
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            centroids[k] = samples[far];
            dist[far] = -1.0;
            reseeded = true;
        }
        if !changed && !reseeded {
            break;
        }
    }
    Ok(centroids)
}

/// K-Means codebook on synthetic standard-normal data.
pub fn kmeans_init(
    rng: &mut SeededRng,
    bit_mode: BitMode,
    n_samples: usize,
    n_iters: usize,
) -> Result<Codebook> {
    let seed = rng.seed();
    let samples = synthetic_samples(rng, n_samples, bit_mode.folds_signs());
    let mut centroids = lloyd_centroids(&samples, n_iters, rng)?;
    repair_zero_entries(&mut centroids);
    Codebook::new(centroids, bit_mode, seed, false)
}

fn repair_zero_entries(entries: &mut [Entry]) {
    for e in entries {
        if e.iter().all(|&x| x == 0.0) {
            e[0] = f32::MIN_POSITIVE;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneReport {
    pub iters: usize,
    /// Mean cosine similarity on the run's monitor set before tuning.
    pub initial_mean_cossim: f32,
    /// Same metric for the returned codebook.
    pub final_mean_cossim: f32,
    /// Filled in by callers that can read a clock.
    pub wall_time: f64,
    /// Batch mean cosine similarity seen by each step, before its update.
    pub batch_history: Vec<f32>,
    /// `(step, monitor mean cosine similarity)` checkpoints.
    pub checkpoints: Vec<(usize, f32)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuneConfig {
    /// Fresh synthetic vectors drawn per step.
    pub batch: usize,
    pub n_steps: usize,
    pub lr: f32,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            batch: 8192,
            n_steps: 2000,
            lr: 0.5,
        }
    }
}

const CHECKPOINT_EVERY: usize = 50;
const MONITOR_STREAM: u64 = 0x6d6f_6e69;

/// Cosine fine-tuning on synthetic standard-normal data.
///
/// Each step draws `batch_size` fresh vectors, assigns them with the
/// inference-time match (the lookup is held fixed) and moves each entry
/// along the negative gradient of the mean cosine distance of its assigned
/// vectors. Two-bit entries are projected back onto the nonnegative orthant.
/// A fixed monitor set scores checkpoints; the best one is returned, so the
/// result never scores below the input on that set.
pub fn finetune(
    cb: &Codebook,
    rng: &mut SeededRng,
    batch_size: usize,
    n_steps: usize,
    lr: f32,
) -> Result<(Codebook, TuneReport)> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("fine-tuning needs samples"));
    }
    let fold = cb.bit_mode().folds_signs();
    let monitor = synthetic_samples(&mut rng.split(MONITOR_STREAM), batch_size, fold);
    run_tuning(cb, n_steps, lr, &monitor, |_| {
        synthetic_samples(rng, batch_size, fold)
    })
}

/// Full-batch variant of [`finetune`] on a fixed training set, which also
/// serves as the monitor set.
pub fn finetune_on(
    cb: &Codebook,
    samples: &[Entry],
    n_steps: usize,
    lr: f32,
) -> Result<(Codebook, TuneReport)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning needs samples"));
    }
    run_tuning(cb, n_steps, lr, samples, |_| samples.to_vec())
}

fn run_tuning(
    cb: &Codebook,
    n_steps: usize,
    lr: f32,
    monitor: &[Entry],
    mut next_batch: impl FnMut(usize) -> Vec<Entry>,
) -> Result<(Codebook, TuneReport)> {
    let mode = cb.bit_mode();
    let mut current = cb.unpacked();
    let initial = mean_quantization_cosine(&current, monitor);
    let mut best = current.clone();
    let mut best_cos = initial;
    let mut checkpoints = vec![(0, initial)];
    let mut batch_history = Vec::with_capacity(n_steps);

    for step in 1..=n_steps {
        if lr == 0.0 {
            break;
        }
        let batch = next_batch(step);
        let mut entries = current.entries().to_vec();
        batch_history.push(descent_step(&current, &mut entries, &batch, lr));
        current = Codebook::new(entries, mode, cb.seed(), true)?;
        if step % CHECKPOINT_EVERY == 0 || step == n_steps {
            let cos = mean_quantization_cosine(&current, monitor);
            checkpoints.push((step, cos));
            if cos > best_cos {
                best_cos = cos;
                best = current.clone();
            }
        }
    }

    let tuned = Codebook::new(best.entries().to_vec(), mode, cb.seed(), true)?;
    let report = TuneReport {
        iters: batch_history.len(),
        initial_mean_cossim: initial,
        final_mean_cossim: best_cos,
        wall_time: 0.0,
        batch_history,
        checkpoints,
    };
    Ok((tuned, report))
}

/// A single tuning step on `batch`. Returns the updated codebook and the
/// batch mean cosine similarity before the update.
pub fn tuning_step(cb: &Codebook, batch: &[Entry], lr: f32) -> Result<(Codebook, f32)> {
    let current = cb.unpacked();
    let mut entries = current.entries().to_vec();
    let before = descent_step(&current, &mut entries, batch, lr);
    Ok((
        Codebook::new(entries, cb.bit_mode(), cb.seed(), true)?,
        before,
    ))
}

/// One gradient step on `batch` with assignments from `current`. Updates
/// `entries` in place and returns the batch mean cosine similarity before
/// the step.
pub(crate) fn descent_step(
    current: &Codebook,
    entries: &mut [Entry],
    batch: &[Entry],
    lr: f32,
) -> f32 {
    let fold = current.bit_mode().folds_signs();
    let mut grads = vec![[0.0f64; SUB_DIM]; N_ENTRIES];
    let mut counts = vec![0usize; N_ENTRIES];
    let mut total_cos = 0.0f64;
    let norms: Vec<f32> = entries.iter().map(|e| math::norm(e)).collect();
    for v in batch {
        let n = math::norm(v);
        let m = match current.match_subvector(v) {
            Ok(m) => m,
            Err(_) => continue,
        };
        let k = m.index as usize;
        let mut u = *v;
        for x in &mut u {
            *x /= n;
            if fold {
                *x = x.abs();
            }
        }
        let e = &entries[k];
        let inv = 1.0 / norms[k];
        let cos = math::dot(&u, e) * inv;
        total_cos += cos as f64;
        counts[k] += 1;
        // d(1 − u·e/‖e‖)/de = −(u − cos·ê)/‖e‖; two-bit signs are already
        // folded into u.
        for j in 0..SUB_DIM {
            grads[k][j] += (-(u[j] - cos * e[j] * inv) * inv) as f64;
        }
    }
    for k in 0..N_ENTRIES {
        if counts[k] == 0 {
            continue;
        }
        let mut next = entries[k];
        for (x, g) in next.iter_mut().zip(&grads[k]) {
            *x -= lr * (*g / counts[k] as f64) as f32;
            if fold {
                *x = x.max(0.0);
            }
        }
        if next.iter().any(|&x| x != 0.0) {
            entries[k] = next;
        }
    }
    (total_cos / batch.len().max(1) as f64) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_codebook(mode: BitMode, seed: u64) -> Codebook {
        kmeans_init(&mut SeededRng::new(seed), mode, 4096, 10).unwrap()
    }

    #[test]
    fn exact_fit_when_k_equals_n() {
        let mut rng = SeededRng::new(1);
        let pts = synthetic_samples(&mut rng, N_ENTRIES, false);
        let c = lloyd_centroids(&pts, 5, &mut rng).unwrap();
        for p in &pts {
            assert!(c.iter().any(|e| e == p));
        }
    }

    #[test]
    fn two_bit_centroids_nonnegative() {
        let cb = small_codebook(BitMode::TwoBit, 2);
        assert!(cb.entries().iter().flatten().all(|&x| x >= 0.0));
        assert!(!cb.is_tuned());
    }

    #[test]
    fn match_is_scale_invariant_and_exact_on_entries() {
        let cb = small_codebook(BitMode::OneBit, 3);
        for k in [0usize, 17, 255] {
            let mut v = cb.entries()[k];
            math::scale_in_place(&mut v, 3.0);
            assert_eq!(cb.match_subvector(&v).unwrap().index as usize, k);
        }
    }

    #[test]
    fn two_bit_negated_entry_folds() {
        let cb = small_codebook(BitMode::TwoBit, 4);
        let k = 42;
        let mut v = cb.entries()[k];
        for x in &mut v {
            *x = -*x;
        }
        let m = cb.match_subvector(&v).unwrap();
        assert_eq!(m.index as usize, k);
        // Zero components keep a + sign.
        for (i, &x) in v.iter().enumerate() {
            assert_eq!(m.signs & (1 << i) != 0, x < 0.0);
        }
        let back = cb.lookup(k, m.signs).unwrap();
        for (a, b) in back.iter().zip(&v) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_vector_and_bad_index() {
        let cb = small_codebook(BitMode::OneBit, 5);
        assert_eq!(cb.match_subvector(&[0.0; 8]), Err(Error::ZeroVector));
        assert_eq!(cb.lookup(256, 0), Err(Error::IndexOutOfRange(256)));
        assert_eq!(cb.lookup(3, 0xff).unwrap(), cb.entries()[3]);
    }

    #[test]
    fn all_plus_signs_return_raw_entry() {
        let cb = small_codebook(BitMode::TwoBit, 6);
        assert_eq!(cb.lookup(9, 0).unwrap(), cb.entries()[9]);
    }

    #[test]
    fn match_beats_every_candidate() {
        let cb = small_codebook(BitMode::TwoBit, 7);
        let mut rng = SeededRng::new(70);
        for v in synthetic_samples(&mut rng, 50, false) {
            let q = cb.quantize_subvector(&v).unwrap();
            let best = math::cosine(&v, &q);
            for e in cb.entries() {
                // Best sign pattern for a nonnegative entry is sign(v).
                let mut s = *e;
                for (x, y) in s.iter_mut().zip(&v) {
                    if *y < 0.0 {
                        *x = -*x;
                    }
                }
                assert!(math::cosine(&v, &s) <= best + 1e-6);
            }
        }
    }

    #[test]
    fn euclidean_metric_available() {
        let cb = small_codebook(BitMode::OneBit, 8);
        let v = cb.entries()[11];
        assert_eq!(cb.match_with(&v, MatchMetric::Euclidean).unwrap().index, 11);
    }

    #[test]
    fn zero_lr_keeps_codebook() {
        let cb = small_codebook(BitMode::OneBit, 9);
        let (tuned, report) = finetune(&cb, &mut SeededRng::new(1), 2048, 5, 0.0).unwrap();
        assert_eq!(report.iters, 0);
        assert_eq!(tuned.entries(), cb.entries());
        assert_eq!(report.initial_mean_cossim, report.final_mean_cossim);
    }

    #[test]
    fn parallel_samples_pull_entry_onto_direction() {
        let dir = [1.0f32, 2.0, 0.5, 0.0, 1.0, 3.0, 0.25, 1.0];
        let mut entries = vec![[0.0f32, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]; N_ENTRIES];
        entries[0] = [1.0; 8];
        let cb = Codebook::new(entries, BitMode::OneBit, 0, false).unwrap();
        let samples: Vec<Entry> = (1..=64)
            .map(|k| {
                let mut v = dir;
                math::scale_in_place(&mut v, k as f32 * 0.1);
                v
            })
            .collect();
        let start = math::cosine(&cb.entries()[0], &dir);
        let (tuned, report) = finetune_on(&cb, &samples, 300, 0.5).unwrap();
        assert!(start < 0.9);
        assert!(math::cosine(&tuned.entries()[0], &dir) > 1.0 - 1e-3);
        assert!(report.final_mean_cossim > 1.0 - 1e-3);
    }

    #[test]
    fn finetune_improves_and_never_regresses() {
        for mode in [BitMode::OneBit, BitMode::TwoBit] {
            let cb = small_codebook(mode, 10);
            let (tuned, report) = finetune(&cb, &mut SeededRng::new(11), 4096, 100, 0.5).unwrap();
            assert!(tuned.is_tuned());
            assert!(report.final_mean_cossim >= report.initial_mean_cossim - 1e-6);
            let held = synthetic_samples(&mut SeededRng::new(12), 8192, false);
            let before = mean_quantization_cosine(&cb, &held);
            let after = mean_quantization_cosine(&tuned, &held);
            assert!(after > before, "{mode:?}: {before} -> {after}");
            if mode == BitMode::TwoBit {
                assert!(tuned.entries().iter().flatten().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn each_step_descends_on_its_batch() {
        for mode in [BitMode::OneBit, BitMode::TwoBit] {
            let mut cb = small_codebook(mode, 14);
            let mut rng = SeededRng::new(15);
            for _ in 0..20 {
                let batch = synthetic_samples(&mut rng, 4096, mode.folds_signs());
                let mut entries = cb.entries().to_vec();
                let before = descent_step(&cb, &mut entries, &batch, 0.5);
                let next = Codebook::new(entries, mode, 0, true).unwrap();
                let after = mean_quantization_cosine(&next, &batch);
                assert!(after >= before - 1e-6, "{before} -> {after}");
                cb = next;
            }
        }
    }

    #[test]
    fn tuning_is_seed_deterministic() {
        let cb = small_codebook(BitMode::TwoBit, 16);
        let a = finetune(&cb, &mut SeededRng::new(3), 1024, 20, 0.5).unwrap();
        let b = finetune(&cb, &mut SeededRng::new(3), 1024, 20, 0.5).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.checkpoints, b.1.checkpoints);
    }

    #[test]
    fn pack4_constant_entries_exact() {
        for mode in [BitMode::OneBit, BitMode::TwoBit] {
            let cb = Codebook::new(vec![[0.3; 8]; N_ENTRIES], mode, 0, false).unwrap();
            let p = cb.pack4();
            assert_eq!(p.active_entries(), cb.entries());
        }
        let cb = Codebook::new(vec![[-0.7; 8]; N_ENTRIES], BitMode::OneBit, 0, false).unwrap();
        assert_eq!(cb.pack4().active_entries(), cb.entries());
    }

    #[test]
    fn pack4_within_half_step() {
        for mode in [BitMode::OneBit, BitMode::TwoBit] {
            let cb = small_codebook(mode, 13);
            let p = cb.pack4();
            let bound = p.packed4().unwrap().half_step(mode);
            for (a, b) in p
                .active_entries()
                .iter()
                .flatten()
                .zip(cb.entries().iter().flatten())
            {
                assert!((a - b).abs() <= bound * (1.0 + 1e-6));
            }
            assert_eq!(p.entries(), cb.entries());
        }
    }

    #[test]
    fn rejects_malformed_codebooks() {
        assert!(Codebook::new(vec![[1.0; 8]; 10], BitMode::OneBit, 0, false).is_err());
        let mut e = vec![[1.0; 8]; N_ENTRIES];
        e[3] = [0.0; 8];
        assert!(Codebook::new(e, BitMode::OneBit, 0, false).is_err());
        let mut e = vec![[1.0; 8]; N_ENTRIES];
        e[3][2] = -0.5;
        assert!(Codebook::new(e.clone(), BitMode::TwoBit, 0, false).is_err());
        assert!(Codebook::new(e, BitMode::OneBit, 0, false).is_ok());
    }
}
