//! JSON report shapes. Every report embeds the parameters it was run with.

use nsnquant_core::codebook::TuneReport;
use nsnquant_core::stats::{KlReport, LemmaCheck, KL_RANGE};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuildReport {
    pub bit_mode: String,
    pub seed: u64,
    pub kmeans_samples: usize,
    pub kmeans_iters: usize,
    pub finetune: bool,
    pub tune_steps: usize,
    pub tune_batch: usize,
    pub tune_lr: f32,
    pub heldout_samples: usize,
    /// Held-out mean cosine similarity of the K-Means codebook.
    pub kmeans_heldout_cossim: f32,
    /// Same for the returned codebook.
    pub final_heldout_cossim: f32,
    pub monitor_initial_cossim: f32,
    pub monitor_final_cossim: f32,
    pub checkpoints: Vec<(usize, f32)>,
    pub wall_time_s: f64,
}

impl BuildReport {
    pub fn tune_fields(&mut self, r: &TuneReport) {
        self.monitor_initial_cossim = r.initial_mean_cossim;
        self.monitor_final_cossim = r.final_mean_cossim;
        self.checkpoints = r.checkpoints.clone();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlJson {
    pub mean_kl: f64,
    pub per_channel_kl: Vec<f64>,
    pub n_bins: usize,
    pub tail_bins: usize,
    pub range: [f64; 2],
    pub smoothing: f64,
    pub n_samples: usize,
}

impl From<&KlReport> for KlJson {
    fn from(r: &KlReport) -> Self {
        Self {
            mean_kl: r.mean_kl,
            per_channel_kl: r.per_channel_kl.clone(),
            n_bins: r.n_bins,
            tail_bins: 2,
            range: [-KL_RANGE, KL_RANGE],
            smoothing: r.smoothing,
            n_samples: r.n_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaJson {
    pub epsilon: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub constant: f64,
    pub beta_alpha_scaled: f64,
    pub band: [f64; 2],
    pub coverage: f64,
    pub mean_variance: f64,
    pub min_variance: f64,
    pub max_variance: f64,
    pub trials: usize,
    pub seed: u64,
}

impl LemmaJson {
    pub fn new(c: &LemmaCheck, seed: u64) -> Self {
        Self {
            epsilon: c.epsilon,
            gamma: c.gamma,
            alpha: c.alpha,
            constant: c.constant,
            beta_alpha_scaled: c.beta_alpha_scaled,
            band: [c.lower, c.upper],
            coverage: c.coverage,
            mean_variance: c.mean_variance,
            min_variance: c.min_variance,
            max_variance: c.max_variance,
            trials: c.trials,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub rows: usize,
    pub cols: usize,
    pub kl: KlJson,
    pub offdiag_frobenius: f64,
    /// Absent when the column count is not a multiple of the group.
    pub mean_abs_correlation: Option<f64>,
    pub mac_group: usize,
    /// Absent when the column count is not a power of two.
    pub lemma: Option<LemmaJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub id: &'static str,
    pub module: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub codebook_bit_mode: String,
    pub codebook_seed: u64,
    pub seed: u64,
    pub passed: usize,
    pub failed: usize,
    pub checks: Vec<CheckResult>,
}
