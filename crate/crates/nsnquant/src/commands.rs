//! Subcommand implementations, callable without the CLI.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use nsnquant_core::codebook::{
    finetune, kmeans_init, mean_quantization_cosine, synthetic_samples, Codebook,
};
use nsnquant_core::stats::{
    channel_kl, lemma_band_check, mean_abs_correlation, offdiag_frobenius, DEFAULT_BAND_CONSTANT,
    DEFAULT_KL_BINS,
};
use nsnquant_core::{SeededRng, Tensor2D};

use crate::config::{bit_mode_name, RunConfig};
use crate::report::{BuildReport, KlJson, LemmaJson, StatsReport};
use crate::simulate::{simulate_synthetic, SimOptions, StepMetrics};

pub const HELDOUT_SAMPLES: usize = 16384;
const KMEANS_STREAM: u64 = 1;
const TUNE_STREAM: u64 = 2;
const HELDOUT_STREAM: u64 = 3;
pub const MAC_GROUP: usize = 8;

/// K-Means initialization, optional fine-tuning and held-out scoring. Only
/// the bit mode, seed and hyperparameters enter; no data tensors.
pub fn build_codebook(cfg: &RunConfig) -> anyhow::Result<(Codebook, BuildReport)> {
    let start = Instant::now();
    let root = SeededRng::new(cfg.seed);
    let fold = cfg.bit_mode.folds_signs();
    let heldout = synthetic_samples(&mut root.split(HELDOUT_STREAM), HELDOUT_SAMPLES, fold);
    let init = kmeans_init(
        &mut root.split(KMEANS_STREAM),
        cfg.bit_mode,
        cfg.kmeans_samples,
        cfg.kmeans_iters,
    )?;
    let kmeans_heldout = mean_quantization_cosine(&init, &heldout);
    let mut report = BuildReport {
        bit_mode: bit_mode_name(cfg.bit_mode).into(),
        seed: cfg.seed,
        kmeans_samples: cfg.kmeans_samples,
        kmeans_iters: cfg.kmeans_iters,
        finetune: cfg.finetune,
        tune_steps: cfg.tune_steps,
        tune_batch: cfg.tune_batch,
        tune_lr: cfg.tune_lr,
        heldout_samples: HELDOUT_SAMPLES,
        kmeans_heldout_cossim: kmeans_heldout,
        final_heldout_cossim: kmeans_heldout,
        monitor_initial_cossim: kmeans_heldout,
        monitor_final_cossim: kmeans_heldout,
        checkpoints: Vec::new(),
        wall_time_s: 0.0,
    };
    let cb = if cfg.finetune {
        let (tuned, tune) = finetune(
            &init,
            &mut root.split(TUNE_STREAM),
            cfg.tune_batch,
            cfg.tune_steps,
            cfg.tune_lr,
        )?;
        report.tune_fields(&tune);
        report.final_heldout_cossim = mean_quantization_cosine(&tuned, &heldout);
        tuned
    } else {
        init
    };
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((cb, report))
}

pub fn stats_report(t: &Tensor2D, cfg: &RunConfig) -> anyhow::Result<StatsReport> {
    let kl = channel_kl(t, DEFAULT_KL_BINS)?;
    let mac = if t.cols().is_multiple_of(MAC_GROUP) {
        Some(mean_abs_correlation(t, MAC_GROUP)?)
    } else {
        None
    };
    let lemma = if t.cols().is_power_of_two() && t.cols() >= 2 {
        let mut rng = SeededRng::new(cfg.seed);
        let check = lemma_band_check(
            t,
            cfg.alpha,
            cfg.lemma_trials.max(30),
            &mut rng,
            DEFAULT_BAND_CONSTANT,
        )?;
        Some(LemmaJson::new(&check, cfg.seed))
    } else {
        None
    };
    Ok(StatsReport {
        rows: t.rows(),
        cols: t.cols(),
        kl: KlJson::from(&kl),
        offdiag_frobenius: offdiag_frobenius(t)?,
        mean_abs_correlation: mac,
        mac_group: MAC_GROUP,
        lemma,
    })
}

pub fn sim_options(cfg: &RunConfig) -> SimOptions {
    SimOptions {
        cache: cfg.cache_config(),
        n_prefill: cfg.n_prefill,
        n_decode: cfg.n_decode,
        fp_prefill: cfg.fp_prefill,
    }
}

pub fn run_simulation(cfg: &RunConfig, cb: &Codebook) -> anyhow::Result<Vec<StepMetrics>> {
    simulate_synthetic(&sim_options(cfg), cfg.n_heads, cfg.seed, cb)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
