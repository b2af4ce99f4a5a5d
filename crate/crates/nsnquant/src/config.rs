//! Run configuration: defaults, a flat `key = value` file, and CLI
//! overrides applied in that order.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use nsnquant_core::codebook::BitMode;
use nsnquant_core::kvcache::CacheConfig;
use nsnquant_core::vq::ScaleStrategy;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    #[serde(serialize_with = "ser_bit_mode")]
    pub bit_mode: BitMode,
    pub residual_size: usize,
    #[serde(serialize_with = "ser_strategy")]
    pub strategy: ScaleStrategy,
    pub d: usize,
    pub rope_base: f32,
    pub seed: u64,
    pub double_quant: bool,
    pub finetune: bool,
    pub kmeans_samples: usize,
    pub kmeans_iters: usize,
    pub tune_steps: usize,
    pub tune_batch: usize,
    pub tune_lr: f32,
    pub n_prefill: usize,
    pub n_decode: usize,
    pub n_heads: usize,
    pub fp_prefill: bool,
    pub alpha: f64,
    pub lemma_trials: usize,
    pub codebook: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub dump: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            bit_mode: BitMode::TwoBit,
            residual_size: 64,
            strategy: ScaleStrategy::ParallelPreserving,
            d: 128,
            rope_base: 10000.0,
            seed: 0,
            double_quant: true,
            finetune: true,
            kmeans_samples: 1 << 17,
            kmeans_iters: 50,
            tune_steps: 2000,
            tune_batch: 8192,
            tune_lr: 0.5,
            n_prefill: 256,
            n_decode: 64,
            n_heads: 4,
            fp_prefill: false,
            alpha: 0.05,
            lemma_trials: 50,
            codebook: None,
            out: None,
            dump: None,
        }
    }
}

fn ser_bit_mode<S: serde::Serializer>(m: &BitMode, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(bit_mode_name(*m))
}

fn ser_strategy<S: serde::Serializer>(m: &ScaleStrategy, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(strategy_name(*m))
}

pub fn bit_mode_name(m: BitMode) -> &'static str {
    match m {
        BitMode::OneBit => "1b",
        BitMode::TwoBit => "2b",
    }
}

pub fn parse_bit_mode(s: &str) -> anyhow::Result<BitMode> {
    match s {
        "1b" | "1" => Ok(BitMode::OneBit),
        "2b" | "2" => Ok(BitMode::TwoBit),
        _ => bail!("unknown bit mode {s:?} (expected 1b or 2b)"),
    }
}

pub fn strategy_name(s: ScaleStrategy) -> &'static str {
    match s {
        ScaleStrategy::None => "none",
        ScaleStrategy::MinL2 => "s1",
        ScaleStrategy::NormMatch => "s2",
        ScaleStrategy::ParallelPreserving => "s3",
    }
}

pub fn parse_strategy(s: &str) -> anyhow::Result<ScaleStrategy> {
    match s {
        "none" => Ok(ScaleStrategy::None),
        "s1" => Ok(ScaleStrategy::MinL2),
        "s2" => Ok(ScaleStrategy::NormMatch),
        "s3" => Ok(ScaleStrategy::ParallelPreserving),
        _ => bail!("unknown strategy {s:?} (expected none, s1, s2 or s3)"),
    }
}

fn parse_bool(s: &str) -> anyhow::Result<bool> {
    match s {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!("expected a boolean, got {s:?}"),
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        let num = |v: &str| {
            v.parse::<usize>()
                .with_context(|| format!("{key}: not an integer"))
        };
        match key {
            "bit_mode" => self.bit_mode = parse_bit_mode(value)?,
            "residual_size" => self.residual_size = num(value)?,
            "strategy" => self.strategy = parse_strategy(value)?,
            "d" => self.d = num(value)?,
            "rope_base" => self.rope_base = value.parse().context("rope_base")?,
            "seed" => self.seed = value.parse().context("seed")?,
            "dq" => self.double_quant = parse_bool(value)?,
            "finetune" => self.finetune = parse_bool(value)?,
            "kmeans_samples" => self.kmeans_samples = num(value)?,
            "kmeans_iters" => self.kmeans_iters = num(value)?,
            "tune_steps" => self.tune_steps = num(value)?,
            "tune_batch" => self.tune_batch = num(value)?,
            "tune_lr" => self.tune_lr = value.parse().context("tune_lr")?,
            "n_prefill" => self.n_prefill = num(value)?,
            "n_decode" => self.n_decode = num(value)?,
            "n_heads" => self.n_heads = num(value)?,
            "fp_prefill" => self.fp_prefill = parse_bool(value)?,
            "alpha" => self.alpha = value.parse().context("alpha")?,
            "lemma_trials" => self.lemma_trials = num(value)?,
            "codebook" => self.codebook = Some(value.into()),
            "out" => self.out = Some(value.into()),
            "dump" => self.dump = Some(value.into()),
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Applies every line of a config file. Blank lines and `#` comments
    /// are skipped.
    pub fn apply_text(&mut self, text: &str) -> anyhow::Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key = value", n + 1))?;
            self.set(key.trim(), value.trim())
                .with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> anyhow::Result<()> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.residual_size == 0 {
            bail!("residual_size must be at least 1");
        }
        if !self.d.is_power_of_two() || !self.d.is_multiple_of(8) {
            bail!("d must be a power of two divisible by 8, got {}", self.d);
        }
        if self.n_heads == 0 {
            bail!("n_heads must be at least 1");
        }
        Ok(())
    }

    pub fn cache_config(&self) -> CacheConfig {
        CacheConfig {
            d: self.d,
            residual_size: self.residual_size,
            bit_mode: self.bit_mode,
            strategy: self.strategy,
            rope_base: self.rope_base,
            double_quant: self.double_quant,
            ..CacheConfig::default()
        }
    }
}
