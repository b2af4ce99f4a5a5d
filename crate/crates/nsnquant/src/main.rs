use std::fs;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use nsnquant::commands::{build_codebook, run_simulation, stats_report, write_json};
use nsnquant::config::{parse_bit_mode, parse_strategy, RunConfig};
use nsnquant::formats::{read_codebook_file, read_tensor_file, write_codebook_file};
use nsnquant::simulate::{simulate_head, summarize, write_csv, Workload};
use nsnquant::verify::{run_all, Context};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "nsnquant",
    version,
    about = "KV-cache vector quantization toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "1b|2b")]
    bit_mode: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    residual_size: Option<usize>,
    #[arg(long, global = true, value_name = "none|s1|s2|s3")]
    strategy: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Skip cosine fine-tuning after K-Means.
    #[arg(long, global = true)]
    no_finetune: bool,
    /// Store s1 and o without 4-bit double quantization.
    #[arg(long, global = true)]
    no_dq: bool,
    #[arg(long, global = true)]
    codebook: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Tensor dump to analyse.
    #[arg(long, global = true)]
    dump: Option<PathBuf>,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a codebook (K-Means plus fine-tuning) and its JSON report.
    BuildCodebook,
    /// Run the invariant registry against a codebook.
    Verify,
    /// Prefill + decode simulation; writes per-step metrics as CSV.
    Simulate {
        /// Queries, keys and values as tensor dumps (single head).
        #[arg(long, num_args = 3, value_names = ["Q", "K", "V"])]
        qkv: Option<Vec<PathBuf>>,
    },
    /// KL, covariance and correlation statistics of a tensor dump.
    Stats,
}

fn resolve(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set {kv}: expected key=value"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(m) = &common.bit_mode {
        cfg.bit_mode = parse_bit_mode(m)?;
    }
    if let Some(r) = common.residual_size {
        cfg.residual_size = r;
    }
    if let Some(s) = &common.strategy {
        cfg.strategy = parse_strategy(s)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.no_finetune {
        cfg.finetune = false;
    }
    if common.no_dq {
        cfg.double_quant = false;
    }
    for (dst, src) in [
        (&mut cfg.codebook, &common.codebook),
        (&mut cfg.out, &common.out),
        (&mut cfg.dump, &common.dump),
    ] {
        if src.is_some() {
            dst.clone_from(src);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit_json(cfg: &RunConfig, value: &serde_json::Value) -> anyhow::Result<()> {
    match &cfg.out {
        Some(path) => write_json(path, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::BuildCodebook => {
            let out = cfg.out.clone().context("build-codebook needs --out PATH")?;
            let (cb, report) = build_codebook(&cfg)?;
            write_codebook_file(&out, &cb)?;
            let report_path = out.with_extension("json");
            write_json(&report_path, &json!({ "config": cfg, "report": report }))?;
            eprintln!(
                "wrote {} (held-out cossim {:.5} -> {:.5}) and {}",
                out.display(),
                report.kmeans_heldout_cossim,
                report.final_heldout_cossim,
                report_path.display()
            );
            Ok(true)
        }
        Command::Verify => {
            let path = cfg
                .codebook
                .clone()
                .context("verify needs --codebook PATH")?;
            let cb =
                read_codebook_file(&path).with_context(|| format!("loading {}", path.display()))?;
            let report = run_all(&Context::new(cb, cfg.seed));
            for c in &report.checks {
                eprintln!(
                    "{} {:<40} {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.id,
                    c.detail
                );
            }
            emit_json(&cfg, &serde_json::to_value(&report)?)?;
            Ok(report.failed == 0)
        }
        Command::Simulate { qkv } => {
            let path = cfg
                .codebook
                .clone()
                .context("simulate needs --codebook PATH")?;
            let cb = read_codebook_file(&path)?;
            anyhow::ensure!(
                cb.bit_mode() == cfg.bit_mode,
                "codebook bit mode differs from --bit-mode"
            );
            let steps = match qkv {
                Some(paths) => {
                    let w = Workload::new(
                        read_tensor_file(&paths[0])?,
                        read_tensor_file(&paths[1])?,
                        read_tensor_file(&paths[2])?,
                    )?;
                    let mut opts = nsnquant::commands::sim_options(&cfg);
                    opts.cache.d = w.keys.cols();
                    opts.n_prefill = opts.n_prefill.min(w.len());
                    opts.n_decode = w.len() - opts.n_prefill;
                    simulate_head(&w, &opts, &cb, &cb, 0)?
                }
                None => run_simulation(&cfg, &cb)?,
            };
            match &cfg.out {
                Some(p) => write_csv(
                    &steps,
                    fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
                )?,
                None => write_csv(&steps, io::stdout().lock())?,
            }
            eprintln!("{}", serde_json::to_string(&summarize(&steps))?);
            Ok(true)
        }
        Command::Stats => {
            let path = cfg.dump.clone().context("stats needs --dump PATH")?;
            let t =
                read_tensor_file(&path).with_context(|| format!("loading {}", path.display()))?;
            let report = stats_report(&t, &cfg)?;
            emit_json(&cfg, &serde_json::to_value(&report)?)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
