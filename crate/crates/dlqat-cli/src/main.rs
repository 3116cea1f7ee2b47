//! `dlqat` command line: train, ablation, gradcheck, audit, pack, eval.
//!
//! All runs are driven by a TOML config file (see `config.rs` for the keys
//! and defaults) plus a few flags. Exit codes are documented and distinct:
//! 0 success, 2 config/validation, 3 data or I/O, 4 divergence, 5 a check
//! suite failed.

mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dlqat::audit::{audit_params, catalog, lookup};
use dlqat::data::load_corpus;
use dlqat::error::Error;
use dlqat::gradcheck::run_full_suite;
use dlqat::model::{build_model, perplexity};
use dlqat::quant::Granularity;
use dlqat::report::{write_ablation_report, write_training_report, RunOutcome};
use dlqat::trainer::{run_ablation, run_training};

use config::RunConfig;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;
pub const EXIT_CHECK_FAILED: u8 = 5;

#[derive(Parser)]
#[command(
    name = "dlqat",
    about = "Weight-decomposed low-rank quantization-aware training",
    after_help = "Exit codes: 0 ok, 2 config/validation, 3 data/io, 4 divergence, 5 check failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the [train].seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the [out].report path from the config file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the two-phase training schedule and write a JSONL report.
    Train(ConfigArgs),
    /// Train all six ablation settings over several seeds and bit widths.
    Ablation {
        #[command(flatten)]
        common: ConfigArgs,
        /// Bit widths to sweep, e.g. --bits 3,4
        #[arg(long, value_delimiter = ',', default_value = "3,4")]
        bits: Vec<u8>,
        /// Seeds per (setting, bit width) cell.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Run the gradient verification suites and print per-op errors.
    Gradcheck {
        /// Seed for the random check points.
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Emit the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Analytic trainable-parameter audit for a cataloged architecture.
    Audit {
        /// Architecture name, e.g. llama-7b.
        #[arg(long, required_unless_present = "list")]
        arch: Option<String>,
        /// Quantizer granularity: per-channel or group.
        #[arg(long, default_value = "per-channel")]
        granularity: String,
        /// Group size when --granularity group.
        #[arg(long, default_value_t = 128)]
        group_size: usize,
        /// LoRA rank.
        #[arg(long, default_value_t = 16)]
        rank: usize,
        /// Emit machine-readable JSON.
        #[arg(long)]
        json: bool,
        /// Dump the built-in shape catalog and exit.
        #[arg(long)]
        list: bool,
    },
    /// Re-run the configured (deterministic) training and write the packed
    /// quantized weights.
    Pack(ConfigArgs),
    /// Evaluate perplexity of the configured model: its initialized state,
    /// or a packed training result overlaid with --pack.
    Eval {
        #[command(flatten)]
        common: ConfigArgs,
        /// Pack file to overlay onto the rebuilt model.
        #[arg(long)]
        pack: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e))
        }
    }
}

/// Map error classes onto the documented exit codes.
fn classify(e: &anyhow::Error) -> u8 {
    if let Some(err) = e.downcast_ref::<Error>() {
        return match err {
            Error::Config(_) | Error::Invalid(_) => EXIT_CONFIG,
            Error::Data(_) | Error::Io(_) | Error::Pack(_) => EXIT_DATA,
            _ => EXIT_CONFIG,
        };
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return EXIT_DATA;
    }
    EXIT_CONFIG
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Ablation { common, bits, seeds } => cmd_ablation(common, bits, seeds),
        Command::Gradcheck { seed, json } => cmd_gradcheck(seed, json),
        Command::Audit { arch, granularity, group_size, rank, json, list } => {
            cmd_audit(arch, &granularity, group_size, rank, json, list)
        }
        Command::Pack(args) => cmd_pack(args),
        Command::Eval { common, pack } => cmd_eval(common, pack),
    }
}

fn load_run_config(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out.report = out.clone();
    }
    Ok(cfg)
}

fn cmd_train(args: ConfigArgs) -> anyhow::Result<ExitCode> {
    let cfg = load_run_config(&args)?;
    let corpus = load_corpus(&cfg.data.corpus, cfg.data.split)?;
    let (model_cfg, train_cfg) = cfg.build()?;
    let mut model = build_model(
        &model_cfg,
        train_cfg.setting,
        train_cfg.lora_rank,
        train_cfg.lora_alpha,
        train_cfg.seed,
    )?;
    let mut report = run_training(&mut model, &corpus, &train_cfg)?;
    report.config = cfg.echo_with_report(&report.config);

    if let (RunOutcome::Completed, Some(pack_path)) = (report.outcome, &cfg.out.pack) {
        let bytes = model.pack()?;
        std::fs::write(pack_path, &bytes)?;
        eprintln!("wrote pack: {} ({} bytes)", pack_path.display(), bytes.len());
    }

    let mut file = std::fs::File::create(&cfg.out.report)?;
    write_training_report(&mut file, &report)?;
    file.flush()?;
    eprintln!("wrote report: {}", cfg.out.report.display());

    match report.outcome {
        RunOutcome::Completed => {
            println!(
                "train: {} iters, eval ppl {:.4} -> {:.4}",
                report.warmup_iters_run + report.main_iters_run,
                report.initial_perplexity,
                report.final_perplexity.expect("completed"),
            );
            Ok(ExitCode::SUCCESS)
        }
        RunOutcome::Diverged { iter } => {
            eprintln!("training diverged at iteration {iter}");
            Ok(ExitCode::from(EXIT_DIVERGED))
        }
    }
}

fn cmd_ablation(args: ConfigArgs, bits: Vec<u8>, seeds: usize) -> anyhow::Result<ExitCode> {
    let cfg = load_run_config(&args)?;
    let corpus = load_corpus(&cfg.data.corpus, cfg.data.split)?;
    let (model_cfg, train_cfg) = cfg.build()?;
    let result = run_ablation(&model_cfg, &corpus, &train_cfg, &bits, seeds);
    let mut report = match result {
        Ok(r) => r,
        Err(Error::Invalid(msg)) if msg.contains("diverged") => {
            eprintln!("{msg}");
            return Ok(ExitCode::from(EXIT_DIVERGED));
        }
        Err(e) => return Err(e.into()),
    };
    report.config = cfg.echo_with_report(&report.config);
    let mut file = std::fs::File::create(&cfg.out.report)?;
    write_ablation_report(&mut file, &report)?;
    file.flush()?;
    for line in dlqat::report::render_ablation_table(&report) {
        println!("{line}");
    }
    eprintln!("wrote report: {}", cfg.out.report.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64, json: bool) -> anyhow::Result<ExitCode> {
    let report = run_full_suite(seed)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!(
            "{:<28} {:>14} {:>12} {:>8} {:>6}",
            "check", "max rel err", "tolerance", "points", "pass"
        );
        for s in &report.sections {
            println!(
                "{:<28} {:>14.3e} {:>12.1e} {:>8} {:>6}",
                s.name,
                s.max_rel_err,
                s.tolerance,
                s.points,
                if s.pass { "ok" } else { "FAIL" }
            );
        }
    }
    if report.all_pass() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient checks failed");
        Ok(ExitCode::from(EXIT_CHECK_FAILED))
    }
}

fn cmd_audit(
    arch: Option<String>,
    granularity: &str,
    group_size: usize,
    rank: usize,
    json: bool,
    list: bool,
) -> anyhow::Result<ExitCode> {
    if list {
        if json {
            println!("{}", serde_json::to_string_pretty(&catalog())?);
        } else {
            println!(
                "{:<12} {:>8} {:>8} {:>8} {:>10} {:>8} {:>14}",
                "arch", "layers", "d_model", "heads", "ffn", "vocab", "total params"
            );
            for e in catalog() {
                println!(
                    "{:<12} {:>8} {:>8} {:>8} {:>10} {:>8} {:>14}",
                    e.name,
                    e.n_layers,
                    e.d_model,
                    e.n_heads,
                    e.ffn_hidden,
                    e.vocab_size,
                    e.total_params()
                );
            }
        }
        return Ok(ExitCode::SUCCESS);
    }
    let gran = match granularity {
        "per-channel" | "per_channel" => Granularity::PerChannel,
        "group" => Granularity::Group(group_size),
        other => {
            return Err(Error::Config(format!(
                "granularity must be per-channel or group, got {other:?}"
            ))
            .into())
        }
    };
    let entry = lookup(arch.as_deref().expect("clap enforces --arch"))?;
    let audit = audit_params(&entry, gran, rank)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&audit)?);
    } else {
        println!("architecture:      {}", audit.arch);
        println!("granularity:       {:?}", audit.granularity);
        println!("rank:              {}", audit.rank);
        println!("groups:            {}", audit.groups);
        println!("s,b params:        {:.1} M", audit.count_sb as f64 / 1e6);
        println!("m   params:        {:.1} M", audit.count_m as f64 / 1e6);
        println!("A,B params:        {:.1} M", audit.count_ab as f64 / 1e6);
        println!("m+A,B params:      {:.1} M", audit.count_m_ab() as f64 / 1e6);
        println!("total params:      {:.2} B", audit.total_params as f64 / 1e9);
        println!(
            "trainable share:   {:.2}% {}",
            audit.fraction_of_total * 100.0,
            if audit.fraction_of_total < 0.01 { "(< 1%)" } else { "" }
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_pack(args: ConfigArgs) -> anyhow::Result<ExitCode> {
    let cfg = load_run_config(&args)?;
    let pack_path = cfg.out.pack.clone().ok_or_else(|| {
        Error::Config("pack requires [out].pack in the config file".into())
    })?;
    let corpus = load_corpus(&cfg.data.corpus, cfg.data.split)?;
    let (model_cfg, train_cfg) = cfg.build()?;
    let mut model = build_model(
        &model_cfg,
        train_cfg.setting,
        train_cfg.lora_rank,
        train_cfg.lora_alpha,
        train_cfg.seed,
    )?;
    eprintln!("re-running the deterministic training to reach the packed state...");
    let report = run_training(&mut model, &corpus, &train_cfg)?;
    if let RunOutcome::Diverged { iter } = report.outcome {
        eprintln!("training diverged at iteration {iter}");
        return Ok(ExitCode::from(EXIT_DIVERGED));
    }
    let bytes = model.pack()?;
    std::fs::write(&pack_path, &bytes)?;
    println!("wrote pack: {} ({} bytes)", pack_path.display(), bytes.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: ConfigArgs, pack: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let cfg = load_run_config(&args)?;
    let corpus = load_corpus(&cfg.data.corpus, cfg.data.split)?;
    let (model_cfg, train_cfg) = cfg.build()?;
    let mut model = build_model(
        &model_cfg,
        train_cfg.setting,
        train_cfg.lora_rank,
        train_cfg.lora_alpha,
        train_cfg.seed,
    )?;
    let state = if let Some(pack_path) = pack {
        let bytes = std::fs::read(&pack_path)?;
        model.apply_pack_bytes(&bytes)?;
        "packed"
    } else {
        "initialized"
    };
    let ppl = perplexity(&mut model, corpus.eval(), model_cfg.context_length)?;
    println!("eval ({state} model): perplexity {ppl:.6}");
    Ok(ExitCode::SUCCESS)
}
