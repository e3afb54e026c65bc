//! Argument parsing and command bodies for the `ssmstyler` binary.
//!
//! Exit codes: 0 success, 1 numeric failure, 2 usage or I/O error.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use ssmstyler::bench::{bench_json_lines, bench_table, run_ablation, run_scaling_bench, scaling_ratios};
use ssmstyler::corpus::generate_toy_corpus;
use ssmstyler::dsp::{read_wav, write_wav};
use ssmstyler::fusion::FusionVariant;
use ssmstyler::gradcheck::{audit_pipeline, EPSILON_RANGE};
use ssmstyler::losses::LossWeights;
use ssmstyler::model::Model;
use ssmstyler::train::{train_with_log, TrainConfig};

/// Largest relative error a gradient audit may report and still pass.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Held-out corpus used by `ablate`.
pub const HELD_OUT_SEED: u64 = 1000;
pub const HELD_OUT_PER_STYLE: usize = 8;

#[derive(Debug, Parser)]
#[command(name = "ssmstyler", version, about = "Prompt-conditioned speech style transfer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the synthetic corpus and write a checkpoint.
    Train {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        /// Loss weights as `content,style,smooth`.
        #[arg(long, default_value = "1,1,0.01")]
        lambda: LossWeights,
        #[arg(long, default_value = "transformer_ssm")]
        variant: FusionVariant,
        #[arg(long, default_value_t = 10)]
        n_per_style: usize,
    },
    /// Restyle a WAV file with a trained checkpoint.
    Transfer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
    },
    /// Time one fusion layer at several sequence lengths.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "512,4096")]
        seq_lens: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Also run the rayon-parallel path.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        json: bool,
    },
    /// Evaluate one checkpoint per fusion variant on a held-out corpus.
    Ablate {
        #[arg(long)]
        pure_transformer: PathBuf,
        #[arg(long)]
        pure_ssm: PathBuf,
        #[arg(long)]
        transformer_ssm: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write the synthetic corpus as WAV files plus a manifest.
    GenCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        n_per_style: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ssmstyler::Error),

    #[error("{0}")]
    Usage(String),

    #[error("gradient check failed: max relative error {0:e} >= {GRADCHECK_TOLERANCE:e}")]
    GradCheck(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numeric() => 1,
            CliError::GradCheck(_) => 1,
            _ => 2,
        }
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Diagnostics go to `err`.
pub fn run_from<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Train {
            seed,
            epochs,
            out: path,
            lambda,
            variant,
            n_per_style,
        } => {
            let corpus = generate_toy_corpus(seed, n_per_style)?;
            let cfg = TrainConfig {
                epochs,
                weights: lambda,
                seed,
                variant,
                ..TrainConfig::default()
            };
            let mut io_err = None;
            let outcome = train_with_log(&corpus, &cfg, |step, r| {
                if io_err.is_none() {
                    io_err = writeln!(out, "{}", r.log_line(step)).err();
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            outcome.model.save(&path)?;
            writeln!(
                out,
                "initial_mean_total={:.6} final_mean_total={:.6} ratio={:.6}",
                outcome.initial_mean_total,
                outcome.final_mean_total,
                outcome.final_mean_total / outcome.initial_mean_total
            )?;
        }
        Command::Transfer {
            ckpt,
            input,
            prompt,
            out: path,
        } => {
            let model = Model::load(&ckpt)?;
            let wave = read_wav(&input)?;
            let t = model.transfer(&wave, &prompt)?;
            write_wav(&path, &t.waveform)?;
            writeln!(
                out,
                "style_similarity={:.6} duration_s={:.6}",
                t.similarity,
                t.waveform.duration_s()
            )?;
        }
        Command::Gradcheck { seed, samples, epsilon } => {
            let (lo, hi) = EPSILON_RANGE;
            if !(lo..=hi).contains(&epsilon) {
                return Err(CliError::Usage(format!("--epsilon must lie in [{lo:e}, {hi:e}]")));
            }
            let report = audit_pipeline(seed, samples, epsilon)?;
            for prefix in report.prefixes() {
                let of_prefix = || {
                    report
                        .samples
                        .iter()
                        .filter(|s| s.name.split('.').next() == Some(prefix.as_str()))
                };
                let worst = of_prefix().map(|s| s.rel_error).fold(0.0, f64::max);
                writeln!(out, "prefix={prefix} samples={} max_rel_error={worst:.3e}", of_prefix().count())?;
            }
            writeln!(out, "max_rel_error={:.3e}", report.max_rel_error)?;
            if !(report.max_rel_error < GRADCHECK_TOLERANCE) {
                if let Some(w) = report.worst() {
                    writeln!(
                        out,
                        "worst={}[{}] analytic={:e} numeric={:e}",
                        w.name, w.index, w.analytic, w.numeric
                    )?;
                }
                return Err(CliError::GradCheck(report.max_rel_error));
            }
        }
        Command::Bench {
            seq_lens,
            repeats,
            parallel,
            json,
        } => {
            let mut results = run_scaling_bench(&seq_lens, repeats, false)?;
            if parallel {
                results.extend(run_scaling_bench(&seq_lens, repeats, true)?);
            }
            if json {
                write!(out, "{}", bench_json_lines(&results))?;
            } else {
                write!(out, "{}", bench_table(&results))?;
                if let (Some(&lo), Some(&hi)) = (seq_lens.first(), seq_lens.last()) {
                    if hi > lo {
                        let serial: Vec<_> = results.iter().filter(|r| !r.parallel).cloned().collect();
                        for (name, ratio) in scaling_ratios(&serial, lo, hi) {
                            writeln!(out, "ratio {name} t({hi})/t({lo}) = {ratio:.3}")?;
                        }
                    }
                }
            }
        }
        Command::Ablate {
            pure_transformer,
            pure_ssm,
            transformer_ssm,
            json,
        } => {
            let pt = Model::load(&pure_transformer)?;
            let ps = Model::load(&pure_ssm)?;
            let ts = Model::load(&transformer_ssm)?;
            let held = generate_toy_corpus(HELD_OUT_SEED, HELD_OUT_PER_STYLE)?;
            let table = run_ablation(
                &held,
                &[
                    (FusionVariant::PureTransformer, &pt),
                    (FusionVariant::PureSsm, &ps),
                    (FusionVariant::TransformerSsm, &ts),
                ],
            )?;
            if json {
                write!(out, "{}", table.to_json_lines())?;
            } else {
                write!(out, "{}", table.to_text())?;
            }
        }
        Command::GenCorpus {
            seed,
            n_per_style,
            out_dir,
        } => {
            let corpus = generate_toy_corpus(seed, n_per_style)?;
            fs::create_dir_all(&out_dir)?;
            let mut manifest = String::new();
            for (i, ex) in corpus.iter().enumerate() {
                let file = format!("{i:04}.wav");
                write_wav(out_dir.join(&file), &ex.waveform)?;
                let line = serde_json::json!({
                    "file": file,
                    "prompt": ex.prompt,
                    "style_id": ex.style_id,
                    "segment_labels": ex.segment_labels,
                });
                manifest.push_str(&line.to_string());
                manifest.push('\n');
            }
            fs::write(out_dir.join("manifest.jsonl"), manifest)?;
            writeln!(out, "wrote {} examples to {}", corpus.len(), out_dir.display())?;
        }
    }
    Ok(())
}
