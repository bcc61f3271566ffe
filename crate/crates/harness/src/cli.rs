use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use evlight_core::alignment::{alignment_error_stats, match_sequences, read_intervals_csv};
use evlight_core::synth::{make_dataset, Split};
use serde_json::{json, Value};

use crate::ablate::{ablate, parse_variants};
use crate::config::{MakeDataConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::infer::{enhance_dir, evaluate};
use crate::train::{deterministic_mode, train};

#[derive(Debug, Parser)]
#[command(
    name = "evlight",
    version,
    about = "Event-guided low-light video enhancement"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a JSON config; writes one checkpoint per epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-frame and mean PSNR, PSNR* and SSIM of a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Directory for per-sequence CSVs and summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the base config and each variant.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated variants; join flags with `+`.
        #[arg(long)]
        variants: String,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Enhance a directory of frames with its events and timestamps.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write SNR maps and light-up images.
        #[arg(long)]
        dump_aux: bool,
    },
    /// Generate a synthetic paired dataset.
    MakeData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Pair low-light and normal-light captures by interval length.
    MatchAlign {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        threshold_ms: f64,
    },
}

pub fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Train { config, resume } => {
            let mut cfg = TrainConfig::load(&config)?;
            if resume.is_some() {
                cfg.resume = resume;
            }
            let report = train(&cfg)?;
            Ok(json!({
                "steps": report.optimizer.step,
                "initial_loss": report.losses.first().map(|l| l.loss),
                "final_loss": report.losses.last().map(|l| l.loss),
                "checkpoints": report.checkpoints,
            }))
        }
        Command::Evaluate {
            ckpt,
            manifest,
            split,
            out,
        } => {
            let report = evaluate(&ckpt, &manifest, split.into(), out.as_deref())?;
            Ok(json!({
                "summary": report.summary,
                "light_up": report.light_up,
                "flicker": report.flicker,
                "sequences": report.sequences.iter().map(|s| json!({"id": s.id, "summary": s.summary})).collect::<Vec<_>>(),
            }))
        }
        Command::Ablate {
            config,
            variants,
            split,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let variants = parse_variants(&variants)?;
            Ok(serde_json::to_value(ablate(
                &cfg,
                &variants,
                split.into(),
            )?)?)
        }
        Command::Enhance {
            ckpt,
            input,
            out,
            dump_aux,
        } => Ok(serde_json::to_value(enhance_dir(
            &ckpt, &input, &out, dump_aux,
        )?)?),
        Command::MakeData { config } => {
            let cfg = MakeDataConfig::load(&config)?;
            let manifest = make_dataset(&cfg.out, &cfg.dataset)?;
            Ok(json!({
                "manifest": cfg.out.join("manifest.json"),
                "samples": manifest.samples.len(),
            }))
        }
        Command::MatchAlign { csv, threshold_ms } => {
            let f = fs::File::open(&csv).map_err(|e| Error::io(&csv, e))?;
            let (low, normal) = read_intervals_csv(f)?;
            let m = match_sequences(&low, &normal)?;
            let stats = alignment_error_stats(&m, threshold_ms)?;
            Ok(json!({ "matching": m, "stats": stats }))
        }
    }
}

/// Parses arguments, runs the command and prints JSON: the result on stdout,
/// or `{"error": ...}` on stderr with a nonzero exit code.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = json!({ "error": { "kind": "usage", "message": e.to_string().trim_end() } });
            eprintln!("{err}");
            return ExitCode::from(2);
        }
    };
    if deterministic_mode() {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global();
    }
    match run(cli) {
        Ok(v) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&v).unwrap_or_else(|_| v.to_string())
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
