//! `tbvad`: build knowledge, train, evaluate and explain text-only video
//! anomaly detectors from caption files.

mod commands;
mod config;
mod failure;
mod provenance;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{Overrides, RunConfig};
use crate::failure::Failure;
use crate::provenance::{RunRecord, RUN_LOG_NAME};

#[derive(Debug, Parser)]
#[command(name = "tbvad", version, about = "Text-only video anomaly detection with explanations")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for training and synthetic data.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Use the remote embedding service at this base URL.
    #[arg(long, global = true, value_name = "URL")]
    embed_endpoint: Option<String>,
    /// Text-generation service for summaries and rationales.
    #[arg(long, global = true, value_name = "URL")]
    gen_endpoint: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Auc,
    Ap,
    Acc,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic train/test caption corpus and its manifest.
    GenSynth {
        /// Output directory.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Vocabulary domain: a, b or disjoint.
        #[arg(long)]
        domain: Option<String>,
    },
    /// Summarize a training corpus into per-class aspect knowledge.
    BuildKnowledge {
        #[arg(long, value_name = "PATH")]
        captions: PathBuf,
        /// Knowledge JSON to write.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[arg(long, value_name = "CSV")]
        aspects: Option<String>,
        /// Use the offline extractive summarizer even if a generation endpoint is set.
        #[arg(long)]
        extractive: bool,
    },
    /// Train a classifier against a knowledge file.
    Train {
        #[arg(long, value_name = "PATH")]
        captions: PathBuf,
        #[arg(long, value_name = "PATH")]
        knowledge: PathBuf,
        /// Model file to write.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[arg(long, value_name = "CSV")]
        aspects: Option<String>,
    },
    /// Score a labelled corpus and report metrics.
    Eval {
        #[arg(long, value_name = "PATH")]
        captions: PathBuf,
        #[arg(long, value_name = "PATH")]
        knowledge: PathBuf,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Print only this metric.
        #[arg(long, value_enum)]
        metric: Option<Metric>,
        /// Also write the full report JSON here.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Explain predictions as structured records.
    Explain {
        #[arg(long, value_name = "PATH")]
        captions: PathBuf,
        #[arg(long, value_name = "PATH")]
        knowledge: PathBuf,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Explain only this video; otherwise one record per line for every video.
        #[arg(long)]
        video_id: Option<String>,
        #[arg(long, value_name = "INT")]
        topk: Option<usize>,
        /// Include counterfactual slot margins.
        #[arg(long)]
        counterfactual: bool,
        /// Also write the records (JSON Lines) here.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Train and evaluate once per aspect combination.
    Ablate {
        #[arg(long, value_name = "PATH")]
        captions: PathBuf,
        #[arg(long, value_name = "PATH")]
        test_captions: PathBuf,
        /// `table3`, a combination file, or inline combinations separated by `;`.
        #[arg(long, default_value = "table3")]
        combos: String,
        /// CSV of the rows.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Metric used to name the best row (auc or ap).
        #[arg(long, value_enum)]
        metric: Option<Metric>,
        #[arg(long)]
        extractive: bool,
    },
    /// Average caption length and TF-IDF information content.
    CaptionStats {
        #[arg(long, value_name = "PATH")]
        captions: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Train on one dataset and evaluate on another.
    CrossEval {
        #[arg(long, value_name = "PATH")]
        captions: PathBuf,
        #[arg(long, value_name = "PATH")]
        test_captions: PathBuf,
        #[arg(long, value_name = "CSV")]
        aspects: Option<String>,
        #[arg(long, value_enum)]
        metric: Option<Metric>,
        /// Permit both files to carry the same source tag.
        #[arg(long)]
        allow_same_source: bool,
        #[arg(long)]
        extractive: bool,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynth { .. } => "gen-synth",
            Command::BuildKnowledge { .. } => "build-knowledge",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Explain { .. } => "explain",
            Command::Ablate { .. } => "ablate",
            Command::CaptionStats { .. } => "caption-stats",
            Command::CrossEval { .. } => "cross-eval",
        }
    }

    /// Where the command writes, if anywhere; the directory is locked and
    /// hosts the run log unless the configuration names another.
    fn out_dir(&self) -> Option<PathBuf> {
        let out = match self {
            Command::GenSynth { out, .. } => return Some(out.clone()),
            Command::BuildKnowledge { out, .. } | Command::Train { out, .. } => Some(out),
            Command::Eval { out, .. }
            | Command::Explain { out, .. }
            | Command::Ablate { out, .. }
            | Command::CaptionStats { out, .. }
            | Command::CrossEval { out, .. } => out.as_ref(),
        }?;
        Some(match out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        })
    }

    fn overrides(&self, global: &GlobalArgs) -> Result<Overrides, Failure> {
        let mut o = Overrides {
            seed: global.seed,
            embed_endpoint: global.embed_endpoint.clone(),
            gen_endpoint: global.gen_endpoint.clone(),
            ..Overrides::default()
        };
        match self {
            Command::BuildKnowledge { aspects, .. }
            | Command::Train { aspects, .. }
            | Command::CrossEval { aspects, .. } => {
                if let Some(list) = aspects {
                    let parsed = tbvad_core::knowledge::Aspect::parse_list(list)
                        .map_err(|e| Failure::usage(format!("--aspects {list:?}: {e}")))?;
                    o.aspects = Some(parsed);
                }
            }
            Command::Explain { topk, counterfactual, .. } => {
                o.top_k = *topk;
                o.counterfactual = *counterfactual;
            }
            _ => {}
        }
        Ok(o)
    }
}

fn run_log_path(cfg: Option<&RunConfig>, out_dir: Option<&Path>) -> PathBuf {
    if let Some(path) = cfg.and_then(|c| c.run_log.clone()) {
        return path;
    }
    out_dir.unwrap_or(Path::new(".")).join(RUN_LOG_NAME)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let out_dir = cli.command.out_dir();
    let mut cfg_for_log: Option<RunConfig> = None;
    let mut inputs = Default::default();
    let mut outputs = Vec::new();
    let result = (|| {
        let mut cfg = RunConfig::load(cli.global.config.as_deref())?;
        cfg.apply(&cli.command.overrides(&cli.global)?);
        cfg.validate()?;
        cfg_for_log = Some(cfg.clone());
        let _lock = match &out_dir {
            Some(dir) => Some(provenance::DirLock::acquire(dir)?),
            None => None,
        };
        commands::run(&cli.command, &cfg, &mut inputs, &mut outputs)
    })();

    let (code, error) = match &result {
        Ok(()) => (0, None),
        Err(f) => {
            eprintln!("error: {f}");
            (f.exit_code(), Some(f.to_string()))
        }
    };
    let record = RunRecord {
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        command: cli.command.name().to_string(),
        config_digest: cfg_for_log.as_ref().map(RunConfig::digest).unwrap_or_default(),
        inputs,
        outputs,
        exit_code: code,
        error,
    };
    let log = run_log_path(cfg_for_log.as_ref(), out_dir.as_deref());
    if let Err(e) = provenance::append(&log, &record) {
        eprintln!("warning: could not append to run log {}: {e}", log.display());
    }
    ExitCode::from(code)
}
