use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dsct::commands::{self, Split};
use dsct::config::{parse_overrides, read_config_file, split_overrides, Entry, RunConfig};
use dsct::data::Vocab;

/// Dual-stream collaborative transformer captioner.
///
/// Any configuration key (see `dsct config`) can be given as `--key value`
/// alongside a subcommand's own flags; it overrides the config file.
#[derive(Parser)]
#[command(name = "dsct", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/val corpus and vocabulary.
    GenData {
        /// Overwrite existing dataset files.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Cross-entropy training.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Self-critical finetuning with a CIDEr-D reward.
    FinetuneScst {
        /// Cross-entropy checkpoint to start from.
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Directory for report.txt and report.tsv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Caption every scene of a split.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Write per-word stream nominations to this file.
        #[arg(long)]
        dump_nominations: Option<PathBuf>,
        /// Write captions to this file instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and score the four fusion variants under one budget.
    Ablate {
        /// Directory for ablation.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Print every configuration key with its resolved value.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli, overrides: &[Entry]) -> anyhow::Result<()> {
    let resolve = |common: &Common| -> anyhow::Result<RunConfig> {
        let file = match &common.config {
            Some(p) => read_config_file(p)?,
            None => Vec::new(),
        };
        Ok(RunConfig::resolve(Vocab::desk().len(), &file, overrides)?)
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::GenData { force, common } => commands::gen_data(&resolve(&common)?, force, &mut out)?,
        Command::Train { resume, common } => {
            commands::train(&resolve(&common)?, resume.as_deref(), &mut out)?;
        }
        Command::FinetuneScst { init_from, common } => {
            let cfg = resolve(&common)?;
            let init = init_from.context("finetune-scst needs --init-from <checkpoint>")?;
            commands::finetune_scst(&cfg, &init, &mut out)?;
        }
        Command::Eval {
            checkpoint,
            split,
            out: dir,
            common,
        } => {
            commands::eval(&resolve(&common)?, &checkpoint, split, dir.as_deref(), &mut out)?;
        }
        Command::Caption {
            checkpoint,
            split,
            dump_nominations,
            out: file,
            common,
        } => {
            let cfg = resolve(&common)?;
            match file {
                Some(path) => {
                    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
                    commands::caption(&cfg, &checkpoint, split, dump_nominations.as_deref(), &mut f)?;
                    f.flush()?;
                }
                None => {
                    commands::caption(&cfg, &checkpoint, split, dump_nominations.as_deref(), &mut out)?;
                }
            }
        }
        Command::Ablate { out: dir, common } => {
            commands::ablate(&resolve(&common)?, dir.as_deref(), &mut out)?;
        }
        Command::Config { common } => {
            write!(out, "{}", resolve(&common)?.to_text())?;
        }
    }
    Ok(())
}

fn fail(msg: &str) -> ExitCode {
    eprintln!("error: {}", msg.trim().trim_start_matches("error: ").replace('\n', " "));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let (rest, raw) = split_overrides(&args);
    let cli = match Cli::try_parse_from(rest) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            return fail(text.lines().next().unwrap_or("invalid arguments"));
        }
    };
    let overrides = match parse_overrides(&raw) {
        Ok(o) => o,
        Err(e) => return fail(&e.to_string()),
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            fail(&msg)
        }
    }
}
