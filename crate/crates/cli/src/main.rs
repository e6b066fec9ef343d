//! `fdt`: single entry point for the desk-scale pipeline.
//!
//! Exit codes: 0 success, 1 failed grad-check, 2 usage, 3 config, 4 data,
//! 5 numerical divergence. Failures print one JSON record on stderr.

mod align;
mod error;
mod gradcheck;
mod inputs;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fdt_toy::eval::{entropy_of_grids, format_nbest, parse_nbest_top, score_transcripts, Decoded};
use fdt_toy::synth::{gen_dataset, Split};
use fdt_toy::train::{finetune_stage, train_ctc_epochs, train_ctc_stage};
use fdt_toy::{LossKind, RunConfig, TrainState};

use crate::error::{CliError, Result};
use crate::inputs::GridSource;

#[derive(Parser, Debug)]
#[command(name = "fdt", version, about = "Focused discriminative training lab for word-piece CTC models")]
struct Cli {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the corpus seed (gen-data) or the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Per-utterance worker threads. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage one: CTC training on the train split.
    TrainCtc {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Epochs to run; defaults to `train.epochs` (minus any already done
        /// when resuming).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Stage two: fine-tune a checkpoint on the finetune split.
    Finetune {
        #[arg(long)]
        loss: LossKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prefix beam search; writes an N-best dump.
    Decode {
        #[command(flatten)]
        src: GridSource,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reference alignment, word segments and flagged error segments.
    Align {
        #[command(flatten)]
        src: GridSource,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the top hypotheses of an N-best dump against a corpus split.
    EvalWer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "eval_general")]
        split: Split,
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Frame-posterior entropy histogram.
    Entropy {
        #[command(flatten)]
        src: GridSource,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every finite-difference gradient suite.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()).map_err(|e| CliError::Data(format!("stdout: {e}")))
        }
    }
}

fn json_line(value: serde_json::Value) -> String {
    value.to_string() + "\n"
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    let workers = cli.workers.max(1);
    match cli.command {
        Command::GenData { out } => {
            if let Some(seed) = cli.seed {
                cfg.synth.seed = seed;
            }
            let ds = gen_dataset(&cfg.synth)?;
            ds.write(&out)?;
            let sizes: serde_json::Map<String, serde_json::Value> =
                Split::ALL.iter().map(|s| (s.name().to_string(), ds.split(*s).len().into())).collect();
            emit(None, &json_line(serde_json::json!({ "out": out.display().to_string(), "seed": cfg.synth.seed, "utterances": sizes })))
        }
        Command::TrainCtc { data, out, resume, epochs } => {
            let ds = inputs::load_dataset(&data)?;
            let utts = ds.split(Split::Train);
            let seed = cli.seed.unwrap_or(cfg.synth.seed);
            let state = match resume {
                Some(path) => {
                    let mut state = TrainState::load(&path)?;
                    let n = epochs.unwrap_or_else(|| cfg.train.epochs.saturating_sub(state.epoch as usize));
                    train_ctc_epochs(&mut state, utts, &ds.tokenizer, &cfg, n, workers)?;
                    state
                }
                None => {
                    if let Some(n) = epochs {
                        cfg.train.epochs = n;
                    }
                    train_ctc_stage(&cfg, seed, utts, &ds.tokenizer, workers)?
                }
            };
            state.save(&out)?;
            emit(None, &json_line(serde_json::json!({ "out": out.display().to_string(), "meta": state.meta() })))
        }
        Command::Finetune { loss, data, init, out } => {
            let ds = inputs::load_dataset(&data)?;
            let mut state = TrainState::load(&init)?;
            if let Some(seed) = cli.seed {
                state.seed = seed;
            }
            let (next, stats) = finetune_stage(&state, ds.split(Split::Finetune), &ds.tokenizer, loss, &cfg, workers)?;
            next.save(&out)?;
            emit(None, &json_line(serde_json::json!({ "out": out.display().to_string(), "loss": loss.name(), "stats": stats })))
        }
        Command::Decode { src, beam, n, out } => {
            let inputs = inputs::load(&src, workers)?;
            let (beam, n) = (beam.unwrap_or(cfg.decode.beam), n.unwrap_or(cfg.decode.nbest));
            check_beam(beam, n)?;
            let decoded = inputs
                .items
                .iter()
                .map(|it| Ok(Decoded { id: it.id.clone(), nbest: fdt_core::nbest::prefix_beam_search(&it.grid, beam, n)? }))
                .collect::<Result<Vec<_>>>()?;
            emit(out.as_deref(), &format_nbest(&decoded, &inputs.tokenizer))
        }
        Command::Align { src, beam, n, out } => {
            let inputs = inputs::load(&src, workers)?;
            let (beam, n) = (beam.unwrap_or(cfg.finetune.beam), n.unwrap_or(cfg.finetune.nbest));
            check_beam(beam, n)?;
            emit(out.as_deref(), &align::dump(&inputs, beam, n)?)
        }
        Command::EvalWer { data, split, hyps, out } => {
            let ds = inputs::load_dataset(&data)?;
            let text = std::fs::read_to_string(&hyps).map_err(|e| CliError::Data(format!("{}: {e}", hyps.display())))?;
            let tops = parse_nbest_top(&text, &ds.tokenizer)?;
            let utts = ds.split(split);
            let hyp_refs = utts
                .iter()
                .map(|u| tops.get(&u.id).map(Vec::as_slice).ok_or_else(|| CliError::Data(format!("{}: no hypothesis for {}", hyps.display(), u.id))))
                .collect::<Result<Vec<_>>>()?;
            emit(out.as_deref(), &score_transcripts(&ds, utts, &hyp_refs)?.to_text())
        }
        Command::Entropy { src, bins, out } => {
            let inputs = inputs::load(&src, workers)?;
            let grids: Vec<_> = inputs.items.into_iter().map(|it| it.grid).collect();
            emit(out.as_deref(), &entropy_of_grids(&grids, bins.unwrap_or(cfg.decode.entropy_bins)).to_text())
        }
        Command::GradCheck { cases } => {
            let reports = gradcheck::run_all(cli.seed.unwrap_or(cfg.synth.seed), cases.max(1))?;
            emit(None, &gradcheck::format(&reports))?;
            match reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect::<Vec<_>>() {
                failed if failed.is_empty() => Ok(()),
                failed => Err(CliError::CheckFailed(format!("gradient suites failed: {}", failed.join(", ")))),
            }
        }
    }
}

fn check_beam(beam: usize, n: usize) -> Result<()> {
    if n == 0 || beam < n {
        return Err(CliError::Config(format!("need beam >= n >= 1, got beam {beam}, n {n}")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let err = CliError::Usage(e.kind().to_string());
            eprintln!("{}", err.record());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
