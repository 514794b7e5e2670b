//! `pilm` command-line interface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::corpus::read_text;
use crate::error::{Error, Result};
use crate::induce::{from_json_lines, induce_text, to_json_lines};
use crate::train::{evaluate_ppl, load_corpus, Trainer, WithPhraseAlignment};
use crate::visualize::write_all;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const SEED_ENV: &str = "PIL_SEED";

#[derive(Parser, Debug)]
#[command(name = "pilm", version, about = "Phrase-inducing LSTM language model")]
pub struct Cli {
    /// Random seed; overrides PIL_SEED and the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes metrics.jsonl, best.ckpt and last.ckpt to out_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Word-level perplexity of a split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Valid)]
        split: Split,
        /// Also run phrase induction on every window (does not change the result).
        #[arg(long)]
        with_induction: bool,
    },
    /// Dump heights, phrases and attention for each input line as JSON lines.
    Induce {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Render induce output as SVG and text, one pair of files per sentence.
    Visualize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Seed precedence: `--seed`, then `PIL_SEED`, then the config value.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        None => Ok(config),
    }
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

fn train(config: &Path, resume: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    cfg.seed = resolve_seed(seed, env_seed().as_deref(), cfg.seed)?;
    let corpus = load_corpus(&cfg)?;
    let objective = WithPhraseAlignment(cfg.cpa());
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.vocab.tokens() != corpus.vocab.tokens() {
                return Err(Error::Config(format!("{} was trained on a different vocabulary", path.display())));
            }
            Trainer::resume(ck, cfg, objective)?
        }
        None => Trainer::new(cfg, corpus.vocab.clone(), objective)?,
    };
    eprintln!(
        "training: {} train / {} valid tokens, vocab {}, {} parameters",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.vocab.len(),
        trainer.store.num_scalars()
    );
    let best = trainer.fit(&corpus, |rec, stats| {
        eprintln!(
            "epoch {:>3}  train ppl {:>9.2}  cpa {:>7}  valid ppl {:>9.2}{}{}  ({:.0} tok/s)",
            rec.epoch,
            rec.train_ppl,
            rec.cpa_loss.map_or("-".into(), |c| format!("{c:.4}")),
            rec.val_ppl,
            if rec.averaging { "  [avg]" } else { "" },
            if rec.best { "  *" } else { "" },
            stats.tokens_per_sec
        );
    })?;
    println!("{}", serde_json::json!({ "best_val_loss": best.loss, "best_val_ppl": best.ppl }));
    Ok(())
}

fn eval(ckpt: &Path, split: Split, with_induction: bool) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let corpus = load_corpus(&ck.config)?;
    if corpus.vocab.tokens() != ck.vocab.tokens() {
        return Err(Error::Config("corpus vocabulary differs from the checkpoint's".into()));
    }
    let ids = match split {
        Split::Train => &corpus.train,
        Split::Valid => &corpus.valid,
        Split::Test => &corpus.test,
    };
    let (model, store) = ck.model()?;
    let cfg = &ck.config;
    let res = evaluate_ppl(&model, &store, ids, cfg.eval_batch_size, cfg.bptt, ck.vocab.eos(), cfg.exec, with_induction)?;
    let split = format!("{split:?}").to_lowercase();
    println!("{}", serde_json::json!({ "split": split, "loss": res.loss, "ppl": res.ppl, "tokens": res.tokens }));
    Ok(())
}

fn induce(ckpt: &Path, input: &Path, output: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let (model, store) = ck.model()?;
    let text = read_text(input)?;
    let records = induce_text(&model, &store, &ck.vocab, &text, ck.config.exec)?;
    std::fs::write(output, to_json_lines(&records)?).map_err(|e| Error::io(output, e))
}

fn visualize(input: &Path, outdir: &Path) -> Result<()> {
    let records = from_json_lines(&read_text(input)?)?;
    let written = write_all(&records, outdir)?;
    eprintln!("wrote {} sentence renderings to {}", written.len(), outdir.display());
    Ok(())
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume } => train(&config, resume.as_deref(), cli.seed),
        Command::Eval { ckpt, split, with_induction } => eval(&ckpt, split, with_induction),
        Command::Induce { ckpt, input, output } => induce(&ckpt, &input, &output),
        Command::Visualize { input, outdir } => visualize(&input, &outdir),
    }
}

/// Parses arguments, runs the command and maps errors to exit codes.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
