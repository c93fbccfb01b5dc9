//! `trime` -- train and evaluate small language models whose next-token
//! distribution mixes vocabulary logits with in-batch or external memory.

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use trime_core::harness::{
    cmd_analyze, cmd_build_datastore, cmd_eval, cmd_gen, cmd_ingest, cmd_train, EvalRequest,
    ExperimentConfig,
};
use trime_core::inference::EvalMode;

#[derive(Parser)]
#[command(name = "trime", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// experiment config file (key = value lines)
    #[arg(long)]
    config: PathBuf,
    /// override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// override the config output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// worker threads for parallel sections
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }

    fn threads(&self) -> usize {
        self.threads
            .or_else(|| std::env::var("TRIME_THREADS").ok().and_then(|v| v.parse().ok()))
            .unwrap_or(1)
            .max(1)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary from a corpus
    Ingest {
        #[command(flatten)]
        common: Common,
        /// corpus to ingest; defaults to data.train
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train a model per the config
    Train {
        #[command(flatten)]
        common: Common,
        /// continue from the checkpoint and train state in out.dir
        #[arg(long)]
        resume: bool,
        /// overwrite an existing checkpoint
        #[arg(long)]
        force: bool,
    },
    /// Encode a corpus into an external-memory datastore
    BuildDatastore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// corpus to encode; defaults to data.train
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// output file; defaults to out.dir/datastore.trds
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Tune on dev and evaluate a split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// dev | test
        #[arg(long, default_value = "test")]
        split: String,
        /// vanilla | trime | trime_long | trime_ext | cache | knnlm
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        datastore: Option<PathBuf>,
        /// report path; defaults to out.dir/report_<split>_<mode>.json
        #[arg(long)]
        report: Option<PathBuf>,
        /// also write per-token NLLs as little-endian f64
        #[arg(long)]
        nll_dump: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on another domain without retraining
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// target-domain dev corpus (used for tuning)
        #[arg(long)]
        dev: PathBuf,
        /// target-domain eval corpus
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        datastore: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare evaluation reports side by side
    Analyze {
        /// report JSON files
        reports: Vec<PathBuf>,
        /// also write the table as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Generate a synthetic dataset (copy | dupfam | domainshift)
    Gen {
        kind: String,
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Ingest { common, corpus } => {
            let cfg = common.load()?;
            let corpus = corpus.unwrap_or_else(|| cfg.data_train.clone());
            let (vocab_size, tokens) = cmd_ingest(&corpus, cfg.mode, &cfg.vocab_path())?;
            println!("vocab {} tokens {} -> {}", vocab_size, tokens, cfg.vocab_path().display());
        }
        Command::Train { common, resume, force } => {
            let cfg = common.load()?;
            let out = cmd_train(&cfg, resume, force)?;
            match out.final_loss {
                Some(loss) => println!("trained to {:?} (final loss {:.4})", out.checkpoint, loss),
                None => println!("wrote initialized checkpoint {:?}", out.checkpoint),
            }
        }
        Command::BuildDatastore { common, checkpoint, corpus, output, force } => {
            let cfg = common.load()?;
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.checkpoint_path());
            let corpus = corpus.unwrap_or_else(|| cfg.data_train.clone());
            let output = output.unwrap_or_else(|| cfg.out_dir.join("datastore.trds"));
            let (n, d) = cmd_build_datastore(&cfg, &checkpoint, &corpus, &output, force)?;
            println!("datastore {} entries (d = {}) -> {}", n, d, output.display());
        }
        Command::Eval { common, checkpoint, split, mode, datastore, report, nll_dump } => {
            let cfg = common.load()?;
            let threads = common.threads();
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.checkpoint_path());
            let mode = match mode {
                Some(m) => EvalMode::parse(&m)?,
                None => cfg.default_eval_mode(),
            };
            let eval_corpus = match split.as_str() {
                "dev" => cfg.data_dev.clone().context("config has no data.dev")?,
                "test" => cfg.data_test.clone().context("config has no data.test")?,
                other => anyhow::bail!("unknown split '{}'", other),
            };
            let report_path = report.unwrap_or_else(|| {
                cfg.out_dir.join(format!("report_{}_{}.json", split, mode.as_str()))
            });
            let r = cmd_eval(
                &cfg,
                &EvalRequest {
                    checkpoint: &checkpoint,
                    dev: cfg.data_dev.as_deref(),
                    eval_corpus: &eval_corpus,
                    mode,
                    datastore: datastore.as_deref(),
                    report_out: &report_path,
                    nll_dump: nll_dump.as_deref(),
                    threads,
                },
            )?;
            println!(
                "{}: {} tokens, ppl {:.4}, bpc {:.4} -> {}",
                mode.as_str(),
                r.token_count,
                r.ppl,
                r.bpc,
                report_path.display()
            );
        }
        Command::Adapt { common, checkpoint, dev, eval, mode, datastore, report } => {
            let cfg = common.load()?;
            let threads = common.threads();
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.checkpoint_path());
            let mode = match mode {
                Some(m) => EvalMode::parse(&m)?,
                None => cfg.default_eval_mode(),
            };
            let report_path =
                report.unwrap_or_else(|| cfg.out_dir.join(format!("adapt_{}.json", mode.as_str())));
            let r = trime_core::harness::cmd_adapt(
                &cfg,
                &EvalRequest {
                    checkpoint: &checkpoint,
                    dev: Some(&dev),
                    eval_corpus: &eval,
                    mode,
                    datastore: datastore.as_deref(),
                    report_out: &report_path,
                    nll_dump: None,
                    threads,
                },
            )?;
            println!(
                "adapt {}: {} tokens, ppl {:.4} -> {}",
                mode.as_str(),
                r.token_count,
                r.ppl,
                report_path.display()
            );
        }
        Command::Analyze { reports, csv } => {
            let table = cmd_analyze(&reports, csv.as_deref())?;
            print!("{}", table);
        }
        Command::Gen { kind, out, seed } => {
            let files = cmd_gen(&kind, &out, seed)?;
            for f in files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}
