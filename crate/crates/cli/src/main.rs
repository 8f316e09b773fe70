use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod config;
mod data;
mod downstream;
mod manifest;
mod train;

/// Dependency-agreement chunking and two-stage MLM pretraining.
#[derive(Debug, Parser)]
#[command(name = "dacbert", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Worker threads; 1 is the reproducibility reference.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Fail on the first malformed CoNLL-U sentence instead of skipping it.
    #[arg(long, global = true)]
    pub strict: bool,
    /// JSON configuration file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a CoNLL-U corpus and write the accepted sentences.
    Ingest(data::IngestArgs),
    /// Extract the four agreement chunk datasets from a corpus.
    Chunk(data::ChunkArgs),
    /// Chunk length percentiles per agreement.
    Stats(data::StatsArgs),
    /// Build a WordPiece-style vocabulary from a corpus.
    BuildVocab(data::BuildVocabArgs),
    /// Pretrain agreement submodels on their chunk datasets.
    PretrainStage1(train::Stage1Args),
    /// Pretrain the main encoder with fused agreement embeddings.
    PretrainStage2(train::Stage2Args),
    /// Finetune a classifier on a labeled task.
    Finetune(downstream::FinetuneArgs),
    /// Measure the accuracy drop when agreements are removed during finetuning.
    Ablate(downstream::AblateArgs),
    /// Per-agreement attention attribution of parsed sentences.
    AttnDump(downstream::AttnDumpArgs),
    /// Evaluate MLM accuracy of a checkpoint or accuracy of a classifier.
    Eval(downstream::EvalArgs),
    /// Write the synthetic toy corpus and tasks.
    GenToy(data::GenToyArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Ingest(a) => data::ingest(g, a),
        Command::Chunk(a) => data::chunk(g, a),
        Command::Stats(a) => data::stats(g, a),
        Command::BuildVocab(a) => data::build_vocab(g, a),
        Command::PretrainStage1(a) => train::stage1(g, a),
        Command::PretrainStage2(a) => train::stage2(g, a),
        Command::Finetune(a) => downstream::finetune(g, a),
        Command::Ablate(a) => downstream::ablate(g, a),
        Command::AttnDump(a) => downstream::attn_dump(g, a),
        Command::Eval(a) => downstream::eval(g, a),
        Command::GenToy(a) => data::gen_toy(g, a),
    }
}

/// 3 for numeric failures, 2 for everything else that reaches here.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<dacbert::Error>())
        .any(dacbert::Error::is_numeric);
    if numeric {
        3
    } else {
        2
    }
}

/// The error chain joined by `: `, skipping causes already quoted by an
/// outer message.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
