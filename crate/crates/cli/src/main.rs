use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use topicner_cli::commands::{self, BuildArgs, CleanArgs, EvalArgs, TagArgs, TrainArgs};
use topicner_cli::config::PipelineConfig;
use topicner_cli::CliError;

#[derive(Debug, Parser)]
#[command(name = "topicner", version, about = "Weakly supervised topic tagging")]
struct Cli {
    /// TOML pipeline config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run on a single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Clean a raw title list into a gazetteer.
    CleanTitles {
        #[arg(long)]
        titles: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the cleaning statistics here.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Reduce a document collection and emit weakly labeled corpora.
    BuildCorpus {
        #[arg(long)]
        docs: Option<PathBuf>,
        #[arg(long)]
        gazetteer: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train one model per configured sequence length.
    Train {
        #[arg(long)]
        corpus_dir: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Tag JSONL documents ({"doc_id", "text"}) and print spans as JSONL.
    Tag {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        models_dir: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Score predicted spans against references.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Count a match when either string contains the other.
        #[arg(long)]
        partial: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| CliError::input(e.to_string()))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;

    match cli.command {
        Command::CleanTitles { titles, out, stats } => commands::clean_titles(&cfg, CleanArgs { titles, out, stats }),
        Command::BuildCorpus {
            docs,
            gazetteer,
            vocab,
            out_dir,
        } => commands::build_corpus(
            &cfg,
            BuildArgs {
                docs,
                gazetteer,
                vocab,
                out_dir,
            },
        ),
        Command::Train {
            corpus_dir,
            vocab,
            out_dir,
        } => commands::train(
            &cfg,
            TrainArgs {
                corpus_dir,
                vocab,
                out_dir,
            },
        ),
        Command::Tag {
            input,
            output,
            models_dir,
            vocab,
        } => commands::tag(
            &cfg,
            TagArgs {
                input,
                output,
                models_dir,
                vocab,
            },
        ),
        Command::Eval {
            pred,
            reference,
            partial,
            output,
        } => commands::evaluate(EvalArgs {
            pred,
            reference,
            partial,
            output,
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.code as u8)
        }
    }
}
