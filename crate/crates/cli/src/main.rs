//! `smfea` command-line entry point.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "smfea", version, about = "Structured tree embedding pipeline for image-sentence retrieval")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic paired corpus with ground-truth referral trees.
    GenSynthetic(GenArgs),
    /// Build the word vocabulary from a manifest's sentences.
    BuildVocab(VocabArgs),
    /// Tag sentences, build referral trees and the category dictionaries.
    BuildTrees(TreesArgs),
    /// Train the model on a manifest.
    Train(TrainArgs),
    /// Evaluate retrieval on a manifest and write the recall report.
    Eval(EvalArgs),
    /// Rank candidates for one query id.
    Retrieve(RetrieveArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradArgs),
    /// Export per-node top-1 predictions of both tree encoders as JSON.
    ExportTrees(ExportArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Output directory for manifest.jsonl and features/.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON synthetic spec; individual flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_pairs: Option<usize>,
    #[arg(long)]
    pub fragment_types: Option<usize>,
    #[arg(long)]
    pub relation_types: Option<usize>,
    /// Regions per image (K).
    #[arg(long)]
    pub regions: Option<usize>,
    #[arg(long)]
    pub d_region: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Args, Debug)]
pub struct VocabArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for word_vocab.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Words seen fewer times map to <unk>.
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
}

#[derive(Args, Debug)]
pub struct TreesArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the tree-annotated manifest and dictionaries.
    #[arg(long)]
    pub out: PathBuf,
    /// Tagger strategy: builtin or file.
    #[arg(long, default_value = "builtin")]
    pub tagger: String,
    /// Lexicon for the file tagger (surface, lemma, POS per line, tab separated).
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

/// Flags that override training-config fields.
#[derive(Args, Debug, Default)]
pub struct ConfigOverrides {
    /// Flat JSON training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config file and SMFEA_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Tree cell: paper or childsum.
    #[arg(long)]
    pub cell_variant: Option<String>,
    /// Negative mining: sum or hardest.
    #[arg(long)]
    pub negatives: Option<String>,
    /// single or double.
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the checkpoint, metrics.csv and epochs.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory holding word_vocab.json (defaults to the manifest's directory).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Directory holding the category dictionaries (defaults to the manifest's directory).
    #[arg(long)]
    pub dicts: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for eval.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Refuse checkpoints whose architecture differs from this config.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for retrieval.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Image id (i2t) or sentence id `<image_id>#0` (t2i).
    #[arg(long)]
    pub query: String,
    /// i2t or t2i.
    #[arg(long, default_value = "i2t")]
    pub direction: String,
    /// Number of results.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradArgs {
    /// linear, encoders, treeenc, objective or end2end.
    #[arg(long, default_value = "end2end")]
    pub component: String,
    /// Output directory for gradcheck.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub d_node: usize,
    #[arg(long, default_value_t = 16)]
    pub d_v: usize,
    #[arg(long, default_value_t = 3)]
    pub batch: usize,
    /// Entries sampled per parameter block (all when omitted).
    #[arg(long)]
    pub max_entries: Option<usize>,
    #[arg(long, default_value = "paper")]
    pub cell_variant: String,
    /// Exit with status 2 when the worst relative error exceeds this.
    #[arg(long)]
    pub tolerance: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for tree_predictions.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Export at most this many samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
