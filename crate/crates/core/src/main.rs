//! Command-line workbench: training, generation, needle grids, attention
//! analytics, and decode benchmarks over checkpointed models.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use anchorkv::analysis::{
    export_heatmap, fold_attention, sparsity_report, wov_eigen_report, HeadSelection,
};
use anchorkv::anchor::plant_anchors;
use anchorkv::cache::PolicyKind;
use anchorkv::harness::{
    bench_runtime, decode_text, encode_text, eval_needle_grid, make_corpus, train_model,
    CorpusStyle, RuntimeReport, TrainOptions, LINEBREAK_TOKEN,
};
use anchorkv::model::{forward, generate_traced, AttentionTrace, ForwardOptions, ModelConfig, ModelWeights};
use anchorkv::numerics::Rng;
use anchorkv::{Error, Result};

#[derive(Parser)]
#[command(name = "anchorkv", version, about = "Transformer workbench with compressing KV-cache policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch on a synthetic corpus
    Train(TrainArgs),
    /// Greedy-decode a continuation for a prompt under a cache policy
    Generate(GenerateArgs),
    /// Run the needle-in-a-haystack accuracy grid
    Needle(NeedleArgs),
    /// Attention and weight analytics
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Time prefill and decode under a cache policy
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Lines,
    Membership,
}

impl From<StyleArg> for CorpusStyle {
    fn from(s: StyleArg) -> CorpusStyle {
        match s {
            StyleArg::Lines => CorpusStyle::Lines,
            StyleArg::Membership => CorpusStyle::Membership,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Args)]
struct TrainArgs {
    /// Model config JSON file
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value = "lines")]
    style: StyleArg,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Approximate corpus size in tokens
    #[arg(long, default_value_t = 60_000)]
    corpus_tokens: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Seed for corpus generation and batch shuffling (weight init comes
    /// from the config)
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Report a loss line every this many steps
    #[arg(long, default_value_t = 25)]
    log_every: usize,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = PolicyKind::parse, default_value = "dense")]
    policy: PolicyKind,
    /// Literal prompt text
    #[arg(long, conflicts_with = "prompt_file")]
    prompt: Option<String>,
    /// Read the prompt from a file instead
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    max_new: usize,
}

#[derive(Args)]
struct NeedleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = PolicyKind::parse, default_value = "dense")]
    policy: PolicyKind,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
    lengths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    depths: Vec<f64>,
    /// Trials per cell, evaluated as present/absent pairs (must be even)
    #[arg(long, default_value_t = 32)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Per-layer attention concentration and attention-max token classes
    Sparsity(SparsityArgs),
    /// Eigenvalue signs of each head's value-output product
    Wov(WovArgs),
    /// Lower-triangular attention heatmap for one layer
    Heatmap(HeatmapArgs),
}

#[derive(Args)]
struct SparsityArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Text file to run the model on
    #[arg(long)]
    input: PathBuf,
    /// Leading positions to skip when classifying attention maxima
    #[arg(long, default_value_t = 0)]
    exclude_sinks: usize,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WovArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    /// Dump the full spectrum instead of per-head sign counts (CSV only)
    #[arg(long)]
    eigenvalues: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Text file to run the model on
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    layer: usize,
    /// Head index, or "mean" for the average over the layer's heads
    #[arg(long, default_value = "mean")]
    head: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = PolicyKind::parse, default_value = "dense")]
    policy: PolicyKind,
    #[arg(long, default_value_t = 2048)]
    prompt_len: usize,
    #[arg(long, default_value_t = 2048)]
    gen_len: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 3)]
    seed: u64,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => run_train(a),
        Command::Generate(a) => run_generate(a),
        Command::Needle(a) => run_needle(a),
        Command::Analyze(a) => match a {
            AnalyzeCommand::Sparsity(s) => run_sparsity(s),
            AnalyzeCommand::Wov(w) => run_wov(w),
            AnalyzeCommand::Heatmap(h) => run_heatmap(h),
        },
        Command::Bench(a) => run_bench(a),
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let config = ModelConfig::from_json(&fs::read_to_string(&a.config)?)?;
    let corpus = make_corpus(&mut Rng::new(a.seed), a.corpus_tokens, a.style.into())?;
    let opts = TrainOptions {
        steps: a.steps,
        batch_size: a.batch,
        adam: anchorkv::model::AdamConfig { lr: a.lr, ..Default::default() },
        shuffle_seed: a.seed ^ 0x5eed,
    };
    eprintln!(
        "training {} layers, d_model {}, {} sequences, {} steps",
        config.n_layers,
        config.d_model,
        corpus.len(),
        opts.steps
    );
    let trained = train_model(&config, &corpus, &opts)?;
    for (i, loss) in trained.losses.iter().enumerate() {
        if a.log_every > 0 && (i % a.log_every == 0 || i + 1 == trained.losses.len()) {
            eprintln!("step {i} loss {loss:.4}");
        }
    }
    trained.weights.save(&a.out)?;
    println!(
        "trained {} steps, loss {:.4} -> {:.4}, checkpoint {}",
        trained.losses.len(),
        trained.losses.first().unwrap(),
        trained.losses.last().unwrap(),
        a.out.display()
    );
    Ok(())
}

fn run_generate(a: GenerateArgs) -> Result<()> {
    let w = ModelWeights::load(&a.checkpoint)?;
    let text = match (&a.prompt, &a.prompt_file) {
        (Some(p), _) => p.clone(),
        (None, Some(f)) => fs::read_to_string(f)?,
        (None, None) => {
            return Err(Error::Input("provide --prompt or --prompt-file".into()));
        }
    };
    let prompt = encode_text(&text)?;
    let trace = generate_traced(&w, a.policy, &prompt, a.max_new)?;
    let continuation = decode_text(&trace.output[prompt.len()..])?;
    let peak = trace.retained_per_step.iter().copied().max().unwrap_or(0);
    eprintln!(
        "generated {} tokens under {} (prefill {:.3}s, decode {:.3}s, peak KV {} of {} raw tokens)",
        trace.generated,
        a.policy,
        trace.prefill_seconds,
        trace.decode_seconds,
        peak,
        trace.output.len()
    );
    println!("{continuation}");
    Ok(())
}

fn run_needle(a: NeedleArgs) -> Result<()> {
    let w = ModelWeights::load(&a.checkpoint)?;
    let grid = eval_needle_grid(&w, a.policy, &a.lengths, &a.depths, a.trials, a.seed)?;
    eprintln!(
        "{} cells, {} trials each, min accuracy {:.3}",
        a.lengths.len() * a.depths.len(),
        grid.trials,
        grid.min_accuracy()
    );
    emit(&a.out, &grid.to_csv())
}

fn run_sparsity(a: SparsityArgs) -> Result<()> {
    let w = ModelWeights::load(&a.checkpoint)?;
    let (tokens, trace) = capture(&w, &a.input)?;
    let report = sparsity_report(&trace, &tokens, LINEBREAK_TOKEN, a.exclude_sinks)?;
    let rendered = match a.format {
        FormatArg::Csv => report.to_csv(),
        FormatArg::Json => report.to_json()?,
    };
    emit(&a.out, &rendered)
}

fn run_wov(a: WovArgs) -> Result<()> {
    let w = ModelWeights::load(&a.checkpoint)?;
    let report = wov_eigen_report(&w)?;
    let rendered = match (a.format, a.eigenvalues) {
        (FormatArg::Csv, false) => report.to_csv(),
        (FormatArg::Csv, true) => report.eigenvalues_csv(),
        (FormatArg::Json, _) => report.to_json()?,
    };
    emit(&a.out, &rendered)
}

fn run_heatmap(a: HeatmapArgs) -> Result<()> {
    let w = ModelWeights::load(&a.checkpoint)?;
    let (tokens, trace) = capture(&w, &a.input)?;
    let head = match a.head.as_str() {
        "mean" => HeadSelection::Mean,
        other => HeadSelection::Head(other.parse().map_err(|_| {
            Error::Input(format!("--head takes a head index or \"mean\", got {other:?}"))
        })?),
    };
    let records = fold_attention(&trace);
    let labels: Vec<String> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| token_label(i, t))
        .collect();
    emit(&a.out, &export_heatmap(&records, a.layer, head, &labels)?)
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let w = ModelWeights::load(&a.checkpoint)?;
    let report = bench_runtime(&w, a.policy, a.prompt_len, a.gen_len, a.repeats, a.seed)?;
    let rendered = match a.format {
        FormatArg::Csv => format!("{}\n{}\n", RuntimeReport::csv_header(), report.to_csv_row()),
        FormatArg::Json => report.to_json()?,
    };
    emit(&a.out, &rendered)
}

/// Runs the checkpoint over a text file with attention capture, planting
/// anchors first when the architecture uses them.
fn capture(w: &ModelWeights, input: &Path) -> Result<(Vec<u32>, AttentionTrace)> {
    let text = fs::read_to_string(input)?;
    let raw = encode_text(&text)?;
    let tokens = if w.config.taa_layers.is_empty() {
        raw
    } else {
        plant_anchors(&raw, LINEBREAK_TOKEN, w.config.anchor_token_id)?.tokens
    };
    let trace = forward(
        w,
        &tokens,
        &ForwardOptions { capture_attention: true, ..ForwardOptions::default() },
    )?;
    let attention = trace.attention.expect("capture was requested");
    Ok((tokens, attention))
}

fn token_label(i: usize, t: u32) -> String {
    let name = match t {
        0 => "anc".to_string(),
        9 => "tab".to_string(),
        10 => "nl".to_string(),
        13 => "cr".to_string(),
        32 => "sp".to_string(),
        44 => "comma".to_string(),
        33..=126 => (t as u8 as char).to_string(),
        _ => format!("x{t}"),
    };
    format!("{i}_{name}")
}

fn emit(out: &Option<PathBuf>, content: &str) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, content)?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{content}"),
    }
    Ok(())
}
