//! Command-line front end: `facescale <subcommand> [flags]`.
//!
//! Exit status is 0 on success, 2 on a usage or configuration-schema error and
//! 1 on a runtime failure. `FACESCALE_THREADS` caps the worker pool and
//! `FACESCALE_SEED` supplies the seed when `--seed` is absent.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use facescale::clean::{evaluate_cleaning, iterate_clean, CleaningReport};
use facescale::cost::{CostReport, FcMemSpec, ReportFormat};
use facescale::emb::{read_emb, write_emb};
use facescale::nas::{search, synthetic_accuracy, Controller, CostBackend, LatencyTable, RewardConfig, SearchConfig, SearchSpace};
use facescale::synth::{NoiseTruth, SynthTask, SynthTaskSpec};
use facescale::train::{
    finetune, load_checkpoint, save_checkpoint, synth_pairs, train, verify_pairs, PairSet, TrainData, TrainReport,
};
use facescale::EmbeddingDataset;
use serde::Serialize;

pub use config::{RunConfig, SchemaError};

pub const THREADS_ENV: &str = "FACESCALE_THREADS";
pub const SEED_ENV: &str = "FACESCALE_SEED";

#[derive(Debug, Parser)]
#[command(name = "facescale", version, about = "Margin-softmax training, cleaning and architecture search at desk scale")]
struct Cli {
    /// Seed for every random choice [default: $FACESCALE_SEED, else the config, else 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Memory and communication cost of a sharded classification layer
    Cost(CostArgs),
    /// Generate a synthetic identity dataset
    Synth(SynthArgs),
    /// Remove outliers and merge duplicate identities
    Clean(CleanArgs),
    /// Train an embedder and classifier
    Train(TrainArgs),
    /// Continue training a checkpoint with a different mask ratio
    Finetune(FinetuneArgs),
    /// Search an architecture space for the best accuracy/cost trade-off
    Search(SearchArgs),
    /// Pair-verification metrics of a checkpoint
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Text,
    #[value(alias = "machine")]
    Json,
}

#[derive(Debug, Args)]
struct CostArgs {
    /// Number of classes
    #[arg(long)]
    ids: Option<u64>,
    /// Embedding dimension
    #[arg(long)]
    dim: Option<u64>,
    #[arg(long)]
    gpus: Option<u64>,
    /// Samples per GPU
    #[arg(long)]
    batch: Option<u64>,
    /// Also report the FP16-backbone variant
    #[arg(long)]
    mixed: bool,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// 100 ids x 50, d = 64, sigma 0.1, 5% outliers, 5 split ids
    Cleaning,
    /// 100 ids x 50, d = 128, sigma 0.15, half the input masked
    Training,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Destination EMB file
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ids: Option<usize>,
    #[arg(long)]
    per_id: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    occlusion: Option<f64>,
    #[arg(long)]
    outliers: Option<f64>,
    #[arg(long)]
    split_ids: Option<usize>,
    /// Write the planted-noise ground truth as JSON
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Write held-out verification pairs as JSON
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Pairs of each kind (clean, masked)
    #[arg(long, default_value_t = 1000)]
    pair_count: usize,
    /// Held-out samples per identity behind the pairs
    #[arg(long, default_value_t = 10)]
    pair_samples: usize,
}

#[derive(Debug, Args)]
struct CleanArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    thre_intra: Option<f64>,
    #[arg(long)]
    thre_inter: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    min_class_size: Option<usize>,
    /// Cleaned EMB file
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON report [default: stdout]
    #[arg(long)]
    report: Option<PathBuf>,
    /// Ground truth from `synth --truth`; adds precision/recall to the report
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training EMB file
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch JSON lines [default: stdout]
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Verification pairs scored before and after
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// JSON report [default: stdout]
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// Search space JSON, or `toy` for the built-in 756-architecture space [default: toy]
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    budget: usize,
    #[arg(long, default_value = "evolutionary")]
    controller: String,
    #[arg(long)]
    alpha: Option<f64>,
    /// Target cost (FLOPs, or milliseconds with --table)
    #[arg(long)]
    target: Option<f64>,
    /// Latency table JSON; switches the cost to table latency
    #[arg(long)]
    table: Option<PathBuf>,
    /// Every evaluation as JSON lines
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
}

/// Runs the command line `argv` (program name first) against the process's
/// standard streams.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_cli_with(argv, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

pub fn run_cli_with<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{}", e.render());
            return 0;
        }
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return 2;
        }
    };
    match run(cli, out, err) {
        Ok(()) => 0,
        Err(e) => match e.downcast_ref::<SchemaError>() {
            Some(schema) => {
                let _ = writeln!(err, "error: invalid configuration {schema}");
                let _ = writeln!(err, "\nexpected schema (defaults shown):\n\n{}", RunConfig::schema_help());
                2
            }
            None if e.downcast_ref::<UsageError>().is_some() => {
                let _ = writeln!(err, "error: {e}");
                2
            }
            None => {
                let _ = writeln!(err, "error: {e:#}");
                1
            }
        },
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
        // the global pool can only be configured once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn resolve_seed(flag: Option<u64>, configured: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(configured),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Writes `text` to `path`, or to `out` when no path was given.
fn emit(path: Option<&Path>, text: &str, out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => Ok(out.write_all(text.as_bytes())?),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    init_threads()?;
    let seed = cli.seed;
    match cli.command {
        Command::Cost(a) => cost(a, out),
        Command::Synth(a) => synth(a, seed, out),
        Command::Clean(a) => clean(a, out, err),
        Command::Train(a) => train_cmd(a, seed, out),
        Command::Finetune(a) => finetune_cmd(a, seed, out),
        Command::Search(a) => search_cmd(a, seed, out),
        Command::Eval(a) => eval(a, out),
    }
}

fn cost(a: CostArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let base = cfg.cost;
    let ids = a.ids.or(base.map(|c| c.classes)).ok_or_else(|| usage("--ids is required"))?;
    let dim = a.dim.or(base.map(|c| c.dim)).ok_or_else(|| usage("--dim is required"))?;
    let mut spec = base.unwrap_or_else(|| FcMemSpec::new(dim, ids, 1, 64));
    spec.classes = ids;
    spec.dim = dim;
    spec.gpus = a.gpus.unwrap_or(spec.gpus);
    spec.batch_per_gpu = a.batch.unwrap_or(spec.batch_per_gpu);
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let format = match a.format {
        Format::Text => ReportFormat::Text,
        Format::Json => ReportFormat::Machine,
    };
    let mut text = CostReport::build(&spec, a.mixed)?.render(format);
    if !text.ends_with('\n') {
        text.push('\n');
    }
    Ok(out.write_all(text.as_bytes())?)
}

fn synth(a: SynthArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut spec = match a.preset {
        Some(Preset::Cleaning) => SynthTaskSpec::cleaning_benchmark(0),
        Some(Preset::Training) => SynthTaskSpec::training_standard(0),
        None => cfg.synth.clone(),
    };
    spec.seed = resolve_seed(seed, cfg.synth.seed)?;
    spec.n_ids = a.ids.unwrap_or(spec.n_ids);
    spec.samples_per_id = a.per_id.unwrap_or(spec.samples_per_id);
    spec.input_dim = a.dim.unwrap_or(spec.input_dim);
    spec.noise_sigma = a.sigma.unwrap_or(spec.noise_sigma);
    spec.occlusion_fraction = a.occlusion.unwrap_or(spec.occlusion_fraction);
    spec.outlier_fraction = a.outliers.unwrap_or(spec.outlier_fraction);
    spec.split_id_count = a.split_ids.unwrap_or(spec.split_id_count);
    spec.validate().map_err(|e| usage(e.to_string()))?;

    let task = SynthTask::<f32>::generate(&spec)?;
    write_emb(&task.dataset, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.truth {
        fs::write(p, to_json(&task.truth)?)?;
    }
    if let Some(p) = &a.pairs {
        let pairs = synth_pairs(&task, a.pair_samples, a.pair_count, spec.seed)?;
        fs::write(p, serde_json::to_string(&pairs)?)?;
    }
    writeln!(
        out,
        "wrote {} samples of {} identities (d = {}) to {}",
        task.dataset.n(),
        task.dataset.n_ids,
        task.dataset.dim(),
        a.out.display()
    )?;
    Ok(())
}

#[derive(Serialize)]
struct CleanOutput<'a> {
    config: &'a facescale::clean::CleaningConfig,
    warnings: Vec<String>,
    samples_kept: usize,
    identities_kept: usize,
    report: &'a CleaningReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<facescale::clean::CleaningMetrics>,
}

fn clean(a: CleanArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?.cleaning;
    cfg.thre_intra = a.thre_intra.unwrap_or(cfg.thre_intra);
    cfg.thre_inter = a.thre_inter.unwrap_or(cfg.thre_inter);
    cfg.max_iters = a.max_iters.unwrap_or(cfg.max_iters);
    cfg.min_class_size = a.min_class_size.unwrap_or(cfg.min_class_size);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let warnings = cfg.warnings();
    for w in &warnings {
        writeln!(err, "warning: {w}")?;
    }

    let ds: EmbeddingDataset<f32> = read_emb(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let (cleaned, report) = iterate_clean(&ds, &cfg, Ok)?;
    let metrics = match &a.truth {
        Some(p) => Some(evaluate_cleaning(&report, &read_json::<NoiseTruth>(p)?)?),
        None => None,
    };
    if let Some(p) = &a.out {
        write_emb(&cleaned, p).with_context(|| format!("writing {}", p.display()))?;
    }
    let doc = CleanOutput {
        config: &cfg,
        warnings,
        samples_kept: cleaned.n(),
        identities_kept: cleaned.n_ids,
        report: &report,
        metrics,
    };
    emit(a.report.as_deref(), &to_json(&doc)?, out)
}

fn train_data(path: &Path, occlusion: f64) -> Result<TrainData<f32>> {
    let ds: EmbeddingDataset<f32> = read_emb(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(TrainData::new(ds.features, ds.labels, ds.n_ids, occlusion)?)
}

fn train_cmd(a: TrainArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?.train;
    cfg.seed = resolve_seed(seed, cfg.seed)?;
    let data = train_data(&a.data, cfg.occlusion_fraction)?;
    let (state, report) = train(&data, &cfg)?;
    save_checkpoint(&state, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    emit(a.metrics.as_deref(), &report.metrics_jsonl()?, out)
}

#[derive(Serialize)]
struct FinetuneOutput<'a> {
    config: &'a facescale::train::FinetuneConfig,
    train_accuracy_before: f64,
    train_accuracy_after: f64,
    verify_before: Option<facescale::train::VerifyMetrics>,
    verify_after: Option<facescale::train::VerifyMetrics>,
    epochs: &'a TrainReport,
}

fn finetune_cmd(a: FinetuneArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let mut ft = load_config(a.config.as_deref())?.finetune;
    ft.mask_ratio = a.mask_ratio.unwrap_or(ft.mask_ratio);
    ft.epochs = a.epochs.unwrap_or(ft.epochs);
    ft.lr = a.lr.unwrap_or(ft.lr);
    let mut state = load_checkpoint::<f32>(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    if seed.is_some() || std::env::var_os(SEED_ENV).is_some() {
        state.config.seed = resolve_seed(seed, state.config.seed)?;
        state = facescale::train::TrainState::from_parts(
            state.config.clone(),
            state.embedder.clone(),
            &state.classifier.to_full(),
            state.epochs_done,
        )?;
    }
    let data = train_data(&a.data, state.config.occlusion_fraction)?;
    let pairs: Option<PairSet<f32>> = a.pairs.as_deref().map(read_json).transpose()?;
    let (next, report) = finetune(&state, &data, &ft, pairs.as_ref())?;
    save_checkpoint(&next, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let doc = FinetuneOutput {
        config: &ft,
        train_accuracy_before: report.train_accuracy_before,
        train_accuracy_after: report.train_accuracy_after,
        verify_before: report.verify_before,
        verify_after: report.verify_after,
        epochs: &report.training,
    };
    emit(a.report.as_deref(), &to_json(&doc)?, out)
}

fn search_cmd(a: SearchArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let space: SearchSpace = match &a.space {
        Some(p) if p.as_os_str() != "toy" => read_json(p)?,
        _ => SearchSpace::toy(),
    };
    let controller: Controller = a.controller.parse().map_err(|e: facescale::Error| usage(e.to_string()))?;
    let table: Option<LatencyTable> = a.table.as_deref().map(read_json).transpose()?;
    let mut reward = match (a.target, cfg.reward) {
        (Some(t), Some(r)) => RewardConfig { target: t, ..r },
        (Some(t), None) => RewardConfig::new(t),
        (None, Some(r)) => r,
        (None, None) => bail!(usage("--target is required (or a [reward] section in --config)")),
    };
    reward.alpha = a.alpha.unwrap_or(reward.alpha);
    if table.is_some() {
        reward.cost_backend = CostBackend::LatencyTable;
    }
    reward.validate().map_err(|e| usage(e.to_string()))?;
    let search_cfg = SearchConfig::new(reward, controller, a.budget, resolve_seed(seed, 0)?);
    let result = search(&space, &synthetic_accuracy, &search_cfg, table.as_ref())?;
    if let Some(p) = &a.history {
        fs::write(p, result.history_jsonl()?)?;
    }
    out.write_all(to_json(&result.best)?.as_bytes())?;
    Ok(())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let state = load_checkpoint::<f32>(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let pairs: PairSet<f32> = read_json(&a.pairs)?;
    let metrics = verify_pairs(&state.embedder, &pairs)?;
    out.write_all(to_json(&metrics)?.as_bytes())?;
    Ok(())
}
