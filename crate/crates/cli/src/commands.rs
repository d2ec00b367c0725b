//! Subcommand implementations and the exit-code contract.
//!
//! Every command takes its randomness from one mandatory `--seed`; any
//! two invocations with equal seeds and inputs write byte-identical
//! outputs. Human-facing progress goes to stdout/stderr, artifacts go
//! to the paths given by flags.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use attune::{
    build_adapter, build_citation_triplets, build_pair_triplets, compare, evaluate,
    generate_synthetic_corpus, inject, load_documents, load_pairs, load_triplets,
    save_documents, save_triplets, split, train, triplets_to_tasks, AdapterConfig,
    AdapterKind, AdapterParameters, BaseParameters, Checkpoint, Comparison, CorpusProfile,
    Encoder, EncoderConfig, EvalError, EvalReport, LossKind, TextEmbedder, TrainError,
    TrainMode, TrainReport, TripletDataset, DEFAULT_DISTRACTORS,
};
use attune::adapters::{bottleneck_parameter_count, count_parameters, k_adapter_parameter_count};

use crate::config::{self, ResolvedRun, RunConfig, TrainOverrides};

// ── Errors and exit codes ───────────────────────────────────────────────

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config, or inputs: nothing was attempted. Exit 2.
    Validation(String),
    /// The run itself failed: training abort, write failure. Exit 3.
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn validation<E: fmt::Display>(e: E) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime<E: fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Train errors are validation until the first step runs.
fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Step { .. } | TrainError::Io(_) | TrainError::Checkpoint(_) => {
            CliError::Runtime(e.to_string())
        }
        other => CliError::Validation(other.to_string()),
    }
}

/// Evaluation errors are validation unless the model itself misbehaved.
fn eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::ZeroNorm { .. } | EvalError::NoRelevant | EvalError::Encoder(_) => {
            CliError::Runtime(e.to_string())
        }
        other => CliError::Validation(other.to_string()),
    }
}

// ── Argument surface ────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "attune",
    version,
    about = "Sentence-embedding adapters: corpus, triplets, training, retrieval evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic topic-clustered citation corpus.
    GenCorpus(GenCorpusArgs),
    /// Mine triplets from documents (citations) or labeled pairs.
    BuildTriplets(BuildTripletsArgs),
    /// Split triplets into train and test at anchor granularity.
    Split(SplitArgs),
    /// Train an adapter or the full encoder on triplets.
    Train(TrainArgs),
    /// Score one model with retrieval MAP on test triplets.
    Evaluate(EvaluateArgs),
    /// Score several checkpoints side by side on the same tasks.
    Compare(CompareArgs),
    /// Report parameter counts and the trainable ratio.
    CountParams(CountParamsArgs),
    /// Embed a text file, one JSON line per input line.
    Embed(EmbedArgs),
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    match s {
        "triplet" => Ok(LossKind::Triplet),
        "contrastive" => Ok(LossKind::Contrastive),
        other => Err(format!("unknown loss {other:?}; use triplet or contrastive")),
    }
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "adapter_only" => Ok(TrainMode::AdapterOnly),
        "full_finetune" => Ok(TrainMode::FullFinetune),
        "frozen_eval" => Ok(TrainMode::FrozenEval),
        other => Err(format!(
            "unknown mode {other:?}; use adapter_only, full_finetune, or frozen_eval"
        )),
    }
}

fn parse_kind(s: &str) -> Result<AdapterKind, String> {
    match s {
        "houlsby" => Ok(AdapterKind::Houlsby),
        "pfeiffer" => Ok(AdapterKind::Pfeiffer),
        "k_adapter" => Ok(AdapterKind::KAdapter),
        other => Err(format!(
            "unknown adapter kind {other:?}; use houlsby, pfeiffer, or k_adapter"
        )),
    }
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Number of topics (at least 2).
    #[arg(long)]
    topics: usize,
    /// Documents per topic (at least 3).
    #[arg(long)]
    docs_per_topic: usize,
    #[arg(long)]
    seed: u64,
    /// Output documents JSONL.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildTripletsArgs {
    /// Documents JSONL; triplets are mined from the citation graph.
    #[arg(long, conflicts_with = "pairs")]
    docs: Option<PathBuf>,
    /// Similar-sentence pairs JSONL; negatives are sampled from the
    /// pool of all pair texts.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Output triplets JSONL.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// Input triplets JSONL.
    #[arg(long)]
    triplets: PathBuf,
    /// Train fraction, strictly between 0 and 1.
    #[arg(long, default_value_t = 0.9)]
    ratio: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    test_out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, alias = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// triplet or contrastive.
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// adapter_only, full_finetune, or frozen_eval.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,
    /// houlsby, pfeiffer, or k_adapter.
    #[arg(long, value_parser = parse_kind)]
    adapter_kind: Option<AdapterKind>,
    #[arg(long)]
    bottleneck_dim: Option<usize>,
    #[arg(long)]
    domain_label: Option<String>,
    #[arg(long)]
    train_triplets: Option<PathBuf>,
    #[arg(long)]
    test_triplets: Option<PathBuf>,
    /// Existing base checkpoint to start from; fresh seeded init otherwise.
    #[arg(long)]
    base_in: Option<PathBuf>,
    /// Also write the base checkpoint here (the frozen base under
    /// adapter_only, so later commands can reference it exactly).
    #[arg(long)]
    base_out: Option<PathBuf>,
    /// Trained parameters are saved here: the adapter under adapter_only,
    /// the base under full_finetune.
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Base encoder checkpoint.
    #[arg(long)]
    base: PathBuf,
    /// Optional adapter checkpoint to inject.
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Test triplets JSONL; each anchor becomes a retrieval query.
    #[arg(long)]
    triplets: PathBuf,
    /// Distractors sampled into each candidate pool.
    #[arg(long, default_value_t = DEFAULT_DISTRACTORS)]
    distractors: usize,
    #[arg(long)]
    seed: u64,
    /// Row label; defaults to out-of-the-box or kind:domain.
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    json_out: Option<PathBuf>,
    #[arg(long)]
    markdown_out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Base encoder checkpoint; also the frozen backbone for adapters.
    #[arg(long)]
    base: PathBuf,
    /// Adapter checkpoints, one row each (repeatable).
    #[arg(long)]
    adapter: Vec<PathBuf>,
    /// Fully fine-tuned base checkpoint, one more row.
    #[arg(long)]
    full: Option<PathBuf>,
    #[arg(long)]
    triplets: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DISTRACTORS)]
    distractors: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    json_out: Option<PathBuf>,
    #[arg(long)]
    markdown_out: Option<PathBuf>,
}

#[derive(Args)]
struct CountParamsArgs {
    /// Base checkpoint; its geometry wins over --config.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Run config supplying an encoder section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Adapter checkpoint to count.
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Count a fresh adapter of this kind instead of a checkpoint.
    #[arg(long, value_parser = parse_kind, conflicts_with = "adapter")]
    adapter_kind: Option<AdapterKind>,
    #[arg(long)]
    bottleneck_dim: Option<usize>,
}

#[derive(Args)]
struct EmbedArgs {
    /// Base encoder checkpoint.
    #[arg(long)]
    base: PathBuf,
    /// Optional adapter checkpoint to inject.
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Input text file, one sentence per line.
    #[arg(long)]
    input: PathBuf,
    /// Output JSONL: {"id": line index, "vector": [...]} per line.
    #[arg(short, long)]
    out: PathBuf,
}

// ── Dispatch ────────────────────────────────────────────────────────────

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenCorpus(args) => gen_corpus(args),
        Command::BuildTriplets(args) => build_triplets(args),
        Command::Split(args) => run_split(args),
        Command::Train(args) => run_train(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Compare(args) => run_compare(args),
        Command::CountParams(args) => count_params(args),
        Command::Embed(args) => embed(args),
    }
}

// ── Commands ────────────────────────────────────────────────────────────

fn gen_corpus(args: GenCorpusArgs) -> Result<(), CliError> {
    let profile = CorpusProfile::default();
    let docs = generate_synthetic_corpus(args.topics, args.docs_per_topic, &profile, args.seed)
        .map_err(validation)?;
    let citations: usize = docs.iter().map(|d| d.cites.len()).sum();
    save_documents(&args.out, &docs).map_err(runtime)?;
    println!("documents: {}", docs.len());
    println!("citations: {citations}");
    Ok(())
}

fn build_triplets(args: BuildTripletsArgs) -> Result<(), CliError> {
    let triplets = match (&args.docs, &args.pairs) {
        (Some(docs), None) => {
            let corpus = load_documents(docs).map_err(validation)?;
            let triplets = build_citation_triplets(&corpus, args.seed).map_err(validation)?;
            println!("triplets: {}", triplets.len());
            triplets
        }
        (None, Some(pairs)) => {
            let pairs = load_pairs(pairs).map_err(validation)?;
            // The negative pool is every text seen in the pair file.
            let mut texts: Vec<String> = pairs
                .iter()
                .flat_map(|p| [p.text_a.clone(), p.text_b.clone()])
                .collect();
            texts.sort();
            texts.dedup();
            let build = build_pair_triplets(&pairs, &texts, args.seed).map_err(validation)?;
            println!("triplets: {}", build.triplets.len());
            println!("skipped: {}", build.skipped);
            build.triplets
        }
        _ => {
            return Err(CliError::Validation(
                "pass exactly one of --docs or --pairs".into(),
            ))
        }
    };
    save_triplets(&args.out, &triplets).map_err(runtime)
}

fn run_split(args: SplitArgs) -> Result<(), CliError> {
    let triplets = load_triplets(&args.triplets).map_err(validation)?;
    let (train_side, test_side) = split(&triplets, args.ratio, args.seed).map_err(validation)?;
    save_triplets(&args.train_out, &train_side).map_err(runtime)?;
    save_triplets(&args.test_out, &test_side).map_err(runtime)?;
    println!("train: {}", train_side.len());
    println!("test: {}", test_side.len());
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let file = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let overrides = TrainOverrides {
        seed: args.seed,
        epochs: args.epochs,
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        loss: args.loss,
        margin: args.margin,
        temperature: args.temperature,
        mode: args.mode,
        adapter_kind: args.adapter_kind,
        bottleneck_dim: args.bottleneck_dim,
        domain_label: args.domain_label,
        train_triplets: args.train_triplets,
        test_triplets: args.test_triplets,
        base_in: args.base_in,
        base_out: args.base_out,
        checkpoint_out: args.checkpoint_out,
        report_out: args.report_out,
    };
    let run = config::resolve(file, overrides)?;

    let train_side = load_triplets(&run.train_triplets).map_err(validation)?;
    let test_side = load_triplets(&run.test_triplets).map_err(validation)?;
    let dataset = TripletDataset::new(
        run.train.domain_label.clone(),
        train_side,
        test_side,
        run.seed,
    )
    .map_err(validation)?;

    let mut base = match &run.base_in {
        Some(path) => load_base(path)?,
        None => BaseParameters::init(&run.encoder, run.seed).map_err(validation)?,
    };
    if run.base_in.is_some() && run.encoder_explicit && base.config() != &run.encoder {
        return Err(CliError::Validation(format!(
            "base checkpoint geometry {:?} disagrees with the configured encoder {:?}",
            base.config(),
            run.encoder
        )));
    }

    let report = match run.train.mode {
        TrainMode::AdapterOnly => {
            base.set_frozen(true);
            let adapter_config = config::build_adapter_config(
                run.adapter_kind,
                base.config(),
                &run.adapter_section,
                run.flag_bottleneck,
            )?;
            let mut adapter = build_adapter(
                run.adapter_kind,
                base.config(),
                adapter_config,
                &run.train.domain_label,
                run.seed,
            )
            .map_err(validation)?;
            train(
                &mut base,
                Some(&mut adapter),
                &dataset,
                &run.train,
                run.checkpoint_out.as_deref(),
            )
            .map_err(train_error)?
        }
        TrainMode::FullFinetune => {
            base.set_frozen(false);
            train(
                &mut base,
                None,
                &dataset,
                &run.train,
                run.checkpoint_out.as_deref(),
            )
            .map_err(train_error)?
        }
        TrainMode::FrozenEval => {
            base.set_frozen(true);
            train(
                &mut base,
                None,
                &dataset,
                &run.train,
                run.checkpoint_out.as_deref(),
            )
            .map_err(train_error)?
        }
    };

    if let Some(out) = &run.base_out {
        base.to_checkpoint().save(out).map_err(runtime)?;
    }
    emit_train_report(&run, &report)
}

/// The emitted report joins the resolved hyperparameters with what the
/// run measured, so defaulted values are visible in the artifact.
fn emit_train_report(run: &ResolvedRun, report: &TrainReport) -> Result<(), CliError> {
    let json = serde_json::json!({
        "domain_label": report.domain_label,
        "mode": report.mode,
        "loss": report.loss,
        "epochs": run.train.epochs,
        "learning_rate": run.train.learning_rate,
        "batch_size": run.train.batch_size,
        "margin": run.train.loss_config.margin,
        "temperature": run.train.loss_config.temperature,
        "seed": run.seed,
        "epoch_mean_losses": report.epoch_mean_losses,
        "trainable_parameters": report.trainable_parameters,
        "trainable_ratio": report.trainable_ratio,
        "checkpoint_path": report.checkpoint_path,
    });
    let text = format!("{}\n", serde_json::to_string_pretty(&json).map_err(runtime)?);
    match &run.report_out {
        Some(path) => std::fs::write(path, &text).map_err(runtime)?,
        None => print!("{text}"),
    }
    let last = report.epoch_mean_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "{} epochs, final mean loss {:.6}, trainable ratio {:.6}",
        report.epoch_mean_losses.len(),
        last,
        report.trainable_ratio
    );
    eprintln!("wall time: {:.2}s", report.wall_seconds);
    Ok(())
}

fn load_base(path: &Path) -> Result<BaseParameters, CliError> {
    let ckpt = Checkpoint::load(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    BaseParameters::from_checkpoint(&ckpt)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn load_adapter(path: &Path) -> Result<AdapterParameters, CliError> {
    let ckpt = Checkpoint::load(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    AdapterParameters::from_checkpoint(&ckpt)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn check_geometry(base: &BaseParameters, adapter: &AdapterParameters) -> Result<(), CliError> {
    if adapter.encoder_config() != base.config() {
        return Err(CliError::Validation(format!(
            "adapter was built for encoder geometry {:?} but the base has {:?}",
            adapter.encoder_config(),
            base.config()
        )));
    }
    Ok(())
}

fn report_markdown(report: &EvalReport) -> String {
    format!(
        "| model | map |\n|---|---|\n| {} | {:.4} |\n",
        report.model, report.map_score
    )
}

fn run_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let base = load_base(&args.base)?;
    let adapter = match &args.adapter {
        Some(path) => Some(load_adapter(path)?),
        None => None,
    };
    if let Some(a) = &adapter {
        check_geometry(&base, a)?;
    }
    let triplets = load_triplets(&args.triplets).map_err(validation)?;
    let build = triplets_to_tasks(&triplets, args.distractors, args.seed).map_err(validation)?;

    let label = args.label.clone().unwrap_or_else(|| match &adapter {
        None => "out-of-the-box".to_string(),
        Some(a) => format!("{}:{}", a.kind(), a.domain_label()),
    });
    let encoder = match &adapter {
        Some(a) => inject(&base, a).map_err(validation)?,
        None => Encoder::new(&base).map_err(validation)?,
    };
    let mut report = evaluate(&label, &encoder, &build.tasks).map_err(eval_error)?;
    report.protocol = Some(build.protocol.clone());

    let json = format!(
        "{}\n",
        serde_json::to_string_pretty(&report).map_err(runtime)?
    );
    match &args.json_out {
        Some(path) => std::fs::write(path, &json).map_err(runtime)?,
        None => print!("{json}"),
    }
    if let Some(path) = &args.markdown_out {
        std::fs::write(path, report_markdown(&report)).map_err(runtime)?;
    }
    println!(
        "MAP {:.4} over {} queries ({} triplets skipped)",
        report.map_score,
        report.per_query.len(),
        build.skipped
    );
    Ok(())
}

fn run_compare(args: CompareArgs) -> Result<(), CliError> {
    let base = load_base(&args.base)?;
    let adapters: Vec<AdapterParameters> = args
        .adapter
        .iter()
        .map(|p| load_adapter(p))
        .collect::<Result<_, _>>()?;
    for a in &adapters {
        check_geometry(&base, a)?;
    }
    let full = match &args.full {
        Some(path) => Some(load_base(path)?),
        None => None,
    };

    let triplets = load_triplets(&args.triplets).map_err(validation)?;
    let build = triplets_to_tasks(&triplets, args.distractors, args.seed).map_err(validation)?;

    let mut models: Vec<(String, Encoder)> = Vec::new();
    models.push((
        "out-of-the-box".to_string(),
        Encoder::new(&base).map_err(validation)?,
    ));
    for a in &adapters {
        models.push((
            format!("{}:{}", a.kind(), a.domain_label()),
            inject(&base, a).map_err(validation)?,
        ));
    }
    if let Some(fb) = &full {
        models.push((
            "full-finetune".to_string(),
            Encoder::new(fb).map_err(validation)?,
        ));
    }

    let refs: Vec<(&str, &dyn TextEmbedder)> = models
        .iter()
        .map(|(label, encoder)| (label.as_str(), encoder as &dyn TextEmbedder))
        .collect();
    let set_label = args
        .triplets
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "test".to_string());
    let mut comparison: Comparison =
        compare(&refs, &[(set_label.as_str(), &build.tasks)]).map_err(eval_error)?;
    for row in &mut comparison.rows {
        for report in &mut row.reports {
            report.protocol = Some(build.protocol.clone());
        }
    }

    let markdown = comparison.to_markdown();
    print!("{markdown}");
    if let Some(path) = &args.markdown_out {
        std::fs::write(path, &markdown).map_err(runtime)?;
    }
    if let Some(path) = &args.json_out {
        std::fs::write(path, format!("{}\n", comparison.to_json())).map_err(runtime)?;
    }
    Ok(())
}

fn count_params(args: CountParamsArgs) -> Result<(), CliError> {
    let base = match &args.base {
        Some(path) => Some(load_base(path)?),
        None => None,
    };
    let file = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let encoder_cfg: EncoderConfig = match &base {
        Some(b) => b.config().clone(),
        None => file.encoder.clone().unwrap_or_else(config::default_encoder),
    };
    encoder_cfg.validate().map_err(validation)?;

    let base_total = match &base {
        Some(b) => count_parameters(b.tensors()).total,
        None => encoder_cfg
            .parameter_shapes()
            .values()
            .map(|shape| shape.iter().product::<usize>())
            .sum(),
    };

    let adapter_counts = if let Some(path) = &args.adapter {
        let adapter = load_adapter(path)?;
        Some(adapter_count_pair(&adapter, adapter.encoder_config()))
    } else if let Some(kind) = args.adapter_kind {
        let section = file.adapter.clone().unwrap_or_default();
        let adapter_config =
            config::build_adapter_config(kind, &encoder_cfg, &section, args.bottleneck_dim)?;
        // Seed is irrelevant to counting; shapes are geometry-determined.
        let adapter = build_adapter(kind, &encoder_cfg, adapter_config, "count", 0)
            .map_err(validation)?;
        Some(adapter_count_pair(&adapter, &encoder_cfg))
    } else {
        None
    };

    let json = match adapter_counts {
        Some((enumerated, analytic)) => serde_json::json!({
            "base_parameters": base_total,
            "adapter_parameters": enumerated,
            "analytic_adapter_parameters": analytic,
            "trainable_ratio": enumerated as f64 / base_total as f64,
        }),
        None => serde_json::json!({ "base_parameters": base_total }),
    };
    println!("{}", serde_json::to_string_pretty(&json).map_err(runtime)?);
    Ok(())
}

fn adapter_count_pair(adapter: &AdapterParameters, encoder: &EncoderConfig) -> (usize, usize) {
    let enumerated = count_parameters(adapter.tensors()).total;
    let analytic = match adapter.config() {
        AdapterConfig::Bottleneck(c) => bottleneck_parameter_count(encoder, c),
        AdapterConfig::KAdapter(c) => k_adapter_parameter_count(encoder, c),
    };
    (enumerated, analytic)
}

fn embed(args: EmbedArgs) -> Result<(), CliError> {
    let base = load_base(&args.base)?;
    let adapter = match &args.adapter {
        Some(path) => Some(load_adapter(path)?),
        None => None,
    };
    if let Some(a) = &adapter {
        check_geometry(&base, a)?;
    }
    let text = std::fs::read_to_string(&args.input)
        .map_err(|e| CliError::Validation(format!("{}: {e}", args.input.display())))?;
    let lines: Vec<String> = text.lines().map(str::to_string).collect();
    if lines.is_empty() {
        return Err(CliError::Validation(format!(
            "input file {} is empty",
            args.input.display()
        )));
    }
    if let Some(i) = lines.iter().position(|l| l.trim().is_empty()) {
        return Err(CliError::Validation(format!(
            "input line {} is empty",
            i + 1
        )));
    }

    let encoder = match &adapter {
        Some(a) => inject(&base, a).map_err(validation)?,
        None => Encoder::new(&base).map_err(validation)?,
    };
    let embeddings = encoder.encode(&lines).map_err(runtime)?;
    let mut out = String::new();
    for e in &embeddings {
        let line = serde_json::json!({ "id": e.source_id, "vector": e.vector.data() });
        out.push_str(&serde_json::to_string(&line).map_err(runtime)?);
        out.push('\n');
    }
    std::fs::write(&args.out, out).map_err(runtime)?;
    println!("embeddings: {}", embeddings.len());
    Ok(())
}
