mod config;
mod output;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use embrag::embeddings::{self, train_with_progress, ComplexEmbeddings, Optimizer, TrainConfig};
use embrag::eval::synthetic::{self, FamilyBenchmark, FamilyConfig};
use embrag::eval::{evaluate, load_qa, run_ablation, split_topic, DatasetSplit, Pipeline, PipelineSettings, Variant};
use embrag::graph::{load_triples, EntityId, KnowledgeGraph};
use embrag::llm::{self, CompletionBackend, Exemplar, HttpBackend, HttpConfig, MockBackend, NullBackend};
use embrag::mining::{mine_rules, MinedRules, MiningConfig, ProbabilityMode, QaExample, DEFAULT_WALK_CAP};
use embrag::retrieval::{AnswerRecord, BeamConfig};
use embrag::rule::LogicRule;
use serde::Serialize;

use config::{BackendKind, PipelineConfig};
use output::{open, write_atomic, write_json};

#[derive(Parser)]
#[command(name = "embrag", version, about = "Rule-guided multi-hop question answering over incomplete knowledge graphs")]
struct Cli {
    /// Seed for initialization, sampling, negatives and ablation draws.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives fully deterministic runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML configuration; explicit flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a triple file, optionally add inverse relations, print counts.
    BuildKg(BuildKgArgs),
    /// Mine weighted logic rules from training questions.
    MineRules(MineArgs),
    /// Train ComplEx embeddings and write a checkpoint.
    Train(TrainArgs),
    /// Answer a single question.
    Answer(AnswerArgs),
    /// Evaluate a QA split, optionally under every ablation.
    Evaluate(EvaluateArgs),
    /// Write rule-generation instruction records (JSON lines).
    ExportInstructions(ExportArgs),
    /// Write the synthetic family benchmark.
    GenerateBenchmark(BenchmarkArgs),
}

#[derive(Args)]
struct BuildKgArgs {
    /// Tab-separated `head relation tail` file.
    #[arg(long)]
    triples: Option<PathBuf>,
    /// Add `r^{-1}` for every relation.
    #[arg(long)]
    inverses: bool,
    /// Where to write the serialized graph.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Normalized,
    Literal,
}

#[derive(Args)]
struct MineArgs {
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Training questions in MetaQA format.
    #[arg(long)]
    qa: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    max_len: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    walk_cap: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adagrad,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    l2_weight: Option<f64>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Few-shot selection exemplars (JSON lines).
    #[arg(long)]
    exemplars: Option<PathBuf>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    fanout: Option<usize>,
    #[arg(long)]
    min_step_prob: Option<f64>,
    #[arg(long)]
    rules_per_question: Option<usize>,
    #[arg(long)]
    max_rule_len: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Response fixture for the mock backend.
    #[arg(long)]
    mock_fixture: Option<PathBuf>,
    /// Completion endpoint for the HTTP backend.
    #[arg(long)]
    endpoint: Option<String>,
}

#[derive(Args)]
struct AnswerArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Question text; a `[topic]` span is used when --topic is absent.
    #[arg(long)]
    question: String,
    #[arg(long)]
    topic: Option<String>,
    #[arg(long, default_value = "full")]
    variant: Variant,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    qa: Option<PathBuf>,
    /// Split name in the report; defaults to the QA file stem.
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value = "full", conflicts_with = "ablation")]
    variant: Variant,
    /// Run every variant.
    #[arg(long)]
    ablation: bool,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    qa: Option<PathBuf>,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    families: Option<usize>,
    #[arg(long)]
    train_questions: Option<usize>,
    #[arg(long)]
    test_questions: Option<usize>,
    /// Share of gold-path edges to delete.
    #[arg(long)]
    delete_fraction: Option<f64>,
}

struct Ctx {
    config: PipelineConfig,
    seed: u64,
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let path = flag
        .or_else(|| fallback.clone())
        .with_context(|| format!("no {what} given (flag or config [paths])"))?;
    if !path.exists() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(path)
}

fn output_path(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .with_context(|| format!("no {what} output path given"))
}

fn read_graph(path: &Path) -> Result<KnowledgeGraph> {
    KnowledgeGraph::read_from(open(path)?).with_context(|| format!("loading graph {}", path.display()))
}

fn read_examples(path: &Path, graph: &KnowledgeGraph) -> Result<Vec<QaExample>> {
    let loaded = load_qa(open(path)?, graph).with_context(|| format!("loading questions {}", path.display()))?;
    for f in &loaded.flagged {
        log::warn!(
            "{}:{}: unknown {:?}{}",
            path.display(),
            f.line,
            f.unresolved,
            if f.dropped { "; question skipped" } else { "" }
        );
    }
    Ok(loaded.examples)
}

fn read_rules(path: &Path, graph: &KnowledgeGraph) -> Result<MinedRules> {
    MinedRules::read_from(graph, open(path)?).with_context(|| format!("loading rules {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(n) = cli.threads.or(config.threads) {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ctx = Ctx {
        seed: cli.seed.or(config.seed).unwrap_or(0),
        config,
    };
    match cli.command {
        Command::BuildKg(a) => build_kg(&ctx, a),
        Command::MineRules(a) => mine(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Answer(a) => answer(&ctx, a),
        Command::Evaluate(a) => evaluate_cmd(&ctx, a),
        Command::ExportInstructions(a) => export(&ctx, a),
        Command::GenerateBenchmark(a) => benchmark(&ctx, a),
    }
}

fn build_kg(ctx: &Ctx, a: BuildKgArgs) -> Result<()> {
    let path = required(a.triples, &ctx.config.paths.triples, "triple file")?;
    let mut graph = load_triples(open(&path)?).with_context(|| format!("loading {}", path.display()))?;
    if a.inverses {
        graph = graph.with_inverses()?;
    }
    if let Some(out) = a.out.or_else(|| ctx.config.paths.graph.clone()) {
        write_atomic(&out, |w| Ok(graph.write_to(w)?))?;
        log::info!("wrote {}", out.display());
    }
    write_json(&mut std::io::stdout().lock(), &graph.stats())
}

fn mine(ctx: &Ctx, a: MineArgs) -> Result<()> {
    let graph = read_graph(&required(a.graph, &ctx.config.paths.graph, "graph")?)?;
    let examples = read_examples(&required(a.qa, &ctx.config.paths.qa, "question file")?, &graph)?;
    let mining = &ctx.config.mining;
    let mode = match a.mode {
        Some(ModeArg::Normalized) => ProbabilityMode::Normalized,
        Some(ModeArg::Literal) => ProbabilityMode::Literal,
        None => mining.mode.unwrap_or_default(),
    };
    let cfg = MiningConfig {
        max_len: a.max_len.map(|l| l as usize).or(mining.max_len).unwrap_or(3),
        mode,
        walk_cap: a.walk_cap.or(mining.walk_cap).unwrap_or(DEFAULT_WALK_CAP),
        sampling: None,
    };
    if cfg.max_len == 0 {
        bail!("max rule length must be at least 1");
    }
    let rules = mine_rules(&graph, &examples, &cfg)?;
    log::info!(
        "mined {} rules over {} question templates",
        rules.rule_count(),
        rules.clusters.len()
    );
    let out = output_path(a.out, &ctx.config.paths.rules, "rules")?;
    write_atomic(&out, |w| Ok(rules.write_to(&graph, w)?))
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let graph = read_graph(&required(a.graph, &ctx.config.paths.graph, "graph")?)?;
    let base = ctx.config.train.unwrap_or_default();
    let cfg = TrainConfig {
        rank: a.rank.unwrap_or(base.rank),
        learning_rate: a.learning_rate.unwrap_or(base.learning_rate),
        epochs: a.epochs.unwrap_or(base.epochs),
        negatives_per_positive: a.negatives.unwrap_or(base.negatives_per_positive),
        batch_size: a.batch_size.unwrap_or(base.batch_size),
        l2_weight: a.l2_weight.unwrap_or(base.l2_weight),
        seed: ctx.seed,
        validation_fraction: a.validation_fraction.unwrap_or(base.validation_fraction),
        early_stop_patience: a.patience.unwrap_or(base.early_stop_patience),
        optimizer: match a.optimizer {
            Some(OptimizerArg::Sgd) => Optimizer::Sgd,
            Some(OptimizerArg::Adagrad) => Optimizer::Adagrad,
            None => base.optimizer,
        },
    };
    let outcome = train_with_progress(&graph, &cfg, |r| match r.val_mrr {
        Some(mrr) => log::info!("epoch {}: loss {:.5}, validation MRR {:.4}", r.epoch, r.train_loss, mrr),
        None => log::info!("epoch {}: loss {:.5}", r.epoch, r.train_loss),
    })?;
    let out = output_path(a.out, &ctx.config.paths.checkpoint, "checkpoint")?;
    write_atomic(&out, |w| Ok(embeddings::save(&outcome.embeddings, w)?))?;

    #[derive(Serialize)]
    struct Summary {
        config: TrainConfig,
        best_epoch: usize,
        epochs_run: usize,
        final_loss: Option<f64>,
    }
    write_json(
        &mut std::io::stdout().lock(),
        &Summary {
            config: cfg,
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.history.len(),
            final_loss: outcome.history.last().map(|r| r.train_loss),
        },
    )
}

/// Artifacts shared by `answer` and `evaluate`.
struct Loaded {
    graph: KnowledgeGraph,
    embeddings: ComplexEmbeddings<f32>,
    rules: MinedRules,
    shots: Vec<Exemplar>,
    backend: Box<dyn CompletionBackend>,
    settings: PipelineSettings,
}

fn load_pipeline(ctx: &Ctx, a: PipelineArgs) -> Result<Loaded> {
    let cfg = &ctx.config;
    let graph = read_graph(&required(a.graph, &cfg.paths.graph, "graph")?)?;
    let ckpt = required(a.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let embeddings = embeddings::load_for_graph(open(&ckpt)?, &graph)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let rules = read_rules(&required(a.rules, &cfg.paths.rules, "rules")?, &graph)?;
    let shots = match a.exemplars.or_else(|| cfg.paths.exemplars.clone()) {
        Some(p) => llm::load_exemplars(open(&p)?).with_context(|| format!("loading exemplars {}", p.display()))?,
        None => Vec::new(),
    };

    let backend: Box<dyn CompletionBackend> = match a.backend.or(cfg.backend.kind).unwrap_or_default() {
        BackendKind::Null => Box::new(NullBackend),
        BackendKind::Mock => {
            let path = required(a.mock_fixture, &cfg.backend.mock_fixture, "mock fixture")?;
            Box::new(MockBackend::load(open(&path)?)?)
        }
        BackendKind::Http => {
            let mut http = cfg.backend.http.clone().unwrap_or_else(HttpConfig::default);
            if let Some(e) = a.endpoint {
                http.endpoint = e;
            }
            Box::new(HttpBackend::new(http)?)
        }
    };

    let base_beam = cfg.beam.unwrap_or_default();
    let defaults = PipelineSettings::default();
    let settings = PipelineSettings {
        beam: BeamConfig {
            beam_width: a.beam_width.unwrap_or(base_beam.beam_width),
            embedding_fanout: a.fanout.unwrap_or(base_beam.embedding_fanout),
            min_step_prob: a.min_step_prob.unwrap_or(base_beam.min_step_prob),
        },
        rules_per_question: a
            .rules_per_question
            .or(cfg.pipeline.rules_per_question)
            .unwrap_or(defaults.rules_per_question),
        answer_threshold: a.threshold.or(cfg.answer_threshold).unwrap_or(defaults.answer_threshold),
        max_rule_len: a.max_rule_len.or(cfg.pipeline.max_rule_len).unwrap_or(defaults.max_rule_len),
        completion: cfg.backend.completion.unwrap_or_default(),
        seed: ctx.seed,
    };
    Ok(Loaded {
        graph,
        embeddings,
        rules,
        shots,
        backend,
        settings,
    })
}

fn answer(ctx: &Ctx, a: AnswerArgs) -> Result<()> {
    let loaded = load_pipeline(ctx, a.pipeline)?;
    let (question, topic) = match a.topic {
        Some(t) => (a.question.replace(&format!("[{t}]"), &t), t),
        None => split_topic(&a.question).map_err(|e| anyhow::anyhow!("--question: {e}; pass --topic"))?,
    };
    let g = &loaded.graph;
    let topic_id = g.entity_id(&topic).with_context(|| format!("topic `{topic}` is not in the graph"))?;
    let pipeline = Pipeline::new(
        g,
        &loaded.embeddings,
        &loaded.rules,
        loaded.backend.as_ref(),
        &loaded.shots,
        loaded.settings,
    )?;
    let outcome = pipeline.answer(&question, topic_id, &topic, a.variant, 0)?;

    #[derive(Serialize)]
    struct Answered {
        question: String,
        topic: String,
        variant: Variant,
        rules: Vec<String>,
        rule_fallback: bool,
        rerank_fallback: bool,
        predictions: Vec<String>,
        answers: Vec<AnswerRecord>,
    }
    let report = Answered {
        question,
        topic,
        variant: a.variant,
        rules: outcome.rules.iter().map(|r| r.display(g)).collect(),
        rule_fallback: outcome.rule_fallback,
        rerank_fallback: outcome.rerank_fallback,
        predictions: outcome
            .predictions
            .iter()
            .map(|p| g.entity_name(p.entity).to_owned())
            .collect(),
        answers: outcome.ranked.iter().map(|s| AnswerRecord::new(s, g)).collect(),
    };
    write_json(&mut std::io::stdout().lock(), &report)
}

fn evaluate_cmd(ctx: &Ctx, a: EvaluateArgs) -> Result<()> {
    let loaded = load_pipeline(ctx, a.pipeline)?;
    let qa = required(a.qa, &ctx.config.paths.qa, "question file")?;
    let examples = read_examples(&qa, &loaded.graph)?;
    let name = a
        .split
        .unwrap_or_else(|| qa.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let split = DatasetSplit { name, examples };
    let pipeline = Pipeline::new(
        &loaded.graph,
        &loaded.embeddings,
        &loaded.rules,
        loaded.backend.as_ref(),
        &loaded.shots,
        loaded.settings,
    )?;
    let reports = if a.ablation {
        run_ablation(&pipeline, &split, &Variant::ALL)?
    } else {
        vec![evaluate(&pipeline, &split, a.variant)?]
    };
    for r in &reports {
        log::info!(
            "{} on {} ({} questions): Hits@1 {:.4}, P {:.4}, R {:.4}, F1 {:.4}, accuracy {:.4}",
            r.variant,
            r.split,
            r.metrics.questions,
            r.metrics.hits_at_1,
            r.metrics.precision,
            r.metrics.recall,
            r.metrics.f1,
            r.metrics.accuracy
        );
    }
    let write = |w: &mut dyn std::io::Write| {
        if a.ablation {
            write_json(w, &reports)
        } else {
            write_json(w, &reports[0])
        }
    };
    match a.out {
        Some(out) => write_atomic(&out, write),
        None => write(&mut std::io::stdout().lock()),
    }
}

/// Follows `rule` over graph edges only.
fn traverse(graph: &KnowledgeGraph, topic: EntityId, rule: &LogicRule) -> Vec<EntityId> {
    let mut frontier = vec![topic];
    for &r in &rule.relations {
        let mut next: Vec<EntityId> = frontier
            .iter()
            .flat_map(|&e| graph.neighbors(e, r).unwrap_or(&[]).iter().copied())
            .collect();
        next.sort_unstable();
        next.dedup();
        frontier = next;
    }
    frontier
}

fn export(ctx: &Ctx, a: ExportArgs) -> Result<()> {
    let graph = read_graph(&required(a.graph, &ctx.config.paths.graph, "graph")?)?;
    let examples = read_examples(&required(a.qa, &ctx.config.paths.qa, "question file")?, &graph)?;
    let rules = read_rules(&required(a.rules, &ctx.config.paths.rules, "rules")?, &graph)?;

    // A question's targets are its cluster's mined rules that reach at
    // least one of its answers on the graph.
    let mut gold: BTreeMap<String, Vec<LogicRule>> = BTreeMap::new();
    let mut kept = Vec::new();
    for ex in &examples {
        let reaching: Vec<LogicRule> = rules
            .rules_for(&ex.template()?)
            .iter()
            .filter(|r| traverse(&graph, ex.topic, r).iter().any(|e| ex.answers.contains(e)))
            .cloned()
            .collect();
        if reaching.is_empty() {
            log::warn!("no mined rule reaches an answer of `{}`; skipped", ex.question);
            continue;
        }
        gold.insert(ex.question.clone(), reaching);
        kept.push(ex.clone());
    }
    let records = llm::export_instruction_data(&kept, &gold, &graph)?;
    log::info!("{} records from {} questions", records.len(), kept.len());
    let out = output_path(a.out, &None, "instruction")?;
    write_atomic(&out, |w| {
        for r in &records {
            serde_json::to_writer(&mut *w, r)?;
            writeln!(w)?;
        }
        Ok(())
    })
}

fn benchmark(ctx: &Ctx, a: BenchmarkArgs) -> Result<()> {
    let defaults = FamilyConfig::default();
    let cfg = FamilyConfig {
        families: a.families.unwrap_or(defaults.families),
        train_questions: a.train_questions.unwrap_or(defaults.train_questions),
        test_questions: a.test_questions.unwrap_or(defaults.test_questions),
        delete_fraction: a.delete_fraction.unwrap_or(defaults.delete_fraction),
        seed: ctx.seed,
    };
    let bench = synthetic::generate(&cfg)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let dir = &a.out_dir;
    write_atomic(&dir.join("triples.tsv"), |w| Ok(bench.write_triples(w)?))?;
    write_atomic(&dir.join("deleted.tsv"), |w| {
        for (h, r, t) in &bench.deleted {
            writeln!(w, "{h}\t{r}\t{t}")?;
        }
        Ok(())
    })?;
    write_atomic(&dir.join("train.txt"), |w| Ok(FamilyBenchmark::write_qa(&bench.train, w)?))?;
    write_atomic(&dir.join("test.txt"), |w| Ok(FamilyBenchmark::write_qa(&bench.test, w)?))?;
    write_atomic(&dir.join("questions.json"), |w| {
        write_json(w, &serde_json::json!({ "train": bench.train, "test": bench.test }))
    })?;

    #[derive(Serialize)]
    struct Summary {
        entities: usize,
        triples: usize,
        deleted: usize,
        train_questions: usize,
        test_questions: usize,
        broken_test_questions: usize,
    }
    write_json(
        &mut std::io::stdout().lock(),
        &Summary {
            entities: bench.graph().entity_count(),
            triples: bench.triples.len(),
            deleted: bench.deleted.len(),
            train_questions: bench.train.len(),
            test_questions: bench.test.len(),
            broken_test_questions: bench.test.iter().filter(|q| q.broken).count(),
        },
    )
}
