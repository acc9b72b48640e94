use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use distiller::distillation::{
    build_dpo, build_pairwise, build_sft, disambiguate_umc, export_training_job,
    matches_from_predictions, score_completions, CompletionRecord, RecordKind, RejectedMode,
    RewardWeights,
};
use distiller::evaluation::{
    eval_pairwise, eval_select, stats_report, write_tradeoff_csv, TradeoffPoint,
};
use distiller::ingest::Presumed;
use distiller::jsonl;
use distiller::model::Tuple;
use distiller::pipeline::{
    self, annotate_tuples, build_pool, config_base, disambiguate, load_dataset, read_knowledge,
    read_template, stage_seed, write_json, write_knowledge, write_selection, write_tuple_records,
    Disambiguation, RunOverrides, TemplateSection, ENDPOINT_ENV,
};
use distiller::prompting::PromptTemplate;
use distiller::selection::{select, SelectionConfig, Strategy};
use distiller::synth::{generate, SynthConfig};
use distiller::teaching::{
    read_predictions, work_dir_for, BatchOptions, PairwiseClassifier, ScoreThresholdClassifier,
    TeacherDescriptor,
};

#[derive(Parser)]
#[command(
    name = "distiller",
    version,
    about = "Label-free knowledge distillation for entity matching"
)]
struct Cli {
    /// Master seed; stage seeds derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for default output paths.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Pipeline config; stage subcommands read their section from it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Maximum concurrent teacher requests.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a dataset and print a summary.
    Load(DatasetArg),
    /// Build candidate tuples (lexical blocking or a precomputed tuple file).
    Block(BlockArgs),
    /// Split a tuple pool into training and testing tuples.
    SelectData(SelectArgs),
    /// Label tuples with a teacher.
    Annotate(AnnotateArgs),
    /// Build supervised fine-tuning conversations.
    BuildSft(SftArgs),
    /// Build preference pairs.
    BuildDpo(DpoArgs),
    /// Build pairwise (query, candidate) records.
    BuildPairwise(PairwiseArgs),
    /// Score completions with the GRPO rewards.
    ScoreGrpo(GrpoArgs),
    /// Resolve multiple positive candidates per tuple.
    Disambiguate(DisambiguateArgs),
    /// Compute precision, recall and F1 against ground truth.
    Evaluate(EvaluateArgs),
    /// Prompt-related statistics of a tuple file.
    Stats(StatsArgs),
    /// Run the whole pipeline from a config file.
    Run,
    /// Write a synthetic product dataset.
    Synth(SynthArgs),
    /// Score-threshold pairwise classifier following the external command contract.
    Classifier {
        #[command(subcommand)]
        action: ClassifierAction,
    },
}

#[derive(Args)]
struct DatasetArg {
    /// Dataset manifest (JSON); defaults to the config's `ingest.dataset`.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct BlockArgs {
    #[command(flatten)]
    dataset: DatasetArg,
    /// Precomputed tuple file to load instead of blocking.
    #[arg(long)]
    tuples: Option<PathBuf>,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TupleInput {
    #[command(flatten)]
    dataset: DatasetArg,
    /// Tuple file.
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Random,
    RankMax,
    RankTop2,
    ClusterKmeans,
    ClusterAgglomerative,
    Sampled,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Random => Strategy::Random,
            StrategyArg::RankMax => Strategy::RankMax,
            StrategyArg::RankTop2 => Strategy::RankTop2,
            StrategyArg::ClusterKmeans => Strategy::ClusterKmeans,
            StrategyArg::ClusterAgglomerative => Strategy::ClusterAgglomerative,
            StrategyArg::Sampled => Strategy::Sampled,
        }
    }
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    input: TupleInput,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    n: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    pool_fraction: Option<f64>,
}

#[derive(Args)]
struct TeacherArgs {
    /// Teacher descriptor (JSON); defaults to the config's `teacher`.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Args)]
struct TemplateArg {
    /// Prompt template (JSON); defaults to the config's `template`.
    #[arg(long)]
    template: Option<PathBuf>,
}

#[derive(Args)]
struct AnnotateArgs {
    #[command(flatten)]
    input: TupleInput,
    #[command(flatten)]
    teacher: TeacherArgs,
    #[command(flatten)]
    template: TemplateArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct KnowledgeInput {
    #[command(flatten)]
    input: TupleInput,
    #[arg(long)]
    knowledge: PathBuf,
    #[command(flatten)]
    template: TemplateArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SftArgs {
    #[command(flatten)]
    common: KnowledgeInput,
    #[arg(long)]
    with_explanation: bool,
    /// Also write a training-job manifest next to the records.
    #[arg(long)]
    job: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum RejectedArg {
    OneRandom,
    All,
}

#[derive(Args)]
struct DpoArgs {
    #[command(flatten)]
    common: KnowledgeInput,
    #[arg(long, value_enum)]
    rejected_mode: Option<RejectedArg>,
    #[arg(long)]
    job: bool,
}

#[derive(Args)]
struct PairwiseArgs {
    #[command(flatten)]
    input: TupleInput,
    #[arg(long)]
    knowledge: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GrpoArgs {
    /// Completions file: `{"tuple","completion","target","k"}` per line.
    #[arg(long = "in")]
    input: PathBuf,
    /// Comma-separated w1,w2,w3.
    #[arg(long)]
    weights: Option<String>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DisambiguationArg {
    Umc,
    Select,
}

#[derive(Args)]
struct DisambiguateArgs {
    #[arg(long, value_enum)]
    strategy: DisambiguationArg,
    /// Classifier predictions; with `umc`, resolve them directly into 1-1 matches.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[command(flatten)]
    dataset: DatasetArg,
    /// Tuple file (required unless `--predictions` is given).
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    knowledge: Option<PathBuf>,
    #[command(flatten)]
    teacher: TeacherArgs,
    #[command(flatten)]
    template: TemplateArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    input: TupleInput,
    /// Knowledge to score as SELECT answers.
    #[arg(long, conflicts_with = "pairwise")]
    knowledge: Option<PathBuf>,
    /// Pairwise records whose labels are predictions.
    #[arg(long)]
    pairwise: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Append an effectiveness/time point to this CSV.
    #[arg(long, requires = "seconds")]
    csv: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    label: String,
    #[arg(long)]
    seconds: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    input: TupleInput,
    #[command(flatten)]
    template: TemplateArg,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    entities: usize,
    #[arg(long, default_value_t = 0.7)]
    match_rate: f64,
    #[arg(long, default_value = "synthetic")]
    name: String,
}

#[derive(Subcommand)]
enum ClassifierAction {
    Train {
        pairs: PathBuf,
        model_dir: PathBuf,
    },
    Predict {
        pairs: PathBuf,
        model_dir: PathBuf,
        out: PathBuf,
    },
}

struct Failure {
    stage: String,
    message: String,
}

trait StageResult<T> {
    fn stage(self, stage: &str) -> Result<T, Failure>;
}

impl<T, E: std::fmt::Display> StageResult<T> for Result<T, E> {
    fn stage(self, stage: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            stage: stage.to_string(),
            message: e.to_string(),
        })
    }
}

fn fail<T>(stage: &str, message: impl Into<String>) -> Result<T, Failure> {
    Err(Failure {
        stage: stage.to_string(),
        message: message.into(),
    })
}

struct Ctx {
    seed: Option<u64>,
    out_dir: PathBuf,
    out_dir_given: Option<PathBuf>,
    config: Option<(Value, PathBuf)>,
    config_path: Option<PathBuf>,
    parallelism: Option<usize>,
}

impl Ctx {
    fn section(&self, name: &str) -> Option<&Value> {
        self.config.as_ref().and_then(|(v, _)| v.get(name))
    }

    fn parse_section<T: serde::de::DeserializeOwned>(
        &self,
        name: &str,
    ) -> Result<Option<T>, Failure> {
        self.section(name)
            .map(|v| serde_json::from_value(v.clone()))
            .transpose()
            .stage("config")
    }

    fn base(&self) -> PathBuf {
        self.config
            .as_ref()
            .map(|(_, b)| b.clone())
            .unwrap_or_else(|| PathBuf::from("."))
    }

    /// Explicit master seed: `--seed`, else the config's top-level `seed`.
    fn master(&self) -> Option<u64> {
        self.seed
            .or_else(|| self.section("seed").and_then(Value::as_u64))
    }

    fn out(&self, given: &Option<PathBuf>, name: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out_dir.join(name))
    }

    fn dataset_path(&self, arg: &DatasetArg) -> Result<PathBuf, Failure> {
        if let Some(p) = &arg.dataset {
            return Ok(p.clone());
        }
        match self
            .section("ingest")
            .and_then(|i| i.get("dataset"))
            .and_then(Value::as_str)
        {
            Some(p) => Ok(self.base().join(p)),
            None => fail(
                "ingest",
                "no dataset given (use --dataset or a config with ingest.dataset)",
            ),
        }
    }

    fn tuples(&self, input: &TupleInput) -> Result<Vec<(Tuple, Option<Presumed>)>, Failure> {
        let dataset = load_dataset(&self.dataset_path(&input.dataset)?).stage("ingest")?;
        Ok(pipeline::read_tuples(&input.input, &dataset)
            .stage("ingest")?
            .into_iter()
            .map(|l| (l.tuple, l.presumed))
            .collect())
    }

    fn plain_tuples(&self, input: &TupleInput) -> Result<Vec<Tuple>, Failure> {
        Ok(self.tuples(input)?.into_iter().map(|(t, _)| t).collect())
    }

    fn template(&self, arg: &TemplateArg) -> Result<PromptTemplate, Failure> {
        if let Some(p) = &arg.template {
            return read_template(p).map_err(|message| Failure {
                stage: "template".into(),
                message,
            });
        }
        let mut section: TemplateSection = self.parse_section("template")?.unwrap_or_default();
        section.default_kind(self.distill_option("with_explanation")?.unwrap_or(false));
        section.resolve(&self.base()).stage("template")
    }

    fn teacher(&self, arg: &TeacherArgs) -> Result<TeacherDescriptor, Failure> {
        let mut descriptor: TeacherDescriptor = match &arg.teacher {
            Some(p) => serde_json::from_str(&fs::read_to_string(p).stage("teacher")?)
                .map_err(|e| format!("{}: {e}", p.display()))
                .stage("teacher")?,
            None => match self.parse_section("teacher")? {
                Some(d) => d,
                None => {
                    return fail(
                        "teacher",
                        "no teacher given (use --teacher or a config with a teacher section)",
                    )
                }
            },
        };
        descriptor.validate().stage("teacher")?;
        if let Ok(url) = std::env::var(ENDPOINT_ENV) {
            descriptor.override_endpoint(&url);
        }
        if let Some(master) = self.master() {
            descriptor.reseed(stage_seed(master, "teacher"));
        }
        Ok(descriptor)
    }

    fn options(&self) -> BatchOptions {
        let from_config = self
            .section("parallelism")
            .and_then(Value::as_u64)
            .map(|p| p as usize);
        BatchOptions {
            parallelism: self.parallelism.or(from_config).unwrap_or(1),
            ..BatchOptions::default()
        }
    }

    fn distill_option<T: serde::de::DeserializeOwned>(
        &self,
        key: &str,
    ) -> Result<Option<T>, Failure> {
        self.section("distill")
            .and_then(|d| d.get(key))
            .map(|v| serde_json::from_value(v.clone()))
            .transpose()
            .stage("config")
    }
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<(), Failure> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => fail("output", e.to_string()),
        _ => Ok(()),
    }
}

fn print_json(value: &Value) -> Result<(), Failure> {
    emit(&(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

fn job(records: &Path, kind: RecordKind) -> Result<(), Failure> {
    let name = match kind {
        RecordKind::Sft => "job.sft.json",
        RecordKind::Dpo => "job.dpo.json",
        RecordKind::Grpo => "job.grpo.json",
    };
    let out = records.with_file_name(name);
    export_training_job(records, kind, None, &out).stage("distill")?;
    Ok(())
}

fn execute(ctx: &Ctx, command: Command) -> Result<(), Failure> {
    match command {
        Command::Load(arg) => {
            let dataset = load_dataset(&ctx.dataset_path(&arg)?).stage("ingest")?;
            print_json(&json!({
                "name": dataset.name,
                "entity_count_per_source": [dataset.queries.len(), dataset.corpus.len()],
                "attribute_count": dataset.attribute_count(),
                "match_count": dataset.matches.as_ref().map(Vec::len),
            }))?;
        }
        Command::Block(args) => {
            let dataset = load_dataset(&ctx.dataset_path(&args.dataset)?).stage("ingest")?;
            let top_n = args
                .top_n
                .or_else(|| {
                    ctx.section("ingest")
                        .and_then(|i| i.get("top_n"))
                        .and_then(Value::as_u64)
                        .map(|n| n as usize)
                })
                .unwrap_or(5);
            let pool = build_pool(&dataset, args.tuples.as_deref(), top_n).stage("ingest")?;
            let out = ctx.out(&args.out, "pool.jsonl");
            let records: Vec<(Tuple, Option<Presumed>)> =
                pool.into_iter().map(|t| (t, None)).collect();
            write_tuple_records(&out, &records).stage("ingest")?;
        }
        Command::SelectData(args) => {
            let pool = ctx.plain_tuples(&args.input)?;
            let mut config: SelectionConfig = ctx.parse_section("selection")?.unwrap_or_default();
            if let Some(s) = args.strategy {
                config.strategy = s.into();
            }
            if let Some(p) = args.p {
                config.p_fraction = p;
            }
            if let Some(n) = args.n {
                config.n_fraction = n;
            }
            if let Some(b) = args.bins {
                config.bins = b;
            }
            if let Some(f) = args.pool_fraction {
                config.pool_fraction = f;
            }
            if let Some(master) = ctx.master() {
                config.seed = master;
            }
            let outcome = select(&pool, &config).stage("selection")?;
            for w in &outcome.warnings {
                tracing::warn!("{w}");
            }
            fs::create_dir_all(&ctx.out_dir).stage("selection")?;
            write_selection(&ctx.out_dir, &outcome).stage("selection")?;
        }
        Command::Annotate(args) => {
            let tuples = ctx.plain_tuples(&args.input)?;
            let teacher = ctx.teacher(&args.teacher)?;
            let template = ctx.template(&args.template)?;
            let out = ctx.out(&args.out, "knowledge.jsonl");
            let (knowledge, timing) = annotate_tuples(
                &tuples,
                &teacher,
                &template,
                ctx.options(),
                &work_dir_for(&out),
            )
            .stage("annotate")?;
            write_knowledge(&out, &knowledge).stage("annotate")?;
            if let Some(t) = timing {
                eprintln!("{}", serde_json::to_string(&t).expect("serializable"));
            }
        }
        Command::BuildSft(args) => {
            let c = &args.common;
            let tuples = ctx.plain_tuples(&c.input)?;
            let knowledge = read_knowledge(&c.knowledge).stage("distill")?;
            let template = ctx.template(&c.template)?;
            let with_explanation =
                args.with_explanation || ctx.distill_option("with_explanation")?.unwrap_or(false);
            let built =
                build_sft(&tuples, &knowledge, &template, with_explanation).stage("distill")?;
            if built.skipped_abstain > 0 {
                tracing::warn!("{} abstained tuples left out", built.skipped_abstain);
            }
            let out = ctx.out(&c.out, "sft.jsonl");
            jsonl::write(&out, &built.records).stage("distill")?;
            if args.job {
                job(&out, RecordKind::Sft)?;
            }
        }
        Command::BuildDpo(args) => {
            let c = &args.common;
            let tuples = ctx.plain_tuples(&c.input)?;
            let knowledge = read_knowledge(&c.knowledge).stage("distill")?;
            let template = ctx.template(&c.template)?;
            let mode = match args.rejected_mode {
                Some(RejectedArg::OneRandom) => RejectedMode::OneRandom,
                Some(RejectedArg::All) => RejectedMode::All,
                None => ctx.distill_option("rejected_mode")?.unwrap_or_default(),
            };
            let seed = stage_seed(ctx.master().unwrap_or(0), "distill");
            let records = build_dpo(&tuples, &knowledge, &template, mode, seed).stage("distill")?;
            let out = ctx.out(&c.out, "dpo.jsonl");
            jsonl::write(&out, &records).stage("distill")?;
            if args.job {
                job(&out, RecordKind::Dpo)?;
            }
        }
        Command::BuildPairwise(args) => {
            let tuples = ctx.plain_tuples(&args.input)?;
            let knowledge = read_knowledge(&args.knowledge).stage("distill")?;
            let out = ctx.out(&args.out, "pairwise.jsonl");
            jsonl::write(&out, &build_pairwise(&tuples, &knowledge)).stage("distill")?;
        }
        Command::ScoreGrpo(args) => {
            let weights: RewardWeights = match &args.weights {
                Some(w) => w.parse().stage("score-grpo")?,
                None => RewardWeights::default(),
            };
            let records: Vec<CompletionRecord> =
                jsonl::read_values(&args.input).stage("score-grpo")?;
            let scores = score_completions(&records, &weights);
            match &args.out {
                Some(out) => jsonl::write(out, &scores).stage("score-grpo")?,
                None => {
                    emit(&jsonl::to_string(&scores))?;
                }
            }
        }
        Command::Disambiguate(args) => {
            if let (DisambiguationArg::Umc, Some(preds)) = (args.strategy, &args.predictions) {
                let predictions = read_predictions(preds).stage("disambiguate")?;
                let kept = disambiguate_umc(&matches_from_predictions(&predictions));
                jsonl::write(&ctx.out(&args.out, "matches.jsonl"), &kept).stage("disambiguate")?;
                return Ok(());
            }
            let (Some(input), Some(knowledge)) = (args.input, args.knowledge) else {
                return fail(
                    "disambiguate",
                    "--in and --knowledge are required unless --predictions is used with umc",
                );
            };
            let tuples = ctx.plain_tuples(&TupleInput {
                dataset: args.dataset,
                input,
            })?;
            let knowledge = read_knowledge(&knowledge).stage("disambiguate")?;
            let template = ctx.template(&args.template)?;
            let strategy = match args.strategy {
                DisambiguationArg::Umc => Disambiguation::Umc,
                DisambiguationArg::Select => Disambiguation::Select,
            };
            let teacher = if strategy == Disambiguation::Select {
                ctx.teacher(&args.teacher)?
            } else {
                // UMC never queries a teacher.
                TeacherDescriptor::MockOracle {
                    model_id: "unused".into(),
                    noise_rate: 0.0,
                    seed: 0,
                    latency_s: 0.0,
                }
            };
            let (resolved, kept) = disambiguate(&tuples, &knowledge, strategy, &teacher, &template)
                .stage("disambiguate")?;
            let out = ctx.out(&args.out, "knowledge.resolved.jsonl");
            if let Some(kept) = kept {
                jsonl::write(&out.with_file_name("matches.jsonl"), &kept).stage("disambiguate")?;
            }
            write_knowledge(&out, &resolved).stage("disambiguate")?;
        }
        Command::Evaluate(args) => {
            let tuples = ctx.plain_tuples(&args.input)?;
            let mut report = match (&args.knowledge, &args.pairwise) {
                (Some(k), None) => {
                    let knowledge = read_knowledge(k).stage("evaluate")?;
                    eval_select(&knowledge, &tuples).stage("evaluate")?
                }
                (None, Some(p)) => {
                    let records = jsonl::read_values(p).stage("evaluate")?;
                    eval_pairwise(&records, &tuples).stage("evaluate")?
                }
                _ => return fail("evaluate", "give exactly one of --knowledge or --pairwise"),
            };
            report.positive_ratio = distiller::selection::positive_ratio(&tuples).ok();
            if let Some(out) = &args.out {
                write_json(out, &report).stage("evaluate")?;
            }
            match args.format {
                Format::Json => print_json(&serde_json::to_value(&report).expect("serializable"))?,
                Format::Table => emit(&report.to_table())?,
            }
            if let (Some(csv), Some(seconds)) = (&args.csv, args.seconds) {
                let mut points: Vec<TradeoffPoint> = if csv.exists() {
                    csv::read_points(csv).stage("evaluate")?
                } else {
                    Vec::new()
                };
                points.push(TradeoffPoint {
                    label: args.label.clone(),
                    f1: report.f1,
                    seconds,
                });
                write_tradeoff_csv(csv, &points).stage("evaluate")?;
            }
        }
        Command::Stats(args) => {
            let tuples = ctx.plain_tuples(&args.input)?;
            if tuples.is_empty() {
                return fail("stats", "no tuples");
            }
            let template = ctx.template(&args.template)?;
            let stats = stats_report(&tuples, &template);
            match args.format {
                Format::Json => print_json(&serde_json::to_value(&stats).expect("serializable"))?,
                Format::Table => emit(&stats.to_table())?,
            }
        }
        Command::Run => {
            let Some(path) = ctx.config_path.clone() else {
                return fail("config", "run needs --config");
            };
            let overrides = RunOverrides {
                seed: ctx.seed,
                out_dir: ctx.out_dir_given.clone(),
                parallelism: ctx.parallelism,
            };
            let manifest = pipeline::run_pipeline(&path, &overrides).map_err(|e| Failure {
                stage: e.stage_name().to_string(),
                message: e.to_string(),
            })?;
            print_json(&json!({
                "outputs": manifest.outputs,
                "eval": manifest.eval,
                "stage_timings": manifest.stage_timings,
            }))?;
        }
        Command::Synth(args) => {
            let data = generate(&SynthConfig {
                entities: args.entities,
                match_rate: args.match_rate,
                seed: ctx.master().unwrap_or(0),
            });
            let path = data.write(&ctx.out_dir, &args.name).stage("synth")?;
            emit(&format!("{}\n", path.display()))?;
        }
        Command::Classifier { action } => {
            let classifier = ScoreThresholdClassifier {
                default_threshold: 0.5,
            };
            match action {
                ClassifierAction::Train { pairs, model_dir } => {
                    classifier.train(&pairs, &model_dir)
                }
                ClassifierAction::Predict {
                    pairs,
                    model_dir,
                    out,
                } => classifier.predict(&pairs, &model_dir, &out),
            }
            .stage("classifier")?;
        }
    }
    Ok(())
}

mod csv {
    use std::path::Path;

    use distiller::evaluation::TradeoffPoint;

    pub fn read_points(path: &Path) -> Result<Vec<TradeoffPoint>, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        text.lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let mut parts = l.rsplitn(3, ',');
                let seconds = parts.next().and_then(|s| s.parse().ok());
                let f1 = parts.next().and_then(|s| s.parse().ok());
                let label = parts.next();
                match (label, f1, seconds) {
                    (Some(label), Some(f1), Some(seconds)) => Ok(TradeoffPoint {
                        label: label.trim_matches('"').to_string(),
                        f1,
                        seconds,
                    }),
                    _ => Err(format!("{}: malformed line {l:?}", path.display())),
                }
            })
            .collect()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report(&Failure {
                stage: "usage".into(),
                message: e.to_string().trim().to_string(),
            });
            return ExitCode::from(2);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let config = match &cli.config {
        Some(path) => match fs::read_to_string(path)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str::<Value>(&t).map_err(|e| e.to_string()))
        {
            Ok(v) => Some((v, config_base(path))),
            Err(e) => {
                report(&Failure {
                    stage: "config".into(),
                    message: format!("{}: {e}", path.display()),
                });
                return ExitCode::from(1);
            }
        },
        None => None,
    };
    let ctx = Ctx {
        seed: cli.seed,
        out_dir: cli.out_dir.clone().unwrap_or_else(|| PathBuf::from(".")),
        out_dir_given: cli.out_dir.clone(),
        config,
        config_path: cli.config.clone(),
        parallelism: cli.parallelism,
    };
    match execute(&ctx, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(&f);
            ExitCode::from(1)
        }
    }
}

fn report(f: &Failure) {
    eprintln!(
        "{}",
        json!({"error": {"stage": f.stage, "message": f.message}})
    );
}
