//! End-to-end runs driven by a single JSON config, plus the file-level stage
//! helpers shared with the command-line tool.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::distillation::{
    build_dpo, build_pairwise, build_sft, disambiguate_select, disambiguate_umc,
    export_training_job, MatchCandidate, RecordKind, RejectedMode,
};
use crate::evaluation::{eval_select, stats_report, EvalReport};
use crate::ingest::{
    attach_truth, block_lexical, load_tuples, Dataset, DatasetManifest, EntityIndex, IngestError,
    LoadedTuple, Presumed, TupleRecord,
};
use crate::jsonl::{self, JsonlError};
use crate::model::{AnnotationResult, Choice, InstructionKind, Knowledge, Tuple};
use crate::prompting::{PromptMode, PromptTemplate};
use crate::seed::derive_seed;
use crate::selection::{select, SelectionConfig, SelectionOutcome};
use crate::teaching::{
    annotate_batch, slm_teacher_annotate, work_dir_for, BatchOptions, SlmTiming, TeacherDescriptor,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable that replaces every teacher endpoint URL.
pub const ENDPOINT_ENV: &str = "DISTILLER_ENDPOINT";

const SECTIONS: [&str; 6] = [
    "ingest",
    "selection",
    "teacher",
    "template",
    "distill",
    "eval",
];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config is missing the `{0}` section")]
    MissingSection(String),
    #[error("config section `{section}`: {message}")]
    InvalidSection { section: String, message: String },
    #[error("{stage}: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
}

impl PipelineError {
    pub fn stage(stage: &'static str, e: impl std::fmt::Display) -> Self {
        PipelineError::Stage {
            stage,
            message: e.to_string(),
        }
    }

    pub fn stage_name(&self) -> &str {
        match self {
            PipelineError::MissingSection(_) | PipelineError::InvalidSection { .. } => "config",
            PipelineError::Stage { stage, .. } => stage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSection {
    /// Dataset manifest (JSON).
    pub dataset: PathBuf,
    /// Pre-computed tuple file; when absent the lexical blocker builds tuples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuples: Option<PathBuf>,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
}

fn default_top_n() -> usize {
    5
}

/// SELECT template settings; unset fields take the built-in defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateSection {
    /// Template file; other fields override what it sets.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instruction_kind: Option<InstructionKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub none_option: Option<bool>,
}

impl TemplateSection {
    /// Asks for explanations when the distilled records need them and
    /// nothing else picks the instruction kind.
    pub fn default_kind(&mut self, with_explanation: bool) {
        if with_explanation && self.instruction_kind.is_none() && self.path.is_none() {
            self.instruction_kind = Some(InstructionKind::AnswerPlusExplanation);
        }
    }

    pub fn resolve(&self, base: &Path) -> Result<PromptTemplate, PipelineError> {
        let invalid = |message: String| PipelineError::InvalidSection {
            section: "template".into(),
            message,
        };
        let mut template = match &self.path {
            Some(p) => read_template(&rebase(base, p)).map_err(invalid)?,
            None => PromptTemplate::default(),
        };
        if let Some(kind) = self.instruction_kind {
            template.instruction_kind = kind;
        }
        if let Some(text) = &self.task_text {
            template.task_text = text.clone();
        }
        if let Some(none) = self.none_option {
            template.none_option_enabled = none;
        }
        if template.mode != PromptMode::Select {
            return Err(invalid("the pipeline needs a select template".into()));
        }
        template.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(template)
    }
}

pub fn read_template(path: &Path) -> Result<PromptTemplate, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let template: PromptTemplate =
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    template
        .validate()
        .map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(template)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Disambiguation {
    Umc,
    Select,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordFormat {
    Sft,
    Dpo,
    Pairwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillSection {
    pub records: Vec<RecordFormat>,
    pub with_explanation: bool,
    pub rejected_mode: RejectedMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disambiguate: Option<Disambiguation>,
    /// Also write a training-job manifest per SFT/DPO file.
    pub job: bool,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            records: vec![RecordFormat::Sft],
            with_explanation: false,
            rejected_mode: RejectedMode::OneRandom,
            disambiguate: None,
            job: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub enabled: bool,
    pub stats: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            enabled: true,
            stats: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Master seed; falls back to `selection.seed` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
    pub ingest: IngestSection,
    pub selection: SelectionConfig,
    pub teacher: TeacherDescriptor,
    pub template: TemplateSection,
    pub distill: DistillSection,
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn from_value(value: Value) -> Result<Self, PipelineError> {
        let obj = value
            .as_object()
            .ok_or_else(|| PipelineError::InvalidSection {
                section: "root".into(),
                message: "config must be a JSON object".into(),
            })?;
        for s in SECTIONS {
            if !obj.contains_key(s) {
                return Err(PipelineError::MissingSection(s.into()));
            }
        }
        let section = |name: &str| PipelineError::InvalidSection {
            section: name.into(),
            message: String::new(),
        };
        macro_rules! parse {
            ($name:literal) => {
                serde_json::from_value(obj[$name].clone()).map_err(|e| match section($name) {
                    PipelineError::InvalidSection { section, .. } => {
                        PipelineError::InvalidSection {
                            section,
                            message: e.to_string(),
                        }
                    }
                    other => other,
                })?
            };
        }
        let mut config = Self {
            seed: obj.get("seed").and_then(Value::as_u64),
            parallelism: obj
                .get("parallelism")
                .and_then(Value::as_u64)
                .map(|p| p as usize),
            ingest: parse!("ingest"),
            selection: parse!("selection"),
            teacher: parse!("teacher"),
            template: parse!("template"),
            distill: parse!("distill"),
            eval: parse!("eval"),
        };
        config
            .template
            .default_kind(config.distill.with_explanation);
        config
            .selection
            .validate()
            .map_err(|e| PipelineError::InvalidSection {
                section: "selection".into(),
                message: e.to_string(),
            })?;
        config
            .teacher
            .validate()
            .map_err(|e| PipelineError::InvalidSection {
                section: "teacher".into(),
                message: e.to_string(),
            })?;
        Ok(config)
    }

    /// The seed every stage seed derives from.
    pub fn master_seed(&self, cli: Option<u64>) -> u64 {
        cli.or(self.seed).unwrap_or(self.selection.seed)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::InvalidSection {
            section: "root".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| PipelineError::InvalidSection {
                section: "root".into(),
                message: format!("{}: {e}", path.display()),
            })?;
        Self::from_value(value)
    }
}

fn rebase(base: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p.to_path_buf()
    }
}

/// Directory relative paths in a config file resolve against.
pub fn config_base(config_path: &Path) -> PathBuf {
    config_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Seed of a named stage under a master seed.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    derive_seed(master, stage)
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn read_dataset_manifest(path: &Path) -> Result<DatasetManifest, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| IngestError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
    Ok(manifest.rebase(&config_base(path)))
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, IngestError> {
    read_dataset_manifest(manifest_path)?.load()
}

/// Every file a dataset manifest points at, including the manifest.
pub fn dataset_files(manifest_path: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let m = read_dataset_manifest(manifest_path)?;
    let mut files = vec![manifest_path.to_path_buf()];
    files.extend(m.source_paths.iter().cloned());
    files.extend(m.matches_path);
    Ok(files)
}

/// Candidate tuples for a dataset: read from `tuples` when given, otherwise
/// produced by the lexical blocker. Known matches become ground truth.
pub fn build_pool(
    dataset: &Dataset,
    tuples: Option<&Path>,
    top_n: usize,
) -> Result<Vec<Tuple>, IngestError> {
    let pool = match tuples {
        Some(path) => load_tuples(path, &dataset.query_index(), &dataset.corpus_index())?
            .into_iter()
            .map(|l| l.tuple)
            .collect(),
        None => block_lexical(&dataset.queries, &dataset.corpus, top_n)?,
    };
    Ok(match &dataset.matches {
        Some(m) => attach_truth(pool, m),
        None => pool,
    })
}

pub fn read_tuples(path: &Path, dataset: &Dataset) -> Result<Vec<LoadedTuple>, IngestError> {
    load_tuples(path, &dataset.query_index(), &dataset.corpus_index())
}

pub fn read_tuples_with(
    path: &Path,
    queries: &EntityIndex,
    corpus: &EntityIndex,
) -> Result<Vec<Tuple>, IngestError> {
    Ok(load_tuples(path, queries, corpus)?
        .into_iter()
        .map(|l| l.tuple)
        .collect())
}

pub fn write_tuple_records(
    path: &Path,
    tuples: &[(Tuple, Option<Presumed>)],
) -> Result<(), JsonlError> {
    let records: Vec<TupleRecord> = tuples
        .iter()
        .map(|(t, p)| TupleRecord::from_tuple(t, *p))
        .collect();
    jsonl::write(path, &records)
}

/// Writes `training.jsonl` (with presumed labels) and `testing.jsonl`.
pub fn write_selection(
    out_dir: &Path,
    outcome: &SelectionOutcome,
) -> Result<Vec<PathBuf>, JsonlError> {
    let training: Vec<(Tuple, Option<Presumed>)> = outcome
        .training
        .iter()
        .map(|t| (t.tuple.clone(), t.presumed))
        .collect();
    let testing: Vec<(Tuple, Option<Presumed>)> =
        outcome.testing.iter().map(|t| (t.clone(), None)).collect();
    let paths = vec![
        out_dir.join("training.jsonl"),
        out_dir.join("testing.jsonl"),
    ];
    write_tuple_records(&paths[0], &training)?;
    write_tuple_records(&paths[1], &testing)?;
    Ok(paths)
}

pub fn write_knowledge(path: &Path, knowledge: &Knowledge) -> Result<(), JsonlError> {
    jsonl::write(path, knowledge.iter())
}

pub fn read_knowledge(path: &Path) -> Result<Knowledge, JsonlError> {
    Ok(Knowledge::from_results(jsonl::read_values::<
        AnnotationResult,
    >(path)?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text)
}

/// Annotates `training` with the configured teacher. SLM pipelines keep
/// their intermediate files in `work_dir`.
pub fn annotate_tuples(
    training: &[Tuple],
    teacher: &TeacherDescriptor,
    template: &PromptTemplate,
    options: BatchOptions,
    work_dir: &Path,
) -> Result<(Knowledge, Option<SlmTiming>), crate::teaching::TeachError> {
    match teacher {
        TeacherDescriptor::SlmPipeline {
            model_id,
            plan,
            seed,
        } => {
            let outcome =
                slm_teacher_annotate(training, model_id, plan, template, work_dir, *seed, options)?;
            Ok((outcome.knowledge, Some(outcome.timing)))
        }
        _ => {
            let built = teacher.build()?;
            Ok((
                annotate_batch(training, built.as_ref(), template, options)?,
                None,
            ))
        }
    }
}

/// Candidates every result marks positive, with their blocking scores.
pub fn knowledge_matches(tuples: &[Tuple], knowledge: &Knowledge) -> Vec<MatchCandidate> {
    tuples
        .iter()
        .filter_map(|t| knowledge.get(t.key()).map(|r| (t, r)))
        .flat_map(|(t, r)| {
            r.positive_indices().into_iter().filter_map(move |i| {
                t.candidate(i).map(|c| MatchCandidate {
                    query_id: t.key().to_string(),
                    candidate_id: c.entity.id.clone(),
                    score: c.score,
                })
            })
        })
        .collect()
}

/// Knowledge implied by a set of 1-1 matches: the kept candidate, or no
/// match for tuples that lost all of theirs. Abstentions stay abstentions.
pub fn knowledge_from_matches(
    tuples: &[Tuple],
    knowledge: &Knowledge,
    kept: &[MatchCandidate],
) -> Knowledge {
    let by_query: BTreeMap<&str, &str> = kept
        .iter()
        .map(|m| (m.query_id.as_str(), m.candidate_id.as_str()))
        .collect();
    let mut out = Knowledge::new(knowledge.teachers.clone(), knowledge.instruction);
    for t in tuples {
        let Some(r) = knowledge.get(t.key()) else {
            continue;
        };
        let mut r = r.clone();
        if !(r.choice.is_abstain() && r.positives.is_none()) {
            let choice = by_query
                .get(t.key())
                .and_then(|id| t.position_of(id))
                .map_or(Choice::NoMatch, Choice::Candidate);
            if choice != r.choice {
                r.explanation = None;
            }
            r.choice = choice;
            r.positives = None;
        }
        out.insert(r);
    }
    out
}

/// Resolves results with several positive candidates to a single answer.
pub fn disambiguate(
    tuples: &[Tuple],
    knowledge: &Knowledge,
    strategy: Disambiguation,
    teacher: &TeacherDescriptor,
    template: &PromptTemplate,
) -> Result<(Knowledge, Option<Vec<MatchCandidate>>), crate::distillation::DistillError> {
    match strategy {
        Disambiguation::Umc => {
            let kept = disambiguate_umc(&knowledge_matches(tuples, knowledge));
            Ok((knowledge_from_matches(tuples, knowledge, &kept), Some(kept)))
        }
        Disambiguation::Select => {
            let llm = match teacher {
                TeacherDescriptor::SlmPipeline { plan, .. } => plan.llm_teacher.as_ref(),
                other => other,
            };
            let built = llm.build()?;
            let (ambiguous, positives): (Vec<Tuple>, BTreeMap<String, Vec<usize>>) = tuples
                .iter()
                .filter_map(|t| {
                    let r = knowledge.get(t.key())?;
                    let set = r.positives.clone().filter(|p| p.len() > 1)?;
                    Some((t.clone(), (t.key().to_string(), set)))
                })
                .unzip();
            let mut resolved = knowledge.clone();
            resolved.merge(disambiguate_select(
                &ambiguous,
                &positives,
                built.as_ref(),
                template,
            )?);
            Ok((resolved, None))
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub parallelism: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: Value,
    pub master_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    /// Input files and their SHA-256 digests.
    pub inputs: BTreeMap<String, String>,
    /// Output files (relative to the output directory) and their digests.
    pub outputs: BTreeMap<String, String>,
    pub stage_timings: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slm_timing: Option<SlmTiming>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

struct Recorder<'a> {
    out_dir: &'a Path,
    outputs: BTreeMap<String, String>,
    timings: BTreeMap<String, f64>,
}

impl Recorder<'_> {
    fn output(&mut self, stage: &'static str, path: &Path) -> Result<(), PipelineError> {
        let digest = sha256_file(path)
            .map_err(|e| PipelineError::stage(stage, format!("{}: {e}", path.display())))?;
        let name = path.strip_prefix(self.out_dir).unwrap_or(path);
        self.outputs
            .insert(name.to_string_lossy().replace('\\', "/"), digest);
        Ok(())
    }

    fn time<T>(
        &mut self,
        stage: &'static str,
        f: impl FnOnce(&mut Self) -> Result<T, PipelineError>,
    ) -> Result<T, PipelineError> {
        let started = Instant::now();
        let out = f(self)?;
        self.timings
            .insert(stage.to_string(), started.elapsed().as_secs_f64());
        Ok(out)
    }
}

/// Runs selection, annotation, optional disambiguation, record building and
/// evaluation, writing every artifact plus `manifest.json` to the output
/// directory (`out` next to the config unless overridden).
pub fn run_pipeline(
    config_path: &Path,
    overrides: &RunOverrides,
) -> Result<RunManifest, PipelineError> {
    let raw: Value = fs::read_to_string(config_path)
        .map_err(|e| e.to_string())
        .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
        .map_err(|message| PipelineError::InvalidSection {
            section: "root".into(),
            message: format!("{}: {message}", config_path.display()),
        })?;
    let config = PipelineConfig::from_value(raw.clone())?;
    let base = config_base(config_path);
    let out_dir = overrides
        .out_dir
        .clone()
        .unwrap_or_else(|| base.join("out"));
    run_config(config, raw, &base, &out_dir, overrides)
}

pub fn run_config(
    config: PipelineConfig,
    raw: Value,
    base: &Path,
    out_dir: &Path,
    overrides: &RunOverrides,
) -> Result<RunManifest, PipelineError> {
    let master = config.master_seed(overrides.seed);
    let options = BatchOptions {
        parallelism: overrides.parallelism.or(config.parallelism).unwrap_or(1),
        ..BatchOptions::default()
    };
    let template = config.template.resolve(base)?;
    fs::create_dir_all(out_dir)
        .map_err(|e| PipelineError::stage("setup", format!("{}: {e}", out_dir.display())))?;

    let mut seeds = BTreeMap::new();
    let mut rec = Recorder {
        out_dir,
        outputs: BTreeMap::new(),
        timings: BTreeMap::new(),
    };
    let mut warnings = Vec::new();

    let dataset_path = rebase(base, &config.ingest.dataset);
    let tuples_path = config.ingest.tuples.as_ref().map(|p| rebase(base, p));
    let mut inputs = BTreeMap::new();
    let mut input_files =
        dataset_files(&dataset_path).map_err(|e| PipelineError::stage("ingest", e))?;
    input_files.extend(tuples_path.clone());
    for f in input_files {
        let digest = sha256_file(&f)
            .map_err(|e| PipelineError::stage("ingest", format!("{}: {e}", f.display())))?;
        inputs.insert(f.to_string_lossy().into_owned(), digest);
    }

    let pool = rec.time("ingest", |rec| {
        let dataset = load_dataset(&dataset_path).map_err(|e| PipelineError::stage("ingest", e))?;
        let pool = build_pool(&dataset, tuples_path.as_deref(), config.ingest.top_n)
            .map_err(|e| PipelineError::stage("ingest", e))?;
        let path = out_dir.join("pool.jsonl");
        let records: Vec<(Tuple, Option<Presumed>)> =
            pool.iter().map(|t| (t.clone(), None)).collect();
        write_tuple_records(&path, &records).map_err(|e| PipelineError::stage("ingest", e))?;
        rec.output("ingest", &path)?;
        Ok(pool)
    })?;

    let selection = SelectionConfig {
        seed: master,
        ..config.selection.clone()
    };
    seeds.insert("selection".to_string(), selection.seed);
    let outcome = rec.time("selection", |rec| {
        let outcome =
            select(&pool, &selection).map_err(|e| PipelineError::stage("selection", e))?;
        for p in
            write_selection(out_dir, &outcome).map_err(|e| PipelineError::stage("selection", e))?
        {
            rec.output("selection", &p)?;
        }
        Ok(outcome)
    })?;
    warnings.extend(outcome.warnings.iter().cloned());
    let training = outcome.training_tuples();

    let mut teacher = config.teacher.clone();
    if let Ok(url) = std::env::var(ENDPOINT_ENV) {
        teacher.override_endpoint(&url);
    }
    let teacher_seed = stage_seed(master, "teacher");
    teacher.reseed(teacher_seed);
    seeds.insert("teacher".to_string(), teacher_seed);
    let knowledge_path = out_dir.join("knowledge.jsonl");
    let (knowledge, slm_timing) = rec.time("annotate", |rec| {
        let (knowledge, timing) = annotate_tuples(
            &training,
            &teacher,
            &template,
            options,
            &work_dir_for(&knowledge_path),
        )
        .map_err(|e| PipelineError::stage("annotate", e))?;
        write_knowledge(&knowledge_path, &knowledge)
            .map_err(|e| PipelineError::stage("annotate", e))?;
        rec.output("annotate", &knowledge_path)?;
        Ok((knowledge, timing))
    })?;

    let knowledge = match config.distill.disambiguate {
        None => knowledge,
        Some(strategy) => rec.time("disambiguate", |rec| {
            let (resolved, kept) =
                disambiguate(&training, &knowledge, strategy, &teacher, &template)
                    .map_err(|e| PipelineError::stage("disambiguate", e))?;
            if let Some(kept) = kept {
                let path = out_dir.join("matches.jsonl");
                jsonl::write(&path, &kept).map_err(|e| PipelineError::stage("disambiguate", e))?;
                rec.output("disambiguate", &path)?;
            }
            let path = out_dir.join("knowledge.resolved.jsonl");
            write_knowledge(&path, &resolved)
                .map_err(|e| PipelineError::stage("disambiguate", e))?;
            rec.output("disambiguate", &path)?;
            Ok(resolved)
        })?,
    };

    let distill_seed = stage_seed(master, "distill");
    seeds.insert("distill".to_string(), distill_seed);
    rec.time("distill", |rec| {
        let err = |e: &dyn std::fmt::Display| PipelineError::stage("distill", e);
        for format in &config.distill.records {
            let (path, kind) = match format {
                RecordFormat::Sft => {
                    let built = build_sft(
                        &training,
                        &knowledge,
                        &template,
                        config.distill.with_explanation,
                    )
                    .map_err(|e| err(&e))?;
                    if built.skipped_abstain > 0 {
                        warnings.push(format!(
                            "{} abstained tuples left out of SFT records",
                            built.skipped_abstain
                        ));
                    }
                    let path = out_dir.join("sft.jsonl");
                    jsonl::write(&path, &built.records).map_err(|e| err(&e))?;
                    (path, Some(RecordKind::Sft))
                }
                RecordFormat::Dpo => {
                    let records = build_dpo(
                        &training,
                        &knowledge,
                        &template,
                        config.distill.rejected_mode,
                        distill_seed,
                    )
                    .map_err(|e| err(&e))?;
                    let path = out_dir.join("dpo.jsonl");
                    jsonl::write(&path, &records).map_err(|e| err(&e))?;
                    (path, Some(RecordKind::Dpo))
                }
                RecordFormat::Pairwise => {
                    let records = build_pairwise(&training, &knowledge);
                    let path = out_dir.join("pairwise.jsonl");
                    jsonl::write(&path, &records).map_err(|e| err(&e))?;
                    (path, None)
                }
            };
            rec.output("distill", &path)?;
            if let (true, Some(kind)) = (config.distill.job, kind) {
                let job_path = out_dir.join(format!(
                    "job.{}.json",
                    serde_json::to_value(kind).unwrap().as_str().unwrap()
                ));
                export_training_job(&path, kind, None, &job_path).map_err(|e| err(&e))?;
                rec.output("distill", &job_path)?;
            }
        }
        Ok(())
    })?;

    let eval = if config.eval.enabled {
        rec.time("evaluate", |rec| {
            let mut report = None;
            if training.iter().all(|t| t.truth().is_some()) && !training.is_empty() {
                let mut r = eval_select(&knowledge, &training)
                    .map_err(|e| PipelineError::stage("evaluate", e))?;
                r.positive_ratio = outcome.positive_ratio;
                let path = out_dir.join("eval.json");
                write_json(&path, &r).map_err(|e| PipelineError::stage("evaluate", e))?;
                rec.output("evaluate", &path)?;
                report = Some(r);
            } else {
                warnings.push("training tuples lack ground truth; evaluation skipped".into());
            }
            if config.eval.stats {
                let path = out_dir.join("stats.json");
                write_json(&path, &stats_report(&pool, &template))
                    .map_err(|e| PipelineError::stage("evaluate", e))?;
                rec.output("evaluate", &path)?;
            }
            Ok(report)
        })?
    } else {
        None
    };

    let mut eval = eval;
    if let Some(r) = eval.as_mut() {
        r.stage_timings = rec.timings.clone();
    }
    let manifest = RunManifest {
        tool: "distiller".into(),
        version: TOOL_VERSION.into(),
        config: raw,
        master_seed: master,
        seeds,
        inputs,
        outputs: rec.outputs,
        stage_timings: rec.timings,
        slm_timing,
        eval,
        warnings,
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)
        .map_err(|e| PipelineError::stage("manifest", e))?;
    Ok(manifest)
}
