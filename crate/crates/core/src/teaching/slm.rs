//! Two-stage SLM teacher: an LLM labels X% of the training tuples, a
//! pairwise classifier is trained on those labels and then labels the
//! remaining Y%.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{annotate_batch, BatchOptions, TeachError, Teacher, TeacherDescriptor};
use crate::distillation::{build_pairwise, PairwiseRecord};
use crate::ingest::serialize_entity;
use crate::jsonl;
use crate::model::{AnnotationResult, Choice, Knowledge, Tuple};
use crate::prompting::PromptTemplate;
use crate::seed;
use crate::selection::fraction_count;

fn io_error(path: &Path, e: impl std::fmt::Display) -> TeachError {
    TeachError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// A pair to be classified (a pairwise record without its label).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairInput {
    pub query: String,
    pub candidate: String,
    pub text_a: String,
    pub text_b: String,
    pub score: f64,
}

/// One line of a classifier's prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub query: String,
    pub candidate: String,
    pub label: u8,
    pub score: f64,
}

pub(crate) fn read_pair_inputs(path: &Path) -> Result<Vec<PairInput>, TeachError> {
    jsonl::read_values(path).map_err(|e| io_error(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PairPrediction>, TeachError> {
    jsonl::read_values(path).map_err(|e| io_error(path, e))
}

pub(crate) fn write_predictions(
    path: &Path,
    predictions: &[PairPrediction],
) -> Result<(), TeachError> {
    jsonl::write(path, predictions).map_err(|e| io_error(path, e))
}

/// External pairwise classifier: trains on labelled pairs and labels new ones.
pub trait PairwiseClassifier: Send + Sync {
    fn train(&self, pairs: &Path, model_dir: &Path) -> Result<(), TeachError>;
    fn predict(&self, pairs: &Path, model_dir: &Path, out: &Path) -> Result<(), TeachError>;
}

/// Runs `program train <pairs> <model-dir>` and
/// `program predict <pairs> <model-dir> <out>`.
#[derive(Debug, Clone)]
pub struct CommandClassifier {
    program: Vec<String>,
}

impl CommandClassifier {
    pub fn new(program: Vec<String>) -> Result<Self, TeachError> {
        if program.is_empty() {
            return Err(TeachError::ClassifierUnavailable("empty command".into()));
        }
        Ok(Self { program })
    }

    fn run(&self, args: &[&Path]) -> Result<(), TeachError> {
        let mut cmd = Command::new(&self.program[0]);
        cmd.args(&self.program[1..]).args(args);
        let output = cmd
            .output()
            .map_err(|e| TeachError::ClassifierUnavailable(format!("{}: {e}", self.program[0])))?;
        if !output.status.success() {
            return Err(TeachError::ClassifierUnavailable(format!(
                "{} exited with {}: {}",
                self.program.join(" "),
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        Ok(())
    }
}

impl PairwiseClassifier for CommandClassifier {
    fn train(&self, pairs: &Path, model_dir: &Path) -> Result<(), TeachError> {
        self.run(&[Path::new("train"), pairs, model_dir])
    }

    fn predict(&self, pairs: &Path, model_dir: &Path, out: &Path) -> Result<(), TeachError> {
        self.run(&[Path::new("predict"), pairs, model_dir, out])
    }
}

/// Thresholds the blocking score. Training picks the threshold with the best
/// F1 on the labelled pairs (the highest one on ties).
#[derive(Debug, Clone)]
pub struct ScoreThresholdClassifier {
    pub default_threshold: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ThresholdModel {
    threshold: f64,
}

const THRESHOLD_FILE: &str = "threshold.json";

impl ScoreThresholdClassifier {
    pub fn fit(&self, pairs: &[PairwiseRecord]) -> f64 {
        let positives = pairs.iter().filter(|p| p.label == 1).count();
        if positives == 0 {
            return self.default_threshold;
        }
        let mut cuts: Vec<f64> = pairs.iter().map(|p| p.score).collect();
        cuts.sort_by(|a, b| b.total_cmp(a));
        cuts.dedup();
        let mut best = (f64::NEG_INFINITY, self.default_threshold);
        for cut in cuts {
            let (mut tp, mut fp) = (0usize, 0usize);
            for p in pairs.iter().filter(|p| p.score >= cut) {
                if p.label == 1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            let f1 = 2.0 * tp as f64 / (2 * tp + fp + (positives - tp)) as f64;
            if f1 > best.0 {
                best = (f1, cut);
            }
        }
        best.1
    }
}

impl PairwiseClassifier for ScoreThresholdClassifier {
    fn train(&self, pairs: &Path, model_dir: &Path) -> Result<(), TeachError> {
        let records: Vec<PairwiseRecord> =
            jsonl::read_values(pairs).map_err(|e| io_error(pairs, e))?;
        let model = ThresholdModel {
            threshold: self.fit(&records),
        };
        std::fs::create_dir_all(model_dir).map_err(|e| io_error(model_dir, e))?;
        let path = model_dir.join(THRESHOLD_FILE);
        std::fs::write(&path, serde_json::to_vec(&model).expect("serializable"))
            .map_err(|e| io_error(&path, e))
    }

    fn predict(&self, pairs: &Path, model_dir: &Path, out: &Path) -> Result<(), TeachError> {
        let path = model_dir.join(THRESHOLD_FILE);
        let bytes = std::fs::read(&path)
            .map_err(|e| TeachError::ClassifierUnavailable(format!("{}: {e}", path.display())))?;
        let model: ThresholdModel =
            serde_json::from_slice(&bytes).map_err(|e| io_error(&path, e))?;
        let predictions: Vec<PairPrediction> = read_pair_inputs(pairs)?
            .into_iter()
            .map(|p| PairPrediction {
                label: u8::from(p.score >= model.threshold),
                query: p.query,
                candidate: p.candidate,
                score: p.score,
            })
            .collect();
        write_predictions(out, &predictions)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierSpec {
    Command {
        program: Vec<String>,
    },
    ScoreThreshold {
        #[serde(default = "half")]
        default_threshold: f64,
    },
}

fn half() -> f64 {
    0.5
}

impl ClassifierSpec {
    pub fn build(&self) -> Result<Box<dyn PairwiseClassifier>, TeachError> {
        Ok(match self {
            ClassifierSpec::Command { program } => {
                Box::new(CommandClassifier::new(program.clone())?)
            }
            ClassifierSpec::ScoreThreshold { default_threshold } => {
                Box::new(ScoreThresholdClassifier {
                    default_threshold: *default_threshold,
                })
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlmSplitPlan {
    #[serde(default = "default_x")]
    pub x_fraction: f64,
    pub llm_teacher: Box<TeacherDescriptor>,
    #[serde(rename = "classifier")]
    pub pairwise_model: ClassifierSpec,
}

fn default_x() -> f64 {
    0.2
}

impl SlmSplitPlan {
    pub fn validate(&self) -> Result<(), TeachError> {
        if !(self.x_fraction > 0.0 && self.x_fraction < 1.0) {
            return Err(TeachError::InvalidDescriptor(format!(
                "x_fraction {} outside (0,1)",
                self.x_fraction
            )));
        }
        if matches!(*self.llm_teacher, TeacherDescriptor::SlmPipeline { .. }) {
            return Err(TeachError::InvalidDescriptor(
                "the X-part teacher cannot itself be an SLM pipeline".into(),
            ));
        }
        self.llm_teacher.validate()
    }
}

/// Wall-clock breakdown of an SLM-teacher run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SlmTiming {
    pub x_fraction: f64,
    /// Time the LLM spent on the X part.
    pub llm_portion_s: f64,
    pub finetune_s: f64,
    pub predict_s: f64,
}

impl SlmTiming {
    pub fn total_s(&self) -> f64 {
        self.llm_portion_s + self.finetune_s + self.predict_s
    }
}

#[derive(Debug, Clone)]
pub struct SlmOutcome {
    pub knowledge: Knowledge,
    pub timing: SlmTiming,
    pub x_keys: Vec<String>,
    pub y_keys: Vec<String>,
}

/// The moving parts of an SLM-teacher run.
pub struct SlmRunner<'a> {
    pub teacher_id: &'a str,
    pub x_fraction: f64,
    pub llm: &'a dyn Teacher,
    pub classifier: &'a dyn PairwiseClassifier,
    pub template: &'a PromptTemplate,
    pub options: BatchOptions,
    pub work_dir: &'a Path,
}

impl SlmRunner<'_> {
    pub fn run(&self, training: &[Tuple], seed: u64) -> Result<SlmOutcome, TeachError> {
        if training.is_empty() {
            return Err(TeachError::InvalidDescriptor("empty training set".into()));
        }
        let mut order: Vec<&Tuple> = training.iter().collect();
        order.sort_by(|a, b| a.key().cmp(b.key()));
        order.shuffle(&mut seed::rng_for(seed, "slm-split"));
        let x_count = fraction_count(self.x_fraction, order.len()).min(order.len());
        let (x_part, y_part) = order.split_at(x_count);
        let x_tuples: Vec<Tuple> = x_part.iter().map(|t| (*t).clone()).collect();

        let started = Instant::now();
        let mut knowledge = annotate_batch(&x_tuples, self.llm, self.template, self.options)?;
        let llm_portion_s = started.elapsed().as_secs_f64();

        std::fs::create_dir_all(self.work_dir).map_err(|e| io_error(self.work_dir, e))?;
        let train_path = self.work_dir.join("pairs.train.jsonl");
        let model_dir = self.work_dir.join("model");
        let predict_in = self.work_dir.join("pairs.predict.jsonl");
        let predict_out = self.work_dir.join("predictions.jsonl");

        let train_pairs = build_pairwise(&x_tuples, &knowledge);
        jsonl::write(&train_path, &train_pairs).map_err(|e| io_error(&train_path, e))?;
        let started = Instant::now();
        self.classifier.train(&train_path, &model_dir)?;
        let finetune_s = started.elapsed().as_secs_f64();

        let inputs: Vec<PairInput> = y_part
            .iter()
            .flat_map(|t| {
                let query_text = serialize_entity(t.query());
                t.candidates().iter().map(move |c| PairInput {
                    query: t.key().to_string(),
                    candidate: c.entity.id.clone(),
                    text_a: query_text.clone(),
                    text_b: serialize_entity(&c.entity),
                    score: c.score,
                })
            })
            .collect();
        jsonl::write(&predict_in, &inputs).map_err(|e| io_error(&predict_in, e))?;
        let started = Instant::now();
        if !inputs.is_empty() {
            self.classifier
                .predict(&predict_in, &model_dir, &predict_out)?;
        }
        let predict_s = started.elapsed().as_secs_f64();
        let predictions = if inputs.is_empty() {
            Vec::new()
        } else {
            read_predictions(&predict_out)?
        };

        let mut positives: std::collections::HashMap<(&str, &str), bool> = Default::default();
        for p in &predictions {
            positives.insert((p.query.as_str(), p.candidate.as_str()), p.label == 1);
        }
        for t in y_part {
            let set: Vec<usize> = t
                .candidates()
                .iter()
                .enumerate()
                .filter(|(_, c)| positives.get(&(t.key(), c.entity.id.as_str())) == Some(&true))
                .map(|(i, _)| i + 1)
                .collect();
            let choice = set
                .first()
                .map_or(Choice::NoMatch, |&i| Choice::Candidate(i));
            let completion = if set.is_empty() {
                "positives: none".to_string()
            } else {
                format!(
                    "positives: {}",
                    set.iter()
                        .map(usize::to_string)
                        .collect::<Vec<_>>()
                        .join(",")
                )
            };
            knowledge.insert(AnnotationResult {
                tuple_key: t.key().to_string(),
                choice,
                positives: Some(set),
                explanation: None,
                completion,
                teacher_id: self.teacher_id.to_string(),
                elapsed_s: 0.0,
            });
        }
        if !knowledge.teachers.iter().any(|t| t == self.teacher_id) {
            knowledge.teachers.push(self.teacher_id.to_string());
        }

        let timing = SlmTiming {
            x_fraction: self.x_fraction,
            llm_portion_s,
            finetune_s,
            predict_s,
        };
        knowledge.elapsed_s = timing.total_s();
        let mut x_keys: Vec<String> = x_part.iter().map(|t| t.key().to_string()).collect();
        let mut y_keys: Vec<String> = y_part.iter().map(|t| t.key().to_string()).collect();
        x_keys.sort();
        y_keys.sort();
        Ok(SlmOutcome {
            knowledge,
            timing,
            x_keys,
            y_keys,
        })
    }
}

/// Runs the SLM-teacher pipeline described by `plan`, keeping intermediate
/// pair files and the classifier model under `work_dir`.
pub fn slm_teacher_annotate(
    training: &[Tuple],
    teacher_id: &str,
    plan: &SlmSplitPlan,
    template: &PromptTemplate,
    work_dir: &Path,
    seed: u64,
    options: BatchOptions,
) -> Result<SlmOutcome, TeachError> {
    plan.validate()?;
    let llm = plan.llm_teacher.build()?;
    let classifier = plan.pairwise_model.build()?;
    SlmRunner {
        teacher_id,
        x_fraction: plan.x_fraction,
        llm: llm.as_ref(),
        classifier: classifier.as_ref(),
        template,
        options,
        work_dir,
    }
    .run(training, seed)
}

/// Default work directory next to an output file.
pub fn work_dir_for(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("slm");
    out.with_file_name(format!("{stem}.slm"))
}
