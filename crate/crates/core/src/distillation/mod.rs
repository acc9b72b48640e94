//! Turns teacher knowledge into training artifacts for a student model.

mod reward;
mod umc;

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::serialize_entity;
use crate::model::{Choice, Knowledge, Tuple};
use crate::prompting::{canonical_answer, render_select, PromptTemplate};
use crate::seed;
use crate::teaching::TeachError;

pub use reward::{
    reward_answer, reward_breakdown, reward_digit, reward_length, reward_total, score_completions,
    CompletionRecord, GrpoScore, RewardBreakdown, RewardWeights,
};
pub use umc::{
    disambiguate_select, disambiguate_umc, matches_from_predictions, positives_from_predictions,
    MatchCandidate,
};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("no knowledge for tuple {0}")]
    MissingKnowledge(String),
    #[error("tuple {0} has no teacher explanation")]
    MissingExplanation(String),
    #[error("tuple {0} offers no alternative to the chosen answer")]
    NoAlternative(String),
    #[error("invalid reward weights: {0}")]
    InvalidWeights(String),
    #[error("records file {} does not exist", .0.display())]
    MissingRecords(PathBuf),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Teach(#[from] TeachError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub messages: Vec<Message>,
    #[serde(rename = "tuple")]
    pub tuple_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoRecord {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    #[serde(rename = "tuple")]
    pub tuple_key: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseRecord {
    #[serde(rename = "query")]
    pub query_id: String,
    #[serde(rename = "candidate")]
    pub candidate_id: String,
    pub text_a: String,
    pub text_b: String,
    pub label: u8,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftBuild {
    pub records: Vec<SftRecord>,
    /// Tuples skipped because the teacher abstained.
    pub skipped_abstain: usize,
}

fn labelled<'a>(
    t: &Tuple,
    knowledge: &'a Knowledge,
) -> Result<&'a crate::model::AnnotationResult, DistillError> {
    knowledge
        .get(t.key())
        .ok_or_else(|| DistillError::MissingKnowledge(t.key().to_string()))
}

/// Makes sure an explanation ends with the bracketed answer.
fn ending_with_answer(explanation: &str, index: usize) -> String {
    let answer = canonical_answer(index);
    let trimmed = explanation.trim_end();
    if trimmed.ends_with(&answer) {
        trimmed.to_string()
    } else {
        format!("{trimmed} Answer: {answer}")
    }
}

fn sorted_by_key(tuples: &[Tuple]) -> Vec<&Tuple> {
    let mut sorted: Vec<&Tuple> = tuples.iter().collect();
    sorted.sort_by(|a, b| a.key().cmp(b.key()));
    sorted
}

/// One conversation per labelled tuple: the SELECT prompt as the user turn
/// and the teacher's answer as the assistant turn.
pub fn build_sft(
    tuples: &[Tuple],
    knowledge: &Knowledge,
    template: &PromptTemplate,
    with_explanation: bool,
) -> Result<SftBuild, DistillError> {
    let mut records = Vec::new();
    let mut skipped_abstain = 0;
    for t in sorted_by_key(tuples) {
        let r = labelled(t, knowledge)?;
        let Some(index) = r.choice.index() else {
            skipped_abstain += 1;
            continue;
        };
        let answer = if with_explanation {
            let text = r
                .explanation
                .as_deref()
                .ok_or_else(|| DistillError::MissingExplanation(t.key().to_string()))?;
            ending_with_answer(text, index)
        } else {
            canonical_answer(index)
        };
        records.push(SftRecord {
            messages: vec![
                Message {
                    role: Role::User,
                    content: render_select(t, template).text,
                },
                Message {
                    role: Role::Assistant,
                    content: answer,
                },
            ],
            tuple_key: t.key().to_string(),
        });
    }
    if skipped_abstain > 0 {
        tracing::warn!(skipped_abstain, "abstained tuples left out of SFT records");
    }
    Ok(SftBuild {
        records,
        skipped_abstain,
    })
}

/// Splits each labelled tuple into one (query, candidate) record per
/// candidate. Tuples without knowledge or with an abstention are skipped.
pub fn build_pairwise(tuples: &[Tuple], knowledge: &Knowledge) -> Vec<PairwiseRecord> {
    let mut out = Vec::new();
    for t in tuples {
        let Some(r) = knowledge.get(t.key()) else {
            continue;
        };
        if r.choice.is_abstain() && r.positives.is_none() {
            continue;
        }
        let positives = r.positive_indices();
        let text_a = serialize_entity(t.query());
        for (i, c) in t.candidates().iter().enumerate() {
            out.push(PairwiseRecord {
                query_id: t.key().to_string(),
                candidate_id: c.entity.id.clone(),
                text_a: text_a.clone(),
                text_b: serialize_entity(&c.entity),
                label: u8::from(positives.contains(&(i + 1))),
                score: c.score,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectedMode {
    #[default]
    OneRandom,
    All,
}

impl std::str::FromStr for RejectedMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "one_random" | "one-random" => Ok(Self::OneRandom),
            "all" => Ok(Self::All),
            other => Err(format!("unknown rejected mode {other}")),
        }
    }
}

/// Answer options of a tuple in index order: `[0]` (when offered) then
/// every candidate.
fn options(t: &Tuple, template: &PromptTemplate) -> Vec<usize> {
    let first = if template.none_option_enabled { 0 } else { 1 };
    (first..=t.len()).collect()
}

/// Preference pairs: the teacher's answer is chosen, another option is
/// rejected. Abstained tuples are skipped.
pub fn build_dpo(
    tuples: &[Tuple],
    knowledge: &Knowledge,
    template: &PromptTemplate,
    rejected_mode: RejectedMode,
    seed: u64,
) -> Result<Vec<DpoRecord>, DistillError> {
    let mut out = Vec::new();
    for t in sorted_by_key(tuples) {
        let r = labelled(t, knowledge)?;
        let Some(chosen_index) = r.choice.index() else {
            continue;
        };
        let alternatives: Vec<usize> = options(t, template)
            .into_iter()
            .filter(|&i| i != chosen_index)
            .collect();
        if alternatives.is_empty() {
            return Err(DistillError::NoAlternative(t.key().to_string()));
        }
        let (chosen, explained) = match r.explanation.as_deref() {
            Some(text) => (ending_with_answer(text, chosen_index), true),
            None => (canonical_answer(chosen_index), false),
        };
        let rejected_text = |i: usize| {
            if explained {
                reject_justification(i)
            } else {
                canonical_answer(i)
            }
        };
        let picked = match rejected_mode {
            RejectedMode::All => alternatives,
            RejectedMode::OneRandom => {
                let mut rng = seed::rng_for(seed, t.key());
                vec![alternatives[rng.gen_range(0..alternatives.len())]]
            }
        };
        let prompt = render_select(t, template).text;
        for i in picked {
            out.push(DpoRecord {
                prompt: prompt.clone(),
                chosen: chosen.clone(),
                rejected: rejected_text(i),
                tuple_key: t.key().to_string(),
            });
        }
    }
    Ok(out)
}

fn reject_justification(index: usize) -> String {
    crate::teaching::justification(Choice::from_index(index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Sft,
    Dpo,
    Grpo,
}

impl std::str::FromStr for RecordKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sft" => Ok(Self::Sft),
            "dpo" => Ok(Self::Dpo),
            "grpo" => Ok(Self::Grpo),
            other => Err(format!("unknown record kind {other}")),
        }
    }
}

/// Fine-tuning settings handed to an external trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lora_rank: u32,
    pub lora_alpha: u32,
    pub epochs: u32,
    pub learning_rate: f64,
    pub grad_accum: u32,
}

impl Hyperparams {
    pub fn defaults_for(kind: RecordKind) -> Self {
        match kind {
            RecordKind::Sft => Self {
                lora_rank: 16,
                lora_alpha: 16,
                epochs: 3,
                learning_rate: 2e-4,
                grad_accum: 4,
            },
            RecordKind::Dpo | RecordKind::Grpo => Self {
                lora_rank: 8,
                lora_alpha: 16,
                epochs: 1,
                learning_rate: 2e-4,
                grad_accum: 4,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingJob {
    pub data_file: PathBuf,
    pub record_kind: RecordKind,
    pub record_count: usize,
    pub hyperparameters: Hyperparams,
}

/// Writes a training-job manifest for `records_path` to `out` and returns it.
/// The data file is recorded relative to the manifest when it sits below it.
pub fn export_training_job(
    records_path: &Path,
    kind: RecordKind,
    hyperparams: Option<Hyperparams>,
    out: &Path,
) -> Result<TrainingJob, DistillError> {
    if !records_path.is_file() {
        return Err(DistillError::MissingRecords(records_path.to_path_buf()));
    }
    let io = |path: &Path, e: std::io::Error| DistillError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let text = std::fs::read_to_string(records_path).map_err(|e| io(records_path, e))?;
    let job_dir = out.parent().unwrap_or(Path::new(""));
    let data_file = match records_path.strip_prefix(job_dir) {
        Ok(rel) if !job_dir.as_os_str().is_empty() => rel.to_path_buf(),
        _ => records_path.to_path_buf(),
    };
    let job = TrainingJob {
        data_file,
        record_kind: kind,
        record_count: text.lines().filter(|l| !l.trim().is_empty()).count(),
        hyperparameters: hyperparams.unwrap_or_else(|| Hyperparams::defaults_for(kind)),
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    let mut json = serde_json::to_string_pretty(&job).expect("serializable");
    json.push('\n');
    std::fs::write(out, json).map_err(|e| io(out, e))?;
    Ok(job)
}
