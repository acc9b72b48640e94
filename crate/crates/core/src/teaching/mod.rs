//! Knowledge elicitation: teachers that annotate tuples, batching, and
//! committee voting.

mod endpoint;
mod mock;
mod slm;

pub use endpoint::{completion_text, ChatMessage, ChatRequest, LlmTeacher, RetryPolicy};
pub(crate) use mock::justification;
pub use mock::{MockOracle, MockPairClassifier};
pub use slm::{
    read_predictions, slm_teacher_annotate, work_dir_for, ClassifierSpec, CommandClassifier,
    PairInput, PairPrediction, PairwiseClassifier, ScoreThresholdClassifier, SlmOutcome, SlmRunner,
    SlmSplitPlan, SlmTiming,
};

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AnnotationResult, Choice, InstructionKind, Knowledge, Tuple};
use crate::prompting::{parse_choice, PromptTemplate};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TeachError {
    #[error("endpoint {endpoint} unreachable after {attempts} attempt(s): {message}")]
    EndpointUnreachable {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("malformed teacher response: {0}")]
    MalformedResponse(String),
    #[error("tuple {0} has no ground truth")]
    TruthRequired(String),
    #[error("cannot vote over results for different tuples ({0} vs {1})")]
    MixedTuples(String, String),
    #[error("vote over an empty result list")]
    EmptyVote,
    #[error("pairwise classifier unavailable: {0}")]
    ClassifierUnavailable(String),
    #[error(
        "{failed} of {total} annotations failed (threshold {threshold}); first error: {first}"
    )]
    BatchFailed {
        failed: usize,
        total: usize,
        threshold: f64,
        first: String,
    },
    #[error("invalid teacher descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Anything that can annotate a tuple with a SELECT answer.
pub trait Teacher: Send + Sync {
    fn id(&self) -> &str;
    fn annotate(
        &self,
        t: &Tuple,
        template: &PromptTemplate,
    ) -> Result<AnnotationResult, TeachError>;
}

/// Turns a raw completion into an annotation for `t`.
pub fn annotation_from_completion(
    t: &Tuple,
    template: &PromptTemplate,
    teacher_id: &str,
    completion: String,
    elapsed_s: f64,
) -> AnnotationResult {
    let choice = parse_choice(&completion, t.len());
    let explanation = match (template.instruction_kind, choice) {
        (_, Choice::Abstain) | (InstructionKind::AnswerOnly, _) => None,
        (InstructionKind::AnswerPlusExplanation, _) => Some(completion.trim().to_string()),
    };
    AnnotationResult {
        tuple_key: t.key().to_string(),
        choice,
        positives: None,
        explanation,
        completion,
        teacher_id: teacher_id.to_string(),
        elapsed_s,
    }
}

pub fn annotate(
    t: &Tuple,
    teacher: &dyn Teacher,
    template: &PromptTemplate,
) -> Result<AnnotationResult, TeachError> {
    teacher.annotate(t, template)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOptions {
    pub parallelism: usize,
    /// Largest tolerated fraction of failed tuples; failures below it become
    /// abstentions.
    pub failure_threshold: f64,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            parallelism: 1,
            failure_threshold: 0.05,
        }
    }
}

/// Annotates every tuple with up to `parallelism` requests in flight.
pub fn annotate_batch(
    tuples: &[Tuple],
    teacher: &dyn Teacher,
    template: &PromptTemplate,
    options: BatchOptions,
) -> Result<Knowledge, TeachError> {
    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallelism.max(1))
        .build()
        .map_err(|e| TeachError::InvalidDescriptor(e.to_string()))?;
    let outcomes: Vec<Result<AnnotationResult, TeachError>> = pool.install(|| {
        tuples
            .par_iter()
            .map(|t| teacher.annotate(t, template))
            .collect()
    });

    let mut knowledge = Knowledge::new(vec![teacher.id().to_string()], template.instruction_kind);
    let mut failed = 0usize;
    let mut first: Option<String> = None;
    for (t, outcome) in tuples.iter().zip(outcomes) {
        let result = match outcome {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(tuple = t.key(), error = %e, "annotation failed");
                failed += 1;
                first.get_or_insert_with(|| e.to_string());
                AnnotationResult::abstain(t.key(), teacher.id(), String::new(), 0.0)
            }
        };
        knowledge.insert(result);
    }
    if !tuples.is_empty() && failed as f64 / tuples.len() as f64 > options.failure_threshold {
        return Err(TeachError::BatchFailed {
            failed,
            total: tuples.len(),
            threshold: options.failure_threshold,
            first: first.unwrap_or_default(),
        });
    }
    knowledge.elapsed_s = started.elapsed().as_secs_f64();
    Ok(knowledge)
}

/// Majority vote over one tuple's results. Abstentions do not vote; ties are
/// broken uniformly at random among the tied choices (in sorted order).
pub fn vote(results: &[AnnotationResult], seed: u64) -> Result<AnnotationResult, TeachError> {
    let first = results.first().ok_or(TeachError::EmptyVote)?;
    if let Some(other) = results.iter().find(|r| r.tuple_key != first.tuple_key) {
        return Err(TeachError::MixedTuples(
            first.tuple_key.clone(),
            other.tuple_key.clone(),
        ));
    }
    let mut teachers: Vec<&str> = results.iter().map(|r| r.teacher_id.as_str()).collect();
    teachers.sort_unstable();
    teachers.dedup();
    let teacher_id = teachers.join("+");
    let elapsed_s = results.iter().map(|r| r.elapsed_s).sum();

    let mut tally: BTreeMap<Choice, usize> = BTreeMap::new();
    for r in results.iter().filter(|r| !r.choice.is_abstain()) {
        *tally.entry(r.choice).or_default() += 1;
    }
    let Some(&top) = tally.values().max() else {
        return Ok(AnnotationResult::abstain(
            &first.tuple_key,
            &teacher_id,
            String::new(),
            elapsed_s,
        ));
    };
    let tied: Vec<Choice> = tally
        .iter()
        .filter(|(_, &n)| n == top)
        .map(|(&c, _)| c)
        .collect();
    let winner = if tied.len() == 1 {
        tied[0]
    } else {
        tied[seed::rng(seed).gen_range(0..tied.len())]
    };
    let representative = results
        .iter()
        .filter(|r| r.choice == winner)
        .min_by(|a, b| {
            a.teacher_id
                .cmp(&b.teacher_id)
                .then_with(|| a.completion.cmp(&b.completion))
        })
        .expect("winner was voted for");
    Ok(AnnotationResult {
        teacher_id,
        elapsed_s,
        ..representative.clone()
    })
}

/// Members annotate independently and the committee returns the vote.
pub struct Committee {
    id: String,
    members: Vec<Box<dyn Teacher>>,
    seed: u64,
}

impl Committee {
    pub fn new(
        id: impl Into<String>,
        members: Vec<Box<dyn Teacher>>,
        seed: u64,
    ) -> Result<Self, TeachError> {
        if members.len() < 2 {
            return Err(TeachError::InvalidDescriptor(
                "a committee needs at least two members".into(),
            ));
        }
        Ok(Self {
            id: id.into(),
            members,
            seed,
        })
    }
}

impl Teacher for Committee {
    fn id(&self) -> &str {
        &self.id
    }

    fn annotate(
        &self,
        t: &Tuple,
        template: &PromptTemplate,
    ) -> Result<AnnotationResult, TeachError> {
        let mut results = Vec::with_capacity(self.members.len());
        let mut last_error = None;
        for m in &self.members {
            match m.annotate(t, template) {
                Ok(r) => results.push(r),
                Err(e) => {
                    results.push(AnnotationResult::abstain(
                        t.key(),
                        m.id(),
                        String::new(),
                        0.0,
                    ));
                    last_error = Some(e);
                }
            }
        }
        if let Some(e) = last_error {
            if results.iter().all(|r| r.choice.is_abstain()) {
                return Err(e);
            }
        }
        let mut voted = vote(&results, seed::derive_seed(self.seed, t.key()))?;
        voted.teacher_id = self.id.clone();
        Ok(voted)
    }
}

/// Serializable teacher configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TeacherDescriptor {
    LlmEndpoint {
        model_id: String,
        endpoint: String,
        #[serde(default)]
        temperature: f64,
        #[serde(default)]
        seed: u64,
    },
    MockOracle {
        model_id: String,
        #[serde(default)]
        noise_rate: f64,
        #[serde(default)]
        seed: u64,
        /// Simulated per-tuple latency reported as elapsed time.
        #[serde(default)]
        latency_s: f64,
    },
    Multi {
        model_id: String,
        members: Vec<TeacherDescriptor>,
        #[serde(default)]
        seed: u64,
    },
    SlmPipeline {
        model_id: String,
        #[serde(flatten)]
        plan: SlmSplitPlan,
        #[serde(default)]
        seed: u64,
    },
}

impl TeacherDescriptor {
    pub fn model_id(&self) -> &str {
        match self {
            TeacherDescriptor::LlmEndpoint { model_id, .. }
            | TeacherDescriptor::MockOracle { model_id, .. }
            | TeacherDescriptor::Multi { model_id, .. }
            | TeacherDescriptor::SlmPipeline { model_id, .. } => model_id,
        }
    }

    fn is_slm(&self) -> bool {
        matches!(self, TeacherDescriptor::SlmPipeline { .. })
    }

    pub fn validate(&self) -> Result<(), TeachError> {
        match self {
            TeacherDescriptor::Multi { members, .. } => {
                if members.len() < 2 {
                    return Err(TeachError::InvalidDescriptor(
                        "multi teacher needs at least two members".into(),
                    ));
                }
                let slm = members.iter().filter(|m| m.is_slm()).count();
                if slm != 0 && slm != members.len() {
                    return Err(TeachError::InvalidDescriptor(
                        "multi teacher members must share a model family".into(),
                    ));
                }
                if members
                    .iter()
                    .any(|m| matches!(m, TeacherDescriptor::Multi { .. }))
                {
                    return Err(TeachError::InvalidDescriptor(
                        "nested multi teachers".into(),
                    ));
                }
                members.iter().try_for_each(TeacherDescriptor::validate)
            }
            TeacherDescriptor::MockOracle { noise_rate, .. }
                if !(0.0..=1.0).contains(noise_rate) =>
            {
                Err(TeachError::InvalidDescriptor(format!(
                    "noise_rate {noise_rate} outside [0,1]"
                )))
            }
            TeacherDescriptor::SlmPipeline { plan, .. } => plan.validate(),
            _ => Ok(()),
        }
    }

    /// Replaces every endpoint URL, e.g. from an environment override.
    pub fn override_endpoint(&mut self, url: &str) {
        match self {
            TeacherDescriptor::LlmEndpoint { endpoint, .. } => *endpoint = url.to_string(),
            TeacherDescriptor::Multi { members, .. } => {
                members.iter_mut().for_each(|m| m.override_endpoint(url))
            }
            TeacherDescriptor::SlmPipeline { plan, .. } => plan.llm_teacher.override_endpoint(url),
            TeacherDescriptor::MockOracle { .. } => {}
        }
    }

    /// Sets the seed of this teacher; committee members and the LLM inside an
    /// SLM plan get sub-seeds derived from it.
    pub fn reseed(&mut self, new_seed: u64) {
        match self {
            TeacherDescriptor::LlmEndpoint { seed, .. }
            | TeacherDescriptor::MockOracle { seed, .. } => *seed = new_seed,
            TeacherDescriptor::Multi { seed, members, .. } => {
                *seed = new_seed;
                for (i, m) in members.iter_mut().enumerate() {
                    m.reseed(crate::seed::derive_seed(new_seed, &format!("member{i}")));
                }
            }
            TeacherDescriptor::SlmPipeline { seed, plan, .. } => {
                *seed = new_seed;
                plan.llm_teacher
                    .reseed(crate::seed::derive_seed(new_seed, "llm"));
            }
        }
    }

    /// Builds a per-tuple teacher. SLM pipelines annotate whole training
    /// sets and go through [`slm_teacher_annotate`] instead.
    pub fn build(&self) -> Result<Box<dyn Teacher>, TeachError> {
        self.validate()?;
        Ok(match self {
            TeacherDescriptor::LlmEndpoint {
                model_id,
                endpoint,
                temperature,
                ..
            } => Box::new(LlmTeacher::new(model_id, endpoint).with_temperature(*temperature)),
            TeacherDescriptor::MockOracle {
                model_id,
                noise_rate,
                seed,
                latency_s,
            } => Box::new(MockOracle::new(model_id, *noise_rate, *seed).with_latency(*latency_s)),
            TeacherDescriptor::Multi {
                model_id,
                members,
                seed,
            } => {
                let members = members
                    .iter()
                    .map(|m| m.build())
                    .collect::<Result<Vec<_>, _>>()?;
                Box::new(Committee::new(model_id, members, *seed)?)
            }
            TeacherDescriptor::SlmPipeline { .. } => {
                return Err(TeachError::InvalidDescriptor(
                    "slm_pipeline teachers annotate whole training sets".into(),
                ))
            }
        })
    }
}
