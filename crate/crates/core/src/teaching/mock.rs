//! Deterministic test doubles for teachers and pairwise classifiers.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use super::slm::{read_pair_inputs, write_predictions, PairPrediction, PairwiseClassifier};
use super::{TeachError, Teacher};
use crate::model::{AnnotationResult, Choice, InstructionKind, Tuple};
use crate::prompting::{canonical_answer, PromptTemplate};
use crate::seed;

/// Answers with the ground truth, flipped to a uniformly random wrong option
/// with probability `noise_rate`. Each tuple draws from its own stream
/// seeded by `(seed, tuple key)`.
#[derive(Debug, Clone)]
pub struct MockOracle {
    id: String,
    noise_rate: f64,
    seed: u64,
    latency_s: f64,
}

impl MockOracle {
    pub fn new(id: impl Into<String>, noise_rate: f64, seed: u64) -> Self {
        Self {
            id: id.into(),
            noise_rate,
            seed,
            latency_s: 0.0,
        }
    }

    /// Reports (without sleeping) this many seconds per annotation.
    pub fn with_latency(mut self, latency_s: f64) -> Self {
        self.latency_s = latency_s;
        self
    }

    pub fn choose(&self, t: &Tuple) -> Result<Choice, TeachError> {
        let truth = t
            .truth_choice()
            .ok_or_else(|| TeachError::TruthRequired(t.key().to_string()))?;
        let truth_index = truth.index().expect("truth is never an abstention");
        let mut rng = seed::rng_for(self.seed, t.key());
        if rng.gen::<f64>() >= self.noise_rate {
            return Ok(truth);
        }
        // uniform over {0..=k} \ {truth}
        let mut pick = rng.gen_range(0..t.len());
        if pick >= truth_index {
            pick += 1;
        }
        Ok(Choice::from_index(pick))
    }
}

pub(crate) fn justification(choice: Choice) -> String {
    match choice {
        Choice::NoMatch => format!(
            "None of the candidates describes the same entity as the query. Answer: {}",
            canonical_answer(0)
        ),
        Choice::Candidate(i) => format!(
            "Candidate {a} agrees with the query on its identifying attributes. Answer: {a}",
            a = canonical_answer(i)
        ),
        Choice::Abstain => String::new(),
    }
}

impl Teacher for MockOracle {
    fn id(&self) -> &str {
        &self.id
    }

    fn annotate(
        &self,
        t: &Tuple,
        template: &PromptTemplate,
    ) -> Result<AnnotationResult, TeachError> {
        let choice = self.choose(t)?;
        let index = choice.index().expect("oracle never abstains");
        let (completion, explanation) = match template.instruction_kind {
            InstructionKind::AnswerOnly => (format!("Answer: {}", canonical_answer(index)), None),
            InstructionKind::AnswerPlusExplanation => {
                let text = justification(choice);
                (text.clone(), Some(text))
            }
        };
        Ok(AnnotationResult {
            tuple_key: t.key().to_string(),
            choice,
            positives: None,
            explanation,
            completion,
            teacher_id: self.id.clone(),
            elapsed_s: self.latency_s,
        })
    }
}

/// Pairwise classifier that replays fixed labels, for tests. Pairs without a
/// known label are predicted negative.
#[derive(Debug, Clone, Default)]
pub struct MockPairClassifier {
    labels: HashMap<(String, String), u8>,
}

impl MockPairClassifier {
    pub fn new(labels: HashMap<(String, String), u8>) -> Self {
        Self { labels }
    }

    /// Labels every candidate of every tuple from its ground truth.
    pub fn from_truth(tuples: &[Tuple]) -> Self {
        let mut labels = HashMap::new();
        for t in tuples {
            let truth = t.truth_choice();
            for (i, c) in t.candidates().iter().enumerate() {
                let label = u8::from(truth == Some(Choice::Candidate(i + 1)));
                labels.insert((t.key().to_string(), c.entity.id.clone()), label);
            }
        }
        Self { labels }
    }
}

impl PairwiseClassifier for MockPairClassifier {
    fn train(&self, _pairs: &Path, model_dir: &Path) -> Result<(), TeachError> {
        std::fs::create_dir_all(model_dir).map_err(|e| TeachError::Io {
            path: model_dir.to_path_buf(),
            message: e.to_string(),
        })
    }

    fn predict(&self, pairs: &Path, _model_dir: &Path, out: &Path) -> Result<(), TeachError> {
        let predictions: Vec<PairPrediction> = read_pair_inputs(pairs)?
            .into_iter()
            .map(|p| {
                let label = *self
                    .labels
                    .get(&(p.query.clone(), p.candidate.clone()))
                    .unwrap_or(&0);
                PairPrediction {
                    query: p.query,
                    candidate: p.candidate,
                    label,
                    score: f64::from(label),
                }
            })
            .collect();
        write_predictions(out, &predictions)
    }
}
