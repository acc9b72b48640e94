//! Domain types shared by every pipeline stage.
//!
//! A [`Tuple`] is the unit of annotation: one query entity together with the
//! scored candidates that blocking produced for it. Tuples are always kept in
//! canonical order (descending score, ties by candidate id), so a 1-based
//! candidate index means the same thing in every stage.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("tuple {key}: empty candidate list")]
    EmptyCandidateList { key: String },
    #[error("tuple {key}: duplicate candidate id {id}")]
    DuplicateCandidate { key: String, id: String },
    #[error("tuple {key}: score {score} of candidate {id} outside [0,1]")]
    ScoreOutOfRange { key: String, id: String, score: f64 },
    #[error("tuple {key}: truth index {index} exceeds candidate count {count}")]
    TruthOutOfRange {
        key: String,
        index: usize,
        count: usize,
    },
    #[error("tuple {key}: truth cannot be an abstention")]
    AbstainTruth { key: String },
    #[error("entity id must be non-empty")]
    EmptyEntityId,
    #[error("entity {id}: empty attribute name")]
    EmptyAttributeName { id: String },
}

/// A record described by ordered attribute name/value pairs.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Entity {
    pub id: String,
    pub attributes: Vec<(String, String)>,
}

impl Entity {
    pub fn new(
        id: impl Into<String>,
        attributes: Vec<(String, String)>,
    ) -> Result<Self, ModelError> {
        let id = id.into();
        if id.is_empty() {
            return Err(ModelError::EmptyEntityId);
        }
        if attributes.iter().any(|(name, _)| name.is_empty()) {
            return Err(ModelError::EmptyAttributeName { id });
        }
        Ok(Self { id, attributes })
    }

    /// Convenience constructor for literal attribute lists.
    pub fn from_pairs(id: &str, attributes: &[(&str, &str)]) -> Result<Self, ModelError> {
        Self::new(
            id,
            attributes
                .iter()
                .map(|(n, v)| (n.to_string(), v.to_string()))
                .collect(),
        )
    }
}

/// A blocking candidate and its similarity to the query.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub entity: Entity,
    pub score: f64,
}

impl ScoredCandidate {
    pub fn new(entity: Entity, score: f64) -> Self {
        Self { entity, score }
    }
}

/// An answer about a tuple: a 1-based candidate, "none of the above", or no
/// usable answer at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Choice {
    NoMatch,
    Candidate(usize),
    Abstain,
}

impl Choice {
    /// Builds a choice from the bracketed-index convention (0 = none).
    pub fn from_index(index: usize) -> Self {
        if index == 0 {
            Choice::NoMatch
        } else {
            Choice::Candidate(index)
        }
    }

    /// The bracketed index, or `None` for an abstention.
    pub fn index(self) -> Option<usize> {
        match self {
            Choice::NoMatch => Some(0),
            Choice::Candidate(i) => Some(i),
            Choice::Abstain => None,
        }
    }

    pub fn is_positive(self) -> bool {
        matches!(self, Choice::Candidate(_))
    }

    pub fn is_abstain(self) -> bool {
        matches!(self, Choice::Abstain)
    }
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index() {
            Some(i) => write!(f, "[{i}]"),
            None => f.write_str("abstain"),
        }
    }
}

impl Serialize for Choice {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.index() {
            Some(i) => s.serialize_u64(i as u64),
            None => s.serialize_str("abstain"),
        }
    }
}

impl<'de> Deserialize<'de> for Choice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(u64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(i) => Ok(Choice::from_index(i as usize)),
            Raw::Word(w) if w == "abstain" => Ok(Choice::Abstain),
            Raw::Word(w) => Err(de::Error::custom(format!("invalid choice {w:?}"))),
        }
    }
}

/// Ground truth for an evaluation tuple, stored by candidate id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Truth {
    NoMatch,
    Match(String),
}

/// A query entity with its canonically ordered candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct Tuple {
    query: Entity,
    candidates: Vec<ScoredCandidate>,
    truth: Option<Truth>,
}

fn canonical_order(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.entity.id.cmp(&b.entity.id))
}

/// Checks every tuple invariant and re-sorts candidates into canonical order.
///
/// `truth` is interpreted against the order of `candidates` as given.
pub fn validate_tuple(
    query: Entity,
    mut candidates: Vec<ScoredCandidate>,
    truth: Option<Choice>,
) -> Result<Tuple, ModelError> {
    let key = query.id.clone();
    if candidates.is_empty() {
        return Err(ModelError::EmptyCandidateList { key });
    }
    let mut seen = HashSet::with_capacity(candidates.len() + 1);
    seen.insert(query.id.as_str());
    for c in &candidates {
        if !seen.insert(c.entity.id.as_str()) {
            return Err(ModelError::DuplicateCandidate {
                key,
                id: c.entity.id.clone(),
            });
        }
        if !(0.0..=1.0).contains(&c.score) {
            return Err(ModelError::ScoreOutOfRange {
                key,
                id: c.entity.id.clone(),
                score: c.score,
            });
        }
    }
    let truth = match truth {
        None => None,
        Some(Choice::Abstain) => return Err(ModelError::AbstainTruth { key }),
        Some(Choice::NoMatch) => Some(Truth::NoMatch),
        Some(Choice::Candidate(i)) => {
            if i > candidates.len() {
                return Err(ModelError::TruthOutOfRange {
                    key,
                    index: i,
                    count: candidates.len(),
                });
            }
            Some(Truth::Match(candidates[i - 1].entity.id.clone()))
        }
    };
    candidates.sort_by(canonical_order);
    Ok(Tuple {
        query,
        candidates,
        truth,
    })
}

impl Tuple {
    pub fn new(
        query: Entity,
        candidates: Vec<ScoredCandidate>,
        truth: Option<Choice>,
    ) -> Result<Self, ModelError> {
        validate_tuple(query, candidates, truth)
    }

    /// Re-validates an existing tuple. Idempotent.
    pub fn validate(self) -> Result<Self, ModelError> {
        let truth = self.truth_choice();
        validate_tuple(self.query, self.candidates, truth)
    }

    /// The tuple key, i.e. the query id.
    pub fn key(&self) -> &str {
        &self.query.id
    }

    pub fn query(&self) -> &Entity {
        &self.query
    }

    pub fn candidates(&self) -> &[ScoredCandidate] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// 1-based candidate lookup.
    pub fn candidate(&self, index: usize) -> Option<&ScoredCandidate> {
        index.checked_sub(1).and_then(|i| self.candidates.get(i))
    }

    /// 1-based position of a candidate id in canonical order.
    pub fn position_of(&self, id: &str) -> Option<usize> {
        self.candidates
            .iter()
            .position(|c| c.entity.id == id)
            .map(|i| i + 1)
    }

    pub fn scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.candidates.iter().map(|c| c.score)
    }

    pub fn truth(&self) -> Option<&Truth> {
        self.truth.as_ref()
    }

    /// Truth expressed as a choice in canonical candidate order.
    pub fn truth_choice(&self) -> Option<Choice> {
        self.truth.as_ref().map(|t| match t {
            Truth::NoMatch => Choice::NoMatch,
            Truth::Match(id) => Choice::Candidate(
                self.position_of(id)
                    .expect("truth id is validated against candidates"),
            ),
        })
    }

    /// Returns a copy without ground truth.
    pub fn without_truth(&self) -> Self {
        Self {
            truth: None,
            ..self.clone()
        }
    }

    /// Sets (or clears) the truth using a canonical-order choice.
    pub fn with_truth(self, truth: Option<Choice>) -> Result<Self, ModelError> {
        validate_tuple(self.query, self.candidates, truth)
    }
}

/// Answer-only or answer-with-justification instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionKind {
    #[default]
    AnswerOnly,
    AnswerPlusExplanation,
}

/// One teacher verdict for one tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResult {
    #[serde(rename = "tuple")]
    pub tuple_key: String,
    pub choice: Choice,
    /// Every candidate a pairwise teacher marked positive; may exceed one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positives: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    pub completion: String,
    #[serde(rename = "teacher")]
    pub teacher_id: String,
    pub elapsed_s: f64,
}

impl AnnotationResult {
    pub fn abstain(tuple_key: &str, teacher_id: &str, completion: String, elapsed_s: f64) -> Self {
        Self {
            tuple_key: tuple_key.to_string(),
            choice: Choice::Abstain,
            positives: None,
            explanation: None,
            completion,
            teacher_id: teacher_id.to_string(),
            elapsed_s,
        }
    }

    /// Candidate indices labelled positive: the positive set when present,
    /// otherwise the single chosen candidate.
    pub fn positive_indices(&self) -> Vec<usize> {
        match &self.positives {
            Some(p) => p.clone(),
            None => match self.choice {
                Choice::Candidate(i) => vec![i],
                _ => Vec::new(),
            },
        }
    }

    /// Checks the result against the tuple it annotates.
    pub fn check(&self, tuple: &Tuple) -> Result<(), String> {
        if let Choice::Candidate(i) = self.choice {
            if i > tuple.len() {
                return Err(format!(
                    "tuple {}: choice {i} exceeds {} candidates",
                    tuple.key(),
                    tuple.len()
                ));
            }
        }
        if self.choice.is_abstain() && self.explanation.is_some() {
            return Err(format!(
                "tuple {}: abstention with explanation",
                tuple.key()
            ));
        }
        if let Some(p) = &self.positives {
            if p.iter().any(|&i| i == 0 || i > tuple.len()) {
                return Err(format!(
                    "tuple {}: positive index out of range",
                    tuple.key()
                ));
            }
        }
        Ok(())
    }
}

/// Teacher output for a set of tuples, keyed by tuple key.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Knowledge {
    pub results: BTreeMap<String, AnnotationResult>,
    pub teachers: Vec<String>,
    pub instruction: InstructionKind,
    /// Wall-clock seconds spent producing the knowledge.
    pub elapsed_s: f64,
}

impl Knowledge {
    pub fn new(teachers: Vec<String>, instruction: InstructionKind) -> Self {
        Self {
            teachers,
            instruction,
            ..Self::default()
        }
    }

    pub fn from_results(results: Vec<AnnotationResult>) -> Self {
        let mut teachers: Vec<String> = results.iter().map(|r| r.teacher_id.clone()).collect();
        teachers.sort();
        teachers.dedup();
        let instruction = if results.iter().any(|r| r.explanation.is_some()) {
            InstructionKind::AnswerPlusExplanation
        } else {
            InstructionKind::AnswerOnly
        };
        Self {
            results: results
                .into_iter()
                .map(|r| (r.tuple_key.clone(), r))
                .collect(),
            teachers,
            instruction,
            elapsed_s: 0.0,
        }
    }

    pub fn get(&self, key: &str) -> Option<&AnnotationResult> {
        self.results.get(key)
    }

    pub fn insert(&mut self, result: AnnotationResult) {
        self.results.insert(result.tuple_key.clone(), result);
    }

    pub fn len(&self) -> usize {
        self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }

    /// Results in tuple-key order.
    pub fn iter(&self) -> impl Iterator<Item = &AnnotationResult> {
        self.results.values()
    }

    pub fn abstain_count(&self) -> usize {
        self.iter().filter(|r| r.choice.is_abstain()).count()
    }

    /// Merges another knowledge set; entries in `other` win on key clashes.
    pub fn merge(&mut self, other: Knowledge) {
        for t in other.teachers {
            if !self.teachers.contains(&t) {
                self.teachers.push(t);
            }
        }
        self.results.extend(other.results);
        self.elapsed_s += other.elapsed_s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ent(id: &str) -> Entity {
        Entity::from_pairs(id, &[("title", id)]).unwrap()
    }

    fn tuple_with(scores: &[f64]) -> Result<Tuple, ModelError> {
        let cands = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoredCandidate::new(ent(&format!("e{}", i + 1)), s))
            .collect();
        Tuple::new(ent("q"), cands, None)
    }

    #[test]
    fn sorts_candidates_descending() {
        let t = tuple_with(&[0.74, 0.95, 0.90, 0.70, 0.76]).unwrap();
        let scores: Vec<f64> = t.scores().collect();
        assert_eq!(scores, vec![0.95, 0.90, 0.76, 0.74, 0.70]);
        let ids: Vec<&str> = t
            .candidates()
            .iter()
            .map(|c| c.entity.id.as_str())
            .collect();
        assert_eq!(ids, vec!["e2", "e3", "e5", "e1", "e4"]);
    }

    #[test]
    fn ties_break_by_id() {
        let cands = vec![
            ScoredCandidate::new(ent("b"), 0.5),
            ScoredCandidate::new(ent("a"), 0.5),
            ScoredCandidate::new(ent("c"), 0.7),
        ];
        let t = Tuple::new(ent("q"), cands, None).unwrap();
        let ids: Vec<&str> = t
            .candidates()
            .iter()
            .map(|c| c.entity.id.as_str())
            .collect();
        assert_eq!(ids, vec!["c", "a", "b"]);
    }

    #[test]
    fn rejects_empty_candidates() {
        assert_eq!(
            tuple_with(&[]),
            Err(ModelError::EmptyCandidateList { key: "q".into() })
        );
    }

    #[test]
    fn rejects_out_of_range_score() {
        assert!(matches!(
            tuple_with(&[0.3, 1.2]),
            Err(ModelError::ScoreOutOfRange { score, .. }) if score == 1.2
        ));
        assert!(matches!(
            tuple_with(&[f64::NAN]),
            Err(ModelError::ScoreOutOfRange { .. })
        ));
    }

    #[test]
    fn rejects_duplicates_and_query_as_candidate() {
        let dup = vec![
            ScoredCandidate::new(ent("a"), 0.5),
            ScoredCandidate::new(ent("a"), 0.4),
        ];
        assert!(matches!(
            Tuple::new(ent("q"), dup, None),
            Err(ModelError::DuplicateCandidate { id, .. }) if id == "a"
        ));
        let selfref = vec![ScoredCandidate::new(ent("q"), 0.5)];
        assert!(matches!(
            Tuple::new(ent("q"), selfref, None),
            Err(ModelError::DuplicateCandidate { .. })
        ));
    }

    #[test]
    fn truth_follows_candidate_through_reordering() {
        let cands = vec![
            ScoredCandidate::new(ent("low"), 0.1),
            ScoredCandidate::new(ent("high"), 0.9),
        ];
        let t = Tuple::new(ent("q"), cands, Some(Choice::Candidate(1))).unwrap();
        assert_eq!(t.truth(), Some(&Truth::Match("low".into())));
        assert_eq!(t.truth_choice(), Some(Choice::Candidate(2)));
    }

    #[test]
    fn truth_out_of_range() {
        let t = tuple_with(&[0.1; 5]).unwrap();
        assert!(matches!(
            t.with_truth(Some(Choice::Candidate(7))),
            Err(ModelError::TruthOutOfRange {
                index: 7,
                count: 5,
                ..
            })
        ));
    }

    #[test]
    fn validate_is_idempotent() {
        let t = tuple_with(&[0.42, 0.37, 0.24, 0.39, 0.99]).unwrap();
        let t = t.with_truth(Some(Choice::Candidate(3))).unwrap();
        let again = t.clone().validate().unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn entity_invariants() {
        assert_eq!(Entity::new("", vec![]), Err(ModelError::EmptyEntityId));
        assert!(Entity::from_pairs("x", &[("", "v")]).is_err());
        assert!(Entity::from_pairs("x", &[("a", "")]).is_ok());
    }

    #[test]
    fn choice_json() {
        assert_eq!(serde_json::to_string(&Choice::Candidate(3)).unwrap(), "3");
        assert_eq!(serde_json::to_string(&Choice::NoMatch).unwrap(), "0");
        assert_eq!(
            serde_json::to_string(&Choice::Abstain).unwrap(),
            "\"abstain\""
        );
        let c: Choice = serde_json::from_str("\"abstain\"").unwrap();
        assert_eq!(c, Choice::Abstain);
        assert!(serde_json::from_str::<Choice>("\"maybe\"").is_err());
    }
}
