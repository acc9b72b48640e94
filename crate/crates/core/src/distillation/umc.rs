//! Disambiguation of pairwise matches.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::DistillError;
use crate::model::{AnnotationResult, Choice, Knowledge, ScoredCandidate, Tuple};
use crate::prompting::PromptTemplate;
use crate::teaching::{PairPrediction, Teacher};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchCandidate {
    #[serde(rename = "query")]
    pub query_id: String,
    #[serde(rename = "candidate")]
    pub candidate_id: String,
    pub score: f64,
}

fn umc_order(a: &MatchCandidate, b: &MatchCandidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.query_id.cmp(&b.query_id))
        .then_with(|| a.candidate_id.cmp(&b.candidate_id))
}

/// Unique Mapping Clustering: scan matches by decreasing score and keep one
/// only if neither of its entities is already matched.
pub fn disambiguate_umc(matches: &[MatchCandidate]) -> Vec<MatchCandidate> {
    let mut sorted: Vec<&MatchCandidate> = matches.iter().collect();
    sorted.sort_by(|a, b| umc_order(a, b));
    let mut queries = HashSet::new();
    let mut candidates = HashSet::new();
    let mut kept = Vec::new();
    for m in sorted {
        if queries.contains(m.query_id.as_str()) || candidates.contains(m.candidate_id.as_str()) {
            continue;
        }
        queries.insert(m.query_id.as_str());
        candidates.insert(m.candidate_id.as_str());
        kept.push(m.clone());
    }
    kept
}

/// Positive predictions as match candidates.
pub fn matches_from_predictions(predictions: &[PairPrediction]) -> Vec<MatchCandidate> {
    predictions
        .iter()
        .filter(|p| p.label == 1)
        .map(|p| MatchCandidate {
            query_id: p.query.clone(),
            candidate_id: p.candidate.clone(),
            score: p.score,
        })
        .collect()
}

/// Positive candidate positions per tuple, from classifier predictions.
pub fn positives_from_predictions(
    tuples: &[Tuple],
    predictions: &[PairPrediction],
) -> BTreeMap<String, Vec<usize>> {
    let positive: HashSet<(&str, &str)> = predictions
        .iter()
        .filter(|p| p.label == 1)
        .map(|p| (p.query.as_str(), p.candidate.as_str()))
        .collect();
    tuples
        .iter()
        .map(|t| {
            let set = t
                .candidates()
                .iter()
                .enumerate()
                .filter(|(_, c)| positive.contains(&(t.key(), c.entity.id.as_str())))
                .map(|(i, _)| i + 1)
                .collect();
            (t.key().to_string(), set)
        })
        .collect()
}

/// Resolves each tuple's classifier positives to a single answer: none
/// becomes "no match", one is taken as is, and several are re-asked as a
/// SELECT prompt over just those candidates.
///
/// The returned results carry the original positive set in `positives`, and
/// every choice is expressed in the original candidate numbering.
pub fn disambiguate_select(
    tuples: &[Tuple],
    pairwise_positives: &BTreeMap<String, Vec<usize>>,
    teacher: &dyn Teacher,
    template: &PromptTemplate,
) -> Result<Knowledge, DistillError> {
    let mut knowledge = Knowledge::new(vec![teacher.id().to_string()], template.instruction_kind);
    for t in tuples {
        let mut set: Vec<usize> = pairwise_positives
            .get(t.key())
            .cloned()
            .unwrap_or_default()
            .into_iter()
            .filter(|&i| i >= 1 && i <= t.len())
            .collect();
        set.sort_unstable();
        set.dedup();
        let direct = |choice: Choice, completion: String| AnnotationResult {
            tuple_key: t.key().to_string(),
            choice,
            positives: Some(set.clone()),
            explanation: None,
            completion,
            teacher_id: "pairwise".to_string(),
            elapsed_s: 0.0,
        };
        let result = match set.as_slice() {
            [] => direct(Choice::NoMatch, String::new()),
            [only] => direct(Choice::Candidate(*only), String::new()),
            _ => {
                let subset: Vec<ScoredCandidate> = set
                    .iter()
                    .map(|&i| t.candidate(i).expect("in range").clone())
                    .collect();
                let truth = t.truth_choice().map(|c| match c {
                    Choice::Candidate(i) => set
                        .iter()
                        .position(|&p| p == i)
                        .map_or(Choice::NoMatch, |j| Choice::Candidate(j + 1)),
                    other => other,
                });
                let sub = Tuple::new(t.query().clone(), subset, truth)
                    .expect("subset of a valid tuple is valid");
                let mut r = teacher.annotate(&sub, template)?;
                r.choice = match r.choice {
                    Choice::Candidate(j) => Choice::Candidate(set[j - 1]),
                    other => other,
                };
                r.positives = Some(set.clone());
                r
            }
        };
        knowledge.insert(result);
    }
    Ok(knowledge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Entity;
    use crate::teaching::{MockOracle, TeachError};
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

    fn m(q: &str, c: &str, s: f64) -> MatchCandidate {
        MatchCandidate {
            query_id: q.into(),
            candidate_id: c.into(),
            score: s,
        }
    }

    #[test]
    fn conflict_trace() {
        // accept 0.9, reject 0.85 (c1 taken), reject 0.8 (q1 taken)
        let kept = disambiguate_umc(&[m("q1", "c1", 0.9), m("q1", "c2", 0.8), m("q2", "c1", 0.85)]);
        assert_eq!(kept, vec![m("q1", "c1", 0.9)]);
    }

    #[test]
    fn no_conflict_and_empty() {
        let kept = disambiguate_umc(&[m("q1", "c1", 0.5), m("q2", "c2", 0.4)]);
        assert_eq!(kept.len(), 2);
        assert!(disambiguate_umc(&[]).is_empty());
    }

    #[test]
    fn ties_break_by_ids() {
        let kept = disambiguate_umc(&[m("q2", "c1", 0.5), m("q1", "c1", 0.5)]);
        assert_eq!(kept, vec![m("q1", "c1", 0.5)]);
    }

    fn arb_matches() -> impl Strategy<Value = Vec<MatchCandidate>> {
        prop::collection::vec((0usize..6, 0usize..6, 0u8..5), 0..25).prop_map(|v| {
            let mut seen = HashSet::new();
            v.into_iter()
                .filter(|(q, c, _)| seen.insert((*q, *c)))
                .map(|(q, c, s)| m(&format!("q{q}"), &format!("c{c}"), s as f64 / 4.0))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn output_is_one_to_one_subset(ms in arb_matches()) {
            let kept = disambiguate_umc(&ms);
            let qs: HashSet<_> = kept.iter().map(|k| &k.query_id).collect();
            let cs: HashSet<_> = kept.iter().map(|k| &k.candidate_id).collect();
            prop_assert_eq!(qs.len(), kept.len());
            prop_assert_eq!(cs.len(), kept.len());
            for k in &kept {
                prop_assert!(ms.contains(k));
            }
        }

        #[test]
        fn permutation_invariant(ms in arb_matches(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut shuffled = ms.clone();
            shuffled.shuffle(&mut crate::seed::rng(seed));
            prop_assert_eq!(disambiguate_umc(&ms), disambiguate_umc(&shuffled));
        }
    }

    struct Counting(MockOracle, AtomicUsize);

    impl Teacher for Counting {
        fn id(&self) -> &str {
            "counting"
        }
        fn annotate(
            &self,
            t: &Tuple,
            tpl: &PromptTemplate,
        ) -> Result<AnnotationResult, TeachError> {
            self.1.fetch_add(1, AtomicOrdering::SeqCst);
            self.0.annotate(t, tpl)
        }
    }

    fn tuple(truth: usize) -> Tuple {
        let cands = (1..=5)
            .map(|i| {
                ScoredCandidate::new(
                    Entity::from_pairs(&format!("c{i}"), &[("t", "x")]).unwrap(),
                    1.0 - i as f64 / 10.0,
                )
            })
            .collect();
        Tuple::new(
            Entity::from_pairs("q", &[("t", "q")]).unwrap(),
            cands,
            Some(Choice::from_index(truth)),
        )
        .unwrap()
    }

    #[test]
    fn select_over_positive_subset() {
        let teacher = Counting(MockOracle::new("m", 0.0, 0), AtomicUsize::new(0));
        let tpl = PromptTemplate::default();
        let run = |set: Vec<usize>| {
            let map = BTreeMap::from([("q".to_string(), set)]);
            disambiguate_select(&[tuple(2)], &map, &teacher, &tpl)
                .unwrap()
                .get("q")
                .unwrap()
                .clone()
        };
        let r = run(vec![2, 3]);
        assert_eq!(r.choice, Choice::Candidate(2));
        assert_eq!(r.positives, Some(vec![2, 3]));
        assert_eq!(teacher.1.load(AtomicOrdering::SeqCst), 1);

        let r = run(vec![4]);
        assert_eq!(r.choice, Choice::Candidate(4));
        assert_eq!(teacher.1.load(AtomicOrdering::SeqCst), 1);

        assert_eq!(run(vec![]).choice, Choice::NoMatch);
        assert_eq!(teacher.1.load(AtomicOrdering::SeqCst), 1);

        // truth outside the subset: the oracle answers none
        assert_eq!(run(vec![4, 5]).choice, Choice::NoMatch);
    }

    #[test]
    fn predictions_to_positions() {
        let preds = vec![
            PairPrediction {
                query: "q".into(),
                candidate: "c3".into(),
                label: 1,
                score: 0.7,
            },
            PairPrediction {
                query: "q".into(),
                candidate: "c1".into(),
                label: 0,
                score: 0.9,
            },
            PairPrediction {
                query: "q".into(),
                candidate: "c2".into(),
                label: 1,
                score: 0.8,
            },
        ];
        let map = positives_from_predictions(&[tuple(2)], &preds);
        assert_eq!(map["q"], vec![2, 3]);
        assert_eq!(matches_from_predictions(&preds).len(), 2);
    }
}
