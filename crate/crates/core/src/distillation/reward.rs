//! Rewards for scoring SELECT completions during policy optimization.

use serde::{Deserialize, Serialize};

use super::DistillError;
use crate::model::Choice;
use crate::prompting::{count_bracketed, parse_choice};

/// `0` without bracketed indices, `1 / br` otherwise (so a single bracketed
/// index scores 1).
pub fn reward_digit(completion: &str) -> f64 {
    match count_bracketed(completion) {
        0 => 0.0,
        br => 1.0 / br as f64,
    }
}

/// Favors short answers: with `L` the character count after trimming,
/// `0` if empty, `1` if `L <= 2`, `3 / L` otherwise.
pub fn reward_length(completion: &str) -> f64 {
    match completion.trim().chars().count() {
        0 => 0.0,
        1 | 2 => 1.0,
        len => 3.0 / len as f64,
    }
}

/// `1` when the parsed answer equals `target`; abstentions score `0`.
pub fn reward_answer(completion: &str, target: Choice, k: usize) -> f64 {
    let parsed = parse_choice(completion, k);
    if !parsed.is_abstain() && parsed == target {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w1: 1.0 / 3.0,
            w2: 1.0 / 3.0,
            w3: 1.0 / 3.0,
        }
    }
}

impl RewardWeights {
    pub fn new(w1: f64, w2: f64, w3: f64) -> Result<Self, DistillError> {
        let w = Self { w1, w2, w3 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        let all = [self.w1, self.w2, self.w3];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) || all.iter().sum::<f64>() <= 0.0 {
            return Err(DistillError::InvalidWeights(format!("{all:?}")));
        }
        Ok(())
    }
}

impl std::str::FromStr for RewardWeights {
    type Err = DistillError;

    /// Parses `w1,w2,w3`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| DistillError::InvalidWeights(format!("{s}: {e}")))?;
        match parts.as_slice() {
            [a, b, c] => Self::new(*a, *b, *c),
            _ => Err(DistillError::InvalidWeights(format!(
                "expected three weights, got {s}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_digit: f64,
    pub r_length: f64,
    pub r_answer: f64,
    pub r_total: f64,
}

pub fn reward_breakdown(
    completion: &str,
    target: Choice,
    k: usize,
    weights: &RewardWeights,
) -> RewardBreakdown {
    let r_digit = reward_digit(completion);
    let r_length = reward_length(completion);
    let r_answer = reward_answer(completion, target, k);
    RewardBreakdown {
        r_digit,
        r_length,
        r_answer,
        r_total: weights.w1 * r_digit + weights.w2 * r_length + weights.w3 * r_answer,
    }
}

pub fn reward_total(completion: &str, target: Choice, k: usize, weights: &RewardWeights) -> f64 {
    reward_breakdown(completion, target, k, weights).r_total
}

/// A completion to score, as read from a completions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub tuple: String,
    pub completion: String,
    pub target: Choice,
    /// Candidate count of the tuple the completion answers.
    pub k: usize,
    /// Where the target came from, e.g. `teacher` or `truth`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_source: Option<String>,
}

/// One line of a GRPO score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoScore {
    pub tuple: String,
    pub completion: String,
    pub r_digit: f64,
    pub r_length: f64,
    pub r_answer: f64,
    pub r_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_source: Option<String>,
}

pub fn score_completions(records: &[CompletionRecord], weights: &RewardWeights) -> Vec<GrpoScore> {
    records
        .iter()
        .map(|r| {
            let b = reward_breakdown(&r.completion, r.target, r.k, weights);
            GrpoScore {
                tuple: r.tuple.clone(),
                completion: r.completion.clone(),
                r_digit: b.r_digit,
                r_length: b.r_length,
                r_answer: b.r_answer,
                r_total: b.r_total,
                target_source: r.target_source.clone(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SHORT: &str = "The correct answer is [2]";
    const TERSE: &str = "Answer: [2]";
    const WORDY: &str = "The correct answer is [2], since [1] and [4] are of a different brand.";

    #[test]
    fn component_values() {
        assert_eq!(reward_digit(SHORT), 1.0);
        assert!((reward_digit(WORDY) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(reward_digit("no brackets"), 0.0);

        assert!((reward_length(SHORT) - 0.12).abs() < 1e-15);
        assert!((reward_length(TERSE) - 3.0 / 11.0).abs() < 1e-15);
        assert!((reward_length(WORDY) - 3.0 / 70.0).abs() < 1e-15);
        assert_eq!(reward_length("  \n"), 0.0);
        assert_eq!(reward_length(" [2]\n"), 1.0);
        assert_eq!(reward_length("[12]"), 0.75);
        assert_eq!(reward_length("ab"), 1.0);

        assert_eq!(reward_answer(TERSE, Choice::Candidate(2), 5), 1.0);
        assert_eq!(reward_answer("Answer: [3]", Choice::Candidate(2), 5), 0.0);
        assert_eq!(reward_answer("unsure", Choice::Candidate(2), 5), 0.0);
        assert_eq!(reward_answer("[0]", Choice::NoMatch, 5), 1.0);
    }

    #[test]
    fn worked_totals() {
        let w = RewardWeights::default();
        let t = Choice::Candidate(2);
        // (1 + 3/25 + 1) / 3, (1 + 3/11 + 1) / 3, (1/3 + 3/70 + 1) / 3
        assert!((reward_total(SHORT, t, 5, &w) - 2.12 / 3.0).abs() < 1e-12);
        assert!((reward_total(TERSE, t, 5, &w) - (2.0 + 3.0 / 11.0) / 3.0).abs() < 1e-12);
        assert!((reward_total(WORDY, t, 5, &w) - (4.0 / 3.0 + 3.0 / 70.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn weights_parsing() {
        let w: RewardWeights = "0.333,0.333,0.333".parse().unwrap();
        assert_eq!(w.w2, 0.333);
        assert!("1,2".parse::<RewardWeights>().is_err());
        assert!("0,0,0".parse::<RewardWeights>().is_err());
        assert!("-1,1,1".parse::<RewardWeights>().is_err());
    }

    proptest! {
        #[test]
        fn convex_weights_stay_in_unit_interval(text in ".{0,80}", a in 0.0f64..1.0, b in 0.0f64..1.0, k in 1usize..10, m in 0usize..10) {
            let (w1, w2) = (a.min(b), (a.max(b) - a.min(b)));
            let w = RewardWeights { w1, w2, w3: 1.0 - w1 - w2 };
            let r = reward_total(&text, Choice::from_index(m), k, &w);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&r));
        }

        #[test]
        fn length_ignores_outer_whitespace(text in "[a-z\\[\\]0-9 ]{0,40}", pre in "[ \t\n]{0,5}", post in "[ \t\n]{0,5}") {
            prop_assert_eq!(reward_length(&text), reward_length(&format!("{pre}{text}{post}")));
        }

        #[test]
        fn digit_ignores_bracket_free_suffix(text in ".{0,40}", tail in "[a-z ,.]{0,30}") {
            let base = format!("{text} ");
            prop_assert_eq!(reward_digit(&base), reward_digit(&format!("{base}{tail}")));
        }

        #[test]
        fn total_is_monotone_in_components(d in 0.0f64..1.0, l in 0.0f64..1.0, a in 0.0f64..1.0, bump in 0.0f64..0.5) {
            let w = RewardWeights::default();
            let total = |d: f64, l: f64, a: f64| w.w1 * d + w.w2 * l + w.w3 * a;
            prop_assert!(total(d + bump, l, a) >= total(d, l, a));
            prop_assert!(total(d, l + bump, a) >= total(d, l, a));
            prop_assert!(total(d, l, a + bump) >= total(d, l, a));
        }
    }
}
