//! SELECT / MATCH prompt rendering and completion parsing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::serialize_entity;
use crate::model::{Choice, Entity, InstructionKind, Tuple};

pub const NONE_OPTION_TEXT: &str = "None of the above";

pub const DEFAULT_SELECT_TASK: &str = "Select the correct match for the query record from the \
candidate records below. Each candidate is numbered in square brackets. Answer with the number \
of the matching candidate in square brackets, or [0] if none of them refers to the same \
real-world entity.\n\nQuery: {query}\n\nCandidates:\n{candidates}";

pub const DEFAULT_MATCH_TASK: &str = "Is this pair a match? Do the two records below refer to \
the same real-world entity? Answer with Yes or No.\n\nRecord A: {query}\nRecord B: {candidate}";

pub const EXPLANATION_SUFFIX: &str = "\n\nJustify your choice in one or two sentences, then end \
your answer with the number of the chosen candidate in square brackets.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("template task_text lacks the {0} placeholder")]
    MissingPlaceholder(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Select,
    Match,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub mode: PromptMode,
    #[serde(default)]
    pub instruction_kind: InstructionKind,
    pub task_text: String,
    #[serde(rename = "none_option", default = "default_true")]
    pub none_option_enabled: bool,
}

fn default_true() -> bool {
    true
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::select(InstructionKind::AnswerOnly)
    }
}

impl PromptTemplate {
    pub fn select(instruction_kind: InstructionKind) -> Self {
        Self {
            mode: PromptMode::Select,
            instruction_kind,
            task_text: DEFAULT_SELECT_TASK.to_string(),
            none_option_enabled: true,
        }
    }

    pub fn pair() -> Self {
        Self {
            mode: PromptMode::Match,
            instruction_kind: InstructionKind::AnswerOnly,
            task_text: DEFAULT_MATCH_TASK.to_string(),
            none_option_enabled: false,
        }
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        let required: &[&'static str] = match self.mode {
            PromptMode::Select => &["{query}", "{candidates}"],
            PromptMode::Match => &["{query}", "{candidate}"],
        };
        for p in required {
            if !self.task_text.contains(p) {
                return Err(TemplateError::MissingPlaceholder(p));
            }
        }
        Ok(())
    }

    fn suffix(&self) -> &'static str {
        match self.instruction_kind {
            InstructionKind::AnswerOnly => "",
            InstructionKind::AnswerPlusExplanation => EXPLANATION_SUFFIX,
        }
    }

    /// Characters of task text and suffix outside the placeholders.
    fn boilerplate_len(&self, placeholders: &[&str]) -> usize {
        let mut n = self.task_text.chars().count() + self.suffix().chars().count();
        for p in placeholders {
            n -= self.task_text.matches(p).count() * p.chars().count();
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub tuple_key: String,
    pub length_chars: usize,
}

impl RenderedPrompt {
    fn new(text: String, tuple_key: &str) -> Self {
        let length_chars = text.chars().count();
        Self {
            text,
            tuple_key: tuple_key.to_string(),
            length_chars,
        }
    }
}

/// Substitutes `{name}` placeholders in one pass, so placeholder-like text
/// inside substituted values is left alone.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'scan: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        for (name, value) in values {
            let token_len = name.len() + 2;
            if tail.len() >= token_len
                && tail.as_bytes()[token_len - 1] == b'}'
                && &tail[1..token_len - 1] == *name
            {
                out.push_str(value);
                rest = &tail[token_len..];
                continue 'scan;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

/// The bracketed form of an answer index.
pub fn canonical_answer(index: usize) -> String {
    format!("[{index}]")
}

/// Renders the numbered candidate block of a SELECT prompt.
pub fn candidate_block<'a>(
    entities: impl IntoIterator<Item = &'a Entity>,
    none_option: bool,
) -> String {
    let mut lines: Vec<String> = entities
        .into_iter()
        .enumerate()
        .map(|(i, e)| format!("{} {}", canonical_answer(i + 1), serialize_entity(e)))
        .collect();
    if none_option {
        lines.push(format!("{} {NONE_OPTION_TEXT}", canonical_answer(0)));
    }
    lines.join("\n")
}

/// SELECT prompt over an explicit candidate list (used when re-asking about a
/// subset of a tuple's candidates).
pub fn render_select_entities<'a>(
    key: &str,
    query: &Entity,
    candidates: impl IntoIterator<Item = &'a Entity>,
    template: &PromptTemplate,
) -> RenderedPrompt {
    debug_assert_eq!(template.mode, PromptMode::Select);
    let query_text = serialize_entity(query);
    let block = candidate_block(candidates, template.none_option_enabled);
    let mut text = fill(
        &template.task_text,
        &[("query", &query_text), ("candidates", &block)],
    );
    text.push_str(template.suffix());
    RenderedPrompt::new(text, key)
}

pub fn render_select(t: &Tuple, template: &PromptTemplate) -> RenderedPrompt {
    render_select_entities(
        t.key(),
        t.query(),
        t.candidates().iter().map(|c| &c.entity),
        template,
    )
}

/// Predicted SELECT prompt length from component lengths, without rendering.
pub fn estimate_select_length(t: &Tuple, template: &PromptTemplate) -> usize {
    let count = |s: &str| s.chars().count();
    let k = t.len();
    let mut candidates: usize = t
        .candidates()
        .iter()
        .enumerate()
        .map(|(i, c)| count(&canonical_answer(i + 1)) + 1 + count(&serialize_entity(&c.entity)))
        .sum();
    let mut lines = k;
    if template.none_option_enabled {
        candidates += count(&canonical_answer(0)) + 1 + count(NONE_OPTION_TEXT);
        lines += 1;
    }
    candidates += lines - 1;
    let uses = |p: &str| template.task_text.matches(p).count();
    template.boilerplate_len(&["{query}", "{candidates}"])
        + uses("{query}") * count(&serialize_entity(t.query()))
        + uses("{candidates}") * candidates
}

pub fn render_match(q: &Entity, c: &Entity, template: &PromptTemplate) -> RenderedPrompt {
    debug_assert_eq!(template.mode, PromptMode::Match);
    let mut text = fill(
        &template.task_text,
        &[
            ("query", &serialize_entity(q)),
            ("candidate", &serialize_entity(c)),
        ],
    );
    text.push_str(template.suffix());
    RenderedPrompt::new(text, &q.id)
}

/// Iterates over `[digits]` tokens as `(start, end, value)`; values that do
/// not fit in `usize` come back as `None`.
fn bracketed(text: &str) -> impl Iterator<Item = (usize, usize, Option<usize>)> + '_ {
    let bytes = text.as_bytes();
    let mut i = 0;
    std::iter::from_fn(move || {
        while i < bytes.len() {
            if bytes[i] == b'[' {
                let start = i;
                let mut j = i + 1;
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                if j > start + 1 && j < bytes.len() && bytes[j] == b']' {
                    i = j + 1;
                    return Some((start, j + 1, text[start + 1..j].parse().ok()));
                }
            }
            i += 1;
        }
        None
    })
}

/// Reads the first bracketed integer as the answer; anything above `k` or no
/// bracket at all is an abstention.
pub fn parse_choice(completion: &str, k: usize) -> Choice {
    match bracketed(completion).next() {
        Some((_, _, Some(m))) if m <= k => Choice::from_index(m),
        _ => Choice::Abstain,
    }
}

/// Number of `[digits]` tokens in a completion.
pub fn count_bracketed(completion: &str) -> usize {
    bracketed(completion).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YesNo {
    Yes,
    No,
    Abstain,
}

pub fn parse_yesno(completion: &str) -> YesNo {
    let token: String = completion
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    match token.as_str() {
        "yes" => YesNo::Yes,
        "no" => YesNo::No,
        _ => YesNo::Abstain,
    }
}
