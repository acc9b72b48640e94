//! Effectiveness metrics, prompt statistics and timing reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distillation::PairwiseRecord;
use crate::ingest::entity_length;
use crate::model::{Choice, Knowledge, Truth, Tuple};
use crate::prompting::{estimate_select_length, render_select, PromptTemplate};
use crate::teaching::SlmTiming;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("tuple {0} carries no ground truth")]
    TruthRequired(String),
    #[error("no prediction for tuple {0}")]
    KeyMismatch(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2tp / (2tp + fp + fn)`, equal to the harmonic mean of precision and
    /// recall but exact when the two coincide.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub dataset: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_dataset: Vec<DatasetScore>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub stage_timings: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn from_counts(counts: Counts) -> Self {
        Self {
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            counts,
            ..Self::default()
        }
    }

    /// Adds a named breakdown row and returns `self`.
    pub fn with_dataset(mut self, name: &str, other: &EvalReport) -> Self {
        self.per_dataset.push(DatasetScore {
            dataset: name.to_string(),
            precision: other.precision,
            recall: other.recall,
            f1: other.f1,
            counts: other.counts,
        });
        self
    }

    pub fn to_table(&self) -> String {
        let mut rows = vec![[
            "dataset".to_string(),
            "precision".into(),
            "recall".into(),
            "f1".into(),
            "tp".into(),
            "fp".into(),
            "fn".into(),
        ]];
        let row = |name: &str, p: f64, r: f64, f: f64, c: &Counts| {
            [
                name.to_string(),
                format!("{p:.4}"),
                format!("{r:.4}"),
                format!("{f:.4}"),
                c.tp.to_string(),
                c.fp.to_string(),
                c.fn_.to_string(),
            ]
        };
        for d in &self.per_dataset {
            rows.push(row(&d.dataset, d.precision, d.recall, d.f1, &d.counts));
        }
        rows.push(row(
            "all",
            self.precision,
            self.recall,
            self.f1,
            &self.counts,
        ));
        let mut out = aligned(&rows);
        if let Some(ratio) = self.positive_ratio {
            let _ = writeln!(out, "positive ratio: {ratio:.4}");
        }
        for (stage, secs) in &self.stage_timings {
            let _ = writeln!(out, "{stage}: {secs:.3}s");
        }
        out
    }
}

fn aligned<const N: usize>(rows: &[[String; N]]) -> String {
    let mut widths = [0usize; N];
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (cell, w))| {
                if i == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Scores SELECT answers against ground truth. A matching answer (including
/// agreeing on "no match") is a true positive; a wrong or spurious candidate
/// is a false positive; "no match" or an abstention on a tuple that has a
/// match is a false negative. A wrong candidate on a tuple that has a match
/// counts as both.
pub fn eval_select(
    predictions: &Knowledge,
    truth_tuples: &[Tuple],
) -> Result<EvalReport, EvalError> {
    let mut counts = Counts::default();
    for t in truth_tuples {
        let truth = t
            .truth_choice()
            .ok_or_else(|| EvalError::TruthRequired(t.key().to_string()))?;
        let predicted = predictions
            .get(t.key())
            .ok_or_else(|| EvalError::KeyMismatch(t.key().to_string()))?
            .choice;
        match (predicted, truth) {
            (p, t) if p == t => counts.tp += 1,
            (Choice::Candidate(_), Choice::Candidate(_)) => {
                counts.fp += 1;
                counts.fn_ += 1;
            }
            (Choice::Candidate(_), _) => counts.fp += 1,
            (_, Choice::Candidate(_)) => counts.fn_ += 1,
            _ => {}
        }
    }
    Ok(EvalReport::from_counts(counts))
}

/// Binary precision/recall over pair labels, positive class 1. The true label
/// of a pair comes from the ground truth of the tuple it belongs to.
pub fn eval_pairwise(
    records: &[PairwiseRecord],
    truth_tuples: &[Tuple],
) -> Result<EvalReport, EvalError> {
    let truths: HashMap<&str, &Truth> = truth_tuples
        .iter()
        .filter_map(|t| t.truth().map(|tr| (t.key(), tr)))
        .collect();
    let mut counts = Counts::default();
    for r in records {
        let truth = truths
            .get(r.query_id.as_str())
            .ok_or_else(|| EvalError::TruthRequired(r.query_id.clone()))?;
        let actual = matches!(truth, Truth::Match(id) if *id == r.candidate_id);
        match (r.label == 1, actual) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, true) => counts.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(EvalReport::from_counts(counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p95: f64,
}

/// Nearest-rank percentile: element `ceil(p/100 * n)` (1-based) of the
/// sorted values. `None` for an empty list.
pub fn nearest_rank(sorted: &[f64], p: u32) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = (p as usize * n).div_ceil(100).max(1);
    Some(sorted[rank.min(n) - 1])
}

fn percentiles(mut values: Vec<f64>) -> Percentiles {
    values.sort_by(f64::total_cmp);
    Percentiles {
        p50: nearest_rank(&values, 50).unwrap_or(0.0),
        p95: nearest_rank(&values, 95).unwrap_or(0.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptStats {
    pub tuple_count: usize,
    pub entity_length: Percentiles,
    pub candidate_count: Percentiles,
    pub estimated_prompt_length: Percentiles,
    pub observed_prompt_length: Percentiles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_rate: Option<f64>,
}

impl PromptStats {
    pub fn to_table(&self) -> String {
        let mut rows = vec![["statistic".to_string(), "50%".into(), "95%".into()]];
        for (name, p) in [
            ("|e_i|", self.entity_length),
            ("|C_i|", self.candidate_count),
            ("|EP_i|", self.estimated_prompt_length),
            ("|OP_i|", self.observed_prompt_length),
        ] {
            rows.push([name.to_string(), format!("{}", p.p50), format!("{}", p.p95)]);
        }
        let mut out = format!("tuples: {}\n", self.tuple_count);
        out.push_str(&aligned(&rows));
        if let Some(rate) = self.positive_rate {
            let _ = writeln!(out, "|P|: {rate:.4}");
        }
        out
    }
}

/// Length and size statistics of a tuple pool. Entity lengths cover every
/// query and candidate occurrence. The positive rate is reported only when
/// every tuple carries truth.
pub fn stats_report(tuples: &[Tuple], template: &PromptTemplate) -> PromptStats {
    let entity_lengths = tuples
        .iter()
        .flat_map(|t| std::iter::once(t.query()).chain(t.candidates().iter().map(|c| &c.entity)))
        .map(|e| entity_length(e) as f64)
        .collect();
    let positive_rate = tuples
        .iter()
        .map(|t| t.truth_choice().map(|c| c.is_positive()))
        .collect::<Option<Vec<bool>>>()
        .filter(|v| !v.is_empty())
        .map(|v| v.iter().filter(|&&p| p).count() as f64 / v.len() as f64);
    PromptStats {
        tuple_count: tuples.len(),
        entity_length: percentiles(entity_lengths),
        candidate_count: percentiles(tuples.iter().map(|t| t.len() as f64).collect()),
        estimated_prompt_length: percentiles(
            tuples
                .iter()
                .map(|t| estimate_select_length(t, template) as f64)
                .collect(),
        ),
        observed_prompt_length: percentiles(
            tuples
                .iter()
                .map(|t| render_select(t, template).length_chars as f64)
                .collect(),
        ),
        positive_rate,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlmBreakdown {
    pub x_fraction: f64,
    pub llm_portion_s: f64,
    pub finetune_s: f64,
    pub predict_s: f64,
    /// Measured LLM portion plus fine-tuning plus prediction.
    pub measured_total_s: f64,
    /// `x * llm_total + finetune + predict`, when the full LLM time is known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projected_total_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_total_s: Option<f64>,
    /// Projected SLM time over full LLM annotation time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingReport {
    pub stages: Vec<StageLog>,
    pub total_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slm: Option<SlmBreakdown>,
}

/// Time of an SLM teacher that sends `x_fraction` of the work to the LLM.
pub fn slm_annotation_time(
    llm_total_s: f64,
    x_fraction: f64,
    finetune_s: f64,
    predict_s: f64,
) -> f64 {
    x_fraction * llm_total_s + finetune_s + predict_s
}

pub fn timing_report(
    stages: &[StageLog],
    slm: Option<&SlmTiming>,
    llm_total_s: Option<f64>,
) -> TimingReport {
    let slm = slm.map(|s| {
        let projected =
            llm_total_s.map(|t| slm_annotation_time(t, s.x_fraction, s.finetune_s, s.predict_s));
        SlmBreakdown {
            x_fraction: s.x_fraction,
            llm_portion_s: s.llm_portion_s,
            finetune_s: s.finetune_s,
            predict_s: s.predict_s,
            measured_total_s: s.total_s(),
            projected_total_s: projected,
            llm_total_s,
            ratio: projected
                .zip(llm_total_s)
                .filter(|(_, t)| *t > 0.0)
                .map(|(p, t)| p / t),
        }
    });
    TimingReport {
        stages: stages.to_vec(),
        total_s: stages.iter().map(|s| s.seconds).sum(),
        slm,
    }
}

impl TimingReport {
    pub fn to_table(&self) -> String {
        if self.stages.is_empty() && self.slm.is_none() {
            return String::new();
        }
        let mut rows = vec![["stage".to_string(), "seconds".into()]];
        for s in &self.stages {
            rows.push([s.stage.clone(), format!("{:.3}", s.seconds)]);
        }
        if !self.stages.is_empty() {
            rows.push(["total".into(), format!("{:.3}", self.total_s)]);
        }
        if let Some(slm) = &self.slm {
            rows.push([
                "slm.llm_portion".into(),
                format!("{:.3}", slm.llm_portion_s),
            ]);
            rows.push(["slm.finetune".into(), format!("{:.3}", slm.finetune_s)]);
            rows.push(["slm.predict".into(), format!("{:.3}", slm.predict_s)]);
            rows.push(["slm.total".into(), format!("{:.3}", slm.measured_total_s)]);
            if let Some(r) = slm.ratio {
                rows.push(["slm/llm".into(), format!("{r:.3}")]);
            }
        }
        aligned(&rows)
    }
}

/// One point of an effectiveness-versus-time plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub label: String,
    pub f1: f64,
    pub seconds: f64,
}

pub fn write_tradeoff_csv(path: &Path, points: &[TradeoffPoint]) -> Result<(), EvalError> {
    let err = |e: csv::Error| EvalError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for p in points {
        w.serialize(p).map_err(err)?;
    }
    w.flush()
        .map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
}
