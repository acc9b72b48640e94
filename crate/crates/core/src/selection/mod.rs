//! Unsupervised split of a tuple pool into training and testing sets.
//!
//! Ranking strategies score each tuple by its blocking similarities and take
//! the top `p` and bottom `n` fractions as presumed positives and negatives.
//! Clustering strategies group the per-tuple score histograms into two
//! clusters and sample from each. `random` and `sampled` are baselines; the
//! latter peeks at ground truth.

mod cluster;

pub use cluster::{kmeans2, ward2, Split};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Presumed;
use crate::model::{Choice, Tuple};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("selection pool is empty")]
    EmptyPool,
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
    #[error("strategy requires ground truth on every tuple (missing on {0})")]
    TruthRequired(String),
    #[error("no true negatives available to sample")]
    NoNegativesAvailable,
    #[error("need {needed} true {kind} tuples, pool has {available}")]
    NotEnoughLabelled {
        kind: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("cannot form two clusters from {0} tuple(s)")]
    ClusterCollapse(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    RankMax,
    RankTop2,
    ClusterKmeans,
    ClusterAgglomerative,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    #[serde(rename = "p")]
    pub p_fraction: f64,
    #[serde(rename = "n")]
    pub n_fraction: f64,
    pub bins: usize,
    pub seed: u64,
    /// Fraction of the input pool eligible for selection; the rest goes
    /// straight to testing.
    pub pool_fraction: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::RankMax,
            p_fraction: 0.075,
            n_fraction: 0.025,
            bins: 10,
            seed: 0,
            pool_fraction: 1.0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        let total = self.p_fraction + self.n_fraction;
        if self.p_fraction < 0.0 || self.n_fraction < 0.0 || !(total > 0.0 && total <= 1.0) {
            return Err(SelectionError::InvalidConfig(format!(
                "need 0 < p + n <= 1, got p={} n={}",
                self.p_fraction, self.n_fraction
            )));
        }
        if self.bins < 2 {
            return Err(SelectionError::InvalidConfig("bins must be >= 2".into()));
        }
        if !(self.pool_fraction > 0.0 && self.pool_fraction <= 1.0) {
            return Err(SelectionError::InvalidConfig(
                "pool_fraction must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// A training tuple together with its presumed label (unset for `random`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTuple {
    pub tuple: Tuple,
    pub presumed: Option<Presumed>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    /// Sorted by tuple key.
    pub training: Vec<TrainingTuple>,
    /// Sorted by tuple key.
    pub testing: Vec<Tuple>,
    /// Positive ratio of the training set, when every training tuple has truth.
    pub positive_ratio: Option<f64>,
    pub warnings: Vec<String>,
}

impl SelectionOutcome {
    pub fn presumed(&self, label: Presumed) -> impl Iterator<Item = &Tuple> {
        self.training
            .iter()
            .filter(move |t| t.presumed == Some(label))
            .map(|t| &t.tuple)
    }

    pub fn training_tuples(&self) -> Vec<Tuple> {
        self.training.iter().map(|t| t.tuple.clone()).collect()
    }
}

/// Highest candidate score.
pub fn score_max(t: &Tuple) -> f64 {
    t.scores().fold(f64::NEG_INFINITY, f64::max)
}

/// Mean of the two highest candidate scores (the only score when there is
/// a single candidate).
pub fn score_top2(t: &Tuple) -> f64 {
    let mut top = [f64::NEG_INFINITY; 2];
    for s in t.scores() {
        if s > top[0] {
            top = [s, top[0]];
        } else if s > top[1] {
            top[1] = s;
        }
    }
    if t.len() == 1 {
        top[0]
    } else {
        (top[0] + top[1]) / 2.0
    }
}

/// Counts of scores per equal-width bin over `[0, 1]`; the last bin is closed.
pub fn histogram_vector(t: &Tuple, bins: usize) -> Vec<usize> {
    assert!(bins >= 2, "bins must be >= 2");
    let mut counts = vec![0; bins];
    for s in t.scores() {
        let bin = ((s * bins as f64).floor() as usize).min(bins - 1);
        counts[bin] += 1;
    }
    counts
}

/// Share of tuples whose truth is a candidate (not "no match").
pub fn positive_ratio(tuples: &[Tuple]) -> Result<f64, SelectionError> {
    if tuples.is_empty() {
        return Ok(0.0);
    }
    let mut positives = 0usize;
    for t in tuples {
        match t.truth_choice() {
            Some(c) => positives += usize::from(c.is_positive()),
            None => return Err(SelectionError::TruthRequired(t.key().to_string())),
        }
    }
    Ok(positives as f64 / tuples.len() as f64)
}

/// `ceil(fraction * n)`, robust to products like `0.075 * 40` landing a hair
/// above an integer.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

fn sample_indices(rng: &mut impl rand::Rng, from: &[usize], amount: usize) -> Vec<usize> {
    let amount = amount.min(from.len());
    index::sample(rng, from.len(), amount)
        .into_iter()
        .map(|i| from[i])
        .collect()
}

pub fn select(
    pool: &[Tuple],
    config: &SelectionConfig,
) -> Result<SelectionOutcome, SelectionError> {
    if pool.is_empty() {
        return Err(SelectionError::EmptyPool);
    }
    config.validate()?;

    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| pool[a].key().cmp(pool[b].key()));
    let mut rng = seed::rng_for(config.seed, "selection");

    let eligible: Vec<usize> = if config.pool_fraction < 1.0 {
        let mut picked = sample_indices(
            &mut rng,
            &order,
            fraction_count(config.pool_fraction, pool.len()),
        );
        picked.sort_unstable();
        picked
    } else {
        order.clone()
    };
    let size = eligible.len();
    let want_pos = fraction_count(config.p_fraction, size);
    let want_neg = fraction_count(config.n_fraction, size);

    let mut warnings = Vec::new();
    let mut labels: Vec<(usize, Option<Presumed>)> = Vec::new();
    match config.strategy {
        Strategy::RankMax | Strategy::RankTop2 => {
            let score = if config.strategy == Strategy::RankMax {
                score_max
            } else {
                score_top2
            };
            let scores: Vec<f64> = eligible.par_iter().map(|&i| score(&pool[i])).collect();
            let mut ranked: Vec<(usize, f64)> = eligible.iter().copied().zip(scores).collect();
            // eligible is in key order, so a stable sort breaks ties by key
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
            let pos = want_pos.min(size);
            let neg = want_neg.min(size - pos);
            labels.extend(
                ranked[..pos]
                    .iter()
                    .map(|&(i, _)| (i, Some(Presumed::Positive))),
            );
            labels.extend(
                ranked[size - neg..]
                    .iter()
                    .map(|&(i, _)| (i, Some(Presumed::Negative))),
            );
        }
        Strategy::ClusterKmeans | Strategy::ClusterAgglomerative => {
            if size < 2 {
                return Err(SelectionError::ClusterCollapse(size));
            }
            let points: Vec<Vec<f64>> = eligible
                .par_iter()
                .map(|&i| {
                    histogram_vector(&pool[i], config.bins)
                        .into_iter()
                        .map(|c| c as f64)
                        .collect()
                })
                .collect();
            let split = if config.strategy == Strategy::ClusterKmeans {
                kmeans2(&points, &mut rng)
            } else {
                ward2(&points)
            };
            if split.repaired {
                warnings.push("one cluster was empty; moved the farthest tuple into it".into());
            }
            let members = |label: usize| -> Vec<usize> {
                eligible
                    .iter()
                    .zip(&split.labels)
                    .filter(|(_, &l)| l == label)
                    .map(|(&i, _)| i)
                    .collect()
            };
            let (c0, c1) = (members(0), members(1));
            let mean_max =
                |c: &[usize]| c.iter().map(|&i| score_max(&pool[i])).sum::<f64>() / c.len() as f64;
            let (positive, negative) = if mean_max(&c1) > mean_max(&c0) {
                (c1, c0)
            } else {
                (c0, c1)
            };
            let pos = sample_indices(&mut rng, &positive, want_pos);
            let neg = sample_indices(&mut rng, &negative, want_neg);
            labels.extend(pos.into_iter().map(|i| (i, Some(Presumed::Positive))));
            labels.extend(neg.into_iter().map(|i| (i, Some(Presumed::Negative))));
        }
        Strategy::Random => {
            let amount = fraction_count(config.p_fraction + config.n_fraction, size);
            labels.extend(
                sample_indices(&mut rng, &eligible, amount)
                    .into_iter()
                    .map(|i| (i, None)),
            );
        }
        Strategy::Sampled => {
            let mut positives = Vec::new();
            let mut negatives = Vec::new();
            for &i in &eligible {
                match pool[i].truth_choice() {
                    Some(Choice::Candidate(_)) => positives.push(i),
                    Some(_) => negatives.push(i),
                    None => return Err(SelectionError::TruthRequired(pool[i].key().to_string())),
                }
            }
            if want_neg > 0 && negatives.is_empty() {
                return Err(SelectionError::NoNegativesAvailable);
            }
            for (kind, need, have) in [
                ("positive", want_pos, &positives),
                ("negative", want_neg, &negatives),
            ] {
                if have.len() < need {
                    return Err(SelectionError::NotEnoughLabelled {
                        kind,
                        needed: need,
                        available: have.len(),
                    });
                }
            }
            let pos = sample_indices(&mut rng, &positives, want_pos);
            let neg = sample_indices(&mut rng, &negatives, want_neg);
            labels.extend(pos.into_iter().map(|i| (i, Some(Presumed::Positive))));
            labels.extend(neg.into_iter().map(|i| (i, Some(Presumed::Negative))));
        }
    }

    let mut in_training = vec![None; pool.len()];
    for (i, presumed) in labels {
        in_training[i] = Some(presumed);
    }
    let mut training = Vec::new();
    let mut testing = Vec::new();
    for &i in &order {
        match in_training[i] {
            Some(presumed) => training.push(TrainingTuple {
                tuple: pool[i].clone(),
                presumed,
            }),
            None => testing.push(pool[i].clone()),
        }
    }
    let training_tuples: Vec<Tuple> = training.iter().map(|t| t.tuple.clone()).collect();
    let positive_ratio = positive_ratio(&training_tuples).ok();
    Ok(SelectionOutcome {
        training,
        testing,
        positive_ratio,
        warnings,
    })
}
