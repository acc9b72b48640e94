//! A small TF-IDF cosine blocker so the pipeline runs without an embedding
//! service.

use std::collections::HashMap;

use rayon::prelude::*;

use super::{serialize_entity, IngestError};
use crate::model::{Entity, ScoredCandidate, Tuple};

type SparseVec = Vec<(usize, f64)>;

/// Token TF-IDF vectorizer fitted on a fixed document set.
#[derive(Debug, Clone)]
pub struct TfIdfVectorizer {
    vocabulary: HashMap<String, usize>,
    idf: Vec<f64>,
}

fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

impl TfIdfVectorizer {
    /// Smoothed idf: `ln((1 + n) / (1 + df)) + 1`.
    pub fn fit<'a>(documents: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocabulary = HashMap::new();
        let mut df: Vec<usize> = Vec::new();
        let mut n = 0usize;
        for doc in documents {
            n += 1;
            let mut seen: Vec<usize> = tokenize(doc)
                .map(|tok| {
                    let next = vocabulary.len();
                    *vocabulary.entry(tok).or_insert(next)
                })
                .collect();
            seen.sort_unstable();
            seen.dedup();
            for id in seen {
                if id >= df.len() {
                    df.resize(id + 1, 0);
                }
                df[id] += 1;
            }
        }
        let idf = df
            .iter()
            .map(|&d| ((1.0 + n as f64) / (1.0 + d as f64)).ln() + 1.0)
            .collect();
        Self { vocabulary, idf }
    }

    /// L2-normalised sparse vector sorted by term id. Unknown tokens are
    /// ignored.
    pub fn transform(&self, text: &str) -> SparseVec {
        let mut counts: HashMap<usize, f64> = HashMap::new();
        for tok in tokenize(text) {
            if let Some(&id) = self.vocabulary.get(&tok) {
                *counts.entry(id).or_default() += 1.0;
            }
        }
        let mut v: SparseVec = counts
            .into_iter()
            .map(|(id, tf)| (id, tf * self.idf[id]))
            .collect();
        v.sort_unstable_by_key(|(id, _)| *id);
        let norm = v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, w) in &mut v {
                *w /= norm;
            }
        }
        v
    }

    /// Cosine similarity of two normalised vectors, clamped into `[0, 1]`.
    pub fn cosine(a: &SparseVec, b: &SparseVec) -> f64 {
        let (mut i, mut j, mut dot) = (0, 0, 0.0);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    dot += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        dot.clamp(0.0, 1.0)
    }
}

/// Retrieves the `top_n` most similar corpus entities for every query.
///
/// The vectorizer is fitted on queries and corpus together. Corpus entities
/// sharing the query's id are skipped. Output is ordered by query id.
pub fn block_lexical(
    queries: &[Entity],
    corpus: &[Entity],
    top_n: usize,
) -> Result<Vec<Tuple>, IngestError> {
    if corpus.is_empty() {
        return Err(IngestError::EmptyCorpus);
    }
    if top_n == 0 {
        return Err(IngestError::InvalidTopN);
    }
    let query_text: Vec<String> = queries.iter().map(serialize_entity).collect();
    let corpus_text: Vec<String> = corpus.iter().map(serialize_entity).collect();
    let vectorizer = TfIdfVectorizer::fit(
        query_text
            .iter()
            .chain(corpus_text.iter())
            .map(String::as_str),
    );
    let corpus_vecs: Vec<SparseVec> = corpus_text
        .par_iter()
        .map(|t| vectorizer.transform(t))
        .collect();

    let mut tuples = queries
        .par_iter()
        .zip(query_text.par_iter())
        .filter_map(|(query, text)| {
            let qv = vectorizer.transform(text);
            let mut scored: Vec<(f64, &Entity)> = corpus
                .iter()
                .zip(&corpus_vecs)
                .filter(|(c, _)| c.id != query.id)
                .map(|(c, cv)| (TfIdfVectorizer::cosine(&qv, cv), c))
                .collect();
            if scored.is_empty() {
                return None;
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
            scored.truncate(top_n);
            let candidates = scored
                .into_iter()
                .map(|(s, c)| ScoredCandidate::new(c.clone(), s))
                .collect();
            Some(Tuple::new(query.clone(), candidates, None).expect("blocker output is valid"))
        })
        .collect::<Vec<_>>();
    tuples.sort_by(|a, b| a.key().cmp(b.key()));
    Ok(tuples)
}
