//! Entity collections, tuple files and entity serialization.

mod blocking;

pub use blocking::{block_lexical, TfIdfVectorizer};

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};
use crate::model::{Choice, Entity, ModelError, ScoredCandidate, Tuple};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: record has no id")]
    MissingId { path: PathBuf, line: usize },
    #[error("{path}:{line}: duplicate entity id {id}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("{path}:{line}: unknown entity id {id:?}")]
    UnknownEntityId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("{path}:{line}: {source}")]
    Invalid {
        path: PathBuf,
        line: usize,
        #[source]
        source: ModelError,
    },
    #[error("blocking corpus is empty")]
    EmptyCorpus,
    #[error("top_n must be at least 1")]
    InvalidTopN,
    #[error("dataset {name}: {what} is {actual}, manifest says {expected}")]
    CountMismatch {
        name: String,
        what: &'static str,
        expected: usize,
        actual: usize,
    },
}

impl From<JsonlError> for IngestError {
    fn from(e: JsonlError) -> Self {
        match e {
            JsonlError::Io { path, source } => IngestError::Io { path, source },
            JsonlError::Parse {
                path,
                line,
                message,
            } => IngestError::Parse {
                path,
                line,
                message,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityFormat {
    Csv,
    Jsonl,
}

impl EntityFormat {
    /// Guesses the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") | Some("ndjson") => EntityFormat::Jsonl,
            _ => EntityFormat::Csv,
        }
    }
}

/// Loads an entity collection; attribute order follows the source columns.
pub fn load_entities(path: &Path, format: EntityFormat) -> Result<Vec<Entity>, IngestError> {
    let entities = match format {
        EntityFormat::Csv => load_csv(path)?,
        EntityFormat::Jsonl => load_jsonl(path)?,
    };
    let mut seen = HashMap::with_capacity(entities.len());
    for (line, e) in &entities {
        if seen.insert(e.id.clone(), *line).is_some() {
            return Err(IngestError::DuplicateId {
                path: path.to_path_buf(),
                line: *line,
                id: e.id.clone(),
            });
        }
    }
    Ok(entities.into_iter().map(|(_, e)| e).collect())
}

fn load_csv(path: &Path) -> Result<Vec<(usize, Entity)>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let id_col = headers
        .iter()
        .position(|h| h == "id")
        .ok_or_else(|| IngestError::MissingId {
            path: path.to_path_buf(),
            line: 1,
        })?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let id = record.get(id_col).unwrap_or("").trim();
        if id.is_empty() {
            return Err(IngestError::MissingId {
                path: path.to_path_buf(),
                line,
            });
        }
        let attributes = headers
            .iter()
            .zip(record.iter())
            .enumerate()
            .filter(|(i, _)| *i != id_col)
            .map(|(_, (name, value))| (name.to_string(), value.to_string()))
            .collect();
        let entity = Entity::new(id, attributes).map_err(|source| IngestError::Invalid {
            path: path.to_path_buf(),
            line,
            source,
        })?;
        out.push((line, entity));
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> IngestError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => IngestError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => IngestError::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

fn load_jsonl(path: &Path) -> Result<Vec<(usize, Entity)>, IngestError> {
    let io_err = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| IngestError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let object: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let mut id = None;
        let mut attributes = Vec::with_capacity(object.len());
        for (name, value) in object {
            let text = match value {
                serde_json::Value::String(s) => s,
                serde_json::Value::Null => String::new(),
                serde_json::Value::Bool(_) | serde_json::Value::Number(_) => value.to_string(),
                _ => return Err(parse_err(format!("field {name:?} is not a flat value"))),
            };
            if name == "id" {
                id = Some(text);
            } else {
                attributes.push((name, text));
            }
        }
        let id = match id {
            Some(id) if !id.trim().is_empty() => id,
            _ => {
                return Err(IngestError::MissingId {
                    path: path.to_path_buf(),
                    line: line_no,
                })
            }
        };
        let entity = Entity::new(id, attributes).map_err(|source| IngestError::Invalid {
            path: path.to_path_buf(),
            line: line_no,
            source,
        })?;
        out.push((line_no, entity));
    }
    Ok(out)
}

/// Renders an entity as `name1: value1; name2: value2`.
///
/// Empty values render as `name:`. Backslashes and semicolons inside values
/// are escaped (`\\`, `\;`) so distinct value lists never collide.
pub fn serialize_entity(e: &Entity) -> String {
    let mut out = String::new();
    for (i, (name, value)) in e.attributes.iter().enumerate() {
        if i > 0 {
            out.push_str("; ");
        }
        out.push_str(name);
        out.push(':');
        if !value.is_empty() {
            out.push(' ');
            for ch in value.chars() {
                if ch == '\\' || ch == ';' {
                    out.push('\\');
                }
                out.push(ch);
            }
        }
    }
    out
}

/// Length of the serialized entity in Unicode scalar values.
pub fn entity_length(e: &Entity) -> usize {
    serialize_entity(e).chars().count()
}

/// Entities of one source keyed by id.
#[derive(Debug, Clone, Default)]
pub struct EntityIndex {
    by_id: HashMap<String, Entity>,
}

impl EntityIndex {
    pub fn new(entities: &[Entity]) -> Self {
        Self {
            by_id: entities.iter().map(|e| (e.id.clone(), e.clone())).collect(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&Entity> {
        self.by_id.get(id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

/// Whether a training tuple was presumed to contain its match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Presumed {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRef {
    pub id: String,
    pub score: f64,
}

/// One line of a tuple file.
///
/// `truth` distinguishes absent (unlabelled) from `null`/`0` (no match among
/// the candidates); positive integers are 1-based candidate positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TupleRecord {
    pub query: String,
    pub candidates: Vec<CandidateRef>,
    #[serde(
        default,
        deserialize_with = "present_option",
        skip_serializing_if = "Option::is_none"
    )]
    pub truth: Option<Option<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub presumed: Option<Presumed>,
}

fn present_option<'de, D>(d: D) -> Result<Option<Option<usize>>, D::Error>
where
    D: Deserializer<'de>,
{
    Option::<usize>::deserialize(d).map(Some)
}

impl TupleRecord {
    pub fn from_tuple(t: &Tuple, presumed: Option<Presumed>) -> Self {
        Self {
            query: t.key().to_string(),
            candidates: t
                .candidates()
                .iter()
                .map(|c| CandidateRef {
                    id: c.entity.id.clone(),
                    score: c.score,
                })
                .collect(),
            truth: t.truth_choice().map(|c| match c {
                Choice::Candidate(i) => Some(i),
                _ => None,
            }),
            presumed,
        }
    }

    fn truth_choice(&self) -> Option<Choice> {
        self.truth.map(|t| Choice::from_index(t.unwrap_or(0)))
    }
}

/// A tuple plus its optional presumed label, as read from a tuple file.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTuple {
    pub tuple: Tuple,
    pub presumed: Option<Presumed>,
}

/// Loads a tuple file, resolving query ids in `queries` and candidate ids in
/// `corpus`.
pub fn load_tuples(
    path: &Path,
    queries: &EntityIndex,
    corpus: &EntityIndex,
) -> Result<Vec<LoadedTuple>, IngestError> {
    let mut out = Vec::new();
    for (line, record) in jsonl::read::<TupleRecord>(path)? {
        let unknown = |id: &str| IngestError::UnknownEntityId {
            path: path.to_path_buf(),
            line,
            id: id.to_string(),
        };
        let query = queries
            .get(&record.query)
            .ok_or_else(|| unknown(&record.query))?;
        let mut candidates = Vec::with_capacity(record.candidates.len());
        for c in &record.candidates {
            let entity = corpus.get(&c.id).ok_or_else(|| unknown(&c.id))?;
            candidates.push(ScoredCandidate::new(entity.clone(), c.score));
        }
        let tuple =
            Tuple::new(query.clone(), candidates, record.truth_choice()).map_err(|source| {
                IngestError::Invalid {
                    path: path.to_path_buf(),
                    line,
                    source,
                }
            })?;
        out.push(LoadedTuple {
            tuple,
            presumed: record.presumed,
        });
    }
    Ok(out)
}

/// Plain tuples from a tuple file.
pub fn load_plain_tuples(
    path: &Path,
    queries: &EntityIndex,
    corpus: &EntityIndex,
) -> Result<Vec<Tuple>, IngestError> {
    Ok(load_tuples(path, queries, corpus)?
        .into_iter()
        .map(|l| l.tuple)
        .collect())
}

pub fn write_tuples(path: &Path, tuples: &[Tuple]) -> Result<(), JsonlError> {
    let records: Vec<TupleRecord> = tuples
        .iter()
        .map(|t| TupleRecord::from_tuple(t, None))
        .collect();
    jsonl::write(path, &records)
}

/// Reads `(id_a, id_b)` match pairs from a CSV whose first two columns hold
/// the ids.
pub fn load_matches(path: &Path) -> Result<Vec<(String, String)>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        match (record.get(0), record.get(1)) {
            (Some(a), Some(b)) if !a.is_empty() && !b.is_empty() => {
                out.push((a.to_string(), b.to_string()))
            }
            _ => {
                return Err(IngestError::Parse {
                    path: path.to_path_buf(),
                    line: record.position().map(|p| p.line() as usize).unwrap_or(0),
                    message: "expected two id columns".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Labels each tuple from a set of known matching pairs: the matched
/// candidate when it was retrieved, otherwise "no match".
pub fn attach_truth(tuples: Vec<Tuple>, matches: &[(String, String)]) -> Vec<Tuple> {
    let mut by_query: HashMap<&str, BTreeSet<&str>> = HashMap::new();
    for (a, b) in matches {
        by_query.entry(a.as_str()).or_default().insert(b.as_str());
    }
    tuples
        .into_iter()
        .map(|t| {
            let truth = by_query
                .get(t.key())
                .and_then(|ids| ids.iter().filter_map(|id| t.position_of(id)).min())
                .map(Choice::Candidate)
                .unwrap_or(Choice::NoMatch);
            t.with_truth(Some(truth))
                .expect("position comes from the tuple itself")
        })
        .collect()
}

/// Describes a two-source dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    /// Query source first, candidate source second.
    pub source_paths: [PathBuf; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<EntityFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_count_per_source: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_count: Option<usize>,
    /// CSV of known matching `(id_a, id_b)` pairs, for evaluation only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matches_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub queries: Vec<Entity>,
    pub corpus: Vec<Entity>,
    pub matches: Option<Vec<(String, String)>>,
}

impl Dataset {
    pub fn query_index(&self) -> EntityIndex {
        EntityIndex::new(&self.queries)
    }

    pub fn corpus_index(&self) -> EntityIndex {
        EntityIndex::new(&self.corpus)
    }

    /// Distinct attribute names across both sources.
    pub fn attribute_count(&self) -> usize {
        self.queries
            .iter()
            .chain(&self.corpus)
            .flat_map(|e| e.attributes.iter().map(|(n, _)| n.as_str()))
            .collect::<BTreeSet<_>>()
            .len()
    }
}

impl DatasetManifest {
    /// Resolves relative paths against `base`.
    pub fn rebase(mut self, base: &Path) -> Self {
        let fix = |p: &PathBuf| {
            if p.is_relative() {
                base.join(p)
            } else {
                p.clone()
            }
        };
        self.source_paths = [fix(&self.source_paths[0]), fix(&self.source_paths[1])];
        self.matches_path = self.matches_path.as_ref().map(fix);
        self
    }

    /// Loads both sources and checks every declared count.
    pub fn load(&self) -> Result<Dataset, IngestError> {
        let load =
            |p: &Path| load_entities(p, self.format.unwrap_or_else(|| EntityFormat::from_path(p)));
        let queries = load(&self.source_paths[0])?;
        let corpus = load(&self.source_paths[1])?;
        let matches = self.matches_path.as_deref().map(load_matches).transpose()?;
        let dataset = Dataset {
            name: self.name.clone(),
            queries,
            corpus,
            matches,
        };
        let mismatch = |what, expected, actual| IngestError::CountMismatch {
            name: self.name.clone(),
            what,
            expected,
            actual,
        };
        if let Some([a, b]) = self.entity_count_per_source {
            if a != dataset.queries.len() {
                return Err(mismatch(
                    "entity count of source 1",
                    a,
                    dataset.queries.len(),
                ));
            }
            if b != dataset.corpus.len() {
                return Err(mismatch(
                    "entity count of source 2",
                    b,
                    dataset.corpus.len(),
                ));
            }
        }
        if let Some(n) = self.attribute_count {
            let actual = dataset.attribute_count();
            if n != actual {
                return Err(mismatch("attribute count", n, actual));
            }
        }
        if let Some(n) = self.duplicate_count {
            let actual = dataset.matches.as_ref().map_or(0, Vec::len);
            if n != actual {
                return Err(mismatch("duplicate count", n, actual));
            }
        }
        Ok(dataset)
    }
}
