//! Synthetic product datasets for demos and tests.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{DatasetManifest, EntityFormat};
use crate::model::{Choice, Entity, ScoredCandidate, Tuple};
use crate::seed;

const BRANDS: &[&str] = &[
    "Acme", "Borealis", "Cobalt", "Dynamo", "Everline", "Fjord", "Gryphon", "Halcyon", "Ionic",
    "Juniper", "Kestrel", "Lumen",
];
const KINDS: &[&str] = &[
    "wireless mouse",
    "mechanical keyboard",
    "usb hub",
    "monitor stand",
    "webcam",
    "headset",
    "external ssd",
    "laptop sleeve",
    "desk lamp",
    "power bank",
];
const COLORS: &[&str] = &["black", "white", "silver", "blue", "red", "graphite"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Entities per source.
    pub entities: usize,
    /// Fraction of query entities with a counterpart in the corpus.
    pub match_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            entities: 200,
            match_rate: 0.7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub queries: Vec<Entity>,
    pub corpus: Vec<Entity>,
    pub matches: Vec<(String, String)>,
}

struct Product {
    brand: &'static str,
    kind: &'static str,
    color: &'static str,
    model: String,
    price: f64,
}

fn product(rng: &mut impl Rng) -> Product {
    Product {
        brand: BRANDS.choose(rng).expect("non-empty"),
        kind: KINDS.choose(rng).expect("non-empty"),
        color: COLORS.choose(rng).expect("non-empty"),
        model: format!(
            "{}{}-{}",
            rng.gen_range(b'A'..=b'Z') as char,
            rng.gen_range(b'A'..=b'Z') as char,
            rng.gen_range(100..1000)
        ),
        price: rng.gen_range(900..20000) as f64 / 100.0,
    }
}

/// Same brand and kind, different model.
fn sibling(p: &Product, rng: &mut impl Rng) -> Product {
    let mut s = product(rng);
    s.brand = p.brand;
    s.kind = p.kind;
    s
}

fn query_entity(id: String, p: &Product) -> Entity {
    Entity {
        id,
        attributes: vec![
            (
                "title".into(),
                format!("{} {} {} {}", p.brand, p.kind, p.model, p.color),
            ),
            ("brand".into(), p.brand.into()),
            ("price".into(), format!("{:.2}", p.price)),
        ],
    }
}

/// The corpus describes products differently: lower-case title in another
/// word order, brand folded into the title, price rounded.
fn corpus_entity(id: String, p: &Product, rng: &mut impl Rng) -> Entity {
    let title = if rng.gen_bool(0.5) {
        format!("{} {} ({}) - {}", p.brand, p.model, p.color, p.kind)
    } else {
        format!("{} {} by {} {}", p.kind, p.model, p.brand, p.color)
    };
    let price = (p.price * rng.gen_range(0.95..1.05)).round();
    Entity {
        id,
        attributes: vec![
            ("name".into(), title.to_lowercase()),
            ("price".into(), format!("{price:.0}")),
        ],
    }
}

pub fn generate(config: &SynthConfig) -> SynthDataset {
    let mut rng = seed::rng_for(config.seed, "synth");
    let mut queries = Vec::with_capacity(config.entities);
    let mut corpus_products = Vec::with_capacity(config.entities);
    for i in 0..config.entities {
        let p = product(&mut rng);
        let id = format!("a{:05}", i + 1);
        queries.push(query_entity(id.clone(), &p));
        let counterpart = if rng.gen_bool(config.match_rate.clamp(0.0, 1.0)) {
            Some(id)
        } else {
            None
        };
        let shown = match counterpart {
            Some(_) => p,
            None => sibling(&p, &mut rng),
        };
        corpus_products.push((shown, counterpart));
    }
    corpus_products.shuffle(&mut rng);
    let mut corpus = Vec::with_capacity(corpus_products.len());
    let mut matches = Vec::new();
    for (j, (p, counterpart)) in corpus_products.iter().enumerate() {
        let id = format!("b{:05}", j + 1);
        corpus.push(corpus_entity(id.clone(), p, &mut rng));
        if let Some(q) = counterpart {
            matches.push((q.clone(), id));
        }
    }
    matches.sort();
    SynthDataset {
        queries,
        corpus,
        matches,
    }
}

fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn entities_csv(path: &Path, entities: &[Entity]) -> csv::Result<()> {
    let mut header = vec!["id"];
    header.extend(
        entities
            .first()
            .map(|e| {
                e.attributes
                    .iter()
                    .map(|(n, _)| n.as_str())
                    .collect::<Vec<_>>()
            })
            .unwrap_or_default(),
    );
    write_csv(
        path,
        &header,
        entities.iter().map(|e| {
            std::iter::once(e.id.clone())
                .chain(e.attributes.iter().map(|(_, v)| v.clone()))
                .collect()
        }),
    )
}

impl SynthDataset {
    /// Writes `queries.csv`, `corpus.csv`, `matches.csv` and `dataset.json`
    /// into `dir`, returning the path of the dataset manifest.
    pub fn write(&self, dir: &Path, name: &str) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let csv_err = |e: csv::Error| std::io::Error::other(e.to_string());
        entities_csv(&dir.join("queries.csv"), &self.queries).map_err(csv_err)?;
        entities_csv(&dir.join("corpus.csv"), &self.corpus).map_err(csv_err)?;
        write_csv(
            &dir.join("matches.csv"),
            &["id_a", "id_b"],
            self.matches.iter().map(|(a, b)| vec![a.clone(), b.clone()]),
        )
        .map_err(csv_err)?;
        let manifest = DatasetManifest {
            name: name.to_string(),
            source_paths: ["queries.csv".into(), "corpus.csv".into()],
            format: Some(EntityFormat::Csv),
            entity_count_per_source: Some([self.queries.len(), self.corpus.len()]),
            attribute_count: None,
            duplicate_count: Some(self.matches.len()),
            matches_path: Some("matches.csv".into()),
        };
        let path = dir.join("dataset.json");
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&manifest).expect("serializable") + "\n",
        )?;
        Ok(path)
    }
}

/// A pool of `n` scored tuples with `k` candidates each, where a
/// `positive_rate` share contains the true match. The true match scores in
/// `[0.6, 1.0)` while every other candidate scores in `[0.1, 0.75)`, so
/// tuples with a match tend to have higher maximum scores.
pub fn scored_pool(n: usize, k: usize, positive_rate: f64, seed: u64) -> Vec<Tuple> {
    let mut rng = seed::rng_for(seed, "scored_pool");
    let positives = crate::selection::fraction_count(positive_rate, n);
    let mut flags: Vec<bool> = (0..n).map(|i| i < positives).collect();
    flags.shuffle(&mut rng);
    flags
        .into_iter()
        .enumerate()
        .map(|(i, positive)| {
            let key = format!("q{i:05}");
            let truth_slot = positive.then(|| rng.gen_range(0..k));
            let candidates: Vec<ScoredCandidate> = (0..k)
                .map(|j| {
                    let score = if Some(j) == truth_slot {
                        rng.gen_range(0.6..1.0)
                    } else {
                        rng.gen_range(0.1..0.75)
                    };
                    let entity = Entity::from_pairs(
                        &format!("{key}-c{j}"),
                        &[("title", &format!("item {j}"))],
                    )
                    .expect("valid entity");
                    ScoredCandidate::new(entity, score)
                })
                .collect();
            let truth = truth_slot.map_or(Choice::NoMatch, |j| Choice::Candidate(j + 1));
            let query = Entity::from_pairs(&key, &[("title", "query")]).expect("valid entity");
            Tuple::new(query, candidates, Some(truth)).expect("valid tuple")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_consistent() {
        let cfg = SynthConfig {
            entities: 50,
            ..SynthConfig::default()
        };
        let a = generate(&cfg);
        let b = generate(&cfg);
        assert_eq!(a.queries, b.queries);
        assert_eq!(a.matches, b.matches);
        assert_eq!(a.corpus.len(), 50);
        let corpus_ids: std::collections::HashSet<_> =
            a.corpus.iter().map(|e| e.id.as_str()).collect();
        for (q, c) in &a.matches {
            assert!(q.starts_with('a'));
            assert!(corpus_ids.contains(c.as_str()));
        }
        assert!(a.matches.len() > 20 && a.matches.len() < 50);
    }

    #[test]
    fn written_dataset_loads() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&SynthConfig {
            entities: 30,
            ..SynthConfig::default()
        });
        let path = data.write(dir.path(), "synthetic").unwrap();
        let manifest: DatasetManifest =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let loaded = manifest.rebase(dir.path()).load().unwrap();
        assert_eq!(loaded.queries, data.queries);
        assert_eq!(loaded.corpus, data.corpus);
        assert_eq!(loaded.matches.unwrap(), data.matches);
    }

    #[test]
    fn scored_pool_rate() {
        let pool = scored_pool(200, 5, 0.1, 3);
        let positives = pool
            .iter()
            .filter(|t| t.truth_choice().unwrap().is_positive())
            .count();
        assert_eq!(positives, 20);
    }
}
