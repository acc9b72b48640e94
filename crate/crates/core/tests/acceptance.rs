//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::Rng;
use serde_json::json;

use distiller::distillation::{
    disambiguate_umc, reward_total, score_completions, CompletionRecord, DpoRecord, GrpoScore,
    MatchCandidate, Message, PairwiseRecord, RewardWeights, Role, SftRecord,
};
use distiller::evaluation::eval_select;
use distiller::ingest::{load_tuples, EntityIndex, Presumed};
use distiller::jsonl;
use distiller::model::{AnnotationResult, Choice, Entity, Knowledge, ScoredCandidate, Tuple};
use distiller::pipeline::{
    read_knowledge, run_pipeline, write_knowledge, write_tuple_records, RunOverrides,
};
use distiller::prompting::PromptTemplate;
use distiller::seed;
use distiller::selection::{
    histogram_vector, positive_ratio, score_max, score_top2, select, SelectionConfig,
    Strategy as SelectionStrategy,
};
use distiller::synth::{generate, scored_pool, SynthConfig};
use distiller::teaching::{
    annotate_batch, vote, BatchOptions, Committee, MockOracle, ScoreThresholdClassifier, SlmRunner,
    TeachError, Teacher,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tuple_with_scores(key: &str, scores: &[f64], truth: Option<Choice>) -> Tuple {
    let candidates = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            ScoredCandidate::new(
                Entity::from_pairs(&format!("{key}-e{}", i + 1), &[("title", "x")]).unwrap(),
                s,
            )
        })
        .collect();
    Tuple::new(
        Entity::from_pairs(key, &[("title", "q")]).unwrap(),
        candidates,
        truth,
    )
    .unwrap()
}

fn result(key: &str, choice: Choice, teacher: &str) -> AnnotationResult {
    AnnotationResult {
        tuple_key: key.into(),
        choice,
        positives: None,
        explanation: None,
        completion: String::new(),
        teacher_id: teacher.into(),
        elapsed_s: 0.0,
    }
}

fn reward_oracle() -> Outcome {
    let started = Instant::now();
    let w = RewardWeights::default();
    let target = Choice::Candidate(2);
    let cases = [
        ("The correct answer is [2]", 0.706),
        ("Answer: [2]", 0.757),
        (
            "The correct answer is [2], since [1] and [4] are of a different brand.",
            0.458,
        ),
    ];
    let got: Vec<f64> = cases
        .iter()
        .map(|(c, _)| reward_total(c, target, 5, &w))
        .collect();
    let ok = cases
        .iter()
        .zip(&got)
        .all(|((_, want), g)| (g - want).abs() <= 0.001);
    check(
        ok && started.elapsed() < Duration::from_secs(1),
        format!("totals {got:.4?} vs [0.706, 0.757, 0.458]"),
    )
}

fn selection_oracle() -> Outcome {
    let t1 = tuple_with_scores("t1", &[0.74, 0.95, 0.90, 0.70, 0.76], None);
    let t2 = tuple_with_scores("t2", &[0.42, 0.37, 0.24, 0.39, 0.99], None);
    let max = [score_max(&t1), score_max(&t2)];
    let top2 = [score_top2(&t1), score_top2(&t2)];
    let h1 = histogram_vector(&t1, 10);
    let h2 = histogram_vector(&t2, 10);
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let ok = close(max[0], 0.95)
        && close(max[1], 0.99)
        && close(top2[0], 0.925)
        && close(top2[1], 0.705)
        && h1 == [0, 0, 0, 0, 0, 0, 0, 3, 0, 2]
        && h2 == [0, 0, 1, 2, 1, 0, 0, 0, 0, 1];
    check(
        ok,
        format!("max {max:?}, top2 {top2:?}, hist {h1:?} {h2:?}"),
    )
}

fn voting_oracle() -> Outcome {
    let majority = vote(
        &[
            result("t", Choice::Candidate(2), "a"),
            result("t", Choice::Candidate(2), "b"),
            result("t", Choice::Candidate(3), "c"),
        ],
        0,
    )
    .map_err(|e| e.to_string())?;
    let tie = [
        result("t", Choice::Candidate(1), "a"),
        result("t", Choice::Candidate(2), "b"),
    ];
    let trials = 10_000u64;
    let mut ones = 0u64;
    for s in 0..trials {
        let fresh = seed::derive_seed(s, "tie");
        if vote(&tie, fresh).map_err(|e| e.to_string())?.choice == Choice::Candidate(1) {
            ones += 1;
        }
    }
    let share = ones as f64 / trials as f64;
    check(
        majority.choice == Choice::Candidate(2) && (share - 0.5).abs() <= 0.02,
        format!(
            "vote([2,2,3]) = {:?}, tie share of [1] = {share:.4}",
            majority.choice
        ),
    )
}

fn committee_amplification() -> Outcome {
    let tuples = scored_pool(5000, 5, 0.7, 17);
    let template = PromptTemplate::default();
    let members: Vec<Box<dyn Teacher>> = (0..3)
        .map(|i| {
            Box::new(MockOracle::new(
                format!("m{i}"),
                0.2,
                seed::derive_seed(17, &format!("member{i}")),
            )) as _
        })
        .collect();
    let single = MockOracle::new("m0", 0.2, seed::derive_seed(17, "member0"));
    let committee = Committee::new("committee", members, 17).map_err(|e| e.to_string())?;
    let accuracy = |teacher: &dyn Teacher| -> Result<f64, TeachError> {
        let k = annotate_batch(&tuples, teacher, &template, BatchOptions::default())?;
        let correct = tuples
            .iter()
            .filter(|t| k.get(t.key()).map(|r| r.choice) == t.truth_choice())
            .count();
        Ok(correct as f64 / tuples.len() as f64)
    };
    let a1 = accuracy(&single).map_err(|e| e.to_string())?;
    let a3 = accuracy(&committee).map_err(|e| e.to_string())?;
    let n = tuples.len() as f64;
    let se = (a1 * (1.0 - a1) / n + a3 * (1.0 - a3) / n).sqrt();
    check(
        a3 - a1 >= 3.0 * se,
        format!(
            "single {a1:.4}, majority {a3:.4}, gap {:.1} SE",
            (a3 - a1) / se
        ),
    )
}

/// Repeatedly takes the best pair among those whose query and candidate are
/// both still free.
fn greedy_reference(pairs: &[MatchCandidate]) -> BTreeSet<(String, String)> {
    let mut used_q = BTreeSet::new();
    let mut used_c = BTreeSet::new();
    let mut kept = BTreeSet::new();
    loop {
        let best = pairs
            .iter()
            .filter(|p| !used_q.contains(&p.query_id) && !used_c.contains(&p.candidate_id))
            .max_by(|a, b| {
                a.score
                    .total_cmp(&b.score)
                    .then_with(|| b.query_id.cmp(&a.query_id))
                    .then_with(|| b.candidate_id.cmp(&a.candidate_id))
            });
        let Some(best) = best else { break };
        used_q.insert(best.query_id.clone());
        used_c.insert(best.candidate_id.clone());
        kept.insert((best.query_id.clone(), best.candidate_id.clone()));
    }
    kept
}

fn umc_equivalence() -> Outcome {
    let started = Instant::now();
    let mut rng = seed::rng_for(5, "umc");
    let mut mismatches = 0;
    for _ in 0..1000 {
        let nq = rng.gen_range(1..=10);
        let nc = rng.gen_range(1..=10);
        let mut pairs = Vec::new();
        for q in 0..nq {
            for c in 0..nc {
                if rng.gen_bool(0.5) {
                    pairs.push(MatchCandidate {
                        query_id: format!("q{q}"),
                        candidate_id: format!("c{c}"),
                        // coarse scores, frequent ties
                        score: rng.gen_range(0..10) as f64 / 10.0,
                    });
                }
            }
        }
        let got: BTreeSet<(String, String)> = disambiguate_umc(&pairs)
            .into_iter()
            .map(|m| (m.query_id, m.candidate_id))
            .collect();
        if got != greedy_reference(&pairs) {
            mismatches += 1;
        }
    }
    let elapsed = started.elapsed();
    check(
        mismatches == 0 && elapsed < Duration::from_secs(5),
        format!(
            "{mismatches} mismatches in 1000 instances, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn precision_equals_recall() -> Outcome {
    let mut rng = seed::rng_for(6, "pr");
    for trial in 0..1000 {
        let n = rng.gen_range(1..40);
        let mut tuples = Vec::with_capacity(n);
        let mut results = Vec::with_capacity(n);
        for i in 0..n {
            let k = rng.gen_range(1..=6);
            let scores: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
            let key = format!("q{i}");
            let truth = Choice::Candidate(rng.gen_range(1..=k));
            tuples.push(tuple_with_scores(&key, &scores, Some(truth)));
            results.push(result(&key, Choice::Candidate(rng.gen_range(1..=k)), "t"));
        }
        let report =
            eval_select(&Knowledge::from_results(results), &tuples).map_err(|e| e.to_string())?;
        if report.precision != report.recall {
            return Err(format!(
                "trial {trial}: precision {} != recall {}",
                report.precision, report.recall
            ));
        }
    }
    Ok("1000 trials, precision == recall in all".into())
}

fn pipeline_config(dataset: &str, noise: f64) -> serde_json::Value {
    json!({
        "seed": 7,
        "ingest": {"dataset": dataset, "top_n": 5},
        "selection": {"strategy": "rank_max", "p": 0.5, "n": 0.5},
        "teacher": {"kind": "mock_oracle", "model_id": "oracle", "noise_rate": noise},
        "template": {},
        "distill": {"records": ["sft", "dpo", "pairwise"]},
        "eval": {}
    })
}

fn training_accuracy(out: &Path, dir: &Path) -> Result<(usize, usize), String> {
    let dataset = distiller::pipeline::load_dataset(&dir.join("data/dataset.json"))
        .map_err(|e| e.to_string())?;
    let training = distiller::pipeline::read_tuples(&out.join("training.jsonl"), &dataset)
        .map_err(|e| e.to_string())?;
    let knowledge = read_knowledge(&out.join("knowledge.jsonl")).map_err(|e| e.to_string())?;
    let correct = training
        .iter()
        .filter(|l| knowledge.get(l.tuple.key()).map(|r| r.choice) == l.tuple.truth_choice())
        .count();
    Ok((correct, training.len()))
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    generate(&SynthConfig {
        entities: 200,
        ..SynthConfig::default()
    })
    .write(&dir.path().join("data"), "synthetic")
    .map_err(|e| e.to_string())?;
    let write_config = |name: &str, noise: f64| -> Result<std::path::PathBuf, String> {
        let path = dir.path().join(name);
        std::fs::write(
            &path,
            pipeline_config("data/dataset.json", noise).to_string(),
        )
        .map_err(|e| e.to_string())?;
        Ok(path)
    };
    let clean = write_config("clean.json", 0.0)?;
    let noisy = write_config("noisy.json", 0.3)?;
    let run = |config: &Path, out: &str, seed: Option<u64>| {
        run_pipeline(
            config,
            &RunOverrides {
                seed,
                out_dir: Some(dir.path().join(out)),
                parallelism: None,
            },
        )
        .map_err(|e| e.to_string())
    };

    let started = Instant::now();
    let a = run(&clean, "a", None)?;
    let single_run = started.elapsed();
    let b = run(&clean, "b", None)?;
    let f1 = a.eval.as_ref().map(|e| e.f1).unwrap_or(f64::NAN);
    let identical = a.outputs == b.outputs;

    let (mut correct, mut total) = (0, 0);
    for s in 0..10 {
        let out = format!("noisy{s}");
        run(&noisy, &out, Some(s))?;
        let (c, n) = training_accuracy(&dir.path().join(&out), dir.path())?;
        correct += c;
        total += n;
    }
    let accuracy = correct as f64 / total as f64;
    check(
        f1 == 1.0 && identical && (accuracy - 0.70).abs() <= 0.03 && single_run < Duration::from_secs(30),
        format!(
            "noise 0 f1 {f1}, identical digests {identical}, noise 0.3 accuracy {accuracy:.4} over {total} annotations, run {:.2}s",
            single_run.as_secs_f64()
        ),
    )
}

fn positive_ratio_trend() -> Outcome {
    let pool = scored_pool(2000, 5, 0.1, 8);
    let selected_set =
        |strategy: SelectionStrategy, n_fraction: f64| -> Result<Vec<Tuple>, String> {
            let config = SelectionConfig {
                strategy,
                p_fraction: 0.1,
                n_fraction,
                seed: 8,
                ..SelectionConfig::default()
            };
            let outcome = select(&pool, &config).map_err(|e| e.to_string())?;
            Ok(match strategy {
                // random selection leaves its picks unlabeled
                SelectionStrategy::Random => outcome.training_tuples(),
                _ => outcome.presumed(Presumed::Positive).cloned().collect(),
            })
        };
    let ranked_set = selected_set(SelectionStrategy::RankMax, 0.1)?;
    let random_set = selected_set(SelectionStrategy::Random, 0.0)?;
    if ranked_set.len() != random_set.len() || ranked_set.is_empty() {
        return Err(format!(
            "set sizes differ: {} vs {}",
            ranked_set.len(),
            random_set.len()
        ));
    }
    let ranked = positive_ratio(&ranked_set).map_err(|e| e.to_string())?;
    let random = positive_ratio(&random_set).map_err(|e| e.to_string())?;
    check(
        ranked - random >= 0.2,
        format!(
            "rank_max {ranked:.3}, random {random:.3} over {} tuples each",
            ranked_set.len()
        ),
    )
}

struct SleepyTeacher {
    per_tuple: Duration,
}

impl Teacher for SleepyTeacher {
    fn id(&self) -> &str {
        "sleepy"
    }

    fn annotate(&self, t: &Tuple, _: &PromptTemplate) -> Result<AnnotationResult, TeachError> {
        std::thread::sleep(self.per_tuple);
        Ok(result(
            t.key(),
            t.truth_choice().unwrap_or(Choice::NoMatch),
            "sleepy",
        ))
    }
}

fn slm_timing() -> Outcome {
    let tuples = scored_pool(200, 5, 0.7, 9);
    let llm = SleepyTeacher {
        per_tuple: Duration::from_millis(10),
    };
    let template = PromptTemplate::default();
    let options = BatchOptions::default();
    let started = Instant::now();
    annotate_batch(&tuples, &llm, &template, options).map_err(|e| e.to_string())?;
    let full = started.elapsed().as_secs_f64();

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let classifier = ScoreThresholdClassifier {
        default_threshold: 0.5,
    };
    let outcome = SlmRunner {
        teacher_id: "slm",
        x_fraction: 0.2,
        llm: &llm,
        classifier: &classifier,
        template: &template,
        options,
        work_dir: dir.path(),
    }
    .run(&tuples, 9)
    .map_err(|e| e.to_string())?;
    let expected = 0.2 * full;
    let got = outcome.timing.llm_portion_s;
    check(
        (got - expected).abs() <= 0.05 * expected,
        format!("LLM portion {got:.4}s vs 0.2*T = {expected:.4}s"),
    )
}

fn id() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9]{0,7}"
}

fn text() -> impl Strategy<Value = String> {
    "\\PC{0,40}"
}

fn choice() -> impl Strategy<Value = Choice> {
    prop_oneof![
        Just(Choice::NoMatch),
        Just(Choice::Abstain),
        (1usize..10).prop_map(Choice::Candidate),
    ]
}

fn tuple_strategy() -> impl Strategy<Value = (Tuple, Option<Presumed>)> {
    (
        id(),
        prop::collection::vec(0.0f64..=1.0, 1..8),
        any::<u8>(),
        prop::option::of(prop_oneof![
            Just(Presumed::Positive),
            Just(Presumed::Negative)
        ]),
    )
        .prop_map(|(key, scores, t, presumed)| {
            let k = scores.len();
            let truth = match t % 4 {
                0 => None,
                1 => Some(Choice::NoMatch),
                _ => Some(Choice::Candidate(t as usize % k + 1)),
            };
            (tuple_with_scores(&key, &scores, truth), presumed)
        })
}

fn annotation_strategy() -> impl Strategy<Value = AnnotationResult> {
    (
        id(),
        choice(),
        prop::option::of(prop::collection::vec(1usize..10, 0..4)),
        prop::option::of(text()),
        text(),
        id(),
        0.0f64..100.0,
    )
        .prop_map(
            |(key, choice, positives, explanation, completion, teacher, elapsed)| {
                AnnotationResult {
                    tuple_key: key,
                    choice,
                    positives,
                    explanation,
                    completion,
                    teacher_id: teacher,
                    elapsed_s: elapsed,
                }
            },
        )
}

fn sft_strategy() -> impl Strategy<Value = SftRecord> {
    (id(), text(), text(), any::<bool>()).prop_map(|(key, user, assistant, system)| {
        let mut messages = Vec::new();
        if system {
            messages.push(Message {
                role: Role::System,
                content: "system".into(),
            });
        }
        messages.push(Message {
            role: Role::User,
            content: user,
        });
        messages.push(Message {
            role: Role::Assistant,
            content: assistant,
        });
        SftRecord {
            messages,
            tuple_key: key,
        }
    })
}

fn dpo_strategy() -> impl Strategy<Value = DpoRecord> {
    (id(), text(), text(), text()).prop_map(|(key, prompt, chosen, rejected)| DpoRecord {
        prompt,
        chosen,
        rejected,
        tuple_key: key,
    })
}

fn pairwise_strategy() -> impl Strategy<Value = PairwiseRecord> {
    (id(), id(), text(), text(), 0u8..2, 0.0f64..=1.0).prop_map(|(q, c, a, b, label, score)| {
        PairwiseRecord {
            query_id: q,
            candidate_id: c,
            text_a: a,
            text_b: b,
            label,
            score,
        }
    })
}

fn grpo_strategy() -> impl Strategy<Value = GrpoScore> {
    (id(), text(), choice(), 1usize..10, prop::option::of(id())).prop_map(
        |(key, completion, target, k, source)| {
            let record = CompletionRecord {
                tuple: key,
                completion,
                target,
                k,
                target_source: source,
            };
            score_completions(&[record], &RewardWeights::default()).remove(0)
        },
    )
}

fn round_trip<T, S>(name: &str, strategy: S, dir: &Path) -> Result<(), String>
where
    S: Strategy<Value = T>,
    T: serde::Serialize + serde::de::DeserializeOwned + PartialEq + std::fmt::Debug,
{
    let path = dir.join(format!("{name}.jsonl"));
    let mut runner = TestRunner::new(ProptestConfig {
        cases: 500,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    runner
        .run(&prop::collection::vec(strategy, 1..4), |records| {
            jsonl::write(&path, &records).unwrap();
            let back: Vec<T> = jsonl::read_values(&path).unwrap();
            prop_assert_eq!(back, records);
            Ok(())
        })
        .map_err(|e| format!("{name}: {e}"))
}

fn format_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("tuples.jsonl");
    let mut runner = TestRunner::new(ProptestConfig {
        cases: 500,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    runner
        .run(&prop::collection::vec(tuple_strategy(), 1..4), |records| {
            write_tuple_records(&path, &records).unwrap();
            let queries: Vec<Entity> = records.iter().map(|(t, _)| t.query().clone()).collect();
            let corpus: Vec<Entity> = records
                .iter()
                .flat_map(|(t, _)| t.candidates().iter().map(|c| c.entity.clone()))
                .collect();
            let loaded = load_tuples(
                &path,
                &EntityIndex::new(&queries),
                &EntityIndex::new(&corpus),
            )
            .unwrap();
            let back: Vec<(Tuple, Option<Presumed>)> =
                loaded.into_iter().map(|l| (l.tuple, l.presumed)).collect();
            prop_assert_eq!(back, records);
            Ok(())
        })
        .map_err(|e| format!("tuples: {e}"))?;

    let path = dir.path().join("knowledge.jsonl");
    runner
        .run(
            &prop::collection::vec(annotation_strategy(), 1..4),
            |results| {
                // one result per tuple key
                let mut unique: BTreeMap<String, AnnotationResult> = BTreeMap::new();
                for r in results {
                    unique.insert(r.tuple_key.clone(), r);
                }
                let knowledge = Knowledge::from_results(unique.into_values().collect());
                write_knowledge(&path, &knowledge).unwrap();
                let back = read_knowledge(&path).unwrap();
                let written: Vec<&AnnotationResult> = knowledge.iter().collect();
                let read: Vec<&AnnotationResult> = back.iter().collect();
                prop_assert_eq!(read, written);
                Ok(())
            },
        )
        .map_err(|e| format!("knowledge: {e}"))?;

    round_trip("sft", sft_strategy(), dir.path())?;
    round_trip("dpo", dpo_strategy(), dir.path())?;
    round_trip("pairwise", pairwise_strategy(), dir.path())?;
    round_trip("grpo", grpo_strategy(), dir.path())?;
    Ok("tuples, knowledge, SFT, DPO, pairwise and GRPO scores: 500 cases each".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("reward oracle", reward_oracle),
        ("selection oracle", selection_oracle),
        ("voting oracle", voting_oracle),
        ("committee amplification", committee_amplification),
        ("UMC equivalence", umc_equivalence),
        ("precision equals recall", precision_equals_recall),
        ("end-to-end determinism and fidelity", end_to_end),
        ("positive-ratio trend", positive_ratio_trend),
        ("SLM timing decomposition", slm_timing),
        ("format round trips", format_round_trips),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = run();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!(
                "acceptance {:>2} PASS  {name}: {detail} ({secs:.2}s)",
                i + 1
            ),
            Err(detail) => {
                failed += 1;
                println!(
                    "acceptance {:>2} FAIL  {name}: {detail} ({secs:.2}s)",
                    i + 1
                );
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
