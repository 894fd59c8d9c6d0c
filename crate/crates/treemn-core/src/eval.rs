//! Accuracy and WUPS scoring with per-type and per-length breakdowns.
//!
//! WUPS@t gates a word-pair similarity at threshold t: full similarity at
//! or above the threshold, a 0.1 penalty factor below it. Similarities come
//! from a pluggable table instead of a WordNet traversal; identical words
//! always score 1.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::PreparedSample;
use crate::model::{ModelError, ModelParams};

/// Word-pair similarity table with a default for missing pairs.
#[derive(Debug, Clone)]
pub struct SimilarityTable {
    sim: HashMap<(String, String), f64>,
    pub default: f64,
}

impl SimilarityTable {
    pub fn new(default: f64) -> Self {
        SimilarityTable {
            sim: HashMap::new(),
            default,
        }
    }

    fn key(a: &str, b: &str) -> (String, String) {
        if a <= b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        }
    }

    pub fn insert(&mut self, a: &str, b: &str, sim: f64) {
        self.sim.insert(Self::key(a, b), sim);
    }

    /// Symmetric lookup; `sim(a, a) = 1` unconditionally.
    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        if a == b {
            return 1.0;
        }
        self.sim.get(&Self::key(a, b)).copied().unwrap_or(self.default)
    }

    /// Loads a whitespace-separated `word1 word2 sim` file. Missing pairs
    /// default to 0.
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut table = SimilarityTable::new(0.0);
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("similarity line {}: expected `word1 word2 sim`", i + 1),
                ));
            }
            let sim: f64 = parts[2].parse().map_err(|_| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("similarity line {}: bad number", i + 1),
                )
            })?;
            table.insert(parts[0], parts[1], sim);
        }
        Ok(table)
    }
}

/// The thresholded similarity score: `s` if `s >= t`, `0.1 * s` otherwise.
pub fn wups_at_t(answer: &str, truth: &str, t: f64, table: &SimilarityTable) -> f64 {
    let s = table.similarity(answer, truth);
    if s >= t {
        s
    } else {
        0.1 * s
    }
}

/// One scored prediction, the unit the aggregate report is built from.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub predicted: String,
    pub truth: String,
    pub correct: bool,
    pub question_type: String,
    pub question_len: usize,
}

/// A (subset, metrics) row of the report.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetScores {
    pub subset: String,
    pub n: usize,
    pub accuracy: f64,
    pub wups_0: f64,
    pub wups_9: f64,
}

/// Overall scores plus per-question-type and per-length breakdowns.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall: SubsetScores,
    pub per_type: Vec<SubsetScores>,
    pub per_length: Vec<SubsetScores>,
}

/// Question-length buckets: (0,5], (5,10], (10,15], (15,20], (20,inf).
pub const LENGTH_BUCKETS: [(usize, usize, &str); 5] = [
    (0, 5, "0-5"),
    (5, 10, "5-10"),
    (10, 15, "10-15"),
    (15, 20, "15-20"),
    (20, usize::MAX, ">20"),
];

const CANON_TYPES: [&str; 4] = ["Object", "Location", "Number", "Time"];

fn score_subset(subset: &str, items: &[&EvalItem], table: &SimilarityTable) -> SubsetScores {
    let n = items.len();
    if n == 0 {
        return SubsetScores {
            subset: subset.to_string(),
            n: 0,
            accuracy: 0.0,
            wups_0: 0.0,
            wups_9: 0.0,
        };
    }
    let correct = items.iter().filter(|i| i.correct).count();
    let wups_0: f64 = items
        .iter()
        .map(|i| wups_at_t(&i.predicted, &i.truth, 0.0, table))
        .sum();
    let wups_9: f64 = items
        .iter()
        .map(|i| wups_at_t(&i.predicted, &i.truth, 0.9, table))
        .sum();
    let denom = n as f64;
    SubsetScores {
        subset: subset.to_string(),
        n,
        accuracy: correct as f64 / denom,
        wups_0: wups_0 / denom,
        wups_9: wups_9 / denom,
    }
}

/// Aggregates scored items into the full report. Deterministic in content
/// regardless of item order.
pub fn evaluate_items(items: &[EvalItem], table: &SimilarityTable) -> EvalReport {
    let all: Vec<&EvalItem> = items.iter().collect();
    let overall = score_subset("all", &all, table);

    let mut type_names: Vec<String> = CANON_TYPES
        .iter()
        .filter(|t| items.iter().any(|i| &i.question_type == *t))
        .map(|t| t.to_string())
        .collect();
    let mut extra: Vec<String> = items
        .iter()
        .map(|i| i.question_type.clone())
        .filter(|t| !CANON_TYPES.contains(&t.as_str()))
        .collect();
    extra.sort();
    extra.dedup();
    type_names.extend(extra);

    let per_type = type_names
        .iter()
        .map(|t| {
            let subset: Vec<&EvalItem> =
                items.iter().filter(|i| &i.question_type == t).collect();
            score_subset(t, &subset, table)
        })
        .collect();

    let per_length = LENGTH_BUCKETS
        .iter()
        .map(|(lo, hi, label)| {
            let subset: Vec<&EvalItem> = items
                .iter()
                .filter(|i| i.question_len > *lo && i.question_len <= *hi)
                .collect();
            score_subset(label, &subset, table)
        })
        .collect();

    EvalReport {
        overall,
        per_type,
        per_length,
    }
}

/// Runs the model over a dataset and scores predictions against ground
/// truth.
pub fn evaluate(
    model: &ModelParams,
    samples: &[PreparedSample],
    table: &SimilarityTable,
) -> Result<EvalReport, ModelError> {
    let items = predict_items(model, samples)?;
    Ok(evaluate_items(&items, table))
}

/// Forward pass + argmax for every sample.
pub fn predict_items(
    model: &ModelParams,
    samples: &[PreparedSample],
) -> Result<Vec<EvalItem>, ModelError> {
    samples
        .iter()
        .map(|s| {
            let dist = model.forward(&s.input())?;
            let pred = dist.argmax();
            Ok(EvalItem {
                predicted: model.answer_vocab[pred].clone(),
                truth: s.answer_word.clone(),
                correct: pred == s.answer_index,
                question_type: s.question_type.clone(),
                question_len: s.question_len(),
            })
        })
        .collect()
}

impl EvalReport {
    /// CSV rows: `metric,subset,value,n`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,subset,value,n\n");
        let mut row = |metric: &str, s: &SubsetScores, value: f64| {
            let _ = writeln!(out, "{metric},{},{value:.6},{}", s.subset, s.n);
        };
        for s in std::iter::once(&self.overall)
            .chain(&self.per_type)
            .chain(&self.per_length)
        {
            row("accuracy", s, s.accuracy);
            row("wups@0.0", s, s.wups_0);
            row("wups@0.9", s, s.wups_9);
        }
        out
    }

    /// Human-readable aligned table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>10} {:>10} {:>10}",
            "subset", "n", "accuracy", "wups@0.0", "wups@0.9"
        );
        for s in std::iter::once(&self.overall)
            .chain(&self.per_type)
            .chain(&self.per_length)
        {
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>10.4} {:>10.4} {:>10.4}",
                s.subset, s.n, s.accuracy, s.wups_0, s.wups_9
            );
        }
        out
    }

    pub fn bucket(&self, label: &str) -> Option<&SubsetScores> {
        self.per_length.iter().find(|s| s.subset == label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn item(pred: &str, truth: &str, qtype: &str, len: usize) -> EvalItem {
        EvalItem {
            predicted: pred.to_string(),
            truth: truth.to_string(),
            correct: pred == truth,
            question_type: qtype.to_string(),
            question_len: len,
        }
    }

    #[test]
    fn wups_branch_behavior() {
        let mut table = SimilarityTable::new(0.0);
        table.insert("cat", "dog", 0.5);
        table.insert("car", "truck", 0.95);

        // exact match scores 1 at any threshold
        assert_eq!(wups_at_t("dog", "dog", 0.9, &table), 1.0);
        // below threshold: 0.1 x sim
        assert!((wups_at_t("cat", "dog", 0.9, &table) - 0.05).abs() < 1e-12);
        // at or above threshold: sim passes through
        assert!((wups_at_t("car", "truck", 0.9, &table) - 0.95).abs() < 1e-12);
        // missing pair falls back to the default
        assert_eq!(wups_at_t("cat", "truck", 0.0, &table), 0.0);
    }

    #[test]
    fn similarity_is_symmetric_and_reflexive() {
        let mut table = SimilarityTable::new(0.2);
        table.insert("a", "b", 0.7);
        assert_eq!(table.similarity("a", "b"), 0.7);
        assert_eq!(table.similarity("b", "a"), 0.7);
        assert_eq!(table.similarity("a", "a"), 1.0);
        assert_eq!(table.similarity("zz", "a"), 0.2);
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let table = SimilarityTable::new(0.0);
        let items: Vec<EvalItem> = (0..10)
            .map(|i| item("w", "w", if i % 2 == 0 { "Object" } else { "Time" }, 4))
            .collect();
        let report = evaluate_items(&items, &table);
        assert_eq!(report.overall.accuracy, 1.0);
        assert_eq!(report.overall.wups_0, 1.0);
        assert_eq!(report.overall.wups_9, 1.0);
    }

    #[test]
    fn two_sample_mean_is_hand_computable() {
        // one exact match, one sim-0.5 miss at t = 0: (1.0 + 0.5) / 2
        let mut table = SimilarityTable::new(0.0);
        table.insert("cat", "dog", 0.5);
        let items = vec![item("dog", "dog", "Object", 4), item("cat", "dog", "Object", 4)];
        let report = evaluate_items(&items, &table);
        assert!((report.overall.wups_0 - 0.75).abs() < 1e-12);
        assert!((report.overall.accuracy - 0.5).abs() < 1e-12);
    }

    #[test]
    fn uniform_random_predictor_is_near_chance() {
        let k = 10usize;
        let n = 1000usize;
        let mut rng = StdRng::seed_from_u64(404);
        let table = SimilarityTable::new(0.0);
        let words: Vec<String> = (0..k).map(|i| format!("w{i}")).collect();
        let items: Vec<EvalItem> = (0..n)
            .map(|_| {
                let truth = &words[rng.gen_range(0..k)];
                let pred = &words[rng.gen_range(0..k)];
                item(pred, truth, "Object", 5)
            })
            .collect();
        let report = evaluate_items(&items, &table);
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (report.overall.accuracy - p).abs() <= 3.0 * sigma,
            "accuracy {} vs chance {p} (3 sigma {})",
            report.overall.accuracy,
            3.0 * sigma
        );
    }

    #[test]
    fn wups_ordering_holds_for_random_tables() {
        // WUPS@0.0 >= WUPS@0.9 >= 0.1 * WUPS@0.0 for sims in [0,1]
        let mut rng = StdRng::seed_from_u64(405);
        for _ in 0..200 {
            let k = 6;
            let words: Vec<String> = (0..k).map(|i| format!("w{i}")).collect();
            let mut table = SimilarityTable::new(rng.gen_range(0.0..0.3));
            for i in 0..k {
                for j in (i + 1)..k {
                    if rng.gen_bool(0.7) {
                        table.insert(&words[i], &words[j], rng.gen_range(0.0..1.0));
                    }
                }
            }
            let items: Vec<EvalItem> = (0..40)
                .map(|_| {
                    let t = &words[rng.gen_range(0..k)];
                    let p = &words[rng.gen_range(0..k)];
                    item(p, t, "Object", rng.gen_range(1..25))
                })
                .collect();
            let report = evaluate_items(&items, &table);
            assert!(report.overall.wups_0 >= report.overall.wups_9 - 1e-12);
            assert!(report.overall.wups_9 >= 0.1 * report.overall.wups_0 - 1e-12);
            // exact matches score 1, everything else is nonnegative
            assert!(report.overall.accuracy <= report.overall.wups_0 + 1e-12);
        }
    }

    #[test]
    fn report_invariant_to_sample_order() {
        let mut rng = StdRng::seed_from_u64(406);
        let mut table = SimilarityTable::new(0.0);
        table.insert("a", "b", 0.4);
        let mut items: Vec<EvalItem> = (0..50)
            .map(|i| {
                item(
                    if i % 3 == 0 { "a" } else { "b" },
                    "b",
                    ["Object", "Location", "Number", "Time"][i % 4],
                    rng.gen_range(1..23),
                )
            })
            .collect();
        let before = evaluate_items(&items, &table);
        // deterministic shuffle
        for i in (1..items.len()).rev() {
            items.swap(i, rng.gen_range(0..=i));
        }
        let after = evaluate_items(&items, &table);
        // identical up to summation order
        let rows = |r: &EvalReport| -> Vec<SubsetScores> {
            std::iter::once(r.overall.clone())
                .chain(r.per_type.iter().cloned())
                .chain(r.per_length.iter().cloned())
                .collect()
        };
        for (a, b) in rows(&before).iter().zip(rows(&after).iter()) {
            assert_eq!(a.subset, b.subset);
            assert_eq!(a.n, b.n);
            assert!((a.accuracy - b.accuracy).abs() < 1e-12);
            assert!((a.wups_0 - b.wups_0).abs() < 1e-12);
            assert!((a.wups_9 - b.wups_9).abs() < 1e-12);
        }
    }

    #[test]
    fn length_buckets_partition_counts() {
        let table = SimilarityTable::new(0.0);
        let items: Vec<EvalItem> = [1, 5, 6, 10, 11, 15, 16, 20, 21, 100]
            .iter()
            .map(|&len| item("x", "x", "Object", len))
            .collect();
        let report = evaluate_items(&items, &table);
        let counts: Vec<usize> = report.per_length.iter().map(|s| s.n).collect();
        assert_eq!(counts, vec![2, 2, 2, 2, 2]);
        assert_eq!(counts.iter().sum::<usize>(), items.len());
    }

    #[test]
    fn csv_and_table_render() {
        let table = SimilarityTable::new(0.0);
        let items = vec![item("a", "a", "Object", 3), item("b", "a", "Time", 12)];
        let report = evaluate_items(&items, &table);
        let csv = report.to_csv();
        assert!(csv.starts_with("metric,subset,value,n\n"));
        assert!(csv.contains("accuracy,all,0.500000,2"));
        assert!(csv.contains("accuracy,Object,1.000000,1"));
        let tbl = report.to_table();
        assert!(tbl.contains("subset"));
        assert!(tbl.contains("10-15"));
    }

    #[test]
    fn similarity_table_loads_from_file() {
        let dir = std::env::temp_dir().join("treemn_eval_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sim.tsv");
        std::fs::write(&path, "cat\tdog\t0.6\nball stick 0.5\n").unwrap();
        let table = SimilarityTable::load(&path).unwrap();
        assert_eq!(table.similarity("dog", "cat"), 0.6);
        assert_eq!(table.similarity("stick", "ball"), 0.5);
        std::fs::write(&path, "only two\n").unwrap();
        assert!(SimilarityTable::load(&path).is_err());
    }
}
