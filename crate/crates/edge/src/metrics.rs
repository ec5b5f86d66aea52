//! BLEU and ROUGE scoring with per-position result tables.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DistractorExample;
use crate::inference::GeneratedRecord;

const EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("generated and gold ids do not align; missing from gold: {missing_gold:?}, missing from generated: {missing_generated:?}")]
    IdMismatch {
        missing_gold: Vec<String>,
        missing_generated: Vec<String>,
    },
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU with modified n-gram precision: candidate counts clipped by
/// the maximum reference count, geometric mean of the precisions up to
/// `max_n` (orders with no candidate n-grams are skipped), and the brevity
/// penalty `exp(1 − r/c)` against the closest reference length when the
/// candidate is shorter. Zero precisions are replaced by a 1e-9 epsilon.
pub fn bleu(candidate: &[String], references: &[Vec<String>], max_n: usize) -> f64 {
    assert!((1..=4).contains(&max_n), "max_n must be 1..=4");
    assert!(!references.is_empty(), "bleu needs at least one reference");
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=max_n {
        let cand_counts = ngram_counts(candidate, n);
        let total: usize = cand_counts.values().sum();
        if total == 0 {
            continue;
        }
        let mut matches = 0usize;
        for (gram, &count) in &cand_counts {
            let max_ref = references
                .iter()
                .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            matches += count.min(max_ref);
        }
        let p = if matches == 0 {
            EPSILON
        } else {
            matches as f64 / total as f64
        };
        log_sum += p.ln();
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    let precision = (log_sum / orders as f64).exp();
    let c = candidate.len();
    let r = closest_reference_length(c, references);
    let bp = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    precision * bp
}

fn closest_reference_length(c: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&r| (r.abs_diff(c), r))
        .expect("non-empty references")
}

/// Clipped n-gram precision, recall, and F1 against one reference.
pub fn rouge_n(candidate: &[String], reference: &[String], n: usize) -> (f64, f64, f64) {
    let cand_counts = ngram_counts(candidate, n);
    let ref_counts = ngram_counts(reference, n);
    let cand_total: usize = cand_counts.values().sum();
    let ref_total: usize = ref_counts.values().sum();
    if cand_total == 0 || ref_total == 0 {
        return (0.0, 0.0, 0.0);
    }
    let overlap: usize = cand_counts
        .iter()
        .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    let p = overlap as f64 / cand_total as f64;
    let r = overlap as f64 / ref_total as f64;
    let f = if overlap == 0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    (p, r, f)
}

fn lcs_length(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence F-measure with β = 1:
/// `P = LCS/|candidate|`, `R = LCS/|reference|`, `F = 2PR/(P+R)`.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_length(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Scores for one distractor position, as percentages.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PositionScores {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

impl PositionScores {
    pub fn as_row(&self) -> [f64; 7] {
        [
            self.bleu1,
            self.bleu2,
            self.bleu3,
            self.bleu4,
            self.rouge1,
            self.rouge2,
            self.rouge_l,
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// One block per generated-distractor position (1st, 2nd, 3rd).
    pub positions: Vec<PositionScores>,
    /// Number of evaluated question pairs.
    pub count: usize,
}

fn tokens_of(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.to_lowercase())
        .collect()
}

/// Score each generated position against all gold distractors of its
/// question — multi-reference BLEU natively, the per-reference maximum for
/// ROUGE — then macro-average over questions and report percentages.
pub fn evaluate(
    generated: &[GeneratedRecord],
    gold: &[DistractorExample],
) -> Result<EvalReport, MetricsError> {
    let gold_by_id: HashMap<&str, &DistractorExample> = gold
        .iter()
        .map(|ex| (ex.example_id.as_str(), ex))
        .collect();
    let gen_ids: BTreeSet<&str> = generated.iter().map(|g| g.example_id.as_str()).collect();
    let missing_gold: Vec<String> = generated
        .iter()
        .map(|g| g.example_id.as_str())
        .filter(|id| !gold_by_id.contains_key(id))
        .map(str::to_string)
        .collect();
    let missing_generated: Vec<String> = gold
        .iter()
        .map(|ex| ex.example_id.as_str())
        .filter(|id| !gen_ids.contains(id))
        .map(str::to_string)
        .collect();
    if !missing_gold.is_empty() || !missing_generated.is_empty() {
        return Err(MetricsError::IdMismatch {
            missing_gold,
            missing_generated,
        });
    }

    // scoring is independent per question; the sequential reduction keeps
    // the result identical for any worker count
    let rows: Vec<[[f64; 7]; 3]> = generated
        .par_iter()
        .map(|record| {
            let ex = gold_by_id[record.example_id.as_str()];
            let references: Vec<Vec<String>> = ex
                .gold_distractors
                .iter()
                .map(|d| d.iter().map(|t| t.to_lowercase()).collect())
                .collect();
            let mut row = [[0.0f64; 7]; 3];
            for (pos, text) in [&record.d1, &record.d2, &record.d3].into_iter().enumerate() {
                let cand = tokens_of(text);
                for (slot, max_n) in (1..=4).enumerate() {
                    row[pos][slot] = bleu(&cand, &references, max_n);
                }
                let max_by = |f: &dyn Fn(&Vec<String>) -> f64| {
                    references.iter().map(f).fold(0.0f64, f64::max)
                };
                row[pos][4] = max_by(&|r| rouge_n(&cand, r, 1).2);
                row[pos][5] = max_by(&|r| rouge_n(&cand, r, 2).2);
                row[pos][6] = max_by(&|r| rouge_l(&cand, r));
            }
            row
        })
        .collect();
    let mut sums = [[0.0f64; 7]; 3];
    for row in rows {
        for (acc, r) in sums.iter_mut().zip(row) {
            for (a, v) in acc.iter_mut().zip(r) {
                *a += v;
            }
        }
    }
    let count = generated.len();
    let scale = 100.0 / count.max(1) as f64;
    let positions = sums
        .iter()
        .map(|row| PositionScores {
            bleu1: row[0] * scale,
            bleu2: row[1] * scale,
            bleu3: row[2] * scale,
            bleu4: row[3] * scale,
            rouge1: row[4] * scale,
            rouge2: row[5] * scale,
            rouge_l: row[6] * scale,
        })
        .collect();
    Ok(EvalReport { positions, count })
}

/// Corpus-level BLEU: n-gram and length statistics pooled over all
/// candidates before the precision and brevity penalty are computed.
pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<Vec<String>>)], max_n: usize) -> f64 {
    assert!((1..=4).contains(&max_n));
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (candidate, references) in pairs {
        if candidate.is_empty() {
            continue;
        }
        cand_len += candidate.len();
        ref_len += closest_reference_length(candidate.len(), references);
        for n in 1..=max_n {
            let cand_counts = ngram_counts(candidate, n);
            totals[n - 1] += cand_counts.values().sum::<usize>();
            for (gram, &count) in &cand_counts {
                let max_ref = references
                    .iter()
                    .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matches[n - 1] += count.min(max_ref);
            }
        }
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 0..max_n {
        if totals[n] == 0 {
            continue;
        }
        let p = if matches[n] == 0 {
            EPSILON
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln();
        orders += 1;
    }
    if orders == 0 || cand_len == 0 {
        return 0.0;
    }
    let precision = (log_sum / orders as f64).exp();
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    precision * bp
}

/// Render the report in the three-block, seven-column table layout.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let header = format!(
        "{:<16}{:>8}{:>8}{:>8}{:>8}{:>9}{:>9}{:>9}\n",
        "", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-1", "ROUGE-2", "ROUGE-L"
    );
    let labels = ["1st distractor", "2nd distractor", "3rd distractor"];
    for (label, pos) in labels.iter().zip(&report.positions) {
        out.push_str(&header);
        let r = pos.as_row();
        out.push_str(&format!(
            "{:<16}{:>8.2}{:>8.2}{:>8.2}{:>8.2}{:>9.2}{:>9.2}{:>9.2}\n\n",
            label, r[0], r[1], r[2], r[3], r[4], r[5], r[6]
        ));
    }
    out.push_str(&format!("evaluated pairs: {}\n", report.count));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_candidate_scores_perfect_bleu4() {
        let cand = words("the quick brown fox jumps");
        let refs = vec![words("the quick brown fox jumps")];
        assert!((bleu(&cand, &refs, 4) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_unigram_overlap_gives_epsilon_bleu() {
        let score = bleu(&words("a b c"), &[words("x y z")], 1);
        assert!(score < 1e-8);
    }

    #[test]
    fn hand_counted_unigram_precision() {
        // "the cat sat" vs "the cat ran": 2/3 matches, equal lengths, BP = 1
        let score = bleu(&words("the cat sat"), &[words("the cat ran")], 1);
        assert!((score - 2.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn brevity_penalty_applies_when_candidate_is_short() {
        // one matching token of two reference tokens, candidate length 1
        let score = bleu(&words("the"), &[words("the cat")], 1);
        let expect = 1.0 * (1.0f64 - 2.0 / 1.0).exp();
        assert!((score - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_candidate_scores_zero() {
        assert_eq!(bleu(&[], &[words("a")], 4), 0.0);
    }

    #[test]
    fn short_identical_candidate_still_scores_one() {
        // two tokens cannot form 3- or 4-grams; those orders are skipped
        let cand = words("red fox");
        assert!((bleu(&cand, &[words("red fox")], 4) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_is_invariant_to_reference_order() {
        let cand = words("a b c d");
        let r1 = vec![words("a b x y"), words("c d e f")];
        let r2 = vec![words("c d e f"), words("a b x y")];
        assert_eq!(bleu(&cand, &r1, 4), bleu(&cand, &r2, 4));
    }

    #[test]
    fn bleu_precision_terms_stay_in_unit_interval() {
        // indirectly: score of any candidate is within [0, 1]
        for (c, r) in [
            ("a a a a", "a b"),
            ("a b a b", "a b a b a b"),
            ("x", "x"),
        ] {
            let s = bleu(&words(c), &[words(r)], 4);
            assert!((0.0..=1.0).contains(&s), "{c} vs {r} gave {s}");
        }
    }

    #[test]
    fn clipping_limits_repeated_candidate_tokens() {
        // candidate repeats "the" four times, reference has it twice
        let score = bleu(&words("the the the the"), &[words("the the cat dog")], 1);
        assert!((score - 2.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_n_identical_is_one() {
        let (p, r, f) = rouge_n(&words("a b c"), &words("a b c"), 1);
        assert_eq!((p, r, f), (1.0, 1.0, 1.0));
    }

    #[test]
    fn rouge_n_disjoint_is_zero() {
        let (_, _, f) = rouge_n(&words("a b"), &words("x y"), 1);
        assert_eq!(f, 0.0);
    }

    #[test]
    fn rouge_1_hand_counted_fixture() {
        let (_, _, f) = rouge_n(&words("the cat sat"), &words("the cat ran"), 1);
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_l_identical_is_one() {
        assert_eq!(rouge_l(&words("a b c"), &words("a b c")), 1.0);
    }

    #[test]
    fn rouge_l_hand_counted_fixture() {
        // LCS("the cat sat", "the cat ran") = 2; P = R = 2/3
        let f = rouge_l(&words("the cat sat"), &words("the cat ran"));
        assert!((f - 2.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn rouge_l_empty_side_is_zero() {
        assert_eq!(rouge_l(&[], &words("a")), 0.0);
        assert_eq!(rouge_l(&words("a"), &[]), 0.0);
    }

    #[test]
    fn rouge_l_f1_is_symmetric_for_equal_lengths() {
        let a = words("a b c d");
        let b = words("a x c y");
        assert_eq!(rouge_l(&a, &b), rouge_l(&b, &a));
    }

    #[test]
    fn lcs_handles_non_contiguous_subsequences() {
        assert_eq!(lcs_length(&words("a x b y c"), &words("a b c")), 3);
    }

    fn gold_fixture() -> Vec<DistractorExample> {
        vec![
            DistractorExample {
                example_id: "q1".into(),
                passage_tokens: words("p"),
                question_tokens: words("q"),
                answer_tokens: words("a"),
                gold_distractors: vec![words("the red house"), words("a tall tree")],
                split: Split::Test,
            },
            DistractorExample {
                example_id: "q2".into(),
                passage_tokens: words("p"),
                question_tokens: words("q"),
                answer_tokens: words("a"),
                gold_distractors: vec![words("cold river water")],
                split: Split::Test,
            },
        ]
    }

    fn record(id: &str, d1: &str, d2: &str, d3: &str) -> GeneratedRecord {
        GeneratedRecord {
            example_id: id.into(),
            d1: d1.into(),
            d2: d2.into(),
            d3: d3.into(),
            beam_scores: vec![0.0; 3],
            fallback: false,
        }
    }

    #[test]
    fn perfect_generation_scores_one_hundred_everywhere() {
        let gold = gold_fixture();
        let generated = vec![
            record("q1", "the red house", "the red house", "the red house"),
            record("q2", "cold river water", "cold river water", "cold river water"),
        ];
        let report = evaluate(&generated, &gold).unwrap();
        assert_eq!(report.positions.len(), 3);
        for pos in &report.positions {
            for score in pos.as_row() {
                assert!((score - 100.0).abs() < 1e-9, "got {score}");
            }
        }
    }

    #[test]
    fn report_has_seven_metrics_by_three_positions() {
        let gold = gold_fixture();
        let generated = vec![
            record("q1", "x", "y", "z"),
            record("q2", "x", "y", "z"),
        ];
        let report = evaluate(&generated, &gold).unwrap();
        assert_eq!(report.positions.len(), 3);
        assert_eq!(report.count, 2);
        let json = serde_json::to_value(&report).unwrap();
        for pos in json["positions"].as_array().unwrap() {
            assert_eq!(pos.as_object().unwrap().len(), 7);
        }
    }

    #[test]
    fn id_mismatch_lists_the_offending_ids() {
        let gold = gold_fixture();
        let generated = vec![record("q1", "x", "y", "z"), record("q9", "x", "y", "z")];
        match evaluate(&generated, &gold) {
            Err(MetricsError::IdMismatch {
                missing_gold,
                missing_generated,
            }) => {
                assert_eq!(missing_gold, vec!["q9".to_string()]);
                assert_eq!(missing_generated, vec!["q2".to_string()]);
            }
            other => panic!("expected IdMismatch, got {other:?}"),
        }
    }

    /// Frozen from an independent scripted computation of the same fixture.
    #[test]
    fn three_question_fixture_matches_reference_scores() {
        let gold = vec![
            DistractorExample {
                example_id: "q1".into(),
                passage_tokens: words("p"),
                question_tokens: words("q"),
                answer_tokens: words("a"),
                gold_distractors: vec![words("the red house"), words("a tall tree")],
                split: Split::Test,
            },
            DistractorExample {
                example_id: "q2".into(),
                passage_tokens: words("p"),
                question_tokens: words("q"),
                answer_tokens: words("a"),
                gold_distractors: vec![words("cold river water")],
                split: Split::Test,
            },
            DistractorExample {
                example_id: "q3".into(),
                passage_tokens: words("p"),
                question_tokens: words("q"),
                answer_tokens: words("a"),
                gold_distractors: vec![words("a small dog"), words("the big cat")],
                split: Split::Test,
            },
        ];
        let generated = vec![
            record("q1", "the red tree", "a red house", "the tall tree"),
            record("q2", "cold river stone", "warm river water", "cold water"),
            record("q3", "a big dog", "the small cat", "a small dog"),
        ];
        let report = evaluate(&generated, &gold).unwrap();
        let expected = [
            [88.888889, 42.816289, 0.049602, 0.049602, 66.666667, 33.333333, 66.666667],
            [88.888889, 42.816289, 0.049602, 0.049602, 66.666667, 33.333333, 66.666667],
            [86.884355, 56.904199, 33.360429, 33.360429, 82.222222, 50.000000, 82.222222],
        ];
        for (pos, want) in report.positions.iter().zip(expected) {
            for (got, want) in pos.as_row().iter().zip(want) {
                assert!((got - want).abs() < 1e-4, "got {got}, want {want}");
            }
        }
    }

    #[test]
    fn corpus_bleu_pools_statistics() {
        let pairs = vec![
            (words("the cat sat"), vec![words("the cat ran")]),
            (words("a b"), vec![words("a b")]),
        ];
        // pooled unigrams: matches 2+2=4, totals 3+2=5
        let score = corpus_bleu(&pairs, 1);
        assert!((score - 4.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn rendered_table_contains_all_blocks() {
        let gold = gold_fixture();
        let generated = vec![
            record("q1", "the red house", "x", "y"),
            record("q2", "z", "x", "y"),
        ];
        let report = evaluate(&generated, &gold).unwrap();
        let table = render_table(&report);
        assert!(table.contains("1st distractor"));
        assert!(table.contains("3rd distractor"));
        assert!(table.contains("ROUGE-L"));
    }
}
