//! Loading, validation, truncation, and batching of distractor-generation
//! records. The on-disk format is one JSON object per line with fields
//! `{id, passage, question, answer, distractors}`; all text fields are
//! pre-tokenized and split on whitespace here.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::Vocabulary;

pub const MAX_GOLD_DISTRACTORS: usize = 3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("record {record}: {message}")]
    Parse { record: usize, message: String },
    #[error("record {record} ({id}): field {field:?} is empty after cleaning")]
    EmptyField {
        record: usize,
        id: String,
        field: &'static str,
    },
    #[error("record {record} ({id}): no gold distractors")]
    NoDistractors { record: usize, id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Validation => write!(f, "validation"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Maximum token counts per field; longer sequences keep their prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LengthCaps {
    pub passage: usize,
    pub question: usize,
    pub answer: usize,
    pub distractor: usize,
}

impl Default for LengthCaps {
    fn default() -> Self {
        LengthCaps {
            passage: 500,
            question: 17,
            answer: 15,
            distractor: 15,
        }
    }
}

/// One validated (passage, question, answer, gold distractors) record.
#[derive(Debug, Clone)]
pub struct DistractorExample {
    pub example_id: String,
    pub passage_tokens: Vec<String>,
    pub question_tokens: Vec<String>,
    pub answer_tokens: Vec<String>,
    /// Between 1 and [`MAX_GOLD_DISTRACTORS`] entries, each non-empty.
    pub gold_distractors: Vec<Vec<String>>,
    pub split: Split,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    passage: String,
    question: String,
    answer: String,
    distractors: Vec<String>,
}

fn clean(text: &str, cap: usize, lowercase: bool) -> Vec<String> {
    let mut tokens: Vec<String> = text
        .split_whitespace()
        .map(|t| {
            if lowercase {
                t.to_lowercase()
            } else {
                t.to_string()
            }
        })
        .collect();
    tokens.truncate(cap);
    tokens
}

/// Load one split from a line-delimited record file.
///
/// Records are returned in file order. A record with more than
/// [`MAX_GOLD_DISTRACTORS`] distractors keeps the first three; one with none
/// is rejected, as is any field that ends up empty after cleaning.
pub fn load_corpus(
    path: &Path,
    caps: &LengthCaps,
    lowercase: bool,
    split: Split,
) -> Result<Vec<DistractorExample>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    for (record, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Parse {
            record,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            record,
            message: e.to_string(),
        })?;
        examples.push(validate(raw, record, caps, lowercase, split)?);
    }
    Ok(examples)
}

fn validate(
    raw: RawRecord,
    record: usize,
    caps: &LengthCaps,
    lowercase: bool,
    split: Split,
) -> Result<DistractorExample, CorpusError> {
    let empty = |field| CorpusError::EmptyField {
        record,
        id: raw.id.clone(),
        field,
    };
    let passage_tokens = clean(&raw.passage, caps.passage, lowercase);
    if passage_tokens.is_empty() {
        return Err(empty("passage"));
    }
    let question_tokens = clean(&raw.question, caps.question, lowercase);
    if question_tokens.is_empty() {
        return Err(empty("question"));
    }
    let answer_tokens = clean(&raw.answer, caps.answer, lowercase);
    if answer_tokens.is_empty() {
        return Err(empty("answer"));
    }
    if raw.distractors.is_empty() {
        return Err(CorpusError::NoDistractors {
            record,
            id: raw.id.clone(),
        });
    }
    let mut gold_distractors = Vec::new();
    for d in raw.distractors.iter().take(MAX_GOLD_DISTRACTORS) {
        let tokens = clean(d, caps.distractor, lowercase);
        if tokens.is_empty() {
            return Err(empty("distractors"));
        }
        gold_distractors.push(tokens);
    }
    Ok(DistractorExample {
        example_id: raw.id,
        passage_tokens,
        question_tokens,
        answer_tokens,
        gold_distractors,
        split,
    })
}

/// One training pair: a single gold distractor together with its context,
/// already mapped to vocabulary ids.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub example_index: usize,
    pub passage: Vec<usize>,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub distractor: Vec<usize>,
}

/// Flatten examples into training pairs, one per gold distractor.
pub fn expand_pairs(examples: &[DistractorExample], vocab: &Vocabulary) -> Vec<TrainingPair> {
    let mut pairs = Vec::new();
    for (example_index, ex) in examples.iter().enumerate() {
        for d in &ex.gold_distractors {
            pairs.push(TrainingPair {
                example_index,
                passage: vocab.encode(&ex.passage_tokens),
                question: vocab.encode(&ex.question_tokens),
                answer: vocab.encode(&ex.answer_tokens),
                distractor: vocab.encode(d),
            });
        }
    }
    pairs
}

/// A field padded to the batch-local maximum width, with a validity mask.
#[derive(Debug, Clone)]
pub struct PaddedField {
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl PaddedField {
    fn build(rows: Vec<&[usize]>, pad_id: usize) -> PaddedField {
        let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len());
        let mut mask = Vec::with_capacity(rows.len());
        for row in rows {
            let mut id_row = row.to_vec();
            let mut mask_row = vec![true; row.len()];
            id_row.resize(width, pad_id);
            mask_row.resize(width, false);
            ids.push(id_row);
            mask.push(mask_row);
        }
        PaddedField { ids, mask }
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, |r| r.len())
    }

    /// True sequence length of one row (count of valid positions).
    pub fn row_len(&self, row: usize) -> usize {
        self.mask[row].iter().filter(|&&b| b).count()
    }

    /// The unpadded prefix of one row.
    pub fn row_ids(&self, row: usize) -> &[usize] {
        &self.ids[row][..self.row_len(row)]
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub passage: PaddedField,
    pub question: PaddedField,
    pub answer: PaddedField,
    pub distractor: PaddedField,
    pub example_indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.example_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.example_indices.is_empty()
    }
}

/// Group pairs into padded batches of at most `batch_size` rows, preserving
/// order. An empty pair list yields an empty batch list.
pub fn batch_pairs(pairs: &[TrainingPair], batch_size: usize, pad_id: usize) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    pairs
        .chunks(batch_size)
        .map(|chunk| Batch {
            passage: PaddedField::build(chunk.iter().map(|p| p.passage.as_slice()).collect(), pad_id),
            question: PaddedField::build(
                chunk.iter().map(|p| p.question.as_slice()).collect(),
                pad_id,
            ),
            answer: PaddedField::build(chunk.iter().map(|p| p.answer.as_slice()).collect(), pad_id),
            distractor: PaddedField::build(
                chunk.iter().map(|p| p.distractor.as_slice()).collect(),
                pad_id,
            ),
            example_indices: chunk.iter().map(|p| p.example_index).collect(),
        })
        .collect()
}

/// Per-split counts and per-field length histograms.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct CorpusStats {
    pub counts: BTreeMap<String, usize>,
    pub passage_lengths: BTreeMap<usize, usize>,
    pub question_lengths: BTreeMap<usize, usize>,
    pub answer_lengths: BTreeMap<usize, usize>,
    pub distractor_lengths: BTreeMap<usize, usize>,
}

pub fn corpus_stats(examples: &[DistractorExample]) -> CorpusStats {
    let mut stats = CorpusStats::default();
    for ex in examples {
        *stats.counts.entry(ex.split.to_string()).or_insert(0) += 1;
        *stats
            .passage_lengths
            .entry(ex.passage_tokens.len())
            .or_insert(0) += 1;
        *stats
            .question_lengths
            .entry(ex.question_tokens.len())
            .or_insert(0) += 1;
        *stats
            .answer_lengths
            .entry(ex.answer_tokens.len())
            .or_insert(0) += 1;
        for d in &ex.gold_distractors {
            *stats.distractor_lengths.entry(d.len()).or_insert(0) += 1;
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::build_vocabulary;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_fixture(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f
    }

    const THREE_RECORDS: [&str; 3] = [
        r#"{"id":"q1","passage":"The sun rises in the east .","question":"Where does the sun rise ?","answer":"in the east","distractors":["in the west","at the pole"]}"#,
        r#"{"id":"q2","passage":"Cats sleep a lot during the day .","question":"What do cats do ?","answer":"sleep a lot","distractors":["run fast"]}"#,
        r#"{"id":"q3","passage":"Rivers flow to the sea .","question":"Where do rivers flow ?","answer":"to the sea","distractors":["to the sky","to the hill","to the cave","to the moon"]}"#,
    ];

    #[test]
    fn loads_well_formed_records_in_order() {
        let f = write_fixture(&THREE_RECORDS);
        let examples =
            load_corpus(f.path(), &LengthCaps::default(), true, Split::Train).unwrap();
        assert_eq!(examples.len(), 3);
        assert_eq!(examples[0].example_id, "q1");
        assert_eq!(examples[1].example_id, "q2");
        assert_eq!(examples[2].example_id, "q3");
        // more than three distractors keep the first three
        assert_eq!(examples[2].gold_distractors.len(), 3);
        assert_eq!(examples[2].gold_distractors[2], vec!["to", "the", "cave"]);
    }

    #[test]
    fn long_passage_keeps_exactly_the_prefix() {
        let words: Vec<String> = (0..600).map(|i| format!("w{i}")).collect();
        let record = format!(
            r#"{{"id":"long","passage":"{}","question":"q ?","answer":"a","distractors":["d"]}}"#,
            words.join(" ")
        );
        let f = write_fixture(&[&record]);
        let examples =
            load_corpus(f.path(), &LengthCaps::default(), true, Split::Train).unwrap();
        assert_eq!(examples[0].passage_tokens.len(), 500);
        assert_eq!(examples[0].passage_tokens[..], words[..500]);
    }

    #[test]
    fn missing_answer_field_names_record_and_field() {
        let f = write_fixture(&[
            r#"{"id":"q1","passage":"p","question":"q","distractors":["d"]}"#,
        ]);
        let err = load_corpus(f.path(), &LengthCaps::default(), true, Split::Train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("record 0"), "got: {msg}");
        assert!(msg.contains("answer"), "got: {msg}");
    }

    #[test]
    fn record_without_distractors_is_rejected() {
        let f = write_fixture(&[
            r#"{"id":"q1","passage":"p","question":"q","answer":"a","distractors":[]}"#,
        ]);
        let err = load_corpus(f.path(), &LengthCaps::default(), true, Split::Train).unwrap_err();
        assert!(matches!(err, CorpusError::NoDistractors { record: 0, .. }));
    }

    #[test]
    fn empty_question_after_cleaning_is_rejected() {
        let f = write_fixture(&[
            r#"{"id":"q1","passage":"p","question":"   ","answer":"a","distractors":["d"]}"#,
        ]);
        let err = load_corpus(f.path(), &LengthCaps::default(), true, Split::Train).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::EmptyField {
                record: 0,
                field: "question",
                ..
            }
        ));
    }

    fn toy_examples(n: usize) -> Vec<DistractorExample> {
        (0..n)
            .map(|i| DistractorExample {
                example_id: format!("ex{i}"),
                passage_tokens: vec!["a".into(), "b".into(), "c".into()],
                question_tokens: vec!["q".into()],
                answer_tokens: vec!["a".into()],
                gold_distractors: vec![vec!["d".into()]],
                split: Split::Train,
            })
            .collect()
    }

    #[test]
    fn batches_split_by_integer_division() {
        let examples = toy_examples(130);
        let vocab = build_vocabulary(&examples, 1, 100);
        let pairs = expand_pairs(&examples, &vocab);
        let batches = batch_pairs(&pairs, 64, 0);
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![64, 64, 2]);
    }

    #[test]
    fn padding_width_and_mask_counts_follow_lengths() {
        let mut examples = toy_examples(2);
        examples[0].passage_tokens = vec!["a".into(), "b".into(), "c".into()];
        examples[1].passage_tokens = vec!["a".into(), "b".into(), "c".into(), "d".into(), "e".into()];
        let vocab = build_vocabulary(&examples, 1, 100);
        let pairs = expand_pairs(&examples, &vocab);
        let batches = batch_pairs(&pairs, 64, 0);
        assert_eq!(batches.len(), 1);
        let field = &batches[0].passage;
        assert_eq!(field.width(), 5);
        assert_eq!(field.row_len(0), 3);
        assert_eq!(field.row_len(1), 5);
    }

    #[test]
    fn empty_pair_list_gives_no_batches() {
        assert!(batch_pairs(&[], 64, 0).is_empty());
    }

    #[test]
    fn stats_count_per_split_and_histograms() {
        let f = write_fixture(&THREE_RECORDS);
        let examples =
            load_corpus(f.path(), &LengthCaps::default(), true, Split::Validation).unwrap();
        let stats = corpus_stats(&examples);
        assert_eq!(stats.counts.get("validation"), Some(&3));
        let mass: usize = stats.passage_lengths.values().sum();
        assert_eq!(mass, 3);
        let mass: usize = stats.question_lengths.values().sum();
        assert_eq!(mass, 3);
        // distractor histogram counts every gold distractor
        let mass: usize = stats.distractor_lengths.values().sum();
        assert_eq!(mass, 2 + 1 + 3);
    }

    #[test]
    fn stats_of_empty_corpus_are_zero() {
        let stats = corpus_stats(&[]);
        assert!(stats.counts.is_empty());
        assert!(stats.passage_lengths.is_empty());
    }

    #[test]
    fn reloading_the_same_file_reproduces_stats() {
        let f = write_fixture(&THREE_RECORDS);
        let a = corpus_stats(
            &load_corpus(f.path(), &LengthCaps::default(), true, Split::Train).unwrap(),
        );
        let b = corpus_stats(
            &load_corpus(f.path(), &LengthCaps::default(), true, Split::Train).unwrap(),
        );
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn truncation_keeps_prefix(len in 1usize..40, cap in 1usize..40) {
            let text: Vec<String> = (0..len).map(|i| format!("t{i}")).collect();
            let joined = text.join(" ");
            let cleaned = clean(&joined, cap, false);
            let k = len.min(cap);
            prop_assert_eq!(cleaned.len(), k);
            prop_assert_eq!(&cleaned[..], &text[..k]);
        }

        #[test]
        fn mask_true_count_equals_prepad_length(lens in proptest::collection::vec(1usize..12, 1..20)) {
            let examples: Vec<DistractorExample> = lens.iter().enumerate().map(|(i, &l)| DistractorExample {
                example_id: format!("e{i}"),
                passage_tokens: (0..l).map(|j| format!("p{j}")).collect(),
                question_tokens: vec!["q".into()],
                answer_tokens: vec!["a".into()],
                gold_distractors: vec![vec!["d".into()]],
                split: Split::Train,
            }).collect();
            let vocab = build_vocabulary(&examples, 1, 1000);
            let pairs = expand_pairs(&examples, &vocab);
            let batches = batch_pairs(&pairs, 7, 0);
            let mut row = 0;
            for batch in &batches {
                for local in 0..batch.len() {
                    prop_assert_eq!(batch.passage.row_len(local), lens[row]);
                    row += 1;
                }
            }
            // mask-weighted token count equals the sum of true lengths
            let total: usize = batches.iter().map(|b| {
                b.passage.mask.iter().flatten().filter(|&&m| m).count()
            }).sum();
            prop_assert_eq!(total, lens.iter().sum::<usize>());
        }
    }
}
