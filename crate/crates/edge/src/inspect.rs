//! Attention and gate-value inspection for a single question: raw per-token
//! values plus per-sentence averages, with sentence boundaries taken from
//! the punctuation tokens `.`, `!`, `?`.

use serde::{Deserialize, Serialize};

use crate::corpus::DistractorExample;
use crate::graph::Tape;
use crate::inference::{generate_for_example, BeamConfig, InferenceError};
use crate::kernels::ForwardMode;
use crate::model::Model;
use crate::reform::encode_example;
use crate::text::Vocabulary;

/// Half-open token spans ending after each `.`, `!` or `?`; a trailing span
/// without punctuation still counts as a sentence.
pub fn sentence_spans(tokens: &[String]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, tok) in tokens.iter().enumerate() {
        if tok == "." || tok == "!" || tok == "?" {
            spans.push((start, i + 1));
            start = i + 1;
        }
    }
    if start < tokens.len() {
        spans.push((start, tokens.len()));
    }
    spans
}

/// Mean of `values` inside each span.
pub fn sentence_average(values: &[f64], spans: &[(usize, usize)]) -> Vec<f64> {
    spans
        .iter()
        .map(|&(start, end)| {
            let slice = &values[start..end];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistractorInspection {
    pub text: String,
    pub log_prob: f64,
    /// Raw decoder attention over passage tokens, one row per step.
    pub attention_per_step: Vec<Vec<f64>>,
    /// Per-token attention averaged over decode steps.
    pub attention_token_mean: Vec<f64>,
    /// The token means averaged within each sentence.
    pub attention_by_sentence: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InspectionRecord {
    pub example_id: String,
    pub passage_tokens: Vec<String>,
    pub sentences: Vec<SentenceSpan>,
    /// Raw passage gate values, one per token.
    pub gate_values_passage: Vec<f64>,
    pub gate_values_passage_by_sentence: Vec<f64>,
    /// Raw question gate values, one per token.
    pub gate_values_question: Vec<f64>,
    pub distractors: Vec<DistractorInspection>,
}

/// Generate three distractors for one example and package the attention and
/// gate values for inspection.
pub fn inspect_example(
    model: &Model,
    vocab: &Vocabulary,
    example: &DistractorExample,
    beam: &BeamConfig,
) -> Result<InspectionRecord, InferenceError> {
    let passage = vocab.encode(&example.passage_tokens);
    let question = vocab.encode(&example.question_tokens);
    let answer = vocab.encode(&example.answer_tokens);

    let mut tape = Tape::new();
    let enc = encode_example(
        &mut tape,
        model,
        &passage,
        &question,
        &answer,
        &mut ForwardMode::Eval,
    )?;
    let spans = sentence_spans(&example.passage_tokens);
    let gate_by_sentence = sentence_average(&enc.gate_values_p, &spans);

    let output = generate_for_example(
        model,
        vocab,
        &example.example_id,
        &passage,
        &question,
        &answer,
        beam,
    )?;
    let texts = [
        output.record.d1.clone(),
        output.record.d2.clone(),
        output.record.d3.clone(),
    ];
    let distractors = output
        .selected
        .iter()
        .zip(texts)
        .map(|(hyp, text)| {
            let steps = hyp.attention.len().max(1) as f64;
            let mut token_mean = vec![0.0; passage.len()];
            for row in &hyp.attention {
                for (acc, v) in token_mean.iter_mut().zip(row) {
                    *acc += v / steps;
                }
            }
            let by_sentence = sentence_average(&token_mean, &spans);
            DistractorInspection {
                text,
                log_prob: hyp.log_prob,
                attention_per_step: hyp.attention.clone(),
                attention_token_mean: token_mean,
                attention_by_sentence: by_sentence,
            }
        })
        .collect();

    Ok(InspectionRecord {
        example_id: example.example_id.clone(),
        passage_tokens: example.passage_tokens.clone(),
        sentences: spans
            .iter()
            .map(|&(start, end)| SentenceSpan {
                start,
                end,
                text: example.passage_tokens[start..end].join(" "),
            })
            .collect(),
        gate_values_passage: enc.gate_values_p,
        gate_values_passage_by_sentence: gate_by_sentence,
        gate_values_question: enc.gate_values_q,
        distractors,
    })
}
