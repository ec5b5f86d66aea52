//! Beam search over the trained decoder and Jaccard-distance selection of
//! three diverse distractors.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::{decode_step, init_decode, DecoderState};
use crate::graph::Tape;
use crate::kernels::{ForwardMode, KernelError};
use crate::model::Model;
use crate::reform::encode_example;
use crate::text::{Vocabulary, EOS_ID, EOS_TOKEN, PAD_TOKEN};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("no candidates to select from")]
    EmptyCandidates,
    #[error(transparent)]
    Text(#[from] crate::text::TextError),
}

/// A complete decoded sequence with its accumulated log-probability.
#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    /// Emitted ids; ends with EOS when the model stopped on its own.
    pub token_ids: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
    /// Passage attention weights recorded at each step.
    pub attention: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    /// Rank finished hypotheses by length-averaged score instead of the sum.
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            width: 50,
            max_len: 15,
            length_normalize: false,
        }
    }
}

fn hyp_score(h: &BeamHypothesis, length_normalize: bool) -> f64 {
    if length_normalize && !h.token_ids.is_empty() {
        h.log_prob / h.token_ids.len() as f64
    } else {
        h.log_prob
    }
}

struct LiveHyp {
    tokens: Vec<usize>,
    log_prob: f64,
    state: DecoderState,
    attention: Vec<Vec<f64>>,
}

/// Standard beam expansion: keep the `width` best hypotheses by accumulated
/// log-probability each step, setting aside those that emit EOS; finished
/// hypotheses compete by final score.
///
/// Returns up to `width` results sorted by descending score.
pub fn beam_search(
    model: &Model,
    passage_ids: &[usize],
    question_ids: &[usize],
    answer_ids: &[usize],
    cfg: &BeamConfig,
) -> Result<Vec<BeamHypothesis>, InferenceError> {
    assert!(cfg.width >= 1 && cfg.max_len >= 1);
    let mut tape = Tape::new();
    let mut mode = ForwardMode::Eval;
    let enc = encode_example(
        &mut tape,
        model,
        passage_ids,
        question_ids,
        answer_ids,
        &mut mode,
    )?;
    let p_mask = vec![true; enc.p_len];
    let start = init_decode(&mut tape, model, enc.p_hat, enc.h0);
    let mut live = vec![LiveHyp {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: start,
        attention: Vec::new(),
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();

    for step in 1..=cfg.max_len {
        if live.is_empty() {
            break;
        }
        // expand every live hypothesis by the full vocabulary
        let mut expansions: Vec<(usize, usize, f64)> = Vec::new();
        let mut step_states = Vec::with_capacity(live.len());
        let mut step_attn = Vec::with_capacity(live.len());
        for (hyp_idx, hyp) in live.iter().enumerate() {
            let prev = *hyp.tokens.last().unwrap_or(&EOS_ID);
            let e_prev = tape.embed_rows(&model.params, model.embedding, &[prev]);
            let out = decode_step(
                &mut tape,
                model,
                &hyp.state,
                e_prev,
                enc.p_hat,
                &p_mask,
                &mut mode,
            )?;
            let probs = tape.value(out.probs);
            for (tok, &p) in probs.row(0).iter().enumerate() {
                expansions.push((hyp_idx, tok, hyp.log_prob + p.ln()));
            }
            step_states.push(out.state);
            step_attn.push(tape.value(out.attn).row(0).to_vec());
        }
        expansions.sort_by(|a, b| {
            b.2.total_cmp(&a.2)
                .then_with(|| a.0.cmp(&b.0))
                .then_with(|| a.1.cmp(&b.1))
        });
        expansions.truncate(cfg.width);

        let mut next_live = Vec::new();
        for (hyp_idx, tok, log_prob) in expansions {
            let src = &live[hyp_idx];
            let mut tokens = src.tokens.clone();
            tokens.push(tok);
            let mut attention = src.attention.clone();
            attention.push(step_attn[hyp_idx].clone());
            if tok == EOS_ID || step == cfg.max_len {
                finished.push(BeamHypothesis {
                    token_ids: tokens,
                    log_prob,
                    finished: true,
                    attention,
                });
            } else {
                next_live.push(LiveHyp {
                    tokens,
                    log_prob,
                    state: step_states[hyp_idx],
                    attention,
                });
            }
        }
        live = next_live;
    }

    finished.sort_by(|a, b| {
        hyp_score(b, cfg.length_normalize)
            .total_cmp(&hyp_score(a, cfg.length_normalize))
            .then_with(|| a.token_ids.cmp(&b.token_ids))
    });
    finished.truncate(cfg.width);
    Ok(finished)
}

/// Plain argmax decoding; beam search with width one must match this exactly.
pub fn greedy_decode(
    model: &Model,
    passage_ids: &[usize],
    question_ids: &[usize],
    answer_ids: &[usize],
    max_len: usize,
) -> Result<BeamHypothesis, InferenceError> {
    let mut tape = Tape::new();
    let mut mode = ForwardMode::Eval;
    let enc = encode_example(
        &mut tape,
        model,
        passage_ids,
        question_ids,
        answer_ids,
        &mut mode,
    )?;
    let p_mask = vec![true; enc.p_len];
    let mut state = init_decode(&mut tape, model, enc.p_hat, enc.h0);
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut attention = Vec::new();
    for _ in 0..max_len {
        let prev = *tokens.last().unwrap_or(&EOS_ID);
        let e_prev = tape.embed_rows(&model.params, model.embedding, &[prev]);
        let out = decode_step(&mut tape, model, &state, e_prev, enc.p_hat, &p_mask, &mut mode)?;
        state = out.state;
        let probs = tape.value(out.probs).row(0).to_owned();
        let (best, best_p) = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty vocabulary");
        tokens.push(best);
        log_prob += best_p.ln();
        attention.push(tape.value(out.attn).row(0).to_vec());
        if best == EOS_ID {
            break;
        }
    }
    Ok(BeamHypothesis {
        token_ids: tokens,
        log_prob,
        finished: true,
        attention,
    })
}

fn jaccard_set(tokens: &[String]) -> BTreeSet<String> {
    tokens
        .iter()
        .map(|t| t.to_lowercase())
        .filter(|t| t != PAD_TOKEN && t != EOS_TOKEN)
        .collect()
}

/// `1 − |A∩B| / |A∪B|` over lowercased token sets (PAD/EOS excluded); two
/// empty sets have distance zero.
pub fn jaccard_distance(s1: &[String], s2: &[String]) -> f64 {
    let a = jaccard_set(s1);
    let b = jaccard_set(s2);
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    let inter = a.intersection(&b).count();
    1.0 - inter as f64 / union as f64
}

/// The three selected distractors with their beam ranks and pairwise
/// distances.
#[derive(Debug, Clone)]
pub struct DistractorSet {
    pub d1: Vec<String>,
    pub d2: Vec<String>,
    pub d3: Vec<String>,
    pub ranks: [usize; 3],
    pub dist_12: f64,
    pub dist_13: f64,
    pub dist_23: f64,
    /// Set when the distance constraints could not be met and remaining
    /// slots were filled by rank.
    pub fallback: bool,
}

/// Pick three diverse candidates from a ranked list.
///
/// The first candidate is taken as-is; the second is the highest-ranked one
/// with Jaccard distance strictly above 0.5 from the first; the third must
/// clear the same bar against both. When the list runs out, remaining slots
/// fall back to the highest-ranked unused candidates (recycling from the top
/// if fewer than three exist) and the fallback flag is set.
pub fn select_diverse(candidates: &[Vec<String>]) -> Result<DistractorSet, InferenceError> {
    if candidates.is_empty() {
        return Err(InferenceError::EmptyCandidates);
    }
    let mut used = vec![false; candidates.len()];
    let mut picks: Vec<usize> = vec![0];
    used[0] = true;

    // second: distance > 0.5 from the first
    for (i, c) in candidates.iter().enumerate().skip(1) {
        if jaccard_distance(c, &candidates[0]) > 0.5 {
            picks.push(i);
            used[i] = true;
            break;
        }
    }
    // third: distance > 0.5 from both selected so far
    if picks.len() == 2 {
        for (i, c) in candidates.iter().enumerate() {
            if !used[i]
                && jaccard_distance(c, &candidates[picks[0]]) > 0.5
                && jaccard_distance(c, &candidates[picks[1]]) > 0.5
            {
                picks.push(i);
                used[i] = true;
                break;
            }
        }
    }

    let fallback = picks.len() < 3;
    // fill by rank with unused candidates, then recycle from the top
    let mut next_unused = 0;
    let mut recycle = 0;
    while picks.len() < 3 {
        while next_unused < candidates.len() && used[next_unused] {
            next_unused += 1;
        }
        if next_unused < candidates.len() {
            picks.push(next_unused);
            used[next_unused] = true;
        } else {
            picks.push(recycle % candidates.len());
            recycle += 1;
        }
    }

    let [r1, r2, r3] = [picks[0], picks[1], picks[2]];
    Ok(DistractorSet {
        d1: candidates[r1].clone(),
        d2: candidates[r2].clone(),
        d3: candidates[r3].clone(),
        ranks: [r1, r2, r3],
        dist_12: jaccard_distance(&candidates[r1], &candidates[r2]),
        dist_13: jaccard_distance(&candidates[r1], &candidates[r3]),
        dist_23: jaccard_distance(&candidates[r2], &candidates[r3]),
        fallback,
    })
}

/// One output line of the generate command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub example_id: String,
    pub d1: String,
    pub d2: String,
    pub d3: String,
    /// Beam log-probabilities of the three selected hypotheses.
    pub beam_scores: Vec<f64>,
    pub fallback: bool,
}

/// Full generation result for one question, keeping the selected hypotheses
/// around for inspection.
pub struct GenerationOutput {
    pub record: GeneratedRecord,
    pub selected: [BeamHypothesis; 3],
}

/// Run the whole inference pipeline for one question: beam search, surface
/// decoding, and diverse selection.
pub fn generate_for_example(
    model: &Model,
    vocab: &Vocabulary,
    example_id: &str,
    passage_ids: &[usize],
    question_ids: &[usize],
    answer_ids: &[usize],
    cfg: &BeamConfig,
) -> Result<GenerationOutput, InferenceError> {
    let hyps = beam_search(model, passage_ids, question_ids, answer_ids, cfg)?;
    let mut surfaces = Vec::with_capacity(hyps.len());
    for h in &hyps {
        surfaces.push(vocab.decode(&h.token_ids, true)?);
    }
    let set = select_diverse(&surfaces)?;
    let selected = [
        hyps[set.ranks[0]].clone(),
        hyps[set.ranks[1]].clone(),
        hyps[set.ranks[2]].clone(),
    ];
    let record = GeneratedRecord {
        example_id: example_id.to_string(),
        d1: set.d1.join(" "),
        d2: set.d2.join(" "),
        d3: set.d3.join(" "),
        beam_scores: vec![
            selected[0].log_prob,
            selected[1].log_prob,
            selected[2].log_prob,
        ],
        fallback: set.fallback,
    };
    Ok(GenerationOutput { record, selected })
}
