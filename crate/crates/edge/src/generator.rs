//! The attention-based recurrent decoder and its training loss.

use crate::graph::{NodeId, Tape};
use crate::kernels::{attn, lstm_cell, ForwardMode, KernelError};
use crate::model::Model;
use crate::reform::EncodedExample;
use crate::text::EOS_ID;
use ndarray::Array2;

/// Decoder state between steps: recurrent hidden/cell state plus the
/// attention context vector.
#[derive(Clone, Copy)]
pub struct DecoderState {
    pub h: NodeId,
    pub cell: NodeId,
    pub ctx: NodeId,
}

/// Everything one decode step produces.
pub struct StepOutput {
    pub state: DecoderState,
    /// Pre-softmax scores over the vocabulary, `1×|V|`.
    pub logits: NodeId,
    /// The output distribution, `1×|V|`, sums to one.
    pub probs: NodeId,
    /// Attention weights over the passage, `1×L_p`.
    pub attn: NodeId,
}

/// Set up the decoder: hidden state from the question initializer, zero cell
/// state, and the mean of the reformed passage rows as the first context.
pub fn init_decode(tape: &mut Tape, model: &Model, p_hat: NodeId, h0: NodeId) -> DecoderState {
    let ctx = tape.mean_rows(p_hat);
    let cell = tape.input(Array2::zeros((1, model.cfg.dim)));
    DecoderState { h: h0, cell, ctx }
}

/// One decoder step: feed `[e_prev; ctx_prev]` to the LSTM, attend the
/// reformed passage with the projected hidden state, and project `[h; ctx]`
/// to the vocabulary.
pub fn decode_step(
    tape: &mut Tape,
    model: &Model,
    state: &DecoderState,
    e_prev: NodeId,
    p_hat: NodeId,
    p_mask: &[bool],
    mode: &mut ForwardMode,
) -> Result<StepOutput, KernelError> {
    let x = tape.concat_cols(e_prev, state.ctx);
    let (h, cell) = lstm_cell(tape, &model.params, &model.dec_cell, x, state.h, state.cell);
    let w_h = tape.param(&model.params, model.dec_attn_w);
    let query = tape.matmul(h, w_h);
    let attn_w = attn(tape, query, p_hat, p_mask)?;
    let ctx = tape.matmul(attn_w, p_hat);
    let hc = tape.concat_cols(h, ctx);
    let hc = mode.dropout(tape, hc);
    let w_s = tape.param(&model.params, model.dec_w_s);
    let w_v = tape.param(&model.params, model.dec_w_v);
    let b_v = tape.param(&model.params, model.dec_b_v);
    let hidden = tape.matmul(hc, w_s);
    let hidden = tape.tanh(hidden);
    let scores = tape.matmul(hidden, w_v);
    let logits = tape.add_row_broadcast(scores, b_v);
    let probs = tape.softmax_rows(logits, None);
    Ok(StepOutput {
        state: DecoderState { h, cell, ctx },
        logits,
        probs,
        attn: attn_w,
    })
}

/// Teacher-forced negative log-likelihood of one gold distractor, with a
/// terminal EOS appended so the model learns to stop.
///
/// Returns the summed loss node and the number of scored tokens.
pub fn pair_loss(
    tape: &mut Tape,
    model: &Model,
    enc: &EncodedExample,
    distractor_ids: &[usize],
    mode: &mut ForwardMode,
) -> Result<(NodeId, usize), KernelError> {
    assert!(!distractor_ids.is_empty(), "empty gold distractor");
    let p_mask = vec![true; enc.p_len];
    let mut targets: Vec<usize> = distractor_ids.to_vec();
    targets.push(EOS_ID);
    // inputs are EOS followed by the gold tokens (teacher forcing)
    let mut inputs = vec![EOS_ID];
    inputs.extend_from_slice(distractor_ids);

    let mut state = init_decode(tape, model, enc.p_hat, enc.h0);
    let mut total: Option<NodeId> = None;
    for (t, &target) in targets.iter().enumerate() {
        let e_prev = tape.embed_rows(&model.params, model.embedding, &inputs[t..t + 1]);
        let e_prev = mode.dropout(tape, e_prev);
        let step = decode_step(tape, model, &state, e_prev, enc.p_hat, &p_mask, mode)?;
        state = step.state;
        // -log softmax(logits)[target], computed stably from the logits
        let lse = tape.log_sum_exp_rows(step.logits);
        let picked = tape.pick_entry(step.logits, 0, target);
        let nll = tape.sub(lse, picked);
        total = Some(match total {
            Some(acc) => tape.add(acc, nll),
            None => nll,
        });
    }
    Ok((total.expect("at least one step"), targets.len()))
}

/// Summed cross-entropy over a batch of (encoded example, gold ids) pairs.
pub fn sequence_loss(
    tape: &mut Tape,
    model: &Model,
    items: &[(&EncodedExample, &[usize])],
    mode: &mut ForwardMode,
) -> Result<(NodeId, usize), KernelError> {
    assert!(!items.is_empty(), "sequence_loss needs at least one pair");
    let mut total: Option<NodeId> = None;
    let mut tokens = 0;
    for (enc, gold) in items {
        let (loss, n) = pair_loss(tape, model, enc, gold, mode)?;
        tokens += n;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss),
            None => loss,
        });
    }
    Ok((total.expect("non-empty batch"), tokens))
}
