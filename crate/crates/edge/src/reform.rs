//! The enriching module, the two reforming modules, and the question
//! initializer, composed from the kernels.
//!
//! Wiring notes that matter for correctness:
//! - the answer-to-question attention consumes the *enriched* question, never
//!   the reformed one;
//! - the passage gate multiplies the *original* contextual passage rows, not
//!   an enriched form;
//! - the re-encoding pass has its own recurrent weights, separate from the
//!   shared first-pass encoder.

use crate::graph::{NodeId, Tape};
use crate::kernels::{attn, bi_encode, fuse, gate, self_align, ForwardMode, KernelError};
use crate::model::Model;

/// Node handles for every representation produced while encoding one example.
pub struct EncodedExample {
    pub p: NodeId,
    pub q: NodeId,
    pub a: NodeId,
    pub q_tilde: NodeId,
    pub a_tilde: NodeId,
    pub q_dot: NodeId,
    pub p_hat: NodeId,
    pub h0: NodeId,
    pub gate_values_q: Vec<f64>,
    pub gate_values_p: Vec<f64>,
    pub p_len: usize,
    pub q_len: usize,
    pub a_len: usize,
    /// Passage-attended question from the enriching step, before fusion.
    pub q_bar: NodeId,
    /// Passage-attended answer from the enriching step, before fusion.
    pub a_bar: NodeId,
    pub trace: PassageTrace,
}

/// Intermediate nodes of the passage reformer, kept for wiring tests and
/// inspection.
pub struct PassageTrace {
    /// Question-attended answer inside the passage reformer.
    pub a_bar: NodeId,
    /// Fused answer used to gate the passage.
    pub a_hat: NodeId,
    /// Gated passage rows (`δ_i · P_i`).
    pub p_dot: NodeId,
    /// Fusion of the gated passage with its question-attended form.
    pub p_tilde: NodeId,
}

/// Fuse passage context into the question and answer representations.
pub fn enrich(
    tape: &mut Tape,
    model: &Model,
    q: NodeId,
    a: NodeId,
    p: NodeId,
    p_mask: &[bool],
) -> Result<(NodeId, NodeId, NodeId, NodeId), KernelError> {
    let qw = attn(tape, q, p, p_mask)?;
    let q_bar = tape.matmul(qw, p);
    let q_tilde = fuse(tape, &model.params, model.fuse, q, q_bar)?;
    let aw = attn(tape, a, p, p_mask)?;
    let a_bar = tape.matmul(aw, p);
    let a_tilde = fuse(tape, &model.params, model.fuse, a, a_bar)?;
    Ok((q_tilde, a_tilde, q_bar, a_bar))
}

/// Down-weight answer-relevant question words: pool the enriched answer into
/// one vector, score each question word against it, and scale the rows by
/// those gate values.
pub fn reform_question(
    tape: &mut Tape,
    model: &Model,
    q_tilde: NodeId,
    a_tilde: NodeId,
    a_mask: &[bool],
) -> Result<(NodeId, NodeId), KernelError> {
    let v_a = self_align(tape, &model.params, model.self_align_w, a_tilde, a_mask)?;
    let (q_dot, delta) = gate(
        tape,
        &model.params,
        model.gate_q,
        q_tilde,
        v_a,
        model.cfg.gate_squash,
    )?;
    Ok((q_dot, delta))
}

/// Reform the passage in four steps: question-aware answer fusion, gating of
/// the original contextual passage, question fusion, and re-encoding.
#[allow(clippy::too_many_arguments)]
pub fn reform_passage(
    tape: &mut Tape,
    model: &Model,
    p: NodeId,
    q_tilde: NodeId,
    q_dot: NodeId,
    a_tilde: NodeId,
    q_mask: &[bool],
    a_mask: &[bool],
) -> Result<(NodeId, NodeId, PassageTrace), KernelError> {
    // the answer attends the enriched question, which still carries the
    // complete answer-relevant signal
    let aw = attn(tape, a_tilde, q_tilde, q_mask)?;
    let a_bar = tape.matmul(aw, q_tilde);
    let a_hat = fuse(tape, &model.params, model.fuse, a_tilde, a_bar)?;
    let v_a = self_align(tape, &model.params, model.self_align_w, a_hat, a_mask)?;
    // the gate scales the original contextual passage rows
    let (p_dot, delta) = gate(
        tape,
        &model.params,
        model.gate_p,
        p,
        v_a,
        model.cfg.gate_squash,
    )?;
    let pw = attn(tape, p_dot, q_dot, q_mask)?;
    let p_bar = tape.matmul(pw, q_dot);
    let p_tilde = fuse(tape, &model.params, model.fuse, p_dot, p_bar)?;
    let re = bi_encode(tape, &model.params, &model.re_encoder, p_tilde)?;
    let trace = PassageTrace {
        a_bar,
        a_hat,
        p_dot,
        p_tilde,
    };
    Ok((re.output, delta, trace))
}

/// Project the reformed question into the decoder's initial hidden state:
/// run the dedicated bidirectional pass, concatenate the final states of the
/// two directions, and apply the affine map.
pub fn init_decoder_state(
    tape: &mut Tape,
    model: &Model,
    q_dot: NodeId,
) -> Result<NodeId, KernelError> {
    let enc = bi_encode(tape, &model.params, &model.q_init, q_dot)?;
    let h_q = tape.concat_cols(enc.fwd_last, enc.bwd_last);
    let w = tape.param(&model.params, model.q_init_w);
    let b = tape.param(&model.params, model.q_init_b);
    let proj = tape.matmul(h_q, w);
    Ok(tape.add_row_broadcast(proj, b))
}

/// Run the whole encoding pipeline over one example's token ids.
pub fn encode_example(
    tape: &mut Tape,
    model: &Model,
    passage_ids: &[usize],
    question_ids: &[usize],
    answer_ids: &[usize],
    mode: &mut ForwardMode,
) -> Result<EncodedExample, KernelError> {
    assert!(
        !passage_ids.is_empty() && !question_ids.is_empty() && !answer_ids.is_empty(),
        "encode_example requires non-empty fields"
    );
    let p_mask = vec![true; passage_ids.len()];
    let q_mask = vec![true; question_ids.len()];
    let a_mask = vec![true; answer_ids.len()];

    let p_emb = tape.embed_rows(&model.params, model.embedding, passage_ids);
    let p_emb = mode.dropout(tape, p_emb);
    let q_emb = tape.embed_rows(&model.params, model.embedding, question_ids);
    let q_emb = mode.dropout(tape, q_emb);
    let a_emb = tape.embed_rows(&model.params, model.embedding, answer_ids);
    let a_emb = mode.dropout(tape, a_emb);

    // shared contextual encoder over all three materials
    let p = bi_encode(tape, &model.params, &model.encoder, p_emb)?.output;
    let q = bi_encode(tape, &model.params, &model.encoder, q_emb)?.output;
    let a = bi_encode(tape, &model.params, &model.encoder, a_emb)?.output;

    let (q_tilde, a_tilde, q_bar, a_bar) = enrich(tape, model, q, a, p, &p_mask)?;
    let (q_dot, delta_q) = reform_question(tape, model, q_tilde, a_tilde, &a_mask)?;
    let (p_hat, delta_p, trace) =
        reform_passage(tape, model, p, q_tilde, q_dot, a_tilde, &q_mask, &a_mask)?;
    let h0 = init_decoder_state(tape, model, q_dot)?;

    let gate_values_q = tape.value(delta_q).column(0).to_vec();
    let gate_values_p = tape.value(delta_p).column(0).to_vec();
    Ok(EncodedExample {
        p,
        q,
        a,
        q_tilde,
        a_tilde,
        q_dot,
        p_hat,
        h0,
        gate_values_q,
        gate_values_p,
        p_len: passage_ids.len(),
        q_len: question_ids.len(),
        a_len: answer_ids.len(),
        trace,
    })
}
