//! The reusable neural building blocks: scaled dot-product attention, the
//! fusion kernel, self-alignment pooling, the bilinear gate, and the
//! bidirectional LSTM encoder. All of them build nodes on a [`Tape`], so the
//! same code path serves both training (with gradients) and inference.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{NodeId, ParamId, ParamSet, Tape};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("attention requires at least one unmasked key position")]
    AllMasked,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("hidden width must be even to split across directions, got {0}")]
    OddWidth(usize),
}

/// Fusion kernel weights: `w` is `4d×d`, `b` is `1×d`.
#[derive(Debug, Clone, Copy)]
pub struct FuseParams {
    pub w: ParamId,
    pub b: ParamId,
}

/// Bilinear gate weights: `w` is `d×d`, `b` is a `1×1` scalar.
#[derive(Debug, Clone, Copy)]
pub struct GateParams {
    pub w: ParamId,
    pub b: ParamId,
}

/// One LSTM direction. `w_x` is `input×4h`, `w_h` is `h×4h`, `b` is `1×4h`,
/// with gates laid out as `[input, forget, cell, output]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BiLstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

/// Whether a forward pass samples dropout masks or runs deterministically.
pub enum ForwardMode<'a> {
    Eval,
    Train { dropout: f64, rng: &'a mut ChaCha8Rng },
}

impl ForwardMode<'_> {
    /// Apply inverted dropout to a node when training; identity otherwise.
    pub fn dropout(&mut self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            ForwardMode::Eval => x,
            ForwardMode::Train { dropout, rng } => {
                if *dropout == 0.0 {
                    x
                } else {
                    let (rows, cols) = tape.value(x).dim();
                    let mask = dropout_mask(rows, cols, *dropout, rng);
                    tape.mul_mask(x, mask)
                }
            }
        }
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`, else
/// `1/(1-rate)` so expectations are preserved.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    let keep = 1.0 - rate;
    Array2::from_shape_fn((rows, cols), |_| {
        if rng.gen::<f64>() < rate {
            0.0
        } else {
            1.0 / keep
        }
    })
}

fn check_finite(tape: &Tape, node: NodeId, what: &str) {
    debug_assert!(
        tape.value(node).iter().all(|x| x.is_finite()),
        "{what} produced a non-finite value"
    );
}

/// Scaled dot-product attention weights: `softmax(X·Yᵀ/√d)` row by row.
///
/// Masked key positions receive exactly zero weight. The result is `m×n`
/// row-stochastic; multiply by `Y` to get the attended representation.
pub fn attn(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    y_mask: &[bool],
) -> Result<NodeId, KernelError> {
    let d = tape.value(x).ncols();
    if tape.value(y).ncols() != d {
        return Err(KernelError::Shape(format!(
            "attention expects matching widths, got {d} and {}",
            tape.value(y).ncols()
        )));
    }
    if y_mask.len() != tape.value(y).nrows() {
        return Err(KernelError::Shape(format!(
            "attention mask covers {} keys but Y has {} rows",
            y_mask.len(),
            tape.value(y).nrows()
        )));
    }
    if !y_mask.iter().any(|&b| b) {
        return Err(KernelError::AllMasked);
    }
    let yt = tape.transpose(y);
    let scores = tape.matmul(x, yt);
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_rows(scaled, Some(y_mask));
    check_finite(tape, weights, "attn");
    Ok(weights)
}

/// Fusion kernel: `tanh([X; X̄; X−X̄; X∘X̄]·W + b)`.
pub fn fuse(
    tape: &mut Tape,
    params: &ParamSet,
    fp: FuseParams,
    x: NodeId,
    x_bar: NodeId,
) -> Result<NodeId, KernelError> {
    let (m, d) = tape.value(x).dim();
    if tape.value(x_bar).dim() != (m, d) {
        return Err(KernelError::Shape(format!(
            "fuse expects equal shapes, got {:?} and {:?}",
            (m, d),
            tape.value(x_bar).dim()
        )));
    }
    if params.value(fp.w).dim() != (4 * d, d) {
        return Err(KernelError::Shape(format!(
            "fuse weight must be {}×{d}, got {:?}",
            4 * d,
            params.value(fp.w).dim()
        )));
    }
    let w = tape.param(params, fp.w);
    let b = tape.param(params, fp.b);
    let diff = tape.sub(x, x_bar);
    let prod = tape.mul(x, x_bar);
    let cat01 = tape.concat_cols(x, x_bar);
    let cat23 = tape.concat_cols(diff, prod);
    let cat = tape.concat_cols(cat01, cat23);
    let affine = tape.matmul(cat, w);
    let shifted = tape.add_row_broadcast(affine, b);
    let out = tape.tanh(shifted);
    check_finite(tape, out, "fuse");
    Ok(out)
}

/// Attention-pool a token matrix into one sentence vector:
/// `v = softmax(X·w)ᵀ·X`, a convex combination of the unmasked rows.
pub fn self_align(
    tape: &mut Tape,
    params: &ParamSet,
    w_a: ParamId,
    x: NodeId,
    mask: &[bool],
) -> Result<NodeId, KernelError> {
    let (m, d) = tape.value(x).dim();
    if mask.len() != m {
        return Err(KernelError::Shape(format!(
            "self-align mask covers {} rows but X has {m}",
            mask.len()
        )));
    }
    if !mask.iter().any(|&b| b) {
        return Err(KernelError::AllMasked);
    }
    if params.value(w_a).dim() != (d, 1) {
        return Err(KernelError::Shape(format!(
            "self-align weight must be {d}×1, got {:?}",
            params.value(w_a).dim()
        )));
    }
    let w = tape.param(params, w_a);
    let scores = tape.matmul(x, w);
    let scores_row = tape.transpose(scores);
    let weights = tape.softmax_rows(scores_row, Some(mask));
    let v = tape.matmul(weights, x);
    check_finite(tape, v, "self_align");
    Ok(v)
}

/// Bilinear gate: `δ_i = X_i·W·vᵀ + b`, output row `i` is `δ_i·X_i`.
///
/// The gate values are returned raw (no squashing) so they can be negative or
/// exceed one; `squash` optionally applies a logistic to them first.
pub fn gate(
    tape: &mut Tape,
    params: &ParamSet,
    gp: GateParams,
    x: NodeId,
    v: NodeId,
    squash: bool,
) -> Result<(NodeId, NodeId), KernelError> {
    let d = tape.value(x).ncols();
    if tape.value(v).dim() != (1, d) {
        return Err(KernelError::Shape(format!(
            "gate reference vector must be 1×{d}, got {:?}",
            tape.value(v).dim()
        )));
    }
    if params.value(gp.w).dim() != (d, d) {
        return Err(KernelError::Shape(format!(
            "gate weight must be {d}×{d}, got {:?}",
            params.value(gp.w).dim()
        )));
    }
    let w = tape.param(params, gp.w);
    let b = tape.param(params, gp.b);
    let xw = tape.matmul(x, w);
    let vt = tape.transpose(v);
    let bilinear = tape.matmul(xw, vt);
    let mut delta = tape.add_scalar_broadcast(bilinear, b);
    if squash {
        delta = tape.sigmoid(delta);
    }
    let gated = tape.mul_col_broadcast(x, delta);
    check_finite(tape, gated, "gate");
    Ok((gated, delta))
}

/// One LSTM step. `x` is `1×input`, `h` and `c` are `1×hidden`.
pub fn lstm_cell(
    tape: &mut Tape,
    params: &ParamSet,
    lp: &LstmParams,
    x: NodeId,
    h: NodeId,
    c: NodeId,
) -> (NodeId, NodeId) {
    let hsz = lp.hidden;
    let wx = tape.param(params, lp.w_x);
    let wh = tape.param(params, lp.w_h);
    let b = tape.param(params, lp.b);
    let xin = tape.matmul(x, wx);
    let hin = tape.matmul(h, wh);
    let lin = tape.add(xin, hin);
    let gates = tape.add_row_broadcast(lin, b);
    let i_raw = tape.col_slice(gates, 0, hsz);
    let f_raw = tape.col_slice(gates, hsz, hsz);
    let g_raw = tape.col_slice(gates, 2 * hsz, hsz);
    let o_raw = tape.col_slice(gates, 3 * hsz, hsz);
    let i = tape.sigmoid(i_raw);
    let f = tape.sigmoid(f_raw);
    let g = tape.tanh(g_raw);
    let o = tape.sigmoid(o_raw);
    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c_new = tape.add(fc, ig);
    let c_act = tape.tanh(c_new);
    let h_new = tape.mul(o, c_act);
    (h_new, c_new)
}

/// Output of a bidirectional encoder pass.
pub struct BiEncoded {
    /// `L×2h` — forward and backward hidden states concatenated per position.
    pub output: NodeId,
    /// Final hidden state of the forward pass (last position).
    pub fwd_last: NodeId,
    /// Final hidden state of the backward pass (first position).
    pub bwd_last: NodeId,
}

/// Run a forward and a backward LSTM over `x` (`L×input`, `L ≥ 1`) and
/// concatenate their hidden states position by position.
pub fn bi_encode(
    tape: &mut Tape,
    params: &ParamSet,
    bp: &BiLstmParams,
    x: NodeId,
) -> Result<BiEncoded, KernelError> {
    let len = tape.value(x).nrows();
    if len == 0 {
        return Err(KernelError::Shape("bi_encode needs at least one row".into()));
    }
    let run = |tape: &mut Tape, lp: &LstmParams, forward: bool| -> Vec<NodeId> {
        let mut h = tape.input(Array2::zeros((1, lp.hidden)));
        let mut c = tape.input(Array2::zeros((1, lp.hidden)));
        let order: Vec<usize> = if forward {
            (0..len).collect()
        } else {
            (0..len).rev().collect()
        };
        let mut states = vec![h; len];
        for t in order {
            let xt = tape.row(x, t);
            let (h_new, c_new) = lstm_cell(tape, params, lp, xt, h, c);
            h = h_new;
            c = c_new;
            states[t] = h;
        }
        states
    };
    let fwd = run(tape, &bp.fwd, true);
    let bwd = run(tape, &bp.bwd, false);
    let rows: Vec<NodeId> = fwd
        .iter()
        .zip(bwd.iter())
        .map(|(&f, &b)| tape.concat_cols(f, b))
        .collect();
    let output = tape.concat_rows(&rows);
    check_finite(tape, output, "bi_encode");
    Ok(BiEncoded {
        output,
        fwd_last: fwd[len - 1],
        bwd_last: bwd[0],
    })
}
