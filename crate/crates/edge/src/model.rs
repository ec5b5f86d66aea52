//! The full parameter inventory: shared embedding, the contextual encoder,
//! enriching/reforming weights, the question initializer, and the decoder
//! head, all registered by name in one [`ParamSet`].

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ParamId, ParamSet};
use crate::kernels::{BiLstmParams, FuseParams, GateParams, KernelError, LstmParams};
use crate::text::EmbeddingMatrix;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("parameter {0:?} missing from checkpoint")]
    MissingParam(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        found: (usize, usize),
        expected: (usize, usize),
    },
}

/// Architecture hyperparameters that live in the checkpoint.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding and hidden width; must be even.
    pub dim: usize,
    /// Apply a logistic squash to gate values instead of using them raw.
    pub gate_squash: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 300,
            gate_squash: false,
        }
    }
}

/// Every learnable tensor plus typed handles into the registry.
#[derive(Debug)]
pub struct Model {
    pub params: ParamSet,
    pub cfg: ModelConfig,
    pub vocab_size: usize,
    pub embedding: ParamId,
    pub encoder: BiLstmParams,
    pub fuse: FuseParams,
    pub self_align_w: ParamId,
    pub gate_q: GateParams,
    pub gate_p: GateParams,
    pub re_encoder: BiLstmParams,
    pub q_init: BiLstmParams,
    pub q_init_w: ParamId,
    pub q_init_b: ParamId,
    pub dec_cell: LstmParams,
    pub dec_attn_w: ParamId,
    pub dec_w_s: ParamId,
    pub dec_w_v: ParamId,
    pub dec_b_v: ParamId,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rng, rows, cols, limit)
}

fn lstm(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    input: usize,
    hidden: usize,
) -> LstmParams {
    // uniform ±1/√h, which is ±0.08 at the reference width of 150 per
    // direction and keeps signal magnitudes usable at small widths
    let limit = 1.0 / (hidden as f64).sqrt();
    LstmParams {
        w_x: params.add(
            &format!("{prefix}.w_x"),
            uniform(rng, input, 4 * hidden, limit),
            true,
        ),
        w_h: params.add(
            &format!("{prefix}.w_h"),
            uniform(rng, hidden, 4 * hidden, limit),
            true,
        ),
        b: params.add(&format!("{prefix}.b"), Array2::zeros((1, 4 * hidden)), true),
        hidden,
    }
}

fn bilstm(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    input: usize,
    hidden: usize,
) -> BiLstmParams {
    BiLstmParams {
        fwd: lstm(params, rng, &format!("{prefix}.fwd"), input, hidden),
        bwd: lstm(params, rng, &format!("{prefix}.bwd"), input, hidden),
    }
}

impl Model {
    /// Build a freshly initialized model around an embedding matrix.
    ///
    /// Recurrent weights start uniform in ±0.08, projections use
    /// Glorot-scaled uniform, and biases start at zero.
    pub fn new(
        embedding: EmbeddingMatrix,
        cfg: ModelConfig,
        seed: u64,
    ) -> Result<Model, ModelError> {
        let d = cfg.dim;
        if !d.is_multiple_of(2) {
            return Err(KernelError::OddWidth(d).into());
        }
        assert_eq!(
            embedding.weights.ncols(),
            d,
            "embedding width must match model dim"
        );
        let vocab_size = embedding.weights.nrows();
        let h = d / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();

        let emb = params.add("embedding", embedding.weights, embedding.trainable);
        let encoder = bilstm(&mut params, &mut rng, "encoder", d, h);
        let fuse = FuseParams {
            w: params.add("fuse.w_f", glorot(&mut rng, 4 * d, d), true),
            b: params.add("fuse.b_f", Array2::zeros((1, d)), true),
        };
        let self_align_w = params.add("self_align.w_a", glorot(&mut rng, d, 1), true);
        let gate_q = GateParams {
            w: params.add("reform_q.w_g", glorot(&mut rng, d, d), true),
            b: params.add("reform_q.b_g", Array2::zeros((1, 1)), true),
        };
        let gate_p = GateParams {
            w: params.add("reform_p.w_g", glorot(&mut rng, d, d), true),
            b: params.add("reform_p.b_g", Array2::zeros((1, 1)), true),
        };
        let re_encoder = bilstm(&mut params, &mut rng, "re_encoder", d, h);
        let q_init = bilstm(&mut params, &mut rng, "q_init", d, h);
        let q_init_w = params.add("q_init.w_p", glorot(&mut rng, d, d), true);
        let q_init_b = params.add("q_init.b_p", Array2::zeros((1, d)), true);
        let dec_cell = lstm(&mut params, &mut rng, "decoder.cell", 2 * d, d);
        let dec_attn_w = params.add("decoder.w_h", glorot(&mut rng, d, d), true);
        let dec_w_s = params.add("decoder.w_s", glorot(&mut rng, 2 * d, d), true);
        let dec_w_v = params.add("decoder.w_v", glorot(&mut rng, d, vocab_size), true);
        let dec_b_v = params.add("decoder.b_v", Array2::zeros((1, vocab_size)), true);

        Ok(Model {
            params,
            cfg,
            vocab_size,
            embedding: emb,
            encoder,
            fuse,
            self_align_w,
            gate_q,
            gate_p,
            re_encoder,
            q_init,
            q_init_w,
            q_init_b,
            dec_cell,
            dec_attn_w,
            dec_w_s,
            dec_w_v,
            dec_b_v,
        })
    }

    /// Rebuild the typed handles over an existing registry (checkpoint load).
    pub fn from_param_set(params: ParamSet, cfg: ModelConfig) -> Result<Model, ModelError> {
        let d = cfg.dim;
        if !d.is_multiple_of(2) {
            return Err(KernelError::OddWidth(d).into());
        }
        let h = d / 2;
        let find = |name: &str| {
            params
                .id_by_name(name)
                .ok_or_else(|| ModelError::MissingParam(name.to_string()))
        };
        let check = |id: ParamId, name: &str, expected: (usize, usize)| {
            let found = params.value(id).dim();
            if found != expected {
                Err(ModelError::ParamShape {
                    name: name.to_string(),
                    found,
                    expected,
                })
            } else {
                Ok(id)
            }
        };
        let lstm_ids = |prefix: &str, input: usize, hidden: usize| -> Result<LstmParams, ModelError> {
            Ok(LstmParams {
                w_x: check(
                    find(&format!("{prefix}.w_x"))?,
                    &format!("{prefix}.w_x"),
                    (input, 4 * hidden),
                )?,
                w_h: check(
                    find(&format!("{prefix}.w_h"))?,
                    &format!("{prefix}.w_h"),
                    (hidden, 4 * hidden),
                )?,
                b: check(
                    find(&format!("{prefix}.b"))?,
                    &format!("{prefix}.b"),
                    (1, 4 * hidden),
                )?,
                hidden,
            })
        };
        let embedding = find("embedding")?;
        let vocab_size = params.value(embedding).nrows();
        if params.value(embedding).ncols() != d {
            return Err(ModelError::ParamShape {
                name: "embedding".into(),
                found: params.value(embedding).dim(),
                expected: (vocab_size, d),
            });
        }
        let model = Model {
            vocab_size,
            embedding,
            encoder: BiLstmParams {
                fwd: lstm_ids("encoder.fwd", d, h)?,
                bwd: lstm_ids("encoder.bwd", d, h)?,
            },
            fuse: FuseParams {
                w: check(find("fuse.w_f")?, "fuse.w_f", (4 * d, d))?,
                b: check(find("fuse.b_f")?, "fuse.b_f", (1, d))?,
            },
            self_align_w: check(find("self_align.w_a")?, "self_align.w_a", (d, 1))?,
            gate_q: GateParams {
                w: check(find("reform_q.w_g")?, "reform_q.w_g", (d, d))?,
                b: check(find("reform_q.b_g")?, "reform_q.b_g", (1, 1))?,
            },
            gate_p: GateParams {
                w: check(find("reform_p.w_g")?, "reform_p.w_g", (d, d))?,
                b: check(find("reform_p.b_g")?, "reform_p.b_g", (1, 1))?,
            },
            re_encoder: BiLstmParams {
                fwd: lstm_ids("re_encoder.fwd", d, h)?,
                bwd: lstm_ids("re_encoder.bwd", d, h)?,
            },
            q_init: BiLstmParams {
                fwd: lstm_ids("q_init.fwd", d, h)?,
                bwd: lstm_ids("q_init.bwd", d, h)?,
            },
            q_init_w: check(find("q_init.w_p")?, "q_init.w_p", (d, d))?,
            q_init_b: check(find("q_init.b_p")?, "q_init.b_p", (1, d))?,
            dec_cell: lstm_ids("decoder.cell", 2 * d, d)?,
            dec_attn_w: check(find("decoder.w_h")?, "decoder.w_h", (d, d))?,
            dec_w_s: check(find("decoder.w_s")?, "decoder.w_s", (2 * d, d))?,
            dec_w_v: check(find("decoder.w_v")?, "decoder.w_v", (d, vocab_size))?,
            dec_b_v: check(find("decoder.b_v")?, "decoder.b_v", (1, vocab_size))?,
            params,
            cfg,
        };
        Ok(model)
    }
}
