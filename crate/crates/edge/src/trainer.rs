//! The optimization loop: Nesterov-momentum updates, dropout, validation
//! perplexity for model selection, and early stopping.

use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointConfig};
use crate::corpus::TrainingPair;
use crate::generator::{pair_loss, sequence_loss};
use crate::graph::{Gradients, ParamSet, Tape};
use crate::kernels::{dropout_mask, ForwardMode, KernelError};
use crate::model::Model;
use crate::reform::encode_example;
use crate::text::Vocabulary;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("cannot write training log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Global-norm gradient clipping threshold.
    pub clip_norm: f64,
    pub seed: u64,
    pub beam_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            momentum: 0.9,
            batch_size: 64,
            dropout: 0.1,
            max_epochs: 30,
            patience: 5,
            clip_norm: 5.0,
            seed: 1234,
            beam_size: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.learning_rate <= 0.0 {
            return Err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.batch_size < 1 {
            return Err("batch_size must be at least 1".into());
        }
        if self.beam_size < 1 {
            return Err("beam_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }
}

/// One Nesterov-momentum update in the reformulated parameterization:
/// `v ← μ·v − lr·g`, then `θ ← θ + μ·v − lr·g` with the updated `v`.
/// With `μ = 0` this reduces to plain gradient descent.
pub fn nag_step(
    params: &mut ParamSet,
    grads: &Gradients,
    velocity: &mut Gradients,
    learning_rate: f64,
    momentum: f64,
) {
    for id in params.ids().collect::<Vec<_>>() {
        if !params.is_trainable(id) {
            continue;
        }
        let g = grads.get(id);
        let v = velocity.get_mut(id);
        v.zip_mut_with(g, |v, &g| *v = momentum * *v - learning_rate * g);
        let v = velocity.get(id);
        let theta = params.value_mut(id);
        ndarray::Zip::from(theta)
            .and(v)
            .and(g)
            .for_each(|t, &v, &g| *t += momentum * v - learning_rate * g);
    }
}

/// Inverted dropout on a plain matrix: zero entries with probability `rate`
/// and scale survivors by `1/(1−rate)` during training; identity otherwise.
pub fn apply_dropout(
    tensor: &Array2<f64>,
    rate: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    if !training || rate == 0.0 {
        return tensor.clone();
    }
    let mask = dropout_mask(tensor.nrows(), tensor.ncols(), rate, rng);
    tensor * &mask
}

/// Validation perplexity: `exp(total NLL / total gold tokens)` over all
/// pairs, independent of any batching.
pub fn perplexity(model: &Model, pairs: &[TrainingPair]) -> Result<f64, KernelError> {
    assert!(!pairs.is_empty(), "perplexity over an empty split");
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for pair in pairs {
        let mut tape = Tape::new();
        let mut mode = ForwardMode::Eval;
        let enc = encode_example(
            &mut tape,
            model,
            &pair.passage,
            &pair.question,
            &pair.answer,
            &mut mode,
        )?;
        let (loss, n) = pair_loss(&mut tape, model, &enc, &pair.distractor, &mut mode)?;
        nll += tape.value(loss)[(0, 0)];
        tokens += n;
    }
    Ok((nll / tokens as f64).exp())
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Summed cross-entropy over the epoch.
    pub train_loss: f64,
    /// The same loss divided by the number of scored tokens.
    pub train_loss_per_token: f64,
    pub val_ppl: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    /// The checkpoint with the lowest validation perplexity.
    pub best: Checkpoint,
    pub epochs: Vec<EpochLog>,
}

/// Run epochs of shuffled mini-batch NAG steps, keeping the checkpoint with
/// the lowest validation perplexity. Stops early after `patience` epochs
/// without improvement.
pub fn train(
    model: &mut Model,
    vocab: &Vocabulary,
    ckpt_config: &CheckpointConfig,
    train_pairs: &[TrainingPair],
    val_pairs: &[TrainingPair],
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    assert!(!train_pairs.is_empty(), "no training pairs");
    assert!(!val_pairs.is_empty(), "no validation pairs");
    let cfg = ckpt_config.train.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = Gradients::zeros_like(&model.params);
    let mut pairs: Vec<TrainingPair> = train_pairs.to_vec();

    let mut best: Option<Checkpoint> = None;
    let mut best_ppl = f64::INFINITY;
    let mut stale = 0usize;
    let mut step = 0usize;
    let mut epochs = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        pairs.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for chunk in pairs.chunks(cfg.batch_size) {
            step += 1;
            let mut tape = Tape::new();
            let mut mode = ForwardMode::Train {
                dropout: cfg.dropout,
                rng: &mut rng,
            };
            let mut encoded = Vec::with_capacity(chunk.len());
            for pair in chunk {
                encoded.push(encode_example(
                    &mut tape,
                    model,
                    &pair.passage,
                    &pair.question,
                    &pair.answer,
                    &mut mode,
                )?);
            }
            let items: Vec<_> = encoded
                .iter()
                .zip(chunk)
                .map(|(enc, pair)| (enc, pair.distractor.as_slice()))
                .collect();
            let (loss, tokens) = sequence_loss(&mut tape, model, &items, &mut mode)?;
            let loss_value = tape.value(loss)[(0, 0)];
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            epoch_loss += loss_value;
            epoch_tokens += tokens;

            let mut grads = tape.backward(loss, &model.params);
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            if norm > cfg.clip_norm {
                grads.scale(cfg.clip_norm / norm);
            }
            nag_step(
                &mut model.params,
                &grads,
                &mut velocity,
                cfg.learning_rate,
                cfg.momentum,
            );
        }

        let val_ppl = perplexity(model, val_pairs)?;
        if !val_ppl.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        let entry = EpochLog {
            epoch,
            train_loss: epoch_loss,
            train_loss_per_token: epoch_loss / epoch_tokens as f64,
            val_ppl,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &entry).map_err(std::io::Error::other)?;
            writeln!(w)?;
        }
        epochs.push(entry);

        if val_ppl < best_ppl {
            best_ppl = val_ppl;
            best = Some(Checkpoint::from_model(
                model,
                vocab,
                ckpt_config.clone(),
                epoch,
                val_ppl,
            ));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        epochs,
    })
}
