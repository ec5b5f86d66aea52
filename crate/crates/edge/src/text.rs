//! Vocabulary construction, special tokens, and the shared word-embedding
//! matrix.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::corpus::DistractorExample;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const EOS_ID: usize = 2;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Doubles as the decoder start token; there is no separate BOS.
pub const EOS_TOKEN: &str = "<eos>";

const VOCAB_HEADER: &str = "edge-vocab-v1";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding file line {line}: expected {expected} values for token {token:?}, found {found}")]
    EmbeddingDim {
        line: usize,
        token: String,
        expected: usize,
        found: usize,
    },
    #[error("embedding file line {line}: {message}")]
    EmbeddingParse { line: usize, message: String },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("vocabulary file has header {found:?}, expected {expected:?}")]
    VocabHeader { found: String, expected: String },
}

/// Token ↔ id bijection with the three reserved specials at ids 0, 1, 2.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    fn with_specials() -> Vocabulary {
        let mut v = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for tok in [PAD_TOKEN, UNK_TOKEN, EOS_TOKEN] {
            v.token_to_id.insert(tok.to_string(), v.id_to_token.len());
            v.id_to_token.push(tok.to_string());
        }
        v
    }

    fn push(&mut self, token: &str) {
        if !self.token_to_id.contains_key(token) {
            self.token_to_id
                .insert(token.to_string(), self.id_to_token.len());
            self.id_to_token.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Result<&str, TextError> {
        self.id_to_token
            .get(id)
            .map(String::as_str)
            .ok_or(TextError::IdOutOfRange {
                id,
                size: self.id_to_token.len(),
            })
    }

    /// Map tokens to ids; out-of-vocabulary tokens become [`UNK_ID`].
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Map ids back to tokens. With `stop_at_eos`, decoding ends before the
    /// first EOS.
    pub fn decode(&self, ids: &[usize], stop_at_eos: bool) -> Result<Vec<String>, TextError> {
        let mut out = Vec::new();
        for &id in ids {
            if stop_at_eos && id == EOS_ID {
                break;
            }
            out.push(self.token(id)?.to_string());
        }
        Ok(out)
    }

    /// Write the one-token-per-line text form (specials implicit).
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{VOCAB_HEADER}")?;
        for token in &self.id_to_token[3..] {
            writeln!(w, "{token}")?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Vocabulary, TextError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| TextError::Io {
                path: "<vocabulary>".into(),
                source: e,
            })?
            .unwrap_or_default();
        if header != VOCAB_HEADER {
            return Err(TextError::VocabHeader {
                found: header,
                expected: VOCAB_HEADER.to_string(),
            });
        }
        let mut vocab = Vocabulary::with_specials();
        for line in lines {
            let token = line.map_err(|e| TextError::Io {
                path: "<vocabulary>".into(),
                source: e,
            })?;
            vocab.push(&token);
        }
        Ok(vocab)
    }

    /// Rebuild from an ordered token list (ids 3 onward), as stored in
    /// checkpoints.
    pub fn from_tokens(tokens: &[String]) -> Vocabulary {
        let mut vocab = Vocabulary::with_specials();
        for t in tokens {
            vocab.push(t);
        }
        vocab
    }

    pub fn tokens_after_specials(&self) -> &[String] {
        &self.id_to_token[3..]
    }
}

/// Count tokens over all four text fields and keep the most frequent ones.
///
/// Tokens below `min_freq` or beyond the `max_size` cap (frequency order,
/// ties broken lexicographically) map to UNK. `max_size` includes the three
/// specials.
pub fn build_vocabulary(
    examples: &[DistractorExample],
    min_freq: usize,
    max_size: usize,
) -> Vocabulary {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ex in examples {
        let fields = ex
            .passage_tokens
            .iter()
            .chain(&ex.question_tokens)
            .chain(&ex.answer_tokens)
            .chain(ex.gold_distractors.iter().flatten());
        for token in fields {
            *counts.entry(token).or_insert(0) += 1;
        }
    }
    let mut ordered: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_freq)
        .collect();
    ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ordered.truncate(max_size.saturating_sub(3));

    let mut vocab = Vocabulary::with_specials();
    for (token, _) in ordered {
        vocab.push(token);
    }
    vocab
}

/// The shared `|V|×d` word-embedding matrix.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub weights: Array2<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbeddingSource {
    /// Initialize every row uniformly in [-0.1, 0.1].
    Random,
    /// Read vectors from a text file: token followed by `d` floats per line.
    File(std::path::PathBuf),
}

/// Build the embedding matrix for a vocabulary.
///
/// Tokens found in the file take the file vector; missing tokens and the
/// specials are drawn uniformly from [-0.1, 0.1] with the given seed. The
/// PAD row is always zero.
pub fn load_embeddings(
    vocab: &Vocabulary,
    source: &EmbeddingSource,
    dim: usize,
    seed: u64,
    trainable: bool,
) -> Result<EmbeddingMatrix, TextError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Array2::zeros((vocab.len(), dim));
    for id in 0..vocab.len() {
        for x in weights.row_mut(id).iter_mut() {
            *x = rng.gen_range(-0.1..0.1);
        }
    }
    if let EmbeddingSource::File(path) = source {
        let file = std::fs::File::open(path).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })?;
        for (line_no, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| TextError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts
                .next()
                .ok_or(TextError::EmbeddingParse {
                    line: line_no,
                    message: "empty line".into(),
                })?
                .to_string();
            let values: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|e| TextError::EmbeddingParse {
                        line: line_no,
                        message: e.to_string(),
                    })
                })
                .collect::<Result<_, _>>()?;
            if values.len() != dim {
                return Err(TextError::EmbeddingDim {
                    line: line_no,
                    token,
                    expected: dim,
                    found: values.len(),
                });
            }
            if let Some(&id) = vocab.token_to_id.get(&token) {
                if id != PAD_ID {
                    for (w, v) in weights.row_mut(id).iter_mut().zip(values) {
                        *w = v;
                    }
                }
            }
        }
    }
    // PAD stays zero regardless of source
    weights.row_mut(PAD_ID).fill(0.0);
    Ok(EmbeddingMatrix { weights, trainable })
}
