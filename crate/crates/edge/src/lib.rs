//! Question-and-answer-guided distractor generation for multiple-choice
//! reading comprehension.
//!
//! Given a reading passage, a question, and its correct answer, the model
//! encodes all three with a shared bidirectional LSTM, enriches the question
//! and answer with passage context, down-weights answer-relevant words in the
//! question and passage through learned bilinear gates, and decodes three
//! diverse distractors with an attention LSTM plus beam search and a
//! Jaccard-distance diversity filter.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod generator;
pub mod graph;
pub mod inference;
pub mod inspect;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod reform;
pub mod text;
pub mod trainer;
