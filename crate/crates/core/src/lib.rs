//! Desk-scale semi-supervised speech recognition pipeline.
//!
//! The library covers the full loop: synthetic corpus generation, masked
//! contrastive pre-training of a convolutional + transformer acoustic model
//! with a Gumbel-softmax product quantizer, CTC fine-tuning, n-gram and
//! neural language models, LM-fused prefix beam search with n-best
//! rescoring, pseudo-labeling, final-model training (seq2seq from scratch
//! or CTC fine-tune), and WER evaluation/reporting.

pub mod corpus;
pub mod error;

pub use error::{CoreError, Result};

pub mod acoustic;
pub mod transformer;
pub mod ctc;
pub mod decode;
pub mod eval;
pub mod lm;
pub mod pipeline;
pub mod pretrain;
pub mod seq2seq;
pub mod stats;
