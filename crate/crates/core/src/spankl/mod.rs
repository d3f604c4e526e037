//! Span-based multi-label NER head with knowledge distillation.
//!
//! Each entity type owns a start and an end projection; the logit of span
//! `(i, j)` for type `k` is the scaled dot product of the start projection of
//! token `i` and the end projection of token `j`. Current types are fit with
//! binary cross entropy, previously learned types are distilled from a frozen
//! teacher with a Bernoulli KL term.

mod decode;
mod model;
mod scoring;

pub use decode::{decode, decode_flat, decode_nested, DecodeMode, ScoredSpan, SpanProbs};
pub use model::{SpanKlConfig, SpanKlModel};
pub use scoring::{
    bce_loss, kd_loss, span_logits, total_loss, upper_mask, DistilledLabelSet, GoldLabelSet, SpanMatrixSet,
    TypeHead, TEACHER_CLAMP,
};
