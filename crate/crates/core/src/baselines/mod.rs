//! Sequence-labeling continual learning baselines over the shared encoder.
//!
//! AddNER keeps one IOB head per task, each with its own O tag, and merges
//! head outputs at inference time. ExtendNER keeps a single head that is
//! widened by a B/I pair per new type and shares one O tag. Both distill the
//! previous model's tag distributions; ExtendNER pads the teacher
//! distribution with a small constant at the new tag positions.

mod model;
mod tags;

pub use model::{TagHead, TaggerConfig, TaggerMode, TaggerModel, TaggerTeacher};
pub use tags::{
    argmax_tags, combine_heads, flatten_spans, iob_encode, pad_distribution, repair, scored_decode, tag_count,
    tag_decode, tag_from_id, tag_id, Tag,
};
