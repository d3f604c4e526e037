//! Interface shared by SpanKL and the tagging baselines so the continual
//! learning protocol can drive either.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::numcore::{Graph, ParamStore, Var};
use crate::spankl::ScoredSpan;
use crate::types::Sentence;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    /// Per-sentence sums, divided by batch size.
    #[default]
    Batch,
    /// Additionally divide each sentence's loss by its number of candidate cells (or tokens).
    Cells,
}

impl std::str::FromStr for LossNorm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "batch" => Ok(LossNorm::Batch),
            "cells" => Ok(LossNorm::Cells),
            _ => Err(format!("unknown loss normalization `{s}` (expected batch|cells)")),
        }
    }
}

/// Which types a training step fits to gold labels (`current`) and which it
/// distills from the teacher (`old`), plus the loss weights.
#[derive(Clone, Debug)]
pub struct StepContext {
    pub current: Vec<String>,
    pub old: Vec<String>,
    pub alpha: f64,
    pub beta: f64,
}

pub trait TeacherOutput: Clone + Send + Sync {
    fn digest_into(&self, hasher: &mut Sha256);
}

pub trait ContinualModel: Clone + Send + Sync + Sized {
    type Teacher: TeacherOutput;

    fn kind_name(&self) -> &'static str;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn learned_types(&self) -> Vec<String>;

    /// Register the entity types of a new task.
    fn add_task(&mut self, types: &[String], rng: &mut ChaCha8Rng) -> Result<()>;

    /// Teacher outputs on one sentence for the `old` types.
    fn teacher_outputs(&self, sentence: &Sentence, old: &[String]) -> Result<Self::Teacher>;

    /// Unnormalized training loss of one sentence.
    fn sentence_loss(
        &self,
        g: &mut Graph,
        sentence: &Sentence,
        ctx: &StepContext,
        teacher: Option<&Self::Teacher>,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var>;

    /// Number of scored units in a sentence, used by [`LossNorm::Cells`].
    fn loss_units(&self, sentence: &Sentence) -> usize;

    fn predict(&self, sentence: &Sentence) -> Result<Vec<ScoredSpan>>;

    /// Optional raw outputs for prediction dumps.
    fn raw_outputs(&self, _sentence: &Sentence) -> Result<Option<serde_json::Value>> {
        Ok(None)
    }

    fn save(&self, dir: &Path) -> Result<()>;
    fn load(dir: &Path) -> Result<Self>;
}

/// Teacher outputs computed once for a step's training set.
#[derive(Clone, Debug)]
pub struct TeacherCache<T> {
    pub old_types: Vec<String>,
    pub entries: Vec<T>,
}

impl<T: TeacherOutput> TeacherCache<T> {
    pub fn is_empty(&self) -> bool {
        self.old_types.is_empty()
    }

    /// SHA-256 over the old type names and every cached value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.old_types {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        for e in &self.entries {
            e.digest_into(&mut h);
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One-off teacher prediction over `sentences`. Empty when there are no old types.
pub fn teacher_predict<M: ContinualModel>(
    teacher: &M,
    sentences: &[Sentence],
    old_types: &[String],
) -> Result<TeacherCache<M::Teacher>> {
    if old_types.is_empty() {
        return Ok(TeacherCache {
            old_types: Vec::new(),
            entries: Vec::new(),
        });
    }
    let entries = sentences
        .par_iter()
        .map(|s| teacher.teacher_outputs(s, old_types))
        .collect::<Result<Vec<_>>>()?;
    Ok(TeacherCache {
        old_types: old_types.to_vec(),
        entries,
    })
}

pub fn predict_all<M: ContinualModel>(model: &M, sentences: &[Sentence]) -> Result<Vec<Vec<ScoredSpan>>> {
    sentences.par_iter().map(|s| model.predict(s)).collect()
}
