use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::learner::{predict_all, ContinualModel, LossNorm, StepContext, TeacherCache};
use crate::metrics::{evaluate, Evaluation};
use crate::numcore::{warmup_cosine, AdamW, GradStore, Graph, ParamStore};
use crate::types::{Sentence, Span};

/// Independent random stream for `(seed, purpose, a, b)`.
pub fn derive_rng(seed: u64, purpose: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update([0u8]);
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Per-epoch record of one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_macro_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub updates: u64,
}

/// Score predictions of `model` on `sentences` over `types`.
pub fn evaluate_model<M: ContinualModel>(
    model: &M,
    sentences: &[Sentence],
    types: &[String],
    grouping: Option<&std::collections::BTreeMap<String, String>>,
) -> Result<(Evaluation, Vec<Vec<crate::spankl::ScoredSpan>>)> {
    let pred = predict_all(model, sentences)?;
    let gold: Vec<Vec<Span>> = sentences.iter().map(|s| s.spans.clone()).collect();
    let pspans: Vec<Vec<Span>> = pred.iter().map(|p| p.iter().map(|x| x.span()).collect()).collect();
    Ok((evaluate(&gold, &pspans, types, grouping)?, pred))
}

/// Gradient of one mini-batch, summed per sentence in parallel and merged
/// in sentence order.
fn batch_gradient<M: ContinualModel>(
    model: &M,
    cfg: &RunConfig,
    batch: &[usize],
    train: &[Sentence],
    ctx: &StepContext,
    teacher: Option<&TeacherCache<M::Teacher>>,
    stream: (u64, u64, u64),
) -> Result<(GradStore, f64)> {
    let (seed, step, epoch) = stream;
    let store: &ParamStore = model.store();
    let parts = batch
        .par_iter()
        .map(|&i| -> Result<(GradStore, f64)> {
            let s = &train[i];
            let mut rng = derive_rng(seed, "dropout", step, (epoch << 32) | i as u64);
            let mut g = Graph::new(store);
            let t = teacher.filter(|t| !t.is_empty()).map(|t| &t.entries[i]);
            let mut loss = model.sentence_loss(&mut g, s, ctx, t, true, &mut rng)?;
            if cfg.loss_norm == LossNorm::Cells {
                loss = g.scale(loss, 1.0 / model.loss_units(s).max(1) as f64);
            }
            let value = g.value(loss).item();
            let mut grads = GradStore::new();
            g.backward(loss, &mut grads)?;
            Ok((grads, value))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = GradStore::new();
    let mut loss = 0.0;
    for (g, v) in parts {
        total.merge(g);
        loss += v;
    }
    total.scale(1.0 / batch.len() as f64);
    Ok((total, loss))
}

/// Train `model` on one step's data, keeping the parameters of the epoch
/// with the best dev macro-F1 over `ctx.current` (the last epoch when there
/// is no dev data).
#[allow(clippy::too_many_arguments)]
pub fn train_step<M: ContinualModel>(
    model: &mut M,
    cfg: &RunConfig,
    ctx: &StepContext,
    train: &[Sentence],
    dev: &[Sentence],
    teacher: Option<&TeacherCache<M::Teacher>>,
    seed: u64,
    step: usize,
    freeze_encoder: bool,
) -> Result<TrainRecord> {
    if train.is_empty() {
        return Err(Error::Aborted {
            step,
            message: "no training sentences".into(),
        });
    }
    if let Some(t) = teacher {
        if !t.is_empty() && t.entries.len() != train.len() {
            return Err(Error::Aborted {
                step,
                message: format!("teacher cache has {} entries for {} sentences", t.entries.len(), train.len()),
            });
        }
    }
    let mut opt_cfg = cfg.optimizer();
    if freeze_encoder {
        opt_cfg.lr_encoder = 0.0;
    }
    let mut opt = AdamW::new(opt_cfg);
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let total_updates = batches_per_epoch * cfg.epochs as u64;
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(seed, "shuffle", step as u64, epoch as u64));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (grads, loss) = batch_gradient(&*model, cfg, batch, train, ctx, teacher, (seed, step as u64, epoch as u64))?;
            if !loss.is_finite() {
                return Err(Error::Aborted {
                    step,
                    message: format!("non-finite loss in epoch {epoch}"),
                });
            }
            epoch_loss += loss;
            let scale = if cfg.warmup_cosine {
                warmup_cosine(opt.step_count(), cfg.warmup_steps, total_updates)
            } else {
                1.0
            };
            opt.step(model.store_mut(), &grads, scale)?;
        }
        let dev_f1 = if dev.is_empty() {
            None
        } else {
            Some(evaluate_model(&*model, dev, &ctx.current, None)?.0.macro_f1)
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            dev_macro_f1: dev_f1,
        });
        let score = dev_f1.unwrap_or(epoch as f64);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, model.store().clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.store_mut().load_values(&params)?;
    Ok(TrainRecord {
        epochs,
        best_epoch,
        updates: opt.step_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derived_streams_are_stable_and_distinct() {
        let a = derive_rng(1, "x", 2, 3).next_u64();
        assert_eq!(a, derive_rng(1, "x", 2, 3).next_u64());
        assert_ne!(a, derive_rng(1, "y", 2, 3).next_u64());
        assert_ne!(a, derive_rng(1, "x", 3, 2).next_u64());
        assert_ne!(a, derive_rng(2, "x", 2, 3).next_u64());
    }
}
