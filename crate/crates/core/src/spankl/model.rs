use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::decode::{decode, DecodeMode, ScoredSpan, SpanProbs};
use super::scoring::{bce_loss, kd_loss, span_logits, total_loss, DistilledLabelSet, GoldLabelSet, SpanMatrixSet, TypeHead};
use crate::encoder::{Encoder, EncoderConfig, Vocab};
use crate::error::{Error, Result};
use crate::learner::{ContinualModel, StepContext, TeacherOutput};
use crate::numcore::{checkpoint, Graph, ParamStore, Tensor, Var};
use crate::types::Sentence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanKlConfig {
    pub encoder: EncoderConfig,
    pub d_out: usize,
    pub threshold: f64,
    pub decode: DecodeMode,
}

impl Default for SpanKlConfig {
    fn default() -> Self {
        SpanKlConfig {
            encoder: EncoderConfig::default(),
            d_out: 50,
            threshold: 0.5,
            decode: DecodeMode::Flat,
        }
    }
}

/// Shared encoder plus one [`TypeHead`] per registered entity type.
#[derive(Clone, Debug)]
pub struct SpanKlModel {
    pub config: SpanKlConfig,
    pub vocab: Vocab,
    store: ParamStore,
    encoder: Encoder,
    heads: Vec<TypeHead>,
}

#[derive(Serialize, Deserialize)]
struct SpanKlMeta {
    kind: String,
    config: SpanKlConfig,
    types: Vec<String>,
}

impl SpanKlModel {
    pub fn new(config: SpanKlConfig, vocab: Vocab, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.d_out == 0 {
            return Err(Error::Config(vec!["d_out must be >= 1".into()]));
        }
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, config.encoder.clone(), vocab.len(), rng)?;
        Ok(SpanKlModel {
            config,
            vocab,
            store,
            encoder,
            heads: Vec::new(),
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn heads(&self) -> &[TypeHead] {
        &self.heads
    }

    /// Append one fresh head per new type. Existing heads are untouched.
    pub fn add_task_head(&mut self, new_types: &[String], rng: &mut ChaCha8Rng) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for t in new_types {
            if self.heads.iter().any(|h| &h.label == t) || !seen.insert(t) {
                return Err(Error::InvalidArgument(format!("entity type `{t}` is already registered")));
            }
        }
        let d = self.encoder.d_model();
        for t in new_types {
            let head = TypeHead::new(&mut self.store, t, d, self.config.d_out, rng)?;
            self.heads.push(head);
        }
        Ok(())
    }

    fn heads_for(&self, labels: &[String]) -> Result<Vec<TypeHead>> {
        labels
            .iter()
            .map(|l| {
                self.heads
                    .iter()
                    .find(|h| &h.label == l)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("entity type `{l}` has no head")))
            })
            .collect()
    }

    /// Span logits for `labels` (all learned types when `None`).
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &[String],
        labels: Option<&[String]>,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<SpanMatrixSet> {
        let ids = self.vocab.encode(tokens);
        let hidden = self.encoder.encode(g, &ids, train, rng)?;
        let heads = match labels {
            Some(l) => self.heads_for(l)?,
            None => self.heads.clone(),
        };
        span_logits(g, hidden, &heads)
    }

    /// Sigmoid probabilities in inference mode.
    pub fn probabilities(&self, tokens: &[String], labels: Option<&[String]>) -> Result<SpanProbs> {
        let mut g = Graph::new(&self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = self.forward(&mut g, tokens, labels, false, &mut rng)?;
        let probs = m
            .logits
            .iter()
            .map(|v| {
                let t = g.value(*v);
                Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| crate::numcore::sigmoid(*x)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SpanProbs {
            n: m.n,
            labels: m.labels,
            probs,
        })
    }

    pub fn predict_with(&self, tokens: &[String], threshold: f64, mode: DecodeMode) -> Result<Vec<ScoredSpan>> {
        if self.heads.is_empty() {
            return Ok(Vec::new());
        }
        Ok(decode(&self.probabilities(tokens, None)?, threshold, mode))
    }
}

impl TeacherOutput for DistilledLabelSet {
    fn digest_into(&self, h: &mut Sha256) {
        for (l, p) in self.labels.iter().zip(&self.probs) {
            h.update(l.as_bytes());
            h.update([0u8]);
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
}

impl ContinualModel for SpanKlModel {
    type Teacher = DistilledLabelSet;

    fn kind_name(&self) -> &'static str {
        "spankl"
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn learned_types(&self) -> Vec<String> {
        self.heads.iter().map(|h| h.label.clone()).collect()
    }

    fn add_task(&mut self, types: &[String], rng: &mut ChaCha8Rng) -> Result<()> {
        self.add_task_head(types, rng)
    }

    fn teacher_outputs(&self, sentence: &Sentence, old: &[String]) -> Result<DistilledLabelSet> {
        let p = self.probabilities(&sentence.tokens, Some(old))?;
        Ok(DistilledLabelSet {
            labels: p.labels,
            probs: p.probs,
        })
    }

    fn sentence_loss(
        &self,
        g: &mut Graph,
        sentence: &Sentence,
        ctx: &StepContext,
        teacher: Option<&DistilledLabelSet>,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let distill = teacher.is_some() && !ctx.old.is_empty() && ctx.beta > 0.0;
        let mut labels = ctx.current.clone();
        if distill {
            labels.extend(ctx.old.iter().cloned());
        }
        let m = self.forward(g, &sentence.tokens, Some(&labels), train, rng)?;
        let gold = GoldLabelSet::from_spans(sentence.spans.iter().filter(|s| ctx.current.contains(&s.label)));
        let bce = bce_loss(g, &m, &gold, &ctx.current)?;
        let kd = match teacher {
            Some(t) if distill => Some(kd_loss(g, &m, t, &ctx.old)?),
            _ => None,
        };
        total_loss(g, bce, kd, ctx.alpha, ctx.beta)
    }

    fn loss_units(&self, sentence: &Sentence) -> usize {
        let n = sentence.len();
        n * (n + 1) / 2
    }

    fn predict(&self, sentence: &Sentence) -> Result<Vec<ScoredSpan>> {
        self.predict_with(&sentence.tokens, self.config.threshold, self.config.decode)
    }

    fn raw_outputs(&self, sentence: &Sentence) -> Result<Option<serde_json::Value>> {
        if self.heads.is_empty() {
            return Ok(None);
        }
        let p = self.probabilities(&sentence.tokens, None)?;
        let mut map = serde_json::Map::new();
        for (l, t) in p.labels.iter().zip(&p.probs) {
            let rows: Vec<Vec<f64>> = (0..p.n).map(|i| t.row(i).to_vec()).collect();
            map.insert(l.clone(), serde_json::json!(rows));
        }
        Ok(Some(serde_json::Value::Object(map)))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = SpanKlMeta {
            kind: "spankl".into(),
            config: self.config.clone(),
            types: self.learned_types(),
        };
        let p = dir.join("model.json");
        std::fs::write(&p, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&p, e))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        checkpoint::save(&self.store, &dir.join("model.ckpt"))
    }

    fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("model.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let meta: SpanKlMeta = serde_json::from_str(&text)?;
        if meta.kind != "spankl" {
            return Err(Error::Data(format!("model kind `{}` is not spankl", meta.kind)));
        }
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = SpanKlModel::new(meta.config, vocab, &mut rng)?;
        model.add_task_head(&meta.types, &mut rng)?;
        let entries = checkpoint::load(&dir.join("model.ckpt"))?;
        checkpoint::restore(&mut model.store, &entries)?;
        model.encoder = Encoder::attach(&model.store, model.config.encoder.clone())?;
        model.heads = meta
            .types
            .iter()
            .map(|t| TypeHead::attach(&model.store, t))
            .collect::<Result<_>>()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (SpanKlModel, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sent = Sentence::new(vec!["john".into(), "visits".into(), "paris".into()], vec![]);
        let vocab = Vocab::build(&[sent]);
        let cfg = SpanKlConfig {
            encoder: EncoderConfig {
                d_model: 8,
                heads: 2,
                max_len: 16,
                dropout: 0.1,
            },
            d_out: 4,
            ..Default::default()
        };
        (SpanKlModel::new(cfg, vocab, &mut rng).unwrap(), rng)
    }

    fn toks() -> Vec<String> {
        vec!["john".into(), "visits".into(), "paris".into()]
    }

    #[test]
    fn growth_leaves_old_logits_bit_identical() {
        let (mut m, mut rng) = tiny();
        m.add_task_head(&["PER".into()], &mut rng).unwrap();
        let before = m.probabilities(&toks(), Some(&["PER".into()])).unwrap();
        let params_before = m.store().len();
        m.add_task_head(&["ORG".into(), "LOC".into()], &mut rng).unwrap();
        assert_eq!(m.store().len(), params_before + 2 * 2 * 2);
        let after = m.probabilities(&toks(), Some(&["PER".into()])).unwrap();
        assert_eq!(before, after);
        assert!(m.add_task_head(&["PER".into()], &mut rng).is_err());
        assert!(m.add_task_head(&["X".into(), "X".into()], &mut rng).is_err());
    }

    #[test]
    fn self_distillation_has_zero_kd() {
        let (mut m, mut rng) = tiny();
        m.add_task_head(&["PER".into(), "ORG".into()], &mut rng).unwrap();
        let s = Sentence::new(toks(), vec![]);
        let t = m.teacher_outputs(&s, &["PER".into(), "ORG".into()]).unwrap();
        let mut g = Graph::new(m.store());
        let mx = m.forward(&mut g, &s.tokens, None, false, &mut rng).unwrap();
        let kd = kd_loss(&mut g, &mx, &t, &["PER".into(), "ORG".into()]).unwrap();
        assert!(g.value(kd).item().abs() < 1e-12);
    }

    #[test]
    fn save_load_roundtrip() {
        let (mut m, mut rng) = tiny();
        m.add_task_head(&["PER".into()], &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = SpanKlModel::load(dir.path()).unwrap();
        assert_eq!(
            m.probabilities(&toks(), None).unwrap(),
            back.probabilities(&toks(), None).unwrap()
        );
        assert_eq!(checkpoint::encode(m.store()), checkpoint::encode(back.store()));
    }
}
