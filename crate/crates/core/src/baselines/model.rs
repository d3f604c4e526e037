use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tags::{argmax_tags, combine_heads, iob_encode, pad_distribution, scored_decode, tag_count};
use crate::encoder::{Encoder, EncoderConfig, Vocab};
use crate::error::{Error, Result};
use crate::learner::{ContinualModel, StepContext, TeacherOutput};
use crate::numcore::{checkpoint, Axis, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::spankl::ScoredSpan;
use crate::types::Sentence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaggerMode {
    /// One head per task, each with its own O tag.
    AddNer,
    /// One head shared by all tasks, widened per task, with a global O tag.
    ExtendNer,
}

impl TaggerMode {
    pub fn name(self) -> &'static str {
        match self {
            TaggerMode::AddNer => "addner",
            TaggerMode::ExtendNer => "extendner",
        }
    }
}

impl std::str::FromStr for TaggerMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "addner" => Ok(TaggerMode::AddNer),
            "extendner" => Ok(TaggerMode::ExtendNer),
            _ => Err(format!("unknown tagger mode `{s}` (expected addner|extendner)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub encoder: EncoderConfig,
    pub mode: TaggerMode,
    /// Value given to new tag positions before renormalizing a teacher distribution.
    pub pad_constant: f64,
}

/// Linear projection to one head's tags, stored as an O block plus one
/// two-column (B, I) block per type so that widening never touches old blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct TagHead {
    pub types: Vec<String>,
    o: (ParamId, ParamId),
    blocks: Vec<(ParamId, ParamId)>,
    index: usize,
}

impl TagHead {
    fn name(index: usize, part: &str) -> String {
        format!("tagger.h{index}.{part}")
    }

    fn new(store: &mut ParamStore, index: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let g = ParamGroup::Head;
        let w = store.add_uniform(Self::name(index, "o.w"), g, &[d, 1], d, rng)?;
        let b = store.add_uniform(Self::name(index, "o.b"), g, &[1, 1], d, rng)?;
        Ok(TagHead {
            types: Vec::new(),
            o: (w, b),
            blocks: Vec::new(),
            index,
        })
    }

    fn extend(&mut self, store: &mut ParamStore, label: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let g = ParamGroup::Head;
        let w = store.add_uniform(Self::name(self.index, &format!("t.{label}.w")), g, &[d, 2], d, rng)?;
        let b = store.add_uniform(Self::name(self.index, &format!("t.{label}.b")), g, &[1, 2], d, rng)?;
        self.types.push(label.to_string());
        self.blocks.push((w, b));
        Ok(())
    }

    fn attach(store: &ParamStore, index: usize, types: &[String]) -> Result<Self> {
        let get = |part: String| {
            let name = Self::name(index, &part);
            store
                .id(&name)
                .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
        };
        let o = (get("o.w".into())?, get("o.b".into())?);
        let blocks = types
            .iter()
            .map(|t| Ok((get(format!("t.{t}.w"))?, get(format!("t.{t}.b"))?)))
            .collect::<Result<_>>()?;
        Ok(TagHead {
            types: types.to_vec(),
            o,
            blocks,
            index,
        })
    }

    pub fn tag_count(&self) -> usize {
        tag_count(self.types.len())
    }

    /// Tag logits, n × (1 + 2k).
    fn logits(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let mut parts = Vec::with_capacity(1 + self.blocks.len());
        for &(w, b) in std::iter::once(&self.o).chain(&self.blocks) {
            let (wv, bv) = (g.param(w), g.param(b));
            let x = g.matmul(hidden, wv)?;
            parts.push(g.add_row(x, bv)?);
        }
        g.concat_cols(&parts)
    }
}

/// Teacher tag distributions, one n × tags matrix per teacher head.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaggerTeacher {
    pub heads: Vec<Tensor>,
}

impl TeacherOutput for TaggerTeacher {
    fn digest_into(&self, h: &mut Sha256) {
        for t in &self.heads {
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaggerModel {
    pub config: TaggerConfig,
    pub vocab: Vocab,
    store: ParamStore,
    encoder: Encoder,
    heads: Vec<TagHead>,
}

#[derive(Serialize, Deserialize)]
struct TaggerMeta {
    kind: String,
    config: TaggerConfig,
    heads: Vec<Vec<String>>,
}

impl TaggerModel {
    pub fn new(config: TaggerConfig, vocab: Vocab, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(config.pad_constant > 0.0 && config.pad_constant.is_finite()) {
            return Err(Error::Config(vec![format!("pad_constant {} must be > 0", config.pad_constant)]));
        }
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, config.encoder.clone(), vocab.len(), rng)?;
        Ok(TaggerModel {
            config,
            vocab,
            store,
            encoder,
            heads: Vec::new(),
        })
    }

    pub fn heads(&self) -> &[TagHead] {
        &self.heads
    }

    /// Register new types: a fresh head (AddNER) or a wider shared head (ExtendNER).
    pub fn extend_head(&mut self, new_types: &[String], rng: &mut ChaCha8Rng) -> Result<()> {
        let learned = self.learned_types();
        let mut seen = std::collections::BTreeSet::new();
        for t in new_types {
            if learned.contains(t) || !seen.insert(t) {
                return Err(Error::InvalidArgument(format!("entity type `{t}` is already registered")));
            }
        }
        if new_types.is_empty() {
            return Err(Error::InvalidArgument("a task needs at least one entity type".into()));
        }
        let d = self.encoder.d_model();
        let need_head = self.config.mode == TaggerMode::AddNer || self.heads.is_empty();
        if need_head {
            let h = TagHead::new(&mut self.store, self.heads.len(), d, rng)?;
            self.heads.push(h);
        }
        let head = self.heads.last_mut().expect("head exists");
        for t in new_types {
            head.extend(&mut self.store, t, d, rng)?;
        }
        Ok(())
    }

    fn hidden(&self, g: &mut Graph, tokens: &[String], train: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        let ids = self.vocab.encode(tokens);
        self.encoder.encode(g, &ids, train, rng)
    }

    /// Softmax tag distributions of every head in inference mode.
    pub fn head_probabilities(&self, tokens: &[String]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new(&self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = self.hidden(&mut g, tokens, false, &mut rng)?;
        self.heads
            .iter()
            .map(|head| {
                let l = head.logits(&mut g, h)?;
                let p = g.softmax(l, Axis::Cols)?;
                Ok(g.value(p).clone())
            })
            .collect()
    }

    /// Head logits for callers that build their own losses.
    pub fn head_logits(&self, g: &mut Graph, tokens: &[String], train: bool, rng: &mut ChaCha8Rng) -> Result<Vec<Var>> {
        let h = self.hidden(g, tokens, train, rng)?;
        self.heads.iter().map(|head| head.logits(g, h)).collect()
    }

    /// Soft targets for the ExtendNER loss: one-hot gold on current-type
    /// entity tokens, padded teacher distributions elsewhere (or one-hot
    /// gold when no teacher is given). Returns (targets, row weight kind,
    /// constant entropy term of the KL rows).
    fn extend_targets(
        &self,
        sentence: &Sentence,
        ctx: &StepContext,
        teacher: Option<&Tensor>,
    ) -> Result<(Tensor, Vec<bool>, f64)> {
        let head = &self.heads[0];
        let t = head.tag_count();
        let n = sentence.len();
        let gold = iob_encode(sentence, &ctx.current)?;
        let mut targets = Tensor::zeros(&[n, t]);
        let mut is_kd = vec![false; n];
        let mut entropy = 0.0;
        if let Some(tp) = teacher {
            let old_tags = tag_count(ctx.old.len());
            if tp.rows() != n || tp.cols() != old_tags || old_tags > t {
                return Err(Error::shape("tagger_kd", &[n, old_tags], tp.shape()));
            }
        }
        for (i, &g_id) in gold.iter().enumerate() {
            match teacher {
                Some(tp) if g_id == 0 => {
                    let padded = pad_distribution(tp.row(i), t - tp.cols(), self.config.pad_constant);
                    if padded.len() != t {
                        return Err(Error::shape("tagger_kd", &[t], &[padded.len()]));
                    }
                    for (j, q) in padded.iter().enumerate() {
                        targets.set(i, j, *q);
                        if *q > 0.0 {
                            entropy += q * q.ln();
                        }
                    }
                    is_kd[i] = true;
                }
                _ => {
                    let id = if g_id == 0 { 0 } else { self.global_id(&ctx.current, g_id)? };
                    targets.set(i, id, 1.0);
                }
            }
        }
        Ok((targets, is_kd, entropy))
    }

    /// Map a tag id in the layout of `types` to the shared head's layout.
    fn global_id(&self, types: &[String], local: usize) -> Result<usize> {
        let tag = super::tags::tag_from_id(local, types)?;
        super::tags::tag_id(&tag, &self.heads[0].types)
    }

    /// `-Σ target ⊙ log p` over selected rows, plus a constant.
    fn soft_ce(g: &mut Graph, logp: Var, targets: Tensor, rows: &[bool], constant: f64) -> Result<Var> {
        let mut t = targets;
        let cols = t.cols();
        for (i, keep) in rows.iter().enumerate() {
            if !keep {
                for j in 0..cols {
                    t.set(i, j, 0.0);
                }
            }
        }
        let tv = g.input(t);
        let prod = g.mul(tv, logp)?;
        let s = g.sum(prod, None)?;
        let neg = g.scale(s, -1.0);
        let c = g.input(Tensor::scalar(constant));
        g.add(neg, c)
    }
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Option<Var>> {
    let Some((first, rest)) = vars.split_first() else {
        return Ok(None);
    };
    let mut acc = *first;
    for v in rest {
        acc = g.add(acc, *v)?;
    }
    Ok(Some(acc))
}

impl ContinualModel for TaggerModel {
    type Teacher = TaggerTeacher;

    fn kind_name(&self) -> &'static str {
        self.config.mode.name()
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn learned_types(&self) -> Vec<String> {
        self.heads.iter().flat_map(|h| h.types.iter().cloned()).collect()
    }

    fn add_task(&mut self, types: &[String], rng: &mut ChaCha8Rng) -> Result<()> {
        self.extend_head(types, rng)
    }

    fn teacher_outputs(&self, sentence: &Sentence, old: &[String]) -> Result<TaggerTeacher> {
        if self.learned_types() != old {
            return Err(Error::InvalidArgument(format!(
                "teacher knows {:?}, asked for {:?}",
                self.learned_types(),
                old
            )));
        }
        Ok(TaggerTeacher {
            heads: self.head_probabilities(&sentence.tokens)?,
        })
    }

    fn sentence_loss(
        &self,
        g: &mut Graph,
        sentence: &Sentence,
        ctx: &StepContext,
        teacher: Option<&TaggerTeacher>,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let teacher = teacher.filter(|_| !ctx.old.is_empty());
        let logits = self.head_logits(g, &sentence.tokens, train, rng)?;
        match self.config.mode {
            TaggerMode::ExtendNer => {
                let tp = match teacher {
                    Some(t) => Some(t.heads.first().ok_or_else(|| {
                        Error::InvalidArgument("ExtendNER teacher has no head".into())
                    })?),
                    None => None,
                };
                let (targets, is_kd, entropy) = self.extend_targets(sentence, ctx, tp)?;
                let logp = g.log_softmax_rows(logits[0])?;
                let ce_rows: Vec<bool> = is_kd.iter().map(|k| !k).collect();
                let ce = Self::soft_ce(g, logp, targets.clone(), &ce_rows, 0.0)?;
                if is_kd.iter().any(|k| *k) {
                    let kd = Self::soft_ce(g, logp, targets, &is_kd, entropy)?;
                    crate::spankl::total_loss(g, ce, Some(kd), ctx.alpha, ctx.beta)
                } else {
                    crate::spankl::total_loss(g, ce, None, ctx.alpha, ctx.beta)
                }
            }
            TaggerMode::AddNer => {
                let n = sentence.len();
                let all = vec![true; n];
                if let Some(t) = teacher {
                    if t.heads.len() > self.heads.len() {
                        return Err(Error::InvalidArgument("teacher has more heads than the student".into()));
                    }
                }
                let mut ce_terms = Vec::new();
                let mut kd_terms = Vec::new();
                for (h, head) in self.heads.iter().enumerate() {
                    let is_current = head.types.iter().all(|t| ctx.current.contains(t));
                    let is_old = head.types.iter().all(|t| ctx.old.contains(t));
                    if is_current {
                        let gold = iob_encode(sentence, &head.types)?;
                        let mut onehot = Tensor::zeros(&[n, head.tag_count()]);
                        for (i, id) in gold.iter().enumerate() {
                            onehot.set(i, *id, 1.0);
                        }
                        let logp = g.log_softmax_rows(logits[h])?;
                        ce_terms.push(Self::soft_ce(g, logp, onehot, &all, 0.0)?);
                    } else if is_old {
                        let Some(t) = teacher else { continue };
                        let tp = t.heads.get(h).ok_or_else(|| {
                            Error::InvalidArgument(format!("teacher has no distribution for head {h}"))
                        })?;
                        let want = head.tag_count();
                        if tp.rows() != n || tp.cols() != want {
                            return Err(Error::shape("tagger_kd", &[n, want], tp.shape()));
                        }
                        let entropy: f64 = tp.data().iter().filter(|q| **q > 0.0).map(|q| q * q.ln()).sum();
                        let lp = g.log_softmax_rows(logits[h])?;
                        kd_terms.push(Self::soft_ce(g, lp, tp.clone(), &all, entropy)?);
                    } else {
                        return Err(Error::InvalidArgument(format!(
                            "head {:?} is neither current nor old at this step",
                            head.types
                        )));
                    }
                }
                let ce = sum_vars(g, &ce_terms)?
                    .ok_or_else(|| Error::InvalidArgument(format!("no head for task {:?}", ctx.current)))?;
                let kd = sum_vars(g, &kd_terms)?;
                crate::spankl::total_loss(g, ce, kd, ctx.alpha, ctx.beta)
            }
        }
    }

    fn loss_units(&self, sentence: &Sentence) -> usize {
        sentence.len()
    }

    fn predict(&self, sentence: &Sentence) -> Result<Vec<ScoredSpan>> {
        if self.heads.is_empty() {
            return Ok(Vec::new());
        }
        let probs = self.head_probabilities(&sentence.tokens)?;
        let per_head = probs
            .iter()
            .zip(&self.heads)
            .map(|(p, h)| argmax_tags(p, &h.types))
            .collect::<Result<Vec<_>>>()?;
        let (tags, scores) = combine_heads(&per_head);
        Ok(scored_decode(&tags, &scores))
    }

    fn raw_outputs(&self, sentence: &Sentence) -> Result<Option<serde_json::Value>> {
        if self.heads.is_empty() {
            return Ok(None);
        }
        let probs = self.head_probabilities(&sentence.tokens)?;
        let heads: Vec<serde_json::Value> = probs
            .iter()
            .zip(&self.heads)
            .map(|(p, h)| {
                let rows: Vec<Vec<f64>> = (0..p.rows()).map(|i| p.row(i).to_vec()).collect();
                serde_json::json!({ "types": h.types, "probs": rows })
            })
            .collect();
        Ok(Some(serde_json::json!({ "heads": heads })))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = TaggerMeta {
            kind: self.config.mode.name().into(),
            config: self.config.clone(),
            heads: self.heads.iter().map(|h| h.types.clone()).collect(),
        };
        let p = dir.join("model.json");
        std::fs::write(&p, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&p, e))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        checkpoint::save(&self.store, &dir.join("model.ckpt"))
    }

    fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("model.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let meta: TaggerMeta = serde_json::from_str(&text)?;
        if meta.kind != meta.config.mode.name() {
            return Err(Error::Data(format!("model kind `{}` does not match its config", meta.kind)));
        }
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = TaggerModel::new(meta.config, vocab, &mut rng)?;
        for types in &meta.heads {
            model.extend_head(types, &mut rng)?;
        }
        let entries = checkpoint::load(&dir.join("model.ckpt"))?;
        checkpoint::restore(&mut model.store, &entries)?;
        model.encoder = Encoder::attach(&model.store, model.config.encoder.clone())?;
        model.heads = meta
            .heads
            .iter()
            .enumerate()
            .map(|(i, t)| TagHead::attach(&model.store, i, t))
            .collect::<Result<_>>()?;
        Ok(model)
    }
}
