use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ModelKind, RunConfig};
use super::train::{derive_rng, evaluate_model, train_step, TrainRecord};
use crate::baselines::{TaggerMode, TaggerModel};
use crate::cldata::SynthesizedBenchmark;
use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::learner::{teacher_predict, ContinualModel, StepContext};
use crate::manifest::sha256_hex;
use crate::metrics::Evaluation;
use crate::spankl::{ScoredSpan, SpanKlModel};
use crate::types::{Sentence, Span};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Sequential training with distillation.
    Cl,
    /// From-scratch training on the cumulative, fully annotated data of each step.
    NonCl,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Cl => "cl",
            Mode::NonCl => "noncl",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cl" => Ok(Mode::Cl),
            "noncl" => Ok(Mode::NonCl),
            _ => Err(format!("unknown mode `{s}` (expected cl|noncl)")),
        }
    }
}

/// Models the runner can construct from a [`RunConfig`].
pub trait Trainable: ContinualModel {
    fn build(cfg: &RunConfig, vocab: Vocab, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Self>;
}

impl Trainable for SpanKlModel {
    fn build(cfg: &RunConfig, vocab: Vocab, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Self> {
        SpanKlModel::new(cfg.spankl(), vocab, rng)
    }
}

impl Trainable for TaggerModel {
    fn build(cfg: &RunConfig, vocab: Vocab, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Self> {
        let mode = match cfg.model {
            ModelKind::AddNer => TaggerMode::AddNer,
            ModelKind::ExtendNer => TaggerMode::ExtendNer,
            ModelKind::SpanKl => return Err(Error::Config(vec!["model: spankl is not a tagger".into()])),
        };
        TaggerModel::new(cfg.tagger(mode), vocab, rng)
    }
}

/// Everything recorded about one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Types trained with gold labels at this step.
    pub types: Vec<String>,
    /// Types evaluated at this step.
    pub learned: Vec<String>,
    pub train_sentences: usize,
    pub test_sentences: usize,
    pub train: TrainRecord,
    pub teacher_digest: Option<String>,
    pub evaluation: Evaluation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: String,
    pub mode: Mode,
    pub alpha: f64,
    pub beta: f64,
    pub setup: String,
    pub kind: String,
    pub permutation: usize,
    pub seed: u64,
    /// Hash of (setup, kind, type inventory); runs with equal families are comparable.
    pub family: String,
    pub total_steps: usize,
    pub steps: Vec<StepRecord>,
}

impl RunRecord {
    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join("run.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn final_macro(&self) -> Option<f64> {
        self.steps.last().map(|s| s.evaluation.macro_f1)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    /// Reuse completed steps found in the run directory.
    pub resume: bool,
    /// Stop after this step (1-based).
    pub stop_after: Option<usize>,
    /// Non-CL only: compute just these steps (1-based).
    pub only_steps: Option<Vec<usize>>,
}

pub fn step_dir(run_dir: &Path, l: usize) -> PathBuf {
    run_dir.join(format!("step_{l}"))
}

pub fn benchmark_family(b: &SynthesizedBenchmark) -> String {
    let mut types = b.all_types();
    types.sort();
    sha256_hex(format!("{}|{}|{}", b.setup, b.kind, types.join(",")).as_bytes())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    tokens: &'a [String],
    gold: &'a [Span],
    pred: &'a [ScoredSpan],
    #[serde(skip_serializing_if = "Option::is_none")]
    probs: Option<serde_json::Value>,
}

fn write_predictions<M: ContinualModel>(
    path: &Path,
    model: &M,
    test: &[Sentence],
    pred: &[Vec<ScoredSpan>],
    dump: bool,
) -> Result<()> {
    let mut out = String::new();
    for (s, p) in test.iter().zip(pred) {
        let probs = if dump { model.raw_outputs(s)? } else { None };
        let line = PredictionLine {
            tokens: &s.tokens,
            gold: &s.spans,
            pred: p,
            probs,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    write(path, &out)
}

/// Train (or reload) one step, evaluate on its test set, and write the step directory.
#[allow(clippy::too_many_arguments)]
fn finish_step<M: ContinualModel>(
    model: &M,
    cfg: &RunConfig,
    bench: &SynthesizedBenchmark,
    dir: &Path,
    l: usize,
    types: &[String],
    train_sentences: usize,
    train: TrainRecord,
    teacher_digest: Option<String>,
) -> Result<StepRecord> {
    let learned = bench.sequence.learned_through(l);
    let test = &bench.tasks[l - 1].test;
    let (evaluation, pred) = evaluate_model(model, test, &learned, bench.grouping.as_ref())?;
    let sd = step_dir(dir, l);
    model.save(&sd)?;
    write_predictions(&sd.join("predictions.jsonl"), model, test, &pred, cfg.dump_matrices)?;
    if let Some(d) = &teacher_digest {
        write(&sd.join("teacher_digest.txt"), &format!("{d}\n"))?;
    }
    let rec = StepRecord {
        step: l,
        types: types.to_vec(),
        learned,
        train_sentences,
        test_sentences: test.len(),
        train,
        teacher_digest,
        evaluation,
    };
    write(&sd.join("step.json"), &(serde_json::to_string_pretty(&rec)? + "\n"))?;
    Ok(rec)
}

fn load_step(dir: &Path, l: usize) -> Result<Option<StepRecord>> {
    let p = step_dir(dir, l).join("step.json");
    if !p.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

fn run_cl_with<M: Trainable>(
    cfg: &RunConfig,
    bench: &SynthesizedBenchmark,
    vocab: &Vocab,
    seed: u64,
    dir: &Path,
    opts: &RunOptions,
) -> Result<Vec<StepRecord>> {
    let mut model = M::build(cfg, vocab.clone(), &mut derive_rng(seed, "init", 0, 0))?;
    let last = opts.stop_after.unwrap_or(bench.tasks.len()).min(bench.tasks.len());
    let mut records = Vec::new();
    for l in 1..=last {
        let task = &bench.tasks[l - 1];
        if opts.resume {
            if let Some(rec) = load_step(dir, l)? {
                model = M::load(&step_dir(dir, l)).map_err(|e| Error::Aborted {
                    step: l,
                    message: format!("cannot resume from checkpoint: {e}"),
                })?;
                records.push(rec);
                continue;
            }
        }
        let old = model.learned_types();
        let teacher = if !old.is_empty() && cfg.beta > 0.0 {
            let t = teacher_predict(&model, &task.train, &old)?;
            Some(t)
        } else {
            None
        };
        let digest = teacher.as_ref().map(|t| t.digest());
        model.add_task(&task.types, &mut derive_rng(seed, "head", l as u64, 0))?;
        let ctx = StepContext {
            current: task.types.clone(),
            old: old.clone(),
            alpha: cfg.alpha,
            beta: cfg.beta,
        };
        let freeze = cfg.freeze_encoder && l > 1;
        let tr = train_step(&mut model, cfg, &ctx, &task.train, &task.dev, teacher.as_ref(), seed, l, freeze)
            .map_err(|e| match e {
                e @ Error::Aborted { .. } => e,
                other => Error::Aborted {
                    step: l,
                    message: other.to_string(),
                },
            })?;
        records.push(finish_step(&model, cfg, bench, dir, l, &task.types, task.train.len(), tr, digest)?);
    }
    Ok(records)
}

fn run_noncl_with<M: Trainable>(
    cfg: &RunConfig,
    bench: &SynthesizedBenchmark,
    vocab: &Vocab,
    seed: u64,
    dir: &Path,
    opts: &RunOptions,
) -> Result<Vec<StepRecord>> {
    let last = opts.stop_after.unwrap_or(bench.tasks.len()).min(bench.tasks.len());
    let mut records = Vec::new();
    for l in 1..=last {
        if let Some(only) = &opts.only_steps {
            if !only.contains(&l) {
                continue;
            }
        }
        if opts.resume {
            if let Some(rec) = load_step(dir, l)? {
                records.push(rec);
                continue;
            }
        }
        let mut model = M::build(cfg, vocab.clone(), &mut derive_rng(seed, "init", 0, 0))?;
        for (i, t) in bench.tasks[..l].iter().enumerate() {
            model.add_task(&t.types, &mut derive_rng(seed, "head", i as u64 + 1, 0))?;
        }
        let learned = bench.sequence.learned_through(l);
        let (train, dev) = bench.cumulative(l);
        let ctx = StepContext {
            current: learned.clone(),
            old: Vec::new(),
            alpha: cfg.alpha,
            beta: cfg.beta,
        };
        let tr = train_step(&mut model, cfg, &ctx, &train, &dev, None, seed, l, false).map_err(|e| match e {
            e @ Error::Aborted { .. } => e,
            other => Error::Aborted {
                step: l,
                message: other.to_string(),
            },
        })?;
        records.push(finish_step(&model, cfg, bench, dir, l, &learned, train.len(), tr, None)?);
    }
    Ok(records)
}

/// Run one seed of the continual learning protocol (or its non-CL reference)
/// and write the run directory.
pub fn run(
    cfg: &RunConfig,
    bench: &SynthesizedBenchmark,
    vocab: &Vocab,
    seed: u64,
    mode: Mode,
    dir: &Path,
    opts: &RunOptions,
) -> Result<RunRecord> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut snapshot = cfg.clone();
    snapshot.seeds = vec![seed];
    write(&dir.join("config.toml"), &snapshot.to_toml())?;
    let steps = match (cfg.model, mode) {
        (ModelKind::SpanKl, Mode::Cl) => run_cl_with::<SpanKlModel>(cfg, bench, vocab, seed, dir, opts)?,
        (ModelKind::SpanKl, Mode::NonCl) => run_noncl_with::<SpanKlModel>(cfg, bench, vocab, seed, dir, opts)?,
        (_, Mode::Cl) => run_cl_with::<TaggerModel>(cfg, bench, vocab, seed, dir, opts)?,
        (_, Mode::NonCl) => run_noncl_with::<TaggerModel>(cfg, bench, vocab, seed, dir, opts)?,
    };
    let record = RunRecord {
        model: cfg.model.name().to_string(),
        mode,
        alpha: cfg.alpha,
        beta: cfg.beta,
        setup: bench.setup.to_string(),
        kind: bench.kind.to_string(),
        permutation: bench.sequence.id,
        seed,
        family: benchmark_family(bench),
        total_steps: bench.tasks.len(),
        steps,
    };
    write(&dir.join("run.json"), &(serde_json::to_string_pretty(&record)? + "\n"))?;
    write(&dir.join("metrics.tsv"), &metrics_tsv(&record))?;
    write(&dir.join("curve.csv"), &curve_csv(&record))?;
    Ok(record)
}

pub const METRICS_HEADER: &str = "model\tmode\tsetup\tpermutation\tseed\tstep\ttype\tprecision\trecall\tf1\ttp\tfp\tfn";

/// Tab-separated metrics of a run: one row per (step, type), per (step,
/// coarse group) when grouped, and one `MACRO` row per step.
pub fn metrics_tsv(r: &RunRecord) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    let key = format!("{}\t{}\t{}\t{}\t{}", r.model, r.mode.name(), r.setup, r.permutation, r.seed);
    for s in &r.steps {
        for t in s.evaluation.types.iter() {
            let c = t.counts;
            let _ = writeln!(out, "{key}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}", s.step, t.label, t.precision, t.recall, t.f1, c.tp, c.fp, c.fn_);
        }
        for t in s.evaluation.groups.iter() {
            let c = t.counts;
            let _ = writeln!(out, "{key}\t{}\tgroup:{}\t{}\t{}\t{}\t{}\t{}\t{}", s.step, t.label, t.precision, t.recall, t.f1, c.tp, c.fp, c.fn_);
        }
        let _ = writeln!(out, "{key}\t{}\tMACRO\t-\t-\t{}\t-\t-\t-", s.step, s.evaluation.macro_f1);
    }
    out
}

/// `step,type,f1` rows for every learned type at every step.
pub fn curve_csv(r: &RunRecord) -> String {
    let mut out = String::from("step,type,f1\n");
    for s in &r.steps {
        for t in &s.evaluation.types {
            let _ = writeln!(out, "{},{},{}", s.step, t.label, t.f1);
        }
    }
    out
}

/// A trained model of any kind, loaded from a step directory.
#[derive(Clone, Debug)]
pub enum LoadedModel {
    SpanKl(SpanKlModel),
    Tagger(TaggerModel),
}

impl LoadedModel {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("model.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        match v.get("kind").and_then(|k| k.as_str()) {
            Some("spankl") => Ok(LoadedModel::SpanKl(SpanKlModel::load(dir)?)),
            Some("addner") | Some("extendner") => Ok(LoadedModel::Tagger(TaggerModel::load(dir)?)),
            other => Err(Error::Data(format!("unknown model kind {other:?} in {}", p.display()))),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LoadedModel::SpanKl(m) => m.kind_name(),
            LoadedModel::Tagger(m) => m.kind_name(),
        }
    }

    pub fn learned_types(&self) -> Vec<String> {
        match self {
            LoadedModel::SpanKl(m) => m.learned_types(),
            LoadedModel::Tagger(m) => m.learned_types(),
        }
    }

    pub fn predict(&self, sentence: &Sentence) -> Result<Vec<ScoredSpan>> {
        match self {
            LoadedModel::SpanKl(m) => m.predict(sentence),
            LoadedModel::Tagger(m) => m.predict(sentence),
        }
    }

    pub fn predict_tokens(&self, tokens: &[String]) -> Result<Vec<ScoredSpan>> {
        self.predict(&Sentence::new(tokens.to_vec(), Vec::new()))
    }
}
