//! Command implementations behind the `spankl` binary. Each command writes
//! its outputs plus one manifest into its output directory.

use std::path::{Path, PathBuf};

use serde_json::json;

use crate::cldata::{
    generate_toy_corpus, load_benchmark, parse_corpus, permutations, save_benchmark, split_corpus, synthesize,
    CorpusSplits, DatasetKind, Setup, TaskSequence, ToyCorpusSpec,
};
use crate::clrunner::{
    aggregate, merged_curves, render_table, run, sweep, LoadedModel, Mode, ModelKind, Report, RunConfig,
    RunOptions, RunRecord, SweepPlan,
};
use crate::error::{Error, Result};
use crate::manifest::Manifest;

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

#[derive(Clone, Debug)]
pub struct GenerateToyArgs {
    pub out: PathBuf,
    pub sentences: usize,
    pub seed: u64,
    pub types: Option<Vec<String>>,
    pub nesting_prob: Option<f64>,
    /// Train and dev fractions; the remainder is test.
    pub split: (f64, f64),
}

/// Write a seeded toy corpus as `train.txt`, `dev.txt`, `test.txt`.
pub fn generate_toy(a: &GenerateToyArgs) -> Result<CorpusSplits> {
    let mut spec = ToyCorpusSpec::six_types(a.sentences);
    if let Some(t) = &a.types {
        let refs: Vec<&str> = t.iter().map(String::as_str).collect();
        for x in &refs {
            if !spec.lexicons.contains_key(*x) {
                return Err(Error::InvalidArgument(format!("the toy generator has no type `{x}`")));
            }
        }
        spec = spec.restrict(&refs);
    }
    if let Some(p) = a.nesting_prob {
        spec.nesting_prob = p;
    }
    let corpus = generate_toy_corpus(&spec, a.seed)?;
    let splits = split_corpus(&corpus, a.split.0, a.split.1, a.seed)?;
    splits.write_dir(&a.out)?;
    Manifest::new("generate-toy", serde_json::to_value(&spec)?, vec![], vec![a.seed])
        .with("split", json!({"train": a.split.0, "dev": a.split.1}))
        .with("counts", json!({"train": splits.train.len(), "dev": splits.dev.len(), "test": splits.test.len()}))
        .write(&a.out)?;
    Ok(splits)
}

#[derive(Clone, Debug)]
pub struct SynthesizeArgs {
    pub corpus: PathBuf,
    pub kind: DatasetKind,
    pub setup: Setup,
    pub seed: u64,
    /// 1-based permutation number.
    pub permutation: usize,
    /// Toy kind only: number of tasks and of generated orders.
    pub tasks: usize,
    pub orders: usize,
    pub out: PathBuf,
}

/// Resolve the task sequence for a permutation id.
pub fn pick_permutation(
    kind: DatasetKind,
    inventory: &[String],
    id: usize,
    tasks: usize,
    orders: usize,
    seed: u64,
) -> Result<TaskSequence> {
    let all = permutations(kind, inventory, tasks, orders.max(id), seed)?;
    all.into_iter()
        .find(|p| p.id == id)
        .ok_or_else(|| Error::InvalidArgument(format!("no permutation {id} for {kind}")))
}

pub fn synthesize_cmd(a: &SynthesizeArgs) -> Result<()> {
    let (splits, repaired) = CorpusSplits::read_dir(&a.corpus)?;
    let seq = pick_permutation(a.kind, &splits.types(), a.permutation, a.tasks, a.orders, a.seed)?;
    let bench = synthesize(&splits, &seq, a.setup, a.kind, a.seed)?;
    let config = json!({
        "kind": a.kind.to_string(),
        "setup": a.setup.to_string(),
        "permutation": a.permutation,
        "tasks": a.tasks,
        "orders": a.orders,
    });
    let m = Manifest::new("synthesize", config, vec![display(&a.corpus)], vec![a.seed])
        .with("repaired_tags", json!(repaired))
        .with(
            "choices",
            json!({
                "split_sizes": "floor(N/L) or ceil(N/L)",
                "dev_rule": "same rule as train",
                "filter_duplicates": "a sentence may appear in several tasks",
            }),
        );
    save_benchmark(&a.out, &bench, m)
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub benchmark: PathBuf,
    pub config: Option<PathBuf>,
    pub mode: Mode,
    pub out: PathBuf,
    pub model: Option<ModelKind>,
    pub epochs: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub threshold: Option<f64>,
    pub seeds: Option<Vec<u64>>,
    pub resume: bool,
    pub stop_after: Option<usize>,
}

/// Config file (or defaults) with command-line overrides applied and validated.
pub fn effective_config(
    config: Option<&Path>,
    model: Option<ModelKind>,
    epochs: Option<usize>,
    alpha: Option<f64>,
    beta: Option<f64>,
    threshold: Option<f64>,
    seeds: Option<Vec<u64>>,
) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<RunConfig>(&text)
                .map_err(|e| Error::Config(vec![format!("{}: {}", p.display(), e.message())]))?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = model {
        cfg.model = v;
    }
    if let Some(v) = epochs {
        cfg.epochs = v;
    }
    if let Some(v) = alpha {
        cfg.alpha = v;
    }
    if let Some(v) = beta {
        cfg.beta = v;
    }
    if let Some(v) = threshold {
        cfg.threshold = v;
    }
    if let Some(v) = seeds {
        cfg.seeds = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Train on a benchmark directory. One seed writes the run directly into
/// `out`; several seeds write `out/seed_{s}`.
pub fn train_cmd(a: &TrainArgs) -> Result<Vec<RunRecord>> {
    let cfg = effective_config(
        a.config.as_deref(),
        a.model,
        a.epochs,
        a.alpha,
        a.beta,
        a.threshold,
        a.seeds.clone(),
    )?;
    let (bench, vocab) = load_benchmark(&a.benchmark)?;
    let opts = RunOptions {
        resume: a.resume,
        stop_after: a.stop_after,
        only_steps: None,
    };
    let mut inputs = vec![display(&a.benchmark)];
    if let Some(c) = &a.config {
        inputs.push(display(c));
    }
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let dir = if cfg.seeds.len() == 1 {
            a.out.clone()
        } else {
            a.out.join(format!("seed_{seed}"))
        };
        records.push(run(&cfg, &bench, &vocab, seed, a.mode, &dir, &opts)?);
    }
    Manifest::new("train", serde_json::to_value(&cfg)?, inputs, cfg.seeds.clone())
        .with("mode", json!(a.mode.name()))
        .with(
            "choices",
            json!({
                "dev_selection": "best epoch by macro-F1 on the step's own dev set (current-task annotations only)",
                "teacher": "one-off prediction of the previous step's model on the step's training set",
            }),
        )
        .write(&a.out)?;
    Ok(records)
}

/// Collect `run.json` records under each path (the path itself or any descendant).
pub fn collect_runs(paths: &[PathBuf]) -> Result<Vec<RunRecord>> {
    fn walk(dir: &Path, out: &mut Vec<RunRecord>) -> Result<()> {
        if dir.join("run.json").is_file() {
            out.push(RunRecord::read(dir)?);
            return Ok(());
        }
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        for e in entries {
            walk(&e, out)?;
        }
        Ok(())
    }
    let mut out = Vec::new();
    for p in paths {
        walk(p, &mut out)?;
    }
    if out.is_empty() {
        return Err(Error::Data("no run records (run.json) found".into()));
    }
    Ok(out)
}

fn write_report(out: &Path, records: &[RunRecord], report: &Report) -> Result<()> {
    write(&out.join("table.txt"), &render_table(report))?;
    write(&out.join("report.json"), &(serde_json::to_string_pretty(report)? + "\n"))?;
    write(&out.join("curves.csv"), &merged_curves(records))
}

/// Merge run directories into a step-wise table, a machine-readable report, and curves.
pub fn report_cmd(runs: &[PathBuf], out: &Path) -> Result<Report> {
    let records = collect_runs(runs)?;
    let report = aggregate(&records)?;
    write_report(out, &records, &report)?;
    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = records.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    Manifest::new("report", json!({"runs": records.len()}), runs.iter().map(|p| display(p)).collect(), seeds)
        .write(out)?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct SweepArgs {
    pub corpus: PathBuf,
    pub kind: DatasetKind,
    pub setup: Setup,
    pub permutations: Vec<usize>,
    pub tasks: usize,
    pub orders: usize,
    /// Seed of the toy permutation generator.
    pub order_seed: u64,
    pub noncl: bool,
    pub train: TrainArgs,
}

pub fn sweep_cmd(a: &SweepArgs) -> Result<Report> {
    let t = &a.train;
    let cfg = effective_config(t.config.as_deref(), t.model, t.epochs, t.alpha, t.beta, t.threshold, t.seeds.clone())?;
    let (splits, _) = CorpusSplits::read_dir(&a.corpus)?;
    let perms = a
        .permutations
        .iter()
        .map(|&p| pick_permutation(a.kind, &splits.types(), p, a.tasks, a.orders, a.order_seed))
        .collect::<Result<Vec<_>>>()?;
    let mut modes = vec![Mode::Cl];
    if a.noncl {
        modes.push(Mode::NonCl);
    }
    let plan = SweepPlan {
        setup: a.setup,
        kind: a.kind,
        permutations: perms,
        seeds: cfg.seeds.clone(),
        modes,
    };
    let (records, report) = sweep(&cfg, &splits, &plan, &t.out)?;
    write_report(&t.out, &records, &report)?;
    Manifest::new("sweep", serde_json::to_value(&cfg)?, vec![display(&a.corpus)], cfg.seeds.clone())
        .with(
            "plan",
            json!({
                "kind": a.kind.to_string(),
                "setup": a.setup.to_string(),
                "permutations": a.permutations,
                "noncl": a.noncl,
            }),
        )
        .write(&t.out)?;
    Ok(report)
}

/// Predict spans for every sentence of a column file; one JSON line per sentence.
pub fn predict_cmd(model_dir: &Path, input: &Path) -> Result<String> {
    let model = LoadedModel::load(model_dir)?;
    let corpus = parse_corpus(input)?.corpus;
    let mut out = String::new();
    for s in &corpus.sentences {
        let pred = model.predict(s)?;
        out.push_str(&serde_json::to_string(&json!({"tokens": s.tokens, "pred": pred}))?);
        out.push('\n');
    }
    Ok(out)
}

