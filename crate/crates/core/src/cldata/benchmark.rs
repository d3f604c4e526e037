use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::{parse_corpus, write_corpus};
use super::synth::{DatasetKind, Setup, SynthesizedBenchmark, TaskData, TaskSequence};
use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::types::Sentence;

/// Description of a benchmark directory, stored under `extra.benchmark` of its manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkInfo {
    pub setup: String,
    pub kind: DatasetKind,
    pub seed: u64,
    pub permutation: usize,
    pub tasks: Vec<TaskInfo>,
    pub grouping: Option<BTreeMap<String, String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub types: Vec<String>,
    pub train_ids: Vec<usize>,
    pub dev_ids: Vec<usize>,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl BenchmarkInfo {
    pub fn of(b: &SynthesizedBenchmark) -> Self {
        BenchmarkInfo {
            setup: b.setup.to_string(),
            kind: b.kind,
            seed: b.seed,
            permutation: b.sequence.id,
            tasks: b
                .tasks
                .iter()
                .map(|t| TaskInfo {
                    types: t.types.clone(),
                    train_ids: t.train_ids.clone(),
                    dev_ids: t.dev_ids.clone(),
                    train: t.train.len(),
                    dev: t.dev.len(),
                    test: t.test.len(),
                })
                .collect(),
            grouping: b.grouping.clone(),
        }
    }
}

pub fn task_dir(root: &Path, l: usize) -> PathBuf {
    root.join(format!("task_{l}"))
}

/// Vocabulary over every pooled training sentence of the benchmark.
pub fn benchmark_vocab(b: &SynthesizedBenchmark) -> Vocab {
    Vocab::build(&b.pool_train)
}

/// Write task directories, pools, vocabulary, and the manifest (with the
/// benchmark description added under `extra.benchmark`).
pub fn save_benchmark(dir: &Path, b: &SynthesizedBenchmark, manifest: Manifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_corpus(&dir.join("pool_train.txt"), &b.pool_train)?;
    write_corpus(&dir.join("pool_dev.txt"), &b.pool_dev)?;
    benchmark_vocab(b).save(&dir.join("vocab.txt"))?;
    for (i, t) in b.tasks.iter().enumerate() {
        let td = task_dir(dir, i + 1);
        write_corpus(&td.join("train.txt"), &t.train)?;
        write_corpus(&td.join("dev.txt"), &t.dev)?;
        write_corpus(&td.join("test.txt"), &t.test)?;
    }
    let info = serde_json::to_value(BenchmarkInfo::of(b))?;
    manifest.with("benchmark", info).write(dir)
}

fn read_sentences(path: &Path) -> Result<Vec<Sentence>> {
    Ok(parse_corpus(path)?.corpus.sentences)
}

/// Read a benchmark directory written by [`save_benchmark`].
pub fn load_benchmark(dir: &Path) -> Result<(SynthesizedBenchmark, Vocab)> {
    let manifest = Manifest::read(dir)?;
    let info: BenchmarkInfo = serde_json::from_value(
        manifest
            .extra
            .get("benchmark")
            .cloned()
            .ok_or_else(|| Error::Data(format!("{} is not a benchmark directory", dir.display())))?,
    )?;
    let setup: Setup = info.setup.parse().map_err(Error::Data)?;
    let mut tasks = Vec::with_capacity(info.tasks.len());
    for (i, t) in info.tasks.iter().enumerate() {
        let td = task_dir(dir, i + 1);
        let task = TaskData {
            types: t.types.clone(),
            train: read_sentences(&td.join("train.txt"))?,
            dev: read_sentences(&td.join("dev.txt"))?,
            test: read_sentences(&td.join("test.txt"))?,
            train_ids: t.train_ids.clone(),
            dev_ids: t.dev_ids.clone(),
        };
        if (task.train.len(), task.dev.len(), task.test.len()) != (t.train, t.dev, t.test) {
            return Err(Error::Data(format!("task {} files disagree with the manifest counts", i + 1)));
        }
        tasks.push(task);
    }
    let b = SynthesizedBenchmark {
        setup,
        seed: info.seed,
        kind: info.kind,
        sequence: TaskSequence {
            id: info.permutation,
            tasks: info.tasks.iter().map(|t| t.types.clone()).collect(),
        },
        tasks,
        pool_train: read_sentences(&dir.join("pool_train.txt"))?,
        pool_dev: read_sentences(&dir.join("pool_dev.txt"))?,
        grouping: info.grouping,
    };
    let max_train = b.tasks.iter().flat_map(|t| t.train_ids.iter()).max().copied();
    if max_train.is_some_and(|m| m >= b.pool_train.len()) {
        return Err(Error::Data("task train ids exceed the pool".into()));
    }
    let vocab = Vocab::load(&dir.join("vocab.txt"))?;
    Ok((b, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cldata::toy::{generate_toy_corpus, split_corpus, ToyCorpusSpec};
    use crate::cldata::synth::{permutations, synthesize};

    #[test]
    fn save_load_roundtrip() {
        let c = generate_toy_corpus(&ToyCorpusSpec::six_types(60), 1).unwrap();
        let s = split_corpus(&c, 0.7, 0.1, 1).unwrap();
        let seq = permutations(DatasetKind::Toy, &s.types(), 3, 1, 5).unwrap().remove(0);
        let b = synthesize(&s, &seq, "split-all".parse().unwrap(), DatasetKind::Toy, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new("synthesize", serde_json::json!({}), vec![], vec![2]);
        save_benchmark(dir.path(), &b, m).unwrap();
        let (back, vocab) = load_benchmark(dir.path()).unwrap();
        assert_eq!(back, b);
        assert_eq!(vocab, benchmark_vocab(&b));
    }
}
