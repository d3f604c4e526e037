//! Corpus ingestion, toy corpus generation, and synthesis of class-incremental
//! benchmarks under the Split/Filter × All/Filter setups.

mod benchmark;
mod corpus;
mod synth;
mod toy;

pub use benchmark::{benchmark_vocab, load_benchmark, save_benchmark, task_dir, BenchmarkInfo, TaskInfo};
pub use corpus::{
    coarse_grouping, parse_corpus, parse_str, to_column_text, write_corpus, Corpus, CorpusSplits, ParseReport,
};
pub use synth::{
    erase_annotations, fewnerd_coarse, permutations, synthesize, DatasetKind, Setup, SynthesizedBenchmark,
    TaskData, TaskSequence, TestRule, TrainRule,
};
pub use toy::{generate_toy_corpus, split_corpus, NestingRule, ToyCorpusSpec};
