use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::CorpusSplits;
use crate::error::{Error, Result};
use crate::types::Sentence;

/// How task training/dev sentences are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainRule {
    /// Random disjoint partition, one group per task.
    Split,
    /// Every sentence mentioning one of the task's types.
    Filter,
}

/// How step test sets are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestRule {
    /// The whole test set at every step.
    All,
    /// Test sentences mentioning a type learned so far.
    Filter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Setup {
    pub train: TrainRule,
    pub test: TestRule,
}

impl Setup {
    pub const ALL: [Setup; 4] = [
        Setup { train: TrainRule::Split, test: TestRule::All },
        Setup { train: TrainRule::Split, test: TestRule::Filter },
        Setup { train: TrainRule::Filter, test: TestRule::All },
        Setup { train: TrainRule::Filter, test: TestRule::Filter },
    ];
}

impl std::fmt::Display for Setup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let a = match self.train {
            TrainRule::Split => "split",
            TrainRule::Filter => "filter",
        };
        let b = match self.test {
            TestRule::All => "all",
            TestRule::Filter => "filter",
        };
        write!(f, "{a}-{b}")
    }
}

impl std::str::FromStr for Setup {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Setup::ALL
            .into_iter()
            .find(|x| x.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown setup `{s}` (expected split-all|split-filter|filter-all|filter-filter)"))
    }
}

/// Which permutation table applies to a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Six flat types, one type per task.
    OntoNotes,
    /// Eight coarse groups of fine types, one group per task.
    FewNerd,
    /// Seeded random orders over the corpus inventory.
    Toy,
}

impl std::str::FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ontonotes" => Ok(DatasetKind::OntoNotes),
            "fewnerd" | "few-nerd" => Ok(DatasetKind::FewNerd),
            "toy" => Ok(DatasetKind::Toy),
            _ => Err(format!("unknown dataset kind `{s}` (expected ontonotes|fewnerd|toy)")),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::OntoNotes => "ontonotes",
            DatasetKind::FewNerd => "fewnerd",
            DatasetKind::Toy => "toy",
        })
    }
}

/// Ordered entity-type sets `E_1 … E_L`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSequence {
    /// 1-based permutation number within its table.
    pub id: usize,
    pub tasks: Vec<Vec<String>>,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// `E_1 ∪ … ∪ E_l` (1-based `l`) in task order.
    pub fn learned_through(&self, l: usize) -> Vec<String> {
        self.tasks[..l].iter().flatten().cloned().collect()
    }

    pub fn validate(&self, inventory: &[String]) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::InvalidArgument("task sequence is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for (l, t) in self.tasks.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::InvalidArgument(format!("task {} has no entity types", l + 1)));
            }
            for ty in t {
                if !inventory.contains(ty) {
                    return Err(Error::Data(format!("task {} type `{ty}` is not in the corpus inventory", l + 1)));
                }
                if !seen.insert(ty) {
                    return Err(Error::InvalidArgument(format!("type `{ty}` appears in two tasks")));
                }
            }
        }
        Ok(())
    }
}

const ONTONOTES: [[&str; 6]; 6] = [
    ["ORG", "PER", "GPE", "DATE", "CARD", "NORP"],
    ["DATE", "NORP", "PER", "CARD", "ORG", "GPE"],
    ["GPE", "CARD", "ORG", "NORP", "DATE", "PER"],
    ["NORP", "ORG", "DATE", "PER", "GPE", "CARD"],
    ["CARD", "GPE", "NORP", "ORG", "PER", "DATE"],
    ["PER", "DATE", "CARD", "GPE", "NORP", "ORG"],
];

const FEWNERD: [[&str; 8]; 4] = [
    ["LOC", "PER", "ORG", "OTH", "PROD", "BUID", "ART", "EVET"],
    ["ORG", "PROD", "ART", "EVET", "OTH", "PER", "LOC", "BUID"],
    ["PROD", "EVET", "OTH", "PER", "ART", "LOC", "BUID", "ORG"],
    ["BUID", "OTH", "PROD", "PER", "ORG", "LOC", "ART", "EVET"],
];

/// Coarse group name in fine-type labels for each permutation-table abbreviation.
pub fn fewnerd_coarse(abbrev: &str) -> Option<&'static str> {
    Some(match abbrev {
        "LOC" => "location",
        "PER" => "person",
        "ORG" => "organization",
        "OTH" => "other",
        "PROD" => "product",
        "BUID" => "building",
        "ART" => "art",
        "EVET" => "event",
        _ => return None,
    })
}

/// Task orders for a dataset kind. For Few-NERD each task holds every fine
/// type of `inventory` under that coarse group. For toy corpora, `toy_orders`
/// seeded shuffles of `inventory` are chunked into `toy_tasks` near-equal tasks.
pub fn permutations(
    kind: DatasetKind,
    inventory: &[String],
    toy_tasks: usize,
    toy_orders: usize,
    seed: u64,
) -> Result<Vec<TaskSequence>> {
    let out: Vec<TaskSequence> = match kind {
        DatasetKind::OntoNotes => ONTONOTES
            .iter()
            .enumerate()
            .map(|(i, p)| TaskSequence {
                id: i + 1,
                tasks: p.iter().map(|t| vec![t.to_string()]).collect(),
            })
            .collect(),
        DatasetKind::FewNerd => FEWNERD
            .iter()
            .enumerate()
            .map(|(i, p)| TaskSequence {
                id: i + 1,
                tasks: p
                    .iter()
                    .map(|a| {
                        let coarse = fewnerd_coarse(a).unwrap_or_default();
                        inventory
                            .iter()
                            .filter(|t| t.split('-').next() == Some(coarse))
                            .cloned()
                            .collect()
                    })
                    .collect(),
            })
            .collect(),
        DatasetKind::Toy => {
            if toy_tasks == 0 || toy_tasks > inventory.len() {
                return Err(Error::InvalidArgument(format!(
                    "cannot split {} types into {toy_tasks} tasks",
                    inventory.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..toy_orders)
                .map(|i| {
                    let mut order = inventory.to_vec();
                    order.shuffle(&mut rng);
                    TaskSequence {
                        id: i + 1,
                        tasks: chunk(&order, toy_tasks),
                    }
                })
                .collect()
        }
    };
    Ok(out)
}

/// Split `items` into `parts` contiguous groups whose sizes differ by at most one.
fn chunk<T: Clone>(items: &[T], parts: usize) -> Vec<Vec<T>> {
    let (q, r) = (items.len() / parts, items.len() % parts);
    let mut out = Vec::with_capacity(parts);
    let mut at = 0;
    for p in 0..parts {
        let size = q + usize::from(p < r);
        out.push(items[at..at + size].to_vec());
        at += size;
    }
    out
}

/// Drop every gold span whose type is not allowed. Tokens are untouched.
pub fn erase_annotations(sentence: &Sentence, allowed: &[String]) -> Sentence {
    Sentence {
        tokens: sentence.tokens.clone(),
        spans: sentence.spans.iter().filter(|s| allowed.contains(&s.label)).cloned().collect(),
    }
}

/// Data of one task `l`: training and dev sentences annotated for `E_l`
/// only, and the step-`l` test set annotated for `E_1 ∪ … ∪ E_l`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub types: Vec<String>,
    pub train: Vec<Sentence>,
    pub dev: Vec<Sentence>,
    pub test: Vec<Sentence>,
    /// Indices of `train`/`dev` sentences in the unerased pools.
    pub train_ids: Vec<usize>,
    pub dev_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesizedBenchmark {
    pub setup: Setup,
    pub seed: u64,
    pub kind: DatasetKind,
    pub sequence: TaskSequence,
    pub tasks: Vec<TaskData>,
    /// Unerased train/dev sentences restricted to the sequence's types, used
    /// to rebuild the cumulative data of non-CL reference runs.
    pub pool_train: Vec<Sentence>,
    pub pool_dev: Vec<Sentence>,
    pub grouping: Option<BTreeMap<String, String>>,
}

impl SynthesizedBenchmark {
    pub fn all_types(&self) -> Vec<String> {
        self.sequence.learned_through(self.sequence.len())
    }

    /// Union of tasks `1..=l` drawn from the pool and annotated for every
    /// type learned through `l`. Each pooled sentence appears once.
    pub fn cumulative(&self, l: usize) -> (Vec<Sentence>, Vec<Sentence>) {
        let learned = self.sequence.learned_through(l);
        let gather = |pool: &[Sentence], ids: &dyn Fn(&TaskData) -> &Vec<usize>| {
            let set: BTreeSet<usize> = self.tasks[..l].iter().flat_map(|t| ids(t).iter().copied()).collect();
            set.into_iter().map(|i| erase_annotations(&pool[i], &learned)).collect::<Vec<_>>()
        };
        (
            gather(&self.pool_train, &|t| &t.train_ids),
            gather(&self.pool_dev, &|t| &t.dev_ids),
        )
    }
}

fn select(pool: &[Sentence], rule: TrainRule, seq: &TaskSequence, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    match rule {
        TrainRule::Split => {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            idx.shuffle(rng);
            chunk(&idx, seq.len())
                .into_iter()
                .map(|mut g| {
                    g.sort_unstable();
                    g
                })
                .collect()
        }
        TrainRule::Filter => seq
            .tasks
            .iter()
            .map(|types| (0..pool.len()).filter(|&i| pool[i].has_any_label(types)).collect())
            .collect(),
    }
}

/// Build the per-task datasets of a continual learning benchmark.
pub fn synthesize(
    splits: &CorpusSplits,
    sequence: &TaskSequence,
    setup: Setup,
    kind: DatasetKind,
    seed: u64,
) -> Result<SynthesizedBenchmark> {
    sequence.validate(&splits.types())?;
    let all = sequence.learned_through(sequence.len());
    let pool_train: Vec<Sentence> = splits.train.sentences.iter().map(|s| erase_annotations(s, &all)).collect();
    let pool_dev: Vec<Sentence> = splits.dev.sentences.iter().map(|s| erase_annotations(s, &all)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_groups = select(&pool_train, setup.train, sequence, &mut rng);
    let dev_groups = select(&pool_dev, setup.train, sequence, &mut rng);
    let mut tasks = Vec::with_capacity(sequence.len());
    for (l, types) in sequence.tasks.iter().enumerate() {
        let train_ids = train_groups[l].clone();
        if train_ids.is_empty() {
            return Err(Error::Data(format!("task {} ({}) has no training sentences", l + 1, types.join(","))));
        }
        let dev_ids = dev_groups[l].clone();
        let learned = sequence.learned_through(l + 1);
        let test: Vec<Sentence> = splits
            .test
            .sentences
            .iter()
            .filter(|s| setup.test == TestRule::All || s.has_any_label(&learned))
            .map(|s| erase_annotations(s, &learned))
            .collect();
        tasks.push(TaskData {
            types: types.clone(),
            train: train_ids.iter().map(|&i| erase_annotations(&pool_train[i], types)).collect(),
            dev: dev_ids.iter().map(|&i| erase_annotations(&pool_dev[i], types)).collect(),
            test,
            train_ids,
            dev_ids,
        });
    }
    let grouping = splits
        .grouping()
        .map(|g| g.into_iter().filter(|(k, _)| all.contains(k)).collect());
    Ok(SynthesizedBenchmark {
        setup,
        seed,
        kind,
        sequence: sequence.clone(),
        tasks,
        pool_train,
        pool_dev,
        grouping,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cldata::corpus::Corpus;
    use crate::types::Span;

    fn sent(spans: &[(usize, usize, &str)]) -> Sentence {
        Sentence::new(
            (0..6).map(|i| format!("w{i}")).collect(),
            spans.iter().map(|&(a, b, l)| Span::new(a, b, l)).collect(),
        )
    }

    fn ty(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    fn splits() -> CorpusSplits {
        let train = vec![
            sent(&[(0, 0, "PER"), (2, 3, "ORG")]),
            sent(&[(1, 1, "PER")]),
            sent(&[(4, 4, "ORG")]),
            sent(&[]),
        ];
        let c = |v: Vec<Sentence>| Corpus::from_sentences(v).unwrap();
        CorpusSplits {
            train: c(train.clone()),
            dev: c(train.clone()),
            test: c(vec![sent(&[(0, 0, "ORG")]), sent(&[])]),
        }
    }

    #[test]
    fn setup_names() {
        for s in Setup::ALL {
            assert_eq!(s.to_string().parse::<Setup>().unwrap(), s);
        }
        assert!("split-some".parse::<Setup>().is_err());
    }

    #[test]
    fn erase_examples() {
        let s = sent(&[(0, 0, "PER"), (2, 3, "ORG")]);
        assert_eq!(erase_annotations(&s, &ty(&["PER", "ORG"])), s);
        assert!(erase_annotations(&s, &[]).spans.is_empty());
        assert_eq!(erase_annotations(&s, &ty(&["ORG"])).spans, vec![Span::new(2, 3, "ORG")]);
        let once = erase_annotations(&s, &ty(&["ORG"]));
        assert_eq!(erase_annotations(&once, &ty(&["ORG"])), once);
    }

    #[test]
    fn shared_sentence_membership() {
        let seq = TaskSequence {
            id: 1,
            tasks: vec![ty(&["PER"]), ty(&["ORG"])],
        };
        let both = 0;
        let f = synthesize(&splits(), &seq, "filter-all".parse().unwrap(), DatasetKind::Toy, 1).unwrap();
        assert!(f.tasks[0].train_ids.contains(&both) && f.tasks[1].train_ids.contains(&both));
        let s = synthesize(&splits(), &seq, "split-all".parse().unwrap(), DatasetKind::Toy, 1).unwrap();
        let hits = s.tasks.iter().filter(|t| t.train_ids.contains(&both)).count();
        assert_eq!(hits, 1);
        let sizes: Vec<usize> = s.tasks.iter().map(|t| t.train.len()).collect();
        assert_eq!(sizes, vec![2, 2]);
    }

    #[test]
    fn filter_test_and_annotations() {
        let seq = TaskSequence {
            id: 1,
            tasks: vec![ty(&["PER"]), ty(&["ORG"])],
        };
        let b = synthesize(&splits(), &seq, "filter-filter".parse().unwrap(), DatasetKind::Toy, 3).unwrap();
        assert!(b.tasks[0].test.is_empty());
        assert_eq!(b.tasks[1].test.len(), 1);
        for t in &b.tasks {
            for s in t.train.iter().chain(&t.dev) {
                assert!(s.spans.iter().all(|x| t.types.contains(&x.label)));
                assert!(s.has_any_label(&t.types));
            }
        }
        let (union, _) = b.cumulative(2);
        assert_eq!(union.len(), 3);
    }

    #[test]
    fn empty_task_rejected() {
        let seq = TaskSequence {
            id: 1,
            tasks: vec![ty(&["PER"]), ty(&["ORG"])],
        };
        let mut sp = splits();
        sp.train.sentences.retain(|s| !s.has_any_label(&ty(&["ORG"])));
        let e = synthesize(&sp, &seq, "filter-all".parse().unwrap(), DatasetKind::Toy, 0);
        assert!(matches!(e, Err(Error::Data(_))));
    }

    #[test]
    fn permutation_tables() {
        let onto = permutations(DatasetKind::OntoNotes, &[], 0, 0, 0).unwrap();
        assert_eq!(onto.len(), 6);
        let base: BTreeSet<String> = onto[0].tasks.iter().flatten().cloned().collect();
        for p in &onto {
            let s: BTreeSet<String> = p.tasks.iter().flatten().cloned().collect();
            assert_eq!(s, base);
            assert_eq!(p.len(), 6);
        }
        assert_eq!(onto[0].learned_through(6), ty(&["ORG", "PER", "GPE", "DATE", "CARD", "NORP"]));
        let inv = ty(&["person-actor", "location-city", "person-artist"]);
        let few = permutations(DatasetKind::FewNerd, &inv, 0, 0, 0).unwrap();
        assert_eq!(few.len(), 4);
        assert!(few.iter().all(|p| p.len() == 8));
        assert_eq!(few[0].tasks[0], ty(&["location-city"]));
        assert_eq!(few[0].tasks[1], ty(&["person-actor", "person-artist"]));
        let inv6 = ty(&["A", "B", "C", "D", "E", "F"]);
        let t1 = permutations(DatasetKind::Toy, &inv6, 3, 2, 7).unwrap();
        assert_eq!(t1, permutations(DatasetKind::Toy, &inv6, 3, 2, 7).unwrap());
        assert!(t1.iter().all(|p| p.tasks.iter().all(|t| t.len() == 2)));
        assert!("conll".parse::<DatasetKind>().is_err());
    }
}
