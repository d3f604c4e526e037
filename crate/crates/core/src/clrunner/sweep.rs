use std::path::Path;

use rayon::prelude::*;

use super::config::RunConfig;
use super::report::{aggregate, Report};
use super::run::{run, Mode, RunOptions, RunRecord};
use crate::cldata::{benchmark_vocab, synthesize, CorpusSplits, DatasetKind, Setup, TaskSequence};
use crate::error::Result;

/// Independent runs of a sweep.
#[derive(Clone, Debug)]
pub struct SweepPlan {
    pub setup: Setup,
    pub kind: DatasetKind,
    pub permutations: Vec<TaskSequence>,
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
}

/// Run every (permutation, seed, mode) combination in parallel. Each seed
/// drives both benchmark synthesis and training. Run directories go to
/// `out/perm_{p}/seed_{s}/{mode}`.
pub fn sweep(cfg: &RunConfig, splits: &CorpusSplits, plan: &SweepPlan, out: &Path) -> Result<(Vec<RunRecord>, Report)> {
    let jobs: Vec<(&TaskSequence, u64, Mode)> = plan
        .permutations
        .iter()
        .flat_map(|p| plan.seeds.iter().flat_map(move |s| plan.modes.iter().map(move |m| (p, *s, *m))))
        .collect();
    let records = jobs
        .par_iter()
        .map(|(perm, seed, mode)| {
            let bench = synthesize(splits, perm, plan.setup, plan.kind, *seed)?;
            let vocab = benchmark_vocab(&bench);
            let dir = out.join(format!("perm_{}", perm.id)).join(format!("seed_{seed}")).join(mode.name());
            run(cfg, &bench, &vocab, *seed, *mode, &dir, &RunOptions::default())
        })
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(&records)?;
    Ok((records, report))
}
