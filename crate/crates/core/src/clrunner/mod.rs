//! Continual learning protocol: per-step head growth, one-off teacher
//! prediction, training with dev-based epoch selection, evaluation over all
//! learned types, non-CL reference runs, sweeps, and report aggregation.

mod config;
mod report;
mod run;
mod sweep;
mod train;

pub use config::{ModelKind, RunConfig};
pub use report::{aggregate, mean, median, merged_curves, render_table, Report, Variant, VariantSummary};
pub use run::{
    benchmark_family, curve_csv, metrics_tsv, run, step_dir, LoadedModel, Mode, RunOptions, RunRecord, StepRecord,
    Trainable, METRICS_HEADER,
};
pub use sweep::{sweep, SweepPlan};
pub use train::{derive_rng, evaluate_model, train_step, EpochRecord, TrainRecord};
