use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spankl::cldata::{DatasetKind, Setup};
use spankl::clrunner::{render_table, Mode, ModelKind};
use spankl::commands::{
    generate_toy, predict_cmd, report_cmd, sweep_cmd, synthesize_cmd, train_cmd, GenerateToyArgs, SweepArgs,
    SynthesizeArgs, TrainArgs,
};

#[derive(Parser)]
#[command(name = "spankl", version, about = "Span-based continual NER: benchmarks, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded toy corpus with nested mentions.
    GenerateToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        sentences: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict to these entity types (comma-separated).
        #[arg(long, value_delimiter = ',')]
        types: Option<Vec<String>>,
        #[arg(long)]
        nesting_prob: Option<f64>,
        #[arg(long, default_value_t = 0.7)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0.1)]
        dev_fraction: f64,
    },
    /// Build a task-sequence benchmark from a corpus directory.
    Synthesize {
        /// Directory with train.txt, dev.txt, test.txt.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "toy")]
        kind: DatasetKind,
        #[arg(long, default_value = "split-all")]
        setup: Setup,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        permutation: usize,
        #[arg(long, default_value_t = 3)]
        tasks: usize,
        #[arg(long, default_value_t = 1)]
        orders: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train over a benchmark's task sequence.
    Train {
        #[arg(long)]
        benchmark: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        resume: bool,
        /// Stop after this step (a later --resume continues).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Aggregate run directories into a table, report.json, and curves.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize and train every (permutation, seed, mode) combination.
    Sweep {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "toy")]
        kind: DatasetKind,
        #[arg(long, default_value = "split-all")]
        setup: Setup,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        permutations: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        tasks: usize,
        #[arg(long, default_value_t = 1)]
        orders: usize,
        #[arg(long, default_value_t = 0)]
        order_seed: u64,
        /// Also run the non-CL reference.
        #[arg(long)]
        noncl: bool,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Predict spans for a column file with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Write JSON lines here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainFlags {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "cl")]
    mode: Mode,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

impl TrainFlags {
    fn into_args(self, benchmark: PathBuf, resume: bool, stop_after: Option<usize>) -> TrainArgs {
        TrainArgs {
            benchmark,
            config: self.config,
            mode: self.mode,
            out: self.out,
            model: self.model,
            epochs: self.epochs,
            alpha: self.alpha,
            beta: self.beta,
            threshold: self.threshold,
            seeds: self.seeds,
            resume,
            stop_after,
        }
    }
}

fn execute(cmd: Command) -> spankl::Result<()> {
    match cmd {
        Command::GenerateToy {
            out,
            sentences,
            seed,
            types,
            nesting_prob,
            train_fraction,
            dev_fraction,
        } => {
            let s = generate_toy(&GenerateToyArgs {
                out: out.clone(),
                sentences,
                seed,
                types,
                nesting_prob,
                split: (train_fraction, dev_fraction),
            })?;
            eprintln!(
                "wrote {} ({} train, {} dev, {} test)",
                out.display(),
                s.train.len(),
                s.dev.len(),
                s.test.len()
            );
        }
        Command::Synthesize {
            corpus,
            kind,
            setup,
            seed,
            permutation,
            tasks,
            orders,
            out,
        } => {
            synthesize_cmd(&SynthesizeArgs {
                corpus,
                kind,
                setup,
                seed,
                permutation,
                tasks,
                orders,
                out: out.clone(),
            })?;
            eprintln!("wrote {}", out.display());
        }
        Command::Train {
            benchmark,
            train,
            resume,
            stop_after,
        } => {
            let records = train_cmd(&train.into_args(benchmark, resume, stop_after))?;
            for r in records {
                if let Some(m) = r.final_macro() {
                    println!("seed {}\tfinal macro-F1 {:.2}", r.seed, 100.0 * m);
                }
            }
        }
        Command::Report { runs, out } => {
            let report = report_cmd(&runs, &out)?;
            print!("{}", render_table(&report));
        }
        Command::Sweep {
            corpus,
            kind,
            setup,
            permutations,
            tasks,
            orders,
            order_seed,
            noncl,
            train,
        } => {
            let report = sweep_cmd(&SweepArgs {
                corpus,
                kind,
                setup,
                permutations,
                tasks,
                orders,
                order_seed,
                noncl,
                train: train.into_args(PathBuf::new(), false, None),
            })?;
            print!("{}", render_table(&report));
        }
        Command::Predict { model, input, out } => {
            let lines = predict_cmd(&model, &input)?;
            match out {
                Some(p) => std::fs::write(&p, lines).map_err(|e| spankl::Error::io(&p, e))?,
                None => print!("{lines}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
