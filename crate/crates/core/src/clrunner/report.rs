use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::run::{Mode, RunRecord};
use crate::error::{Error, Result};

/// Runs sharing a model, mode, and loss weights.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub model: String,
    pub mode: Mode,
    /// `alpha`/`beta` as written in the run record; empty for non-CL runs.
    pub weights: String,
}

impl Variant {
    pub fn of(r: &RunRecord) -> Self {
        Variant {
            model: r.model.clone(),
            mode: r.mode,
            weights: match r.mode {
                Mode::Cl => format!("alpha={} beta={}", r.alpha, r.beta),
                Mode::NonCl => String::new(),
            },
        }
    }

    pub fn label(&self) -> String {
        match self.mode {
            Mode::Cl => format!("{} cl {}", self.model, self.weights),
            Mode::NonCl => format!("{} noncl", self.model),
        }
    }
}

/// Per-step macro-F1 of one variant: per seed (mean over permutations) and the median over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub per_seed: BTreeMap<u64, Vec<Option<f64>>>,
    pub median: Vec<Option<f64>>,
    /// CL − non-CL of the same model: per seed, and the median over seeds.
    pub gap_per_seed: BTreeMap<u64, Vec<Option<f64>>>,
    pub gap_median: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub setup: String,
    pub kind: String,
    pub steps: usize,
    pub variants: Vec<VariantSummary>,
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Median; the mean of the two middle values for even counts.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

fn column_median(per_seed: &BTreeMap<u64, Vec<Option<f64>>>, steps: usize) -> Vec<Option<f64>> {
    (0..steps)
        .map(|i| {
            let xs: Vec<f64> = per_seed.values().filter_map(|v| v[i]).collect();
            median(&xs)
        })
        .collect()
}

/// Aggregate run records: mean over permutations within each seed, then
/// median over seeds; gaps pair each CL variant with its model's non-CL runs.
pub fn aggregate(records: &[RunRecord]) -> Result<Report> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("no run records to report".into()))?;
    for r in records {
        if r.family != first.family || r.total_steps != first.total_steps {
            return Err(Error::Data(format!(
                "run ({} {} seed {}) is from a different benchmark family ({} {}) than ({} {})",
                r.model,
                r.mode.name(),
                r.seed,
                r.setup,
                r.kind,
                first.setup,
                first.kind
            )));
        }
    }
    let steps = first.total_steps;
    // variant → seed → step → values over permutations
    let mut grouped: BTreeMap<Variant, BTreeMap<u64, Vec<Vec<f64>>>> = BTreeMap::new();
    for r in records {
        let per = grouped
            .entry(Variant::of(r))
            .or_default()
            .entry(r.seed)
            .or_insert_with(|| vec![Vec::new(); steps]);
        for s in &r.steps {
            per[s.step - 1].push(s.evaluation.macro_f1);
        }
    }
    let means: BTreeMap<Variant, BTreeMap<u64, Vec<Option<f64>>>> = grouped
        .into_iter()
        .map(|(v, seeds)| {
            let m = seeds.into_iter().map(|(s, cols)| (s, cols.iter().map(|c| mean(c)).collect())).collect();
            (v, m)
        })
        .collect();
    let mut variants = Vec::new();
    for (v, per_seed) in &means {
        let noncl = Variant {
            model: v.model.clone(),
            mode: Mode::NonCl,
            weights: String::new(),
        };
        let mut gap_per_seed = BTreeMap::new();
        if v.mode == Mode::Cl {
            if let Some(nc) = means.get(&noncl) {
                for (seed, cl) in per_seed {
                    if let Some(ncv) = nc.get(seed) {
                        let g = cl
                            .iter()
                            .zip(ncv)
                            .map(|(a, b)| match (a, b) {
                                (Some(a), Some(b)) => Some(crate::metrics::gap(*a, *b)),
                                _ => None,
                            })
                            .collect();
                        gap_per_seed.insert(*seed, g);
                    }
                }
            }
        }
        variants.push(VariantSummary {
            variant: v.clone(),
            median: column_median(per_seed, steps),
            gap_median: column_median(&gap_per_seed, steps),
            per_seed: per_seed.clone(),
            gap_per_seed,
        });
    }
    Ok(Report {
        setup: first.setup.clone(),
        kind: first.kind.clone(),
        steps,
        variants,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

/// Human-readable table: percent with two decimals.
pub fn render_table(r: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {} / {} ({} steps)", r.setup, r.kind, r.steps);
    let mut header = String::from("variant\tseed");
    for s in 1..=r.steps {
        let _ = write!(header, "\tstep{s}");
    }
    out.push_str(&header);
    out.push('\n');
    for v in &r.variants {
        let label = v.variant.label();
        let row = |name: &str, vals: &[Option<f64>]| {
            let mut line = format!("{label}\t{name}");
            for x in vals {
                let _ = write!(line, "\t{}", pct(*x));
            }
            line
        };
        for (seed, vals) in &v.per_seed {
            let _ = writeln!(out, "{}", row(&seed.to_string(), vals));
        }
        let _ = writeln!(out, "{}", row("median", &v.median));
        if !v.gap_per_seed.is_empty() {
            for (seed, vals) in &v.gap_per_seed {
                let _ = writeln!(out, "{}", row(&format!("delta {seed}"), vals));
            }
            let _ = writeln!(out, "{}", row("delta median", &v.gap_median));
        }
    }
    out
}

/// Curves of several runs: `model,mode,alpha,beta,permutation,seed,step,type,f1`.
pub fn merged_curves(records: &[RunRecord]) -> String {
    let mut out = String::from("model,mode,alpha,beta,permutation,seed,step,type,f1\n");
    let mut seen = BTreeSet::new();
    for r in records {
        for s in &r.steps {
            for t in &s.evaluation.types {
                let line = format!(
                    "{},{},{},{},{},{},{},{},{}",
                    r.model,
                    r.mode.name(),
                    r.alpha,
                    r.beta,
                    r.permutation,
                    r.seed,
                    s.step,
                    t.label,
                    t.f1
                );
                if seen.insert(line.clone()) {
                    out.push_str(&line);
                    out.push('\n');
                }
            }
        }
    }
    out
}
