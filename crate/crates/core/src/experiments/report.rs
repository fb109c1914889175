use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{CifarConfig, CifarRunResult, RunStatus, SpiralConfig, SpiralRunResult};
use crate::network::NormKind;

/// Header of the per-run CSV.
pub const RUN_COLUMNS: [&str; 14] = [
    "experiment",
    "norm",
    "batch_size",
    "run",
    "seed",
    "status",
    "converged_at",
    "batches_trained",
    "fluctuation",
    "val_loss",
    "val_acc",
    "lr",
    "lambda",
    "drop_rate",
];

/// One run as stored in the per-run CSV. For CIFAR runs `val_loss` is the
/// minimum and `val_acc` the maximum over epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub experiment: String,
    pub norm: NormKind,
    pub batch_size: usize,
    pub run: usize,
    pub seed: u64,
    pub status: String,
    pub converged_at: Option<usize>,
    pub batches_trained: Option<usize>,
    pub fluctuation: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub lr: f64,
    pub lambda: f64,
    pub drop_rate: f64,
}

impl RunRow {
    pub fn from_spiral(r: &SpiralRunResult, cfg: &SpiralConfig) -> Self {
        Self {
            experiment: "spiral".into(),
            norm: r.norm,
            batch_size: r.batch_size,
            run: r.run,
            seed: r.seed,
            status: r.status.as_str().into(),
            converged_at: r.converged_at,
            batches_trained: (r.status != RunStatus::Inapplicable).then_some(r.batches_trained),
            fluctuation: r.fluctuation,
            val_loss: r.val_loss,
            val_acc: r.val_acc,
            lr: cfg.lr,
            lambda: cfg.lambda,
            drop_rate: cfg.drop_rate,
        }
    }

    pub fn from_cifar(r: &CifarRunResult, cfg: &CifarConfig) -> Self {
        Self {
            experiment: "cifar".into(),
            norm: r.norm,
            batch_size: r.batch_size,
            run: r.run,
            seed: r.seed,
            status: r.status.as_str().into(),
            converged_at: None,
            batches_trained: None,
            fluctuation: None,
            val_loss: r.min_loss(),
            val_acc: r.max_accuracy(),
            lr: cfg.lr,
            lambda: cfg.lambda,
            drop_rate: cfg.drop_rate,
        }
    }
}

/// Rounds to 9 significant digits and prints the shortest decimal form.
pub fn fmt_sig9(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let rounded: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    rounded.to_string()
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_f(v: Option<f64>) -> String {
    v.map(fmt_sig9).unwrap_or_default()
}

/// Writes `# key: value` lines, one per line of each value.
pub fn write_metadata<W: Write>(w: &mut W, metadata: &[(String, String)]) -> Result<()> {
    for (k, v) in metadata {
        for line in v.lines() {
            writeln!(w, "# {k}: {line}")?;
        }
    }
    Ok(())
}

fn create_with_metadata(path: &Path, metadata: &[(String, String)]) -> Result<BufWriter<File>> {
    let mut f = BufWriter::new(File::create(path)?);
    write_metadata(&mut f, metadata)?;
    Ok(f)
}

/// Writes one row per run after `# key: value` metadata lines.
pub fn write_runs_csv(path: &Path, metadata: &[(String, String)], rows: &[RunRow]) -> Result<()> {
    let f = create_with_metadata(path, metadata)?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(RUN_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.experiment.clone(),
            r.norm.to_string(),
            r.batch_size.to_string(),
            r.run.to_string(),
            r.seed.to_string(),
            r.status.clone(),
            opt(r.converged_at),
            opt(r.batches_trained),
            opt_f(r.fluctuation),
            opt_f(r.val_loss),
            opt_f(r.val_acc),
            fmt_sig9(r.lr),
            fmt_sig9(r.lambda),
            fmt_sig9(r.drop_rate),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a per-run CSV; `#` lines are skipped. Missing columns are a
/// config error listing them.
pub fn read_runs_csv(path: &Path) -> Result<Vec<RunRow>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let headers = r.headers()?.clone();
    let missing: Vec<&str> = RUN_COLUMNS
        .iter()
        .copied()
        .filter(|c| !headers.iter().any(|h| h == *c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "missing columns: {}",
            missing.join(", ")
        )));
    }
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Means over the runs of one (experiment, norm, batch size) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub experiment: String,
    pub norm: NormKind,
    pub batch_size: usize,
    pub runs: usize,
    pub completed: usize,
    pub diverged: usize,
    pub inapplicable: usize,
    /// Completed runs that hit the batch cap without converging.
    pub not_converged: usize,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub converged_at: Option<f64>,
    pub fluctuation: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Aggregates runs per cell, excluding diverged runs from the means.
/// Cells are ordered by experiment, batch size, then norm kind.
pub fn aggregate(rows: &[RunRow]) -> Vec<CellSummary> {
    let mut cells: BTreeMap<(String, usize, NormKind), Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        cells
            .entry((r.experiment.clone(), r.batch_size, r.norm))
            .or_default()
            .push(r);
    }
    cells
        .into_iter()
        .map(|((experiment, batch_size, norm), runs)| {
            let done: Vec<&&RunRow> = runs.iter().filter(|r| r.status == "completed").collect();
            CellSummary {
                experiment,
                norm,
                batch_size,
                runs: runs.len(),
                completed: done.len(),
                diverged: runs.iter().filter(|r| r.status == "diverged").count(),
                inapplicable: runs.iter().filter(|r| r.status == "inapplicable").count(),
                not_converged: done
                    .iter()
                    .filter(|r| r.experiment == "spiral" && r.converged_at.is_none())
                    .count(),
                val_loss: mean(done.iter().filter_map(|r| r.val_loss)),
                val_acc: mean(done.iter().filter_map(|r| r.val_acc)),
                converged_at: mean(done.iter().filter_map(|r| r.converged_at.map(|c| c as f64))),
                fluctuation: mean(done.iter().filter_map(|r| r.fluctuation)),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    ValLoss,
    ValAcc,
    ConvergedAt,
    Fluctuation,
}

impl Metric {
    pub fn of(self, c: &CellSummary) -> Option<f64> {
        match self {
            Metric::ValLoss => c.val_loss,
            Metric::ValAcc => c.val_acc,
            Metric::ConvergedAt => c.converged_at,
            Metric::Fluctuation => c.fluctuation,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::ValLoss => "val_loss",
            Metric::ValAcc => "val_acc",
            Metric::ConvergedAt => "converged_at",
            Metric::Fluctuation => "fluctuation",
        }
    }
}

/// Table layout: one row per batch size (ascending), one column per norm
/// kind. `-` marks inapplicable cells, `diverged` cells whose every run
/// diverged.
pub fn write_table_csv(
    path: &Path,
    metadata: &[(String, String)],
    cells: &[CellSummary],
    metric: Metric,
) -> Result<()> {
    let mut norms: Vec<NormKind> = cells.iter().map(|c| c.norm).collect();
    norms.sort_unstable();
    norms.dedup();
    let mut batches: Vec<usize> = cells.iter().map(|c| c.batch_size).collect();
    batches.sort_unstable();
    batches.dedup();
    let f = create_with_metadata(path, metadata)?;
    let mut w = csv::Writer::from_writer(f);
    let mut header = vec!["batch_size".to_string()];
    header.extend(norms.iter().map(|n| n.to_string()));
    w.write_record(&header)?;
    for b in batches {
        let mut row = vec![b.to_string()];
        for &n in &norms {
            let cell = cells.iter().find(|c| c.batch_size == b && c.norm == n);
            row.push(match cell {
                None => String::new(),
                Some(c) if c.inapplicable == c.runs => "-".into(),
                Some(c) if c.diverged == c.runs => "diverged".into(),
                Some(c) => opt_f(metric.of(c)),
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
