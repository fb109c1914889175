use std::collections::BTreeSet;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use batchless::experiments::{aggregate, read_runs_csv, write_table_csv, CellSummary, Metric};
use batchless::network::NormKind;

use crate::config::{echo, resolve, set, Settings};
use crate::output::{base_metadata, Artifacts};
use crate::spiral::print_cells;
use crate::svg::{Chart, Series};
use crate::{CliError, CmdResult, Status};

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Per-run CSV files written by `spiral` or `cifar`.
    #[arg(long = "runs")]
    runs: Vec<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportConfig {
    runs: Vec<PathBuf>,
}

fn metrics(experiment: &str) -> &'static [Metric] {
    match experiment {
        "spiral" => &[
            Metric::ValLoss,
            Metric::ValAcc,
            Metric::ConvergedAt,
            Metric::Fluctuation,
        ],
        _ => &[Metric::ValLoss, Metric::ValAcc],
    }
}

fn title(experiment: &str, m: Metric) -> &'static str {
    match (experiment, m) {
        ("cifar", Metric::ValLoss) => "Minimum validation loss",
        ("cifar", Metric::ValAcc) => "Maximum validation accuracy",
        (_, Metric::ValLoss) => "Validation loss",
        (_, Metric::ValAcc) => "Validation accuracy",
        (_, Metric::ConvergedAt) => "Batches until convergence",
        (_, Metric::Fluctuation) => "Average output fluctuation",
    }
}

fn chart(experiment: &str, cells: &[&CellSummary], m: Metric) -> Chart {
    let norms: BTreeSet<NormKind> = cells.iter().map(|c| c.norm).collect();
    let series = norms
        .into_iter()
        .map(|n| Series {
            label: n.label().into(),
            points: cells
                .iter()
                .filter(|c| c.norm == n)
                .filter_map(|c| m.of(c).map(|v| (c.batch_size as f64, v)))
                .collect(),
        })
        .collect();
    Chart {
        title: title(experiment, m).into(),
        x_label: "batch size".into(),
        y_label: m.as_str().into(),
        log_x: true,
        series,
    }
}

pub fn run(settings: &Settings, a: ReportArgs) -> CmdResult {
    let mut t = settings.section("report");
    if !a.runs.is_empty() {
        set(&mut t, "runs", Some(a.runs))?;
    }
    let cfg: ReportConfig = resolve("report", t)?;
    if cfg.runs.is_empty() {
        return Err(CliError::Usage(
            "report needs at least one --runs file".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut metadata = base_metadata("report", None, echo(&cfg));
    for path in &cfg.runs {
        rows.extend(read_runs_csv(path)?);
        let text = std::fs::read_to_string(path)?;
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            metadata.push((
                format!("source {}", path.display()),
                line.trim_start_matches('#').trim().into(),
            ));
        }
    }
    let out = Artifacts::new(&settings.out_dir, metadata)?;
    let cells = aggregate(&rows);
    let experiments: BTreeSet<&str> = cells.iter().map(|c| c.experiment.as_str()).collect();
    for exp in experiments {
        let owned: Vec<CellSummary> = cells
            .iter()
            .filter(|c| c.experiment == exp)
            .cloned()
            .collect();
        let refs: Vec<&CellSummary> = owned.iter().collect();
        for &m in metrics(exp) {
            let stem = format!("report_{exp}_{}", m.as_str());
            write_table_csv(&out.path(&format!("{stem}.csv")), &out.metadata, &owned, m)?;
            out.write_svg(&format!("{stem}.svg"), &chart(exp, &refs, m))?;
        }
        println!("{exp}:");
        print_cells(&owned);
    }
    println!("artifacts written to {}", out.dir.display());
    Ok(Status::Ok)
}
