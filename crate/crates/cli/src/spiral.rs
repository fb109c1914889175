use std::fmt::Write;

use clap::Args;

use batchless::experiments::{
    aggregate, fmt_sig9, run_spiral_suite, write_runs_csv, write_table_csv, CellSummary, Metric,
    RunRow, SpiralConfig,
};
use batchless::network::NormKind;

use crate::config::{echo, ensure_seed, resolve, set, set_list, Settings};
use crate::output::{base_metadata, Artifacts};
use crate::{CmdResult, Status};

#[derive(Args, Debug)]
pub struct SpiralArgs {
    /// Norm kinds: none, bn, brn, bin, binlog, bininv (comma-separated).
    #[arg(long, value_delimiter = ',')]
    norm: Vec<NormKind>,
    /// Batch sizes (comma-separated).
    #[arg(long, value_delimiter = ',')]
    batch_size: Vec<usize>,
    /// Independent runs per (norm, batch size) cell.
    #[arg(long)]
    runs: Option<usize>,
    /// Base seed; drawn from entropy and printed when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Optimizer learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the batchless likelihood loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Dropout rate after each hidden layer.
    #[arg(long)]
    drop_rate: Option<f64>,
    /// L2 penalty on weights.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Rolling-median window of the stopping rule.
    #[arg(long)]
    window: Option<usize>,
    /// Batches without a new median low before stopping.
    #[arg(long)]
    patience: Option<usize>,
    /// Hard cap on training batches per run.
    #[arg(long)]
    max_batches: Option<usize>,
    /// Batches over which output fluctuation is measured after convergence.
    #[arg(long)]
    fluctuation_batches: Option<usize>,
    /// Measurement sites form a grid × grid lattice.
    #[arg(long)]
    grid: Option<usize>,
    /// Training points per spiral arm.
    #[arg(long)]
    train_per_class: Option<usize>,
    /// Validation points per spiral arm.
    #[arg(long)]
    val_per_class: Option<usize>,
    /// Accumulate gradients over slices of this many instances.
    #[arg(long)]
    micro_batch: Option<usize>,
    /// Skip per-run checkpoints.
    #[arg(long)]
    no_models: bool,
}

pub fn run(settings: &Settings, a: SpiralArgs) -> CmdResult {
    let mut t = settings.section("spiral");
    set_list(&mut t, "norms", a.norm)?;
    set_list(&mut t, "batch_sizes", a.batch_size)?;
    set(&mut t, "runs", a.runs)?;
    set(&mut t, "seed", a.seed)?;
    set(&mut t, "lr", a.lr)?;
    set(&mut t, "lambda", a.lambda)?;
    set(&mut t, "drop_rate", a.drop_rate)?;
    set(&mut t, "weight_decay", a.weight_decay)?;
    set(&mut t, "window", a.window)?;
    set(&mut t, "patience", a.patience)?;
    set(&mut t, "max_batches", a.max_batches)?;
    set(&mut t, "fluctuation_batches", a.fluctuation_batches)?;
    set(&mut t, "grid", a.grid)?;
    set(&mut t, "train_per_class", a.train_per_class)?;
    set(&mut t, "val_per_class", a.val_per_class)?;
    set(&mut t, "micro_batch", a.micro_batch)?;
    t.entry("trace").or_insert(true.into());
    let seed = ensure_seed(&mut t);
    let cfg: SpiralConfig = resolve("spiral", t)?;
    cfg.validate()?;

    let out = Artifacts::new(
        &settings.out_dir,
        base_metadata("spiral", Some(seed), echo(&cfg)),
    )?;
    println!(
        "spiral: {} norm kind(s) x {} batch size(s) x {} run(s)",
        cfg.norms.len(),
        cfg.batch_sizes.len(),
        cfg.runs
    );
    let results = run_spiral_suite(&cfg)?;

    let rows: Vec<RunRow> = results
        .iter()
        .map(|r| RunRow::from_spiral(r, &cfg))
        .collect();
    write_runs_csv(&out.path("spiral_runs.csv"), &out.metadata, &rows)?;
    let cells = aggregate(&rows);
    for m in [
        Metric::ValLoss,
        Metric::ValAcc,
        Metric::ConvergedAt,
        Metric::Fluctuation,
    ] {
        write_table_csv(
            &out.path(&format!("spiral_table_{}.csv", m.as_str())),
            &out.metadata,
            &cells,
            m,
        )?;
    }

    let mut loss = String::from("norm\tbatch_size\trun\tbatch\tloss\n");
    let mut gauged = String::from("norm\tbatch_size\trun\tbatch\tlayer\tgauged_metric\n");
    for r in &results {
        for (i, l) in r.loss_trace.iter().enumerate() {
            let _ = writeln!(
                loss,
                "{}\t{}\t{}\t{i}\t{}",
                r.norm,
                r.batch_size,
                r.run,
                fmt_sig9(*l)
            );
        }
        for (batch, values) in &r.gauged_trace {
            for (k, g) in values.iter().enumerate() {
                let _ = writeln!(
                    gauged,
                    "{}\t{}\t{}\t{batch}\t{k}\t{}",
                    r.norm,
                    r.batch_size,
                    r.run,
                    fmt_sig9(*g)
                );
            }
        }
        if let (Some(model), false) = (&r.model, a.no_models) {
            out.write_model(
                &format!("spiral_{}_b{}_r{}.json", r.norm, r.batch_size, r.run),
                model,
                &[
                    ("run_seed", r.seed.to_string()),
                    ("status", r.status.as_str().into()),
                ],
            )?;
        }
    }
    out.write_text("spiral_loss_trace.tsv", &loss)?;
    out.write_text("spiral_gauged_trace.tsv", &gauged)?;

    print_cells(&cells);
    println!("artifacts written to {}", out.dir.display());
    let failed: Vec<String> = cells
        .iter()
        .filter(|c| c.runs > 0 && c.diverged == c.runs)
        .map(|c| format!("{} at batch {}", c.norm, c.batch_size))
        .collect();
    Ok(if failed.is_empty() {
        Status::Ok
    } else {
        Status::Failed(format!("every run diverged in: {}", failed.join(", ")))
    })
}

fn cell_value(v: Option<f64>) -> String {
    v.map(fmt_sig9).unwrap_or_else(|| "-".into())
}

pub fn print_cells(cells: &[CellSummary]) {
    println!("norm\tbatch\truns\tdiverged\tval_loss\tval_acc\tconverged_at\tfluctuation");
    for c in cells {
        if c.inapplicable == c.runs {
            println!("{}\t{}\t{}\tinapplicable", c.norm, c.batch_size, c.runs);
            continue;
        }
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.norm,
            c.batch_size,
            c.runs,
            c.diverged,
            cell_value(c.val_loss),
            cell_value(c.val_acc),
            cell_value(c.converged_at),
            cell_value(c.fluctuation)
        );
    }
}
