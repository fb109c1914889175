use std::fmt::Write;
use std::path::PathBuf;

use clap::Args;

use batchless::data::{load_cifar10, Examples};
use batchless::experiments::{fmt_sig9, run_cifar_suite, write_runs_csv, CifarConfig, RunRow};
use batchless::network::NormKind;

use crate::config::{echo, ensure_seed, resolve, set, set_list, Settings};
use crate::output::{base_metadata, Artifacts};
use crate::svg::{Chart, Series};
use crate::{CliError, CmdResult, Status};

#[derive(Args, Debug)]
pub struct CifarArgs {
    /// Directory holding data_batch_1.bin ... data_batch_5.bin and test_batch.bin.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Norm kinds: none, bn, bin, binlog, bininv (comma-separated).
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
    /// Passes over the training subset.
    #[arg(long)]
    epochs: Option<usize>,
    /// Train on the first N training images.
    #[arg(long)]
    subset: Option<usize>,
    /// Validate on the first N test images.
    #[arg(long)]
    val_subset: Option<usize>,
    /// Training images used to initialize batchless statistics; 0 keeps μ = 0, σ = 1.
    #[arg(long)]
    init_samples: Option<usize>,
    /// Optimizer learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the batchless likelihood loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Evaluate batch-norm models on population statistics.
    #[arg(long)]
    finalize_bn: bool,
    /// Accumulate gradients over slices of this many instances.
    #[arg(long)]
    micro_batch: Option<usize>,
}

pub fn run(settings: &Settings, a: CifarArgs) -> CmdResult {
    let mut t = settings.section("cifar");
    let file_dir = t
        .remove("data_dir")
        .and_then(|v| v.as_str().map(PathBuf::from));
    let data_dir = a
        .data_dir
        .or(file_dir)
        .ok_or_else(|| CliError::Usage("cifar needs --data-dir (or data_dir in [cifar])".into()))?;
    set_list(&mut t, "norms", a.norm)?;
    set_list(&mut t, "batch_sizes", a.batch_size)?;
    set(&mut t, "runs", a.runs)?;
    set(&mut t, "seed", a.seed)?;
    set(&mut t, "epochs", a.epochs)?;
    set(&mut t, "subset", a.subset)?;
    set(&mut t, "val_subset", a.val_subset)?;
    set(&mut t, "init_samples", a.init_samples)?;
    set(&mut t, "lr", a.lr)?;
    set(&mut t, "lambda", a.lambda)?;
    set(&mut t, "finalize_bn", a.finalize_bn.then_some(true))?;
    set(&mut t, "micro_batch", a.micro_batch)?;
    let seed = ensure_seed(&mut t);
    let cfg: CifarConfig = resolve("cifar", t)?;
    cfg.validate()?;

    let (train, test) = load_cifar10(&data_dir)?;
    println!(
        "loaded {} training and {} test images from {}",
        train.len(),
        test.len(),
        data_dir.display()
    );
    let config_text = format!(
        "data_dir = {:?}\n{}",
        data_dir.display().to_string(),
        echo(&cfg)
    );
    let out = Artifacts::new(
        &settings.out_dir,
        base_metadata("cifar", Some(seed), config_text),
    )?;
    let results = run_cifar_suite(&cfg, &train, &test)?;

    let rows: Vec<RunRow> = results
        .iter()
        .map(|r| RunRow::from_cifar(r, &cfg))
        .collect();
    write_runs_csv(&out.path("cifar_runs.csv"), &out.metadata, &rows)?;

    let layers = results
        .iter()
        .flat_map(|r| r.trace.iter().map(|p| p.gauged.len()))
        .max()
        .unwrap_or(0);
    let mut trace = String::from("norm,batch_size,run,epoch,train_loss,val_loss,val_acc");
    for k in 0..layers {
        let _ = write!(trace, ",mean_gauged_metric_{k}");
    }
    trace.push('\n');
    let mut summary =
        String::from("norm,batch_size,run,status,init_samples,max_val_acc,min_val_loss\n");
    let mut loss_series = Vec::new();
    let mut acc_series = Vec::new();
    for r in &results {
        if r.init_samples_used > 0 {
            println!(
                "{} batch {} run {}: batchless statistics initialized from {} samples",
                r.norm, r.batch_size, r.run, r.init_samples_used
            );
        }
        for p in &r.trace {
            let _ = write!(
                trace,
                "{},{},{},{},{},{},{}",
                r.norm,
                r.batch_size,
                r.run,
                p.epoch,
                fmt_sig9(p.train_loss),
                fmt_sig9(p.val_loss),
                fmt_sig9(p.val_acc)
            );
            for k in 0..layers {
                let _ = write!(
                    trace,
                    ",{}",
                    p.gauged.get(k).map(|g| fmt_sig9(*g)).unwrap_or_default()
                );
            }
            trace.push('\n');
        }
        let opt = |v: Option<f64>| v.map(fmt_sig9).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{}",
            r.norm,
            r.batch_size,
            r.run,
            r.status.as_str(),
            r.init_samples_used,
            opt(r.max_accuracy()),
            opt(r.min_loss())
        );
        println!(
            "{} batch {} run {}: {} max val acc {} min val loss {}",
            r.norm,
            r.batch_size,
            r.run,
            r.status.as_str(),
            opt(r.max_accuracy()),
            opt(r.min_loss())
        );
        if !r.trace.is_empty() {
            let label = format!("{} b{} r{}", r.norm.label(), r.batch_size, r.run);
            loss_series.push(Series {
                label: label.clone(),
                points: r
                    .trace
                    .iter()
                    .map(|p| (p.epoch as f64, p.val_loss))
                    .collect(),
            });
            acc_series.push(Series {
                label,
                points: r
                    .trace
                    .iter()
                    .map(|p| (p.epoch as f64, p.val_acc))
                    .collect(),
            });
        }
        if let Some(model) = &r.model {
            out.write_model(
                &format!("cifar_{}_b{}_r{}.json", r.norm, r.batch_size, r.run),
                model,
                &[
                    ("run_seed", r.seed.to_string()),
                    ("status", r.status.as_str().into()),
                ],
            )?;
        }
    }
    out.write_text("cifar_trace.csv", &trace)?;
    out.write_text("cifar_summary.csv", &summary)?;
    for (name, title, y, series) in [
        ("cifar_val_loss.svg", "Validation loss", "loss", loss_series),
        (
            "cifar_val_acc.svg",
            "Validation accuracy",
            "accuracy",
            acc_series,
        ),
    ] {
        out.write_svg(
            name,
            &Chart {
                title: title.into(),
                x_label: "epoch".into(),
                y_label: y.into(),
                log_x: false,
                series,
            },
        )?;
    }
    println!("artifacts written to {}", out.dir.display());

    let diverged: Vec<String> = results
        .iter()
        .filter(|r| r.status.as_str() == "diverged")
        .map(|r| format!("{} batch {} run {}", r.norm, r.batch_size, r.run))
        .collect();
    Ok(if diverged.is_empty() {
        Status::Ok
    } else {
        Status::Failed(format!("diverged: {}", diverged.join(", ")))
    })
}
