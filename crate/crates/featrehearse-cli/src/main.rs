//! Command-line front door for the incremental feature-rehearsal pipeline:
//! run experiments, re-evaluate checkpoints, inspect memory snapshots,
//! report storage footprints, and emit plot-ready CSV.
//!
//! Every value printed here is recomputed from on-disk artifacts; the CLI
//! keeps no state of its own. Exit codes: 0 success, 2 config error,
//! 3 missing input, 4 corrupt artifact, 1 anything else.

use clap::{Args, Parser, Subcommand};
use featrehearse::data::split_tasks;
use featrehearse::evaluation::{evaluate_task, HeadPredictor, MetricsRecord};
use featrehearse::memory::{
    footprint, read_exemplar_snapshot, read_memory_snapshot, FootprintReport,
};
use featrehearse::trainer::{self, RunConfig, TaskCheckpoint};
use featrehearse::{Error, Result};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EVAL_BATCH: usize = 256;

#[derive(Parser)]
#[command(name = "featrehearse", version)]
#[command(about = "Class-incremental learning on stored feature descriptors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the incremental protocol and write artifacts to --out.
    Run(RunArgs),
    /// Re-evaluate a finished run's checkpoint on the held-out test set.
    Eval(EvalArgs),
    /// Summarize a descriptor memory snapshot.
    InspectMemory(InspectArgs),
    /// Report exact storage bytes for a run's rehearsal snapshots.
    Footprint(FootprintArgs),
    /// Emit plot-ready CSV from finished run directories.
    PlotData(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file with one `key = value` per line.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Single-key override, e.g. --set seed=3. Repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory for metrics, snapshots, and checkpoints.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Dataset root (default: $FEATREHEARSE_DATA, then ./data).
    #[arg(long, value_name = "DIR")]
    data_root: Option<PathBuf>,
    /// Continue from the newest checkpoint in --out instead of starting over.
    #[arg(long)]
    resume: bool,
    /// Continue from this completed task's checkpoint (implies --resume).
    #[arg(long, value_name = "TASK")]
    from_task: Option<u32>,
}

#[derive(Args)]
struct EvalArgs {
    /// Finished run directory (reads config.resolved and checkpoints).
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
    /// Task checkpoint to evaluate (default: newest).
    #[arg(long, value_name = "TASK")]
    task: Option<u32>,
    /// Dataset root (default: $FEATREHEARSE_DATA, then ./data).
    #[arg(long, value_name = "DIR")]
    data_root: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Descriptor memory snapshot (.frmem).
    #[arg(long, value_name = "PATH")]
    snapshot: PathBuf,
}

#[derive(Args)]
struct FootprintArgs {
    /// Run directory holding memory_task*.frmem (and optional exemplars).
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Finished run directories, each with metrics.json and footprint.json.
    #[arg(value_name = "RUN_DIR", required = true)]
    runs: Vec<PathBuf>,
    /// Write the CSV files into this directory instead of stdout.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::InspectMemory(args) => cmd_inspect_memory(args),
        Command::Footprint(args) => cmd_footprint(args),
        Command::PlotData(args) => cmd_plot_data(args),
    }
}

/// Builds the effective config: file first (if any), then --set overrides.
fn build_config(config: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for entry in overrides {
        cfg.apply_override(entry)?;
    }
    Ok(cfg)
}

fn resolve_data_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("FEATREHEARSE_DATA").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let cfg = build_config(args.config.as_deref(), &args.overrides)?;
    let root = resolve_data_root(args.data_root);
    let outcome = if args.resume || args.from_task.is_some() {
        trainer::resume(&cfg, &root, &args.out, args.from_task)?
    } else {
        trainer::run(&cfg, &root, Some(&args.out))?
    };
    println!(
        "average incremental accuracy {:.4} over {} tasks",
        outcome.metrics.avg_inc_acc,
        outcome.metrics.curve.len()
    );
    println!("artifacts in {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = RunConfig::from_file(&args.run.join("config.resolved"))?;
    cfg.validate()?;
    let task = match args.task {
        Some(t) => t,
        None => trainer::latest_checkpoint_task(&args.run)?,
    };
    let ckpt = TaskCheckpoint::read(&args.run.join(format!("checkpoint_task{task}.frckpt")))?;
    if ckpt.digest != cfg.digest() {
        return Err(Error::Config(format!(
            "checkpoint digest {} does not match config.resolved digest {}",
            ckpt.digest,
            cfg.digest()
        )));
    }
    let root = resolve_data_root(args.data_root);
    let (_train, test) = trainer::load_dataset(&cfg, &root)?;
    let stream = split_tasks(&_train, &test, cfg.classes_per_task, cfg.seed)?;
    if stream.class_order != ckpt.class_order {
        return Err(Error::Config(
            "dataset split disagrees with the checkpoint's class order; \
             check --data-root and the dataset files"
                .into(),
        ));
    }
    let split = stream
        .tasks
        .get(task as usize - 1)
        .ok_or_else(|| Error::Config(format!("task {task} exceeds the {}-task split", stream.tasks.len())))?;
    let accuracy = match &ckpt.classifier {
        Some(clf) => evaluate_task(
            clf,
            &ckpt.network.extractor,
            &ckpt.stats,
            &test,
            &split.test_indices_cumulative,
            EVAL_BATCH,
            cfg.top_k,
        )?,
        None => {
            let predictor = HeadPredictor {
                head: &ckpt.network.head,
                class_layout: &ckpt.class_layout,
            };
            evaluate_task(
                &predictor,
                &ckpt.network.extractor,
                &ckpt.stats,
                &test,
                &split.test_indices_cumulative,
                EVAL_BATCH,
                cfg.top_k,
            )?
        }
    };
    println!(
        "task {task}: classes {}, accuracy {accuracy:.4}",
        ckpt.class_layout.len()
    );
    Ok(())
}

fn cmd_inspect_memory(args: InspectArgs) -> Result<()> {
    let memory = read_memory_snapshot(&args.snapshot)?;
    println!("memory snapshot {}", args.snapshot.display());
    println!(
        "descriptor dim {}, per-class budget {}, {} classes, {} descriptors",
        memory.dim(),
        memory.per_class_budget(),
        memory.class_count(),
        memory.total()
    );
    let mut norm_min = f32::INFINITY;
    let mut norm_max = f32::NEG_INFINITY;
    for (class, descriptors) in memory.iter() {
        let mut adapt_min = u32::MAX;
        let mut adapt_max = 0u32;
        let mut sourced = 0usize;
        for d in descriptors {
            adapt_min = adapt_min.min(d.adapt_count);
            adapt_max = adapt_max.max(d.adapt_count);
            sourced += usize::from(d.source_index.is_some());
            let norm = d.vector.iter().map(|v| v * v).sum::<f32>().sqrt();
            norm_min = norm_min.min(norm);
            norm_max = norm_max.max(norm);
        }
        println!(
            "class {class}: {} descriptors, adapted {adapt_min}..{adapt_max}, {sourced} with source index",
            descriptors.len()
        );
    }
    if memory.total() > 0 {
        println!("descriptor norms {norm_min:.6}..{norm_max:.6}");
    }
    Ok(())
}

/// Finds the highest task number matching `<prefix><N><suffix>` in a dir.
fn newest_numbered(dir: &Path, prefix: &str, suffix: &str) -> Result<Option<(u32, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::MissingInput(format!("run directory {} not found", dir.display()))
        }
        _ => Error::Io(e),
    })?;
    let mut best: Option<(u32, PathBuf)> = None;
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(rest) = name.strip_prefix(prefix) else { continue };
        let Some(digits) = rest.strip_suffix(suffix) else { continue };
        let Ok(task) = digits.parse::<u32>() else { continue };
        if best.as_ref().is_none_or(|(t, _)| task > *t) {
            best = Some((task, entry.path()));
        }
    }
    Ok(best)
}

fn cmd_footprint(args: FootprintArgs) -> Result<()> {
    let Some((task, memory_path)) = newest_numbered(&args.run, "memory_task", ".frmem")? else {
        return Err(Error::MissingInput(format!(
            "no memory snapshot (memory_task*.frmem) in {}",
            args.run.display()
        )));
    };
    let memory = read_memory_snapshot(&memory_path)?;
    let exemplar_path = args.run.join(format!("exemplars_task{task}.frimg"));
    let images = if exemplar_path.exists() {
        Some(read_exemplar_snapshot(&exemplar_path)?)
    } else {
        None
    };
    let report = footprint(&memory, images.as_ref());
    let per_descriptor = report.bytes_per_descriptor;
    println!("class  descriptors  feature_bytes  images  image_bytes");
    for (class, descriptors) in memory.iter() {
        let image_count = images.as_ref().map_or(0, |s| s.count(class));
        let image_bytes = image_count as u64 * report.bytes_per_image;
        println!(
            "{class:>5}  {:>11}  {:>13}  {image_count:>6}  {image_bytes:>11}",
            descriptors.len(),
            descriptors.len() as u64 * per_descriptor,
        );
    }
    println!(
        "total  {:>11}  {:>13}  {:>6}  {:>11}",
        report.descriptor_count, report.feature_bytes, report.image_count, report.image_bytes
    );
    println!("total {} bytes ({} MiB)", report.total_bytes, report.total_mib);
    let json_path = args.run.join("footprint.json");
    let body = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Format(format!("footprint encoding: {e}")))?;
    std::fs::write(&json_path, body + "\n")?;
    println!("wrote {}", json_path.display());
    Ok(())
}

/// Everything plot emission needs from one finished run directory.
struct RunSummary {
    name: String,
    digest: String,
    metrics: MetricsRecord,
    total_bytes: u64,
}

fn read_run_summary(dir: &Path) -> Result<RunSummary> {
    let cfg = RunConfig::from_file(&dir.join("config.resolved"))?;
    let metrics_path = dir.join("metrics.json");
    let text = read_text(&metrics_path)?;
    let metrics = MetricsRecord::from_json(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", metrics_path.display())))?;
    let footprint_path = dir.join("footprint.json");
    let text = read_text(&footprint_path)?;
    let report: FootprintReport = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", footprint_path.display())))?;
    Ok(RunSummary {
        name: dir.display().to_string(),
        digest: cfg.digest(),
        metrics,
        total_bytes: report.total_bytes,
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::MissingInput(format!("{} not found", path.display()))
        }
        _ => Error::Io(e),
    })
}

fn cmd_plot_data(args: PlotArgs) -> Result<()> {
    let summaries: Vec<RunSummary> = args
        .runs
        .iter()
        .map(|dir| read_run_summary(dir))
        .collect::<Result<_>>()?;

    let mut vs_memory = String::from("run,config_digest,memory_mib,avg_inc_acc\n");
    for s in &summaries {
        let mib = s.total_bytes as f64 / (1024.0 * 1024.0);
        let _ = writeln!(vs_memory, "{},{},{},{}", s.name, s.digest, mib, s.metrics.avg_inc_acc);
    }
    let mut vs_task = String::from("run,config_digest,task_index,classes_seen,accuracy\n");
    for s in &summaries {
        for point in &s.metrics.curve {
            let _ = writeln!(
                vs_task,
                "{},{},{},{},{}",
                s.name, s.digest, point.task, point.classes_seen, point.accuracy
            );
        }
    }

    match args.out {
        Some(dir) => {
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("accuracy_vs_memory.csv"), &vs_memory)?;
            std::fs::write(dir.join("accuracy_vs_task.csv"), &vs_task)?;
            println!("wrote {}", dir.join("accuracy_vs_memory.csv").display());
            println!("wrote {}", dir.join("accuracy_vs_task.csv").display());
        }
        None => {
            println!("# accuracy_vs_memory.csv");
            print!("{vs_memory}");
            println!("# accuracy_vs_task.csv");
            print!("{vs_task}");
        }
    }
    Ok(())
}
