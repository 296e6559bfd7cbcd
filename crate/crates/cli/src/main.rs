use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coldwater::error::{Error, Result};
use coldwater::io::{read_jsonl, write_atomic, write_json};
use coldwater::labeling::DEFAULT_WF_THRESHOLD;
use coldwater::pipeline::{evaluate_pairs, EvalTask, ImageFormat, Pipeline, PredictionPair, RunManifest, Stage};

#[derive(Parser)]
#[command(name = "coldwater", version, about = "Surface-water mapping and change detection on image stacks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Region left out of training.
    #[arg(long, global = true)]
    region_holdout: Option<u32>,
    /// Overrides the configured work directory.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic stacks and truth for generated regions.
    Synth,
    /// Compute QA-masked MNDWI grids.
    Mndwi,
    /// Threshold MNDWI into water masks.
    Mask,
    /// Segment every pixel's time series.
    Segment,
    /// Attach water-frequency labels to segments.
    Label,
    /// Train water-frequency and change models.
    Train,
    /// Predict water frequency for every segment.
    Infer,
    /// Build water maps.
    Map,
    /// Classify break pairs and build change maps.
    Change,
    /// Cross-validated reports, or a report for a predictions file.
    Eval(EvalArgs),
    /// Write map images.
    Render(RenderArgs),
    /// Run every stage in order.
    Pipeline,
}

#[derive(Args)]
struct EvalArgs {
    /// JSONL of {"pred", "truth"}; skips the configured pipeline.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, default_value = "wf")]
    task: String,
    /// Water threshold for the wf task.
    #[arg(long, default_value_t = DEFAULT_WF_THRESHOLD)]
    threshold: f64,
    /// Report path; `.txt` is written next to it. Prints the table when unset.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long, default_value = "ppm")]
    format: String,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        _ => 3,
    }
}

fn report_error(kind: &str, message: &str) {
    let v = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{v}");
}

fn load(common: &Common) -> Result<Pipeline> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    Pipeline::load(path)?.with_overrides(common.seed, common.region_holdout, common.work_dir.clone())
}

fn print_manifests(ms: &[RunManifest]) {
    for m in ms {
        println!("{}: {} inputs, {} outputs", m.stage, m.inputs.len(), m.outputs.len());
        for n in &m.notes {
            println!("  {n}");
        }
    }
}

fn eval_file(args: &EvalArgs, path: &Path) -> Result<()> {
    let task: EvalTask = args.task.parse()?;
    let pairs: Vec<PredictionPair> = read_jsonl(path)?;
    if pairs.is_empty() {
        return Err(Error::Data(format!("{}: no predictions", path.display())));
    }
    let report = evaluate_pairs(&pairs, task, args.threshold)?;
    let table = report.render_table();
    match &args.out {
        Some(out) => {
            write_json(out, &report)?;
            write_atomic(&out.with_extension("txt"), table.as_bytes())?;
        }
        None => print!("{table}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Eval(args) = &cli.command {
        if let Some(p) = &args.predictions {
            return eval_file(args, p);
        }
    }
    if let Command::Render(args) = &cli.command {
        let _: ImageFormat = serde_json::from_value(serde_json::Value::String(args.format.clone()))
            .map_err(|_| Error::InvalidArgument(format!("unsupported image format '{}'", args.format)))?;
    }
    let pipeline = load(&cli.common)?;
    let stage = match &cli.command {
        Command::Synth => Stage::Synth,
        Command::Mndwi => Stage::Mndwi,
        Command::Mask => Stage::Mask,
        Command::Segment => Stage::Segment,
        Command::Label => Stage::Label,
        Command::Train => Stage::Train,
        Command::Infer => Stage::Infer,
        Command::Map => Stage::Map,
        Command::Change => Stage::Change,
        Command::Eval(_) => Stage::Eval,
        Command::Render(_) => Stage::Render,
        Command::Pipeline => {
            print_manifests(&pipeline.run_all()?);
            return Ok(());
        }
    };
    print_manifests(&[pipeline.run(stage)?]);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = catch_unwind(AssertUnwindSafe(|| match cli.common.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("--threads {n}: {e}")))
            .and_then(|pool| pool.install(|| run(&cli))),
        None => run(&cli),
    }));
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            report_error(e.kind(), &e.to_string());
            ExitCode::from(exit_code(&e))
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| panic.downcast_ref::<&str>().copied())
                .unwrap_or("panic");
            report_error("internal", msg);
            ExitCode::from(4)
        }
    }
}
