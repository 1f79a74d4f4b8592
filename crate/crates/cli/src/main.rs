use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ilf_core::annotation::{write_records, AnnotationService};
use ilf_core::pipeline::{run_scaling_experiment, Pipeline, PipelineContext, RunConfig, Stage};
use tracing_subscriber::EnvFilter;

const QUEUE_FILE: &str = "annotation_queue.json";
const SCALING_FILE: &str = "scaling.json";

#[derive(Parser)]
#[command(name = "ilf", version, about = "Learn code generation from natural-language feedback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Directory holding run state, events and datasets.
    #[arg(long)]
    run_dir: PathBuf,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample programs from the base model, evaluate them and assign splits.
    Sample(RunArgs),
    /// Ingest human annotations or ask the feedback model.
    CollectFeedback(RunArgs),
    /// Refine annotated programs with their feedback.
    Refine(RunArgs),
    /// Build the fine-tuning datasets.
    Assemble(RunArgs),
    /// Fine-tune the policy on the final dataset.
    Finetune(RunArgs),
    /// Evaluate the fine-tuned policy on the test split.
    Evaluate(RunArgs),
    /// Run every remaining stage.
    Run(RunArgs),
    /// Refine the annotated programs again with feedback from other tasks.
    ShuffledAblation(RunArgs),
    /// Model-feedback runs over nested subsets of k training tasks.
    ScalingRun {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated task counts.
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
    },
    /// Print the results table.
    Report(RunArgs),
    /// Check that every final example traces to a failing original.
    Audit(RunArgs),
    /// Serve the annotation queue for this run over HTTP.
    Serve {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Write the accepted annotations of the served queue as JSON lines.
    ExportAnnotations {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Sample(a) => stage(&a, Stage::Sample),
        Command::CollectFeedback(a) => stage(&a, Stage::CollectFeedback),
        Command::Refine(a) => stage(&a, Stage::Refine),
        Command::Assemble(a) => stage(&a, Stage::Assemble),
        Command::Finetune(a) => stage(&a, Stage::Finetune),
        Command::Evaluate(a) => stage(&a, Stage::Evaluate),
        Command::Run(a) => {
            let mut pipeline = open(&a)?;
            pipeline.run_all()?;
            print!("{}", pipeline.report());
            Ok(())
        }
        Command::ShuffledAblation(a) => {
            let mut pipeline = open(&a)?;
            let result = pipeline.run_shuffled_ablation()?;
            println!("refined {} annotations with shuffled feedback", result.annotation_ids.len());
            print!("{}", pipeline.report());
            Ok(())
        }
        Command::ScalingRun { run, k } => scaling(&run, &k),
        Command::Report(a) => {
            print!("{}", open(&a)?.report());
            Ok(())
        }
        Command::Audit(a) => {
            let report = open(&a)?.audit()?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.is_complete() {
                bail!("{} of {} final examples lack a full lineage", report.final_examples - report.traced, report.final_examples);
            }
            Ok(())
        }
        Command::Serve { run, addr } => serve(&run, &addr),
        Command::ExportAnnotations { run, out } => {
            let service = queue(&run)?;
            let records = service.export_accepted();
            let file = std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            write_records(std::io::BufWriter::new(file), &records)?;
            println!("wrote {} accepted annotations to {}", records.len(), out.display());
            Ok(())
        }
    }
}

fn open(args: &RunArgs) -> Result<Pipeline> {
    let config = RunConfig::load(&args.config)?;
    let ctx = PipelineContext::from_config(config).context("loading dataset and backends")?;
    Ok(Pipeline::open(ctx, &args.run_dir)?)
}

fn stage(args: &RunArgs, stage: Stage) -> Result<()> {
    let mut pipeline = open(args)?;
    if pipeline.run_stage(stage)? {
        println!("{stage}: complete");
    } else {
        println!("{stage}: already complete");
    }
    Ok(())
}

fn scaling(args: &RunArgs, k: &[usize]) -> Result<()> {
    let pipeline = open(args)?;
    let points = run_scaling_experiment(pipeline.context(), pipeline.state(), k)?;
    let path = args.run_dir.join(SCALING_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&points)?)?;
    println!("{:>6}  {:>8}  {:>7}", "k", "examples", "pass@1");
    for p in points.values() {
        let pass1 = p.report.pass_at_k.get(&1).copied().unwrap_or(f64::NAN);
        println!("{:>6}  {:>8}  {:>7.3}", p.k, p.dataset_size, pass1);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn queue(args: &RunArgs) -> Result<AnnotationService> {
    let pipeline = open(args)?;
    if !pipeline.state().is_complete(Stage::Sample) {
        bail!("run the sample stage before serving annotations");
    }
    let ctx = pipeline.context();
    let service = AnnotationService::from_pool(
        &ctx.rendered,
        &pipeline.state().annotation_pool(),
        ctx.config.sandbox.clone(),
    )?;
    Ok(service.with_persistence(queue_path(&args.run_dir))?)
}

fn queue_path(run_dir: &Path) -> PathBuf {
    run_dir.join(QUEUE_FILE)
}

fn serve(args: &RunArgs, addr: &str) -> Result<()> {
    let service = Arc::new(queue(args)?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        ilf_service::serve(listener, service).await?;
        Ok(())
    })
}
