use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use augcon::corpus::LengthUnit;
use augcon::eval::{exact_match_accuracy, QaItem};
use augcon::jsonl::read_jsonl;
use augcon::metrics::rouge_l_text;
use augcon::pipeline::{BackendKind, Pipeline, PipelineConfig, PipelineError, Stage};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "augcon", version, about = "Generate SFT query/response pairs from a text corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Pipeline config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the backend kind.
    #[arg(long, value_parser = ["real", "mock"])]
    backend: Option<String>,
    /// Mock script (JSONL), used with `--backend mock`.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Re-run even when the stage manifest matches.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Split the corpus into contexts.
    Extract(RunArgs),
    /// Build one Context-Split-Tree per context.
    Cst(RunArgs),
    /// Regenerate negative queries under weakened prompts.
    ScorerData(RunArgs),
    /// Train the query scorer.
    ScorerTrain(RunArgs),
    /// Score, iterate and diversity-filter queries.
    Filter(RunArgs),
    /// Pick few-shot answer examples by random search.
    FewshotSearch(RunArgs),
    /// Answer filtered queries and write sft.jsonl.
    Respond(RunArgs),
    /// Write the evaluation report.
    Eval(RunArgs),
    /// Run every stage in order.
    All(RunArgs),
    /// Print ROUGE-L of a candidate against a reference.
    Rouge {
        candidate: String,
        reference: String,
        #[arg(long, default_value = "words")]
        unit: LengthUnit,
    },
    /// Exact-match accuracy of a predictions.jsonl file.
    EvalQa {
        predictions: PathBuf,
        /// Compare strings verbatim.
        #[arg(long)]
        strict: bool,
    },
}

fn pipeline(args: &RunArgs) -> Result<Pipeline> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(kind) = &args.backend {
        cfg.backend.kind = kind.parse::<BackendKind>().map_err(PipelineError::Validation)?;
    }
    if let Some(script) = &args.script {
        cfg.backend.script = Some(script.clone());
    }
    let mut p = Pipeline::new(cfg)?;
    p.force = args.force;
    Ok(p)
}

fn run_stages(args: &RunArgs, stages: &[Stage]) -> Result<()> {
    let p = pipeline(args)?;
    for &stage in stages {
        let m = p.run_stage(stage)?;
        let status = if m.cache_hit { "cached" } else { "ran" };
        println!("{stage}: {status} ({} warnings)", m.warnings.len());
        for w in &m.warnings {
            log::warn!("{stage}: {w}");
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let stage = |s: Stage| [s];
    match cli.command {
        Command::Extract(a) => run_stages(&a, &stage(Stage::Extract)),
        Command::Cst(a) => run_stages(&a, &stage(Stage::Cst)),
        Command::ScorerData(a) => run_stages(&a, &stage(Stage::ScorerData)),
        Command::ScorerTrain(a) => run_stages(&a, &stage(Stage::ScorerTrain)),
        Command::Filter(a) => run_stages(&a, &stage(Stage::Filter)),
        Command::FewshotSearch(a) => run_stages(&a, &stage(Stage::FewshotSearch)),
        Command::Respond(a) => run_stages(&a, &stage(Stage::Respond)),
        Command::Eval(a) => run_stages(&a, &stage(Stage::Eval)),
        Command::All(a) => run_stages(&a, &Stage::ALL),
        Command::Rouge { candidate, reference, unit } => {
            let s = rouge_l_text(&candidate, &reference, unit);
            println!("{}", serde_json::to_string(&s)?);
            Ok(())
        }
        Command::EvalQa { predictions, strict } => {
            let items: Vec<QaItem> =
                read_jsonl(&predictions).with_context(|| format!("reading {}", predictions.display()))?;
            if items.is_empty() {
                bail!(PipelineError::Validation(format!("{} has no items", predictions.display())));
            }
            let acc = exact_match_accuracy(&items, !strict).map_err(|e| PipelineError::Validation(e.to_string()))?;
            println!("{}", serde_json::json!({"items": items.len(), "exact_match": acc}));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<PipelineError>().map_or(3, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
