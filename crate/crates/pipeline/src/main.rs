use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use medex_core::labelmodel::LabelModelParams;
use medex_core::lfkit::LfSet;
use medex_core::synthcorpus::CorpusSpec;
use medex_pipeline::config::PipelineConfig;
use medex_pipeline::pipeline::{load_batch_input, read_input_dir, run_all, run_pipeline, Resources, RunReport, Stage};
use medex_pipeline::server::{serve, AppState};
use medex_pipeline::synth::{write_synth_batch, SynthOptions};
use medex_pipeline::train::{gold_labels_from_csv, train_from_inputs};

#[derive(Parser)]
#[command(name = "medex", version, about = "Anonymize discharge summaries and extract structured data")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides paths.input_dir, or the stage input file.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Overrides paths.output_dir.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Seed for training and synthetic corpora.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Answer prompts from the configured answer key instead of the live endpoint.
    #[arg(long, global = true)]
    mock_llm: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic batch with planted ground truth.
    Synth {
        #[arg(long, default_value_t = 200)]
        n_docs: usize,
        /// Documents replaced with broken OCR-JSON.
        #[arg(long, default_value_t = 0)]
        malformed: usize,
        /// Exact number of documents with an empty course section.
        #[arg(long)]
        empty_course: Option<usize>,
        /// Documents whose token labels are written as gold labels.
        #[arg(long, default_value_t = 20)]
        gold_docs: usize,
    },
    /// Mask PHI in OCR-JSON documents.
    Anonymize,
    /// Extract heading fields from (anonymized) OCR-JSON documents.
    ExtractFields,
    /// Ask the clinical questions about each course section in fields.csv.
    ExtractFeatures,
    /// Score answers.csv against the configured annotations.
    Validate,
    /// Train the label model from documents and token gold labels.
    TrainLabelmodel {
        /// Gold label CSV; defaults to paths.gold_labels.
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Run the REST service.
    Serve,
    /// Run every enabled stage over paths.input_dir.
    RunAll,
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(i) = &g.input {
        cfg.paths.input_dir = i.clone();
    }
    if let Some(o) = &g.output {
        cfg.paths.output_dir = o.clone();
    }
    if let Some(s) = g.seed {
        cfg.training.seed = s;
    }
    cfg.mock_llm |= g.mock_llm;
    Ok(cfg)
}

fn print_report(report: &RunReport) -> Result<()> {
    for s in &report.stages {
        println!(
            "{:<10} input {:>5}  ok {:>5}  quarantined {:>4}  {:>9.1} ms",
            s.stage.as_str(),
            s.input,
            s.succeeded,
            s.failures.len(),
            s.total_ms
        );
        for f in &s.failures {
            println!("    {}: {}", f.doc_id, f.reason);
        }
    }
    if let Some(rows) = &report.validation {
        for r in rows {
            let v = r.metrics.values();
            println!(
                "  {:<22} acc {:.2} sen {:.2} spec {:.2} pre {:.2} f1 {:.2} auc {:.2}",
                r.feature, v[0], v[1], v[2], v[3], v[4], v[5]
            );
        }
    }
    report.check_consistency().map_err(anyhow::Error::msg)
}

fn run_stage(g: &Global, stage: Stage) -> Result<()> {
    let cfg = load_config(g)?;
    cfg.validate_for(&[stage])?;
    let res = Resources::from_config(&cfg)?;
    let input = load_batch_input(stage, &cfg.paths.input_dir, &res.headings)?;
    let report = run_pipeline(&cfg, &res, &[stage], input)?;
    print_report(&report)
}

fn synth(g: &Global, n_docs: usize, malformed: usize, empty_course: Option<usize>, gold_docs: usize) -> Result<()> {
    let Some(out) = &g.output else {
        bail!("synth needs --output <dir>");
    };
    let mut opts = SynthOptions {
        spec: CorpusSpec {
            n_docs,
            seed: g.seed.unwrap_or(0),
            ..CorpusSpec::default()
        },
        malformed,
        gold_docs,
    };
    if let Some(n) = empty_course {
        opts = opts.with_empty_courses(n);
    }
    let (batch, cfg_path) = write_synth_batch(out, &opts)?;
    let s = &batch.summary;
    println!(
        "wrote {} documents ({} malformed, {} empty course, {} gold) to {}",
        s.n_docs,
        s.malformed.len(),
        s.empty_course.len(),
        s.gold_docs.len(),
        out.display()
    );
    println!("config: {}", cfg_path.display());
    Ok(())
}

fn train_labelmodel(g: &Global, gold: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(g)?;
    cfg.validate_for(&[])?;
    let gold_path = gold
        .or_else(|| cfg.paths.gold_labels.clone())
        .context("no gold labels: pass --gold or set paths.gold_labels")?;
    let gold = gold_labels_from_csv(&std::fs::read(&gold_path).with_context(|| gold_path.display().to_string())?)?;
    let lfs = match &cfg.paths.lf_set {
        Some(p) => LfSet::load(p)?,
        None => LfSet::default_set(),
    };
    let inputs = read_input_dir(&cfg.paths.input_dir)?;
    let (params, summary) = train_from_inputs(&inputs, &gold, &lfs, &cfg.training)?;
    let out = cfg
        .paths
        .model
        .clone()
        .unwrap_or_else(|| cfg.paths.output_dir.join("model.json"));
    save_model(&params, &out)?;
    for (src, why) in &summary.skipped {
        println!("skipped {src}: {why}");
    }
    println!(
        "trained on {} documents ({} tokens, {} gold); final loss {:.6}; saved {}",
        summary.docs_used,
        summary.tokens,
        summary.gold_tokens,
        params.loss_trace.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn save_model(params: &LabelModelParams, path: &Path) -> Result<()> {
    medex_pipeline::pipeline::atomic_write(path, &params.to_json_bytes())?;
    Ok(())
}

fn serve_cmd(g: &Global) -> Result<()> {
    let cfg = load_config(g)?;
    cfg.validate()?;
    let res = Resources::from_config(&cfg)?;
    let registry = cfg.registry_path();
    if let Some(dir) = registry.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let state = AppState::new(res, cfg.server.job_workers, Some(registry))?;
    let bind = cfg.server.bind.clone();
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        };
        serve(state, &bind, shutdown).await
    })
    .with_context(|| format!("serving on {bind}"))
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let g = &cli.global;
    match cli.command {
        Command::Synth {
            n_docs,
            malformed,
            empty_course,
            gold_docs,
        } => synth(g, n_docs, malformed, empty_course, gold_docs),
        Command::Anonymize => run_stage(g, Stage::Anonymize),
        Command::ExtractFields => run_stage(g, Stage::Fields),
        Command::ExtractFeatures => run_stage(g, Stage::Features),
        Command::Validate => run_stage(g, Stage::Validate),
        Command::TrainLabelmodel { gold } => train_labelmodel(g, gold),
        Command::Serve => serve_cmd(g),
        Command::RunAll => {
            let cfg = load_config(g)?;
            cfg.validate()?;
            let res = Resources::from_config(&cfg)?;
            print_report(&run_all(&cfg, &res)?)
        }
    }
}
