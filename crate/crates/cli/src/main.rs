use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use insets_core::pipeline::{StageOutcome, StageStatus};
use insets_core::{eval, refinement, Config, Dimension, Pipeline};

#[derive(Parser)]
#[command(name = "insets", version, about = "Emotion statement construction, evaluation and refinement")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    corpus_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Serve every model profile from the offline mock backend.
    #[arg(long, global = true)]
    mock: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Register images from the corpus directory.
    Ingest,
    /// Extract, attach and vote emotion labels for every image.
    Tag,
    /// Build correct and incorrect statements in all four dimensions.
    Construct,
    /// Draw the stratified benchmark sample.
    Sample {
        /// Overrides `sample.size`.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Score a model on the benchmark (curated set when present).
    Evaluate {
        /// Model profile to evaluate; defaults to every `eval.models` entry.
        #[arg(long)]
        model: Vec<String>,
    },
    /// Run the annotator review service.
    Serve {
        /// Overrides `review.bind`.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Consensus outcomes and agreement over collected judgments.
    Consensus {
        #[arg(long)]
        dimension: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Apply consensus to the benchmark and write the curated set.
    Curate,
    /// Corpus statistics.
    Stats {
        #[arg(long)]
        json: bool,
    },
    /// Metrics table for every evaluated model; JSON goes to report.json.
    Report {
        #[arg(long)]
        json: bool,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.corpus_dir {
        cfg.corpus_dir = d.clone();
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    cfg.mock |= cli.mock;
    Ok(cfg)
}

fn print_outcome(o: &StageOutcome) {
    match o.status {
        StageStatus::Ran => println!("{}: {}", o.stage, o.summary),
        StageStatus::UpToDate => println!("{}: up to date ({})", o.stage, o.summary),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli)?;
    if let Cmd::Serve { bind } = &cli.cmd {
        let mut review = cfg.review.clone();
        if let Some(b) = bind {
            review.bind = b.clone();
        }
        let rt = tokio::runtime::Runtime::new()?;
        rt.block_on(insets_review::serve(cfg.out_dir.clone(), review))?;
        return Ok(ExitCode::SUCCESS);
    }
    let p = Pipeline::from_config(cfg)?;
    match cli.cmd {
        Cmd::Ingest => print_outcome(&p.ingest(None)?),
        Cmd::Tag => print_outcome(&p.tag()?),
        Cmd::Construct => print_outcome(&p.construct()?),
        Cmd::Sample { size } => print_outcome(&p.sample(size)?),
        Cmd::Curate => print_outcome(&p.curate()?),
        Cmd::Evaluate { model } => {
            let models = if model.is_empty() { p.cfg.eval.models.clone() } else { model };
            if models.is_empty() {
                bail!("no model to evaluate; pass --model or set eval.models");
            }
            let (_, source) = p.evaluation_set()?;
            let mut failed = 0;
            let mut reports = Vec::new();
            for m in &models {
                let r = p.evaluate(m).with_context(|| format!("evaluating {m}"))?;
                if r.failed_trials > 0 {
                    log::error!("{m}: {} trials have no recorded response", r.failed_trials);
                }
                failed += r.failed_trials;
                reports.push(r);
            }
            println!("evaluated on {source}");
            print!("{}", eval::render_table(&reports));
            if failed > 0 {
                eprintln!("{failed} trials unrecorded; rerun evaluate to retry them");
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::Consensus { dimension, json } => {
            let dimension = match dimension {
                None => None,
                Some(d) => Some(Dimension::parse(&d).with_context(|| format!("unknown dimension `{d}`"))?),
            };
            let (report, outcomes, pending) = p.consensus(dimension)?;
            if json {
                let v = serde_json::json!({"report": report, "outcomes": outcomes, "pending": pending});
                println!("{}", serde_json::to_string_pretty(&v)?);
            } else {
                print!("{}", refinement::render_agreement_table(&report));
                println!("{} statements decided, {pending} pending", outcomes.len());
            }
        }
        Cmd::Stats { json } => {
            let s = p.stats()?;
            if json {
                println!("{}", serde_json::to_string_pretty(&s)?);
            } else {
                println!("images            {}", s.images);
                println!("labeled images    {}", s.labeled_images);
                println!("labels            {} ({:.2} per image, {} distinct)", s.labels, s.labels_per_image, s.distinct_labels);
                println!("statements        {} ({:.2} per image)", s.statements, s.statements_per_image);
                println!("mean words        {:.2}", s.mean_statement_words);
                for (primary, share) in &s.primary_shares {
                    println!("  {primary:<10} {share:>6.2}%");
                }
                for (d, (t, f)) in &s.per_dimension {
                    println!("  {d:<6} correct {t:>6}  incorrect {f:>6}");
                }
            }
        }
        Cmd::Report { json } => {
            let reports = p.report()?;
            let text = serde_json::to_string_pretty(&reports)?;
            let path = p.path("report.json");
            std::fs::write(&path, format!("{text}\n")).with_context(|| path.display().to_string())?;
            if json {
                println!("{text}");
            } else {
                print!("{}", eval::render_table(&reports));
            }
            let failed: usize = reports.iter().map(|r| r.failed_trials).sum();
            if failed > 0 {
                eprintln!("{failed} trials unrecorded");
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::Serve { .. } => unreachable!(),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
