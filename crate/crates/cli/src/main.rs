//! `consult`: convert datasets, run experiment grids, evaluate patients,
//! analyze transcripts and rebuild reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use consult_cli::config::{BackendSpec, ExperimentConfig, DEFAULT_HTTP_WORKERS};
use consult_cli::records::read_episodes;
use consult_cli::report::write_report;
use consult_cli::runner::{
    analyze_episodes, convert_records, evaluate_patient, load_templates, run_experiment, Engine,
};
use consult_cli::{CliError, Result};
use consult_core::analysis::{TransformOptions, DEFAULT_SIMILARITY_THRESHOLD};
use consult_core::convert::{read_dataset, read_raw_records, write_dataset};
use consult_core::episode::EpisodeConfig;
use consult_core::jsonl::write_jsonl;
use consult_core::metrics::{accuracy_summary, binomial_sd};
use consult_core::patient::{ConsistencyMode, FactualityOptions, PatientVariant};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "consult",
    version,
    about = "Interactive clinical question-asking benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct BackendArgs {
    /// `scripted:<path>` or `openai` (endpoint and model from the environment).
    #[arg(long)]
    backend: String,
    /// Directory of prompt template overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Worker threads; defaults by backend kind.
    #[arg(long)]
    workers: Option<usize>,
}

impl BackendArgs {
    fn spec(&self) -> Result<BackendSpec> {
        BackendSpec::parse(&self.backend, std::path::Path::new(""))
    }

    fn workers(&self) -> Result<usize> {
        Ok(self.workers.unwrap_or(match self.spec()? {
            BackendSpec::Scripted(_) => std::thread::available_parallelism()
                .map(usize::from)
                .unwrap_or(1),
            BackendSpec::OpenAi => DEFAULT_HTTP_WORKERS,
        }))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Convert raw multiple-choice records into a patient-case dataset.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Run every grid point of an experiment config.
    Run {
        config: PathBuf,
        /// Override the configured worker count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Score a patient variant's factuality and relevance over a dataset.
    EvalPatient {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "fact_select")]
        variant: PatientVariant,
        /// Judge every claim with the model instead of the variant default.
        #[arg(long)]
        judge: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Re-answer transcript episodes after conversation transforms.
    Analyze {
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        relevant: bool,
        #[arg(long)]
        unique: bool,
        #[arg(long)]
        para: bool,
        #[arg(long, default_value_t = DEFAULT_SIMILARITY_THRESHOLD)]
        sim_threshold: f64,
        /// Option-shuffling seed used by the original run.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Rebuild report.txt from a run directory's results streams.
    Report { dir: PathBuf },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Convert {
            input,
            out,
            backend,
        } => {
            let raws = read_raw_records(&input)?;
            let engine = Engine::load(&backend.spec()?)?;
            let templates = load_templates(backend.templates.as_deref())?;
            let (cases, failures) =
                convert_records(&raws, &engine, &templates, backend.workers()?)?;
            write_dataset(&out, &cases)?;
            println!("converted={}", cases.len());
            println!("failed={}", failures.len());
        }
        Command::Run { config, workers } => {
            let mut config = ExperimentConfig::load(&config)?;
            if workers.is_some() {
                config.workers = workers;
            }
            let artifacts = run_experiment(&config)?;
            println!("report={}", artifacts.report.display());
            print!("{}", std::fs::read_to_string(&artifacts.report)?);
        }
        Command::EvalPatient {
            dataset,
            variant,
            judge,
            out,
            backend,
        } => {
            let cases = read_dataset(&dataset)?;
            let engine = Engine::load(&backend.spec()?)?;
            let templates = load_templates(backend.templates.as_deref())?;
            let mut options = FactualityOptions::for_variant(variant);
            if judge {
                options.mode = ConsistencyMode::JudgeBinary;
            }
            let records = evaluate_patient(
                &cases,
                variant,
                options,
                &engine,
                &templates,
                backend.workers()?,
            )?;
            write_jsonl(&out, &records)?;
            let factuality: Vec<_> = records
                .iter()
                .filter_map(|r| r.factuality.clone())
                .collect();
            let relevance: Vec<_> = records.iter().filter_map(|r| r.relevance.clone()).collect();
            println!("variant={}", variant.name());
            println!("cases={}", records.len());
            println!(
                "failures={}",
                records.iter().filter(|r| r.error.is_some()).count()
            );
            if !factuality.is_empty() {
                let merged = consult_core::patient::FactualityReport::merge(&factuality)?;
                println!("factuality={:.6}", merged.mean_score);
            }
            if !relevance.is_empty() {
                let merged = consult_core::patient::RelevanceReport::merge(&relevance)?;
                println!("relevance={:.6}", merged.mean_score);
            }
        }
        Command::Analyze {
            transcript,
            dataset,
            relevant,
            unique,
            para,
            sim_threshold,
            seed,
            out,
            backend,
        } => {
            let episodes = read_episodes(&transcript)?;
            if episodes.is_empty() {
                return Err(CliError::Transcript(format!(
                    "{} holds no episodes",
                    transcript.display()
                )));
            }
            let cases = read_dataset(&dataset)?;
            let engine = Engine::load(&backend.spec()?)?;
            let templates = load_templates(backend.templates.as_deref())?;
            let options = TransformOptions {
                relevant,
                unique,
                paragraph: para,
                similarity_threshold: sim_threshold,
            };
            let config = EpisodeConfig {
                shuffle_options_seed: seed,
                ..EpisodeConfig::default()
            };
            let answers = analyze_episodes(
                &episodes,
                &cases,
                &options,
                &config,
                &engine,
                &templates,
                backend.workers()?,
            )?;
            write_jsonl(&out, &answers)?;
            let correct = answers.iter().filter(|a| a.correct).count();
            let p = correct as f64 / answers.len() as f64;
            let original = accuracy_summary(&episodes)?;
            println!("transform={}", options.label());
            println!("episodes={}", answers.len());
            println!("original_accuracy={:.6}", original.p);
            println!("accuracy={p:.6}");
            println!("accuracy_sd={:.6}", binomial_sd(p, answers.len())?);
        }
        Command::Report { dir } => {
            let path = write_report(&dir)?;
            print!("{}", std::fs::read_to_string(path)?);
        }
    }
    Ok(())
}
