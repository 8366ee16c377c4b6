//! Orchestration: backends, the worker pool, and the per-subcommand drivers.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use consult_core::analysis::{reanswer, Reanswer, TransformOptions};
use consult_core::backend::{
    cosine, load_script, Backend, OpenAiBackend, OpenAiConfig, ScriptedBackend,
};
use consult_core::convert::{build_relevance_evalset, parse_case, read_dataset, RawRecord};
use consult_core::episode::{EpisodeConfig, PatientCase};
use consult_core::expert::{elicit_common_option, non_interactive_answer, run_interaction};
use consult_core::patient::{
    collect_responses, factuality_score, FactualityOptions, FactualityReport, PatientVariant,
    RelevanceReport,
};
use consult_core::template::TemplateSet;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{BackendSpec, ExperimentConfig};
use crate::grid::{expand, GridPoint, PointKind};
use crate::records::{write_results, write_transcript, BeliefRecord, CaseOutcome, CaseRecord};
use crate::report::{write_report, MANIFEST_FILE};
use crate::{CliError, Result};

/// A loaded backend. Scripted backends hand out a fresh copy per unit of
/// work so tag sequence counters start from one; HTTP clients are shared.
pub enum Engine {
    Scripted(ScriptedBackend),
    Http(Arc<OpenAiBackend>),
}

impl Engine {
    pub fn load(spec: &BackendSpec) -> Result<Self> {
        Ok(match spec {
            BackendSpec::Scripted(path) => Self::Scripted(load_script(path)?),
            BackendSpec::OpenAi => {
                Self::Http(Arc::new(OpenAiBackend::new(OpenAiConfig::from_env()?)))
            }
        })
    }

    pub fn instance(&self) -> Arc<dyn Backend> {
        match self {
            Self::Scripted(s) => Arc::new(s.fresh()),
            Self::Http(h) => h.clone(),
        }
    }
}

pub fn load_templates(dir: Option<&Path>) -> Result<TemplateSet> {
    Ok(match dir {
        Some(d) => TemplateSet::from_dir(d)?,
        None => TemplateSet::default(),
    })
}

pub fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))
}

/// One grid point of the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPoint {
    #[serde(flatten)]
    pub point: GridPoint,
    pub episode_config_fingerprint: String,
    pub transcript: String,
    pub results: String,
}

/// Run-level provenance. Holds no paths, timestamps or worker counts, so
/// reruns produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_fingerprint: String,
    pub cases: usize,
    pub ece_bins: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beliefs: Option<String>,
    pub grid_points: Vec<ManifestPoint>,
}

pub const BELIEFS_FILE: &str = "beliefs.jsonl";

/// Files written by one run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub output_dir: PathBuf,
    pub manifest: Manifest,
    pub report: PathBuf,
}

fn run_case(
    point: &GridPoint,
    case: &PatientCase,
    backend: &dyn Backend,
    templates: &TemplateSet,
) -> CaseOutcome {
    let outcome = match &point.kind {
        PointKind::Interactive { config } => {
            run_interaction(case, config, backend, templates).map(CaseOutcome::Episode)
        }
        PointKind::NonInteractive { level, config } => {
            non_interactive_answer(case, *level, config, backend, templates)
                .map(CaseOutcome::NonInteractive)
        }
    };
    outcome.unwrap_or_else(|e| {
        tracing::warn!(case = %case.id, grid_point = %point.label, error = %e, "case failed");
        CaseOutcome::Failed {
            case_id: case.id.clone(),
            error: e.to_string(),
        }
    })
}

/// Runs every case at one grid point on the pool; outcomes keep case order.
pub fn run_point(
    point: &GridPoint,
    cases: &[PatientCase],
    backend: &dyn Backend,
    templates: &TemplateSet,
    pool: &rayon::ThreadPool,
) -> Vec<CaseOutcome> {
    pool.install(|| {
        cases
            .par_iter()
            .map(|case| run_case(point, case, backend, templates))
            .collect()
    })
}

fn elicit_beliefs(
    cases: &[PatientCase],
    config: &EpisodeConfig,
    backend: &dyn Backend,
    templates: &TemplateSet,
    pool: &rayon::ThreadPool,
) -> Vec<BeliefRecord> {
    pool.install(|| {
        cases
            .par_iter()
            .map(
                |case| match elicit_common_option(case, config, backend, templates) {
                    Ok(belief) => BeliefRecord {
                        case_id: case.id.clone(),
                        belief,
                        error: None,
                    },
                    Err(e) => BeliefRecord {
                        case_id: case.id.clone(),
                        belief: None,
                        error: Some(e.to_string()),
                    },
                },
            )
            .collect()
    })
}

/// Runs the whole grid and writes transcripts, results streams, the
/// manifest and the report under the configured output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let engine = Engine::load(&config.backend_spec()?)?;
    run_experiment_with(config, &engine)
}

pub fn run_experiment_with(config: &ExperimentConfig, engine: &Engine) -> Result<RunArtifacts> {
    config.validate()?;
    let cases = read_dataset(&config.dataset)?;
    if cases.is_empty() {
        return Err(CliError::Config(format!(
            "dataset {} is empty",
            config.dataset.display()
        )));
    }
    let templates = load_templates(config.templates_dir.as_deref())?;
    let points = expand(config)?;
    let run_fingerprint = config.fingerprint()?;
    let pool = pool(config.effective_workers())?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out)?;
    tracing::info!(cases = cases.len(), grid_points = points.len(), %run_fingerprint, "starting run");

    let mut manifest_points = Vec::with_capacity(points.len());
    for point in &points {
        let backend = engine.instance();
        let outcomes = run_point(point, &cases, backend.as_ref(), &templates, &pool);
        let transcript = format!("{}.transcript.jsonl", point.label);
        let results = format!("{}.results.jsonl", point.label);
        write_transcript(
            out.join(&transcript),
            &run_fingerprint,
            &point.label,
            &outcomes,
        )?;
        let records: Vec<CaseRecord> = outcomes
            .iter()
            .map(|o| CaseRecord::from_outcome(&run_fingerprint, &point.label, o))
            .collect();
        write_results(out.join(&results), &records)?;
        let failures = records.iter().filter(|r| r.failed()).count();
        tracing::info!(grid_point = %point.label, failures, "grid point done");
        manifest_points.push(ManifestPoint {
            episode_config_fingerprint: point.episode_config().fingerprint(),
            point: point.clone(),
            transcript,
            results,
        });
    }

    let beliefs = if config.generality {
        let backend = engine.instance();
        let base = points
            .first()
            .map(|p| p.episode_config().clone())
            .unwrap_or_default();
        let records = elicit_beliefs(&cases, &base, backend.as_ref(), &templates, &pool);
        consult_core::jsonl::write_jsonl(out.join(BELIEFS_FILE), &records)?;
        Some(BELIEFS_FILE.to_string())
    } else {
        None
    };

    let manifest = Manifest {
        run_fingerprint,
        cases: cases.len(),
        ece_bins: config.ece_bins,
        beliefs,
        grid_points: manifest_points,
    };
    std::fs::write(
        out.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    let report = write_report(out)?;
    Ok(RunArtifacts {
        output_dir: out.clone(),
        manifest,
        report,
    })
}

/// A record that failed conversion: its id and the error.
pub type ConversionFailure = (String, String);

/// Converts raw records in parallel. Failures are logged and skipped;
/// converted cases keep input order.
pub fn convert_records(
    raws: &[RawRecord],
    engine: &Engine,
    templates: &TemplateSet,
    workers: usize,
) -> Result<(Vec<PatientCase>, Vec<ConversionFailure>)> {
    let backend = engine.instance();
    let pool = pool(workers)?;
    let converted: Vec<_> = pool.install(|| {
        raws.par_iter()
            .map(|raw| {
                parse_case(raw, backend.as_ref(), templates)
                    .map_err(|e| (raw.id.clone(), e.to_string()))
            })
            .collect()
    });
    let mut cases = Vec::new();
    let mut failures = Vec::new();
    for c in converted {
        match c {
            Ok(case) => cases.push(case),
            Err((id, error)) => {
                tracing::warn!(record = %id, %error, "conversion failed");
                failures.push((id, error));
            }
        }
    }
    Ok((cases, failures))
}

/// Patient reliability on one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientEvalRecord {
    pub case_id: String,
    pub variant: PatientVariant,
    pub factuality: Option<FactualityReport>,
    pub relevance: Option<RelevanceReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn evaluate_case(
    case: &PatientCase,
    variant: PatientVariant,
    options: FactualityOptions,
    backend: &dyn Backend,
    templates: &TemplateSet,
) -> consult_core::Result<(FactualityReport, RelevanceReport)> {
    let evalset = build_relevance_evalset(case, backend, templates)?;
    let questions: Vec<&str> = evalset.iter().map(|p| p.atomic_question.as_str()).collect();
    let answered = collect_responses(variant, case, &questions, backend, templates)?;
    let responses: Vec<_> = answered.iter().map(|(_, r)| r.clone()).collect();
    let factuality = factuality_score(&responses, case, options, backend, templates)?;
    let mut texts = Vec::with_capacity(evalset.len() * 2);
    for pair in &evalset {
        let response = answered
            .iter()
            .find(|(q, _)| {
                consult_core::text::normalize_lexical(q)
                    == consult_core::text::normalize_lexical(&pair.atomic_question)
            })
            .map(|(_, r)| r.text.clone())
            .unwrap_or_default();
        texts.push(response);
        texts.push(pair.ground_truth_statement.clone());
    }
    let vectors = backend.embed(&texts)?;
    let relevance = RelevanceReport::from_similarities(
        vectors.chunks(2).map(|p| cosine(&p[0], &p[1])).collect(),
    )?;
    Ok((factuality, relevance))
}

/// Factuality and relevance of one patient variant over a dataset. Each
/// case builds its synthetic questions, answers each distinct question
/// once, scores those answers for factuality and compares them with the
/// facts they came from for relevance.
pub fn evaluate_patient(
    cases: &[PatientCase],
    variant: PatientVariant,
    options: FactualityOptions,
    engine: &Engine,
    templates: &TemplateSet,
    workers: usize,
) -> Result<Vec<PatientEvalRecord>> {
    let backend = engine.instance();
    let pool = pool(workers)?;
    Ok(pool.install(|| {
        cases
            .par_iter()
            .map(
                |case| match evaluate_case(case, variant, options, backend.as_ref(), templates) {
                    Ok((f, r)) => PatientEvalRecord {
                        case_id: case.id.clone(),
                        variant,
                        factuality: Some(f),
                        relevance: Some(r),
                        error: None,
                    },
                    Err(e) => {
                        tracing::warn!(case = %case.id, error = %e, "patient evaluation failed");
                        PatientEvalRecord {
                            case_id: case.id.clone(),
                            variant,
                            factuality: None,
                            relevance: None,
                            error: Some(e.to_string()),
                        }
                    }
                },
            )
            .collect()
    }))
}

/// Re-answers every episode in a transcript after the given transforms.
pub fn analyze_episodes(
    episodes: &[consult_core::expert::EpisodeResult],
    cases: &[PatientCase],
    options: &TransformOptions,
    config: &EpisodeConfig,
    engine: &Engine,
    templates: &TemplateSet,
    workers: usize,
) -> Result<Vec<Reanswer>> {
    let by_id: std::collections::HashMap<&str, &PatientCase> =
        cases.iter().map(|c| (c.id.as_str(), c)).collect();
    let backend = engine.instance();
    let pool = pool(workers)?;
    pool.install(|| {
        episodes
            .par_iter()
            .map(|episode| {
                let case = by_id.get(episode.case_id.as_str()).ok_or_else(|| {
                    CliError::Transcript(format!("case {} is not in the dataset", episode.case_id))
                })?;
                Ok(reanswer(
                    case,
                    episode,
                    options,
                    config,
                    backend.as_ref(),
                    templates,
                )?)
            })
            .collect()
    })
}
