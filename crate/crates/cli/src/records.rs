//! On-disk record shapes: transcript lines and the flat per-case stream.

use std::collections::HashMap;
use std::path::Path;

use consult_core::episode::{EpisodeStatus, Turn};
use consult_core::expert::{EpisodeResult, NonInteractiveResult};
use consult_core::jsonl::{read_jsonl, write_jsonl};
use consult_core::metrics::Outcome;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

/// What one case produced at one grid point.
#[derive(Debug, Clone, PartialEq)]
pub enum CaseOutcome {
    Episode(EpisodeResult),
    NonInteractive(NonInteractiveResult),
    Failed { case_id: String, error: String },
}

impl CaseOutcome {
    pub fn case_id(&self) -> &str {
        match self {
            Self::Episode(r) => &r.case_id,
            Self::NonInteractive(r) => &r.case_id,
            Self::Failed { case_id, .. } => case_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TranscriptRecord {
    Turn {
        case_id: String,
        turn: Turn,
    },
    /// Episode result with its log carried by the preceding turn records.
    Episode {
        result: EpisodeResult,
    },
    NonInteractive {
        result: NonInteractiveResult,
    },
    Failure {
        case_id: String,
        error: String,
    },
}

/// One line of a transcript file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub run_fingerprint: String,
    pub grid_point: String,
    #[serde(flatten)]
    pub record: TranscriptRecord,
}

/// Transcript lines for a grid point: each episode's turns, then its result.
pub fn transcript_lines(
    run_fingerprint: &str,
    grid_point: &str,
    outcomes: &[CaseOutcome],
) -> Vec<TranscriptLine> {
    let line = |record| TranscriptLine {
        run_fingerprint: run_fingerprint.to_string(),
        grid_point: grid_point.to_string(),
        record,
    };
    let mut lines = Vec::new();
    for outcome in outcomes {
        match outcome {
            CaseOutcome::Episode(result) => {
                for turn in &result.log {
                    lines.push(line(TranscriptRecord::Turn {
                        case_id: result.case_id.clone(),
                        turn: turn.clone(),
                    }));
                }
                let mut bare = result.clone();
                bare.log.clear();
                lines.push(line(TranscriptRecord::Episode { result: bare }));
            }
            CaseOutcome::NonInteractive(result) => {
                lines.push(line(TranscriptRecord::NonInteractive {
                    result: result.clone(),
                }))
            }
            CaseOutcome::Failed { case_id, error } => lines.push(line(TranscriptRecord::Failure {
                case_id: case_id.clone(),
                error: error.clone(),
            })),
        }
    }
    lines
}

pub fn write_transcript(
    path: impl AsRef<Path>,
    run_fingerprint: &str,
    grid_point: &str,
    outcomes: &[CaseOutcome],
) -> Result<()> {
    Ok(write_jsonl(
        path,
        &transcript_lines(run_fingerprint, grid_point, outcomes),
    )?)
}

/// Rebuilds outcomes from transcript lines, reattaching each episode's turns.
pub fn outcomes_from_lines(lines: Vec<TranscriptLine>) -> Result<Vec<CaseOutcome>> {
    let mut pending: HashMap<String, Vec<Turn>> = HashMap::new();
    let mut out = Vec::new();
    for line in lines {
        match line.record {
            TranscriptRecord::Turn { case_id, turn } => {
                pending.entry(case_id).or_default().push(turn)
            }
            TranscriptRecord::Episode { mut result } => {
                result.log = pending.remove(&result.case_id).unwrap_or_default();
                if result.log.len() != result.num_questions {
                    return Err(CliError::Transcript(format!(
                        "case {}: {} turn records for {} questions",
                        result.case_id,
                        result.log.len(),
                        result.num_questions
                    )));
                }
                out.push(CaseOutcome::Episode(result));
            }
            TranscriptRecord::NonInteractive { result } => {
                out.push(CaseOutcome::NonInteractive(result))
            }
            TranscriptRecord::Failure { case_id, error } => {
                out.push(CaseOutcome::Failed { case_id, error })
            }
        }
    }
    if let Some(case_id) = pending.keys().min() {
        return Err(CliError::Transcript(format!(
            "case {case_id}: turns without a result record"
        )));
    }
    Ok(out)
}

pub fn read_transcript(path: impl AsRef<Path>) -> Result<Vec<CaseOutcome>> {
    outcomes_from_lines(read_jsonl(path)?)
}

/// Episodes only, in file order.
pub fn read_episodes(path: impl AsRef<Path>) -> Result<Vec<EpisodeResult>> {
    Ok(read_transcript(path)?
        .into_iter()
        .filter_map(|o| match o {
            CaseOutcome::Episode(r) => Some(r),
            _ => None,
        })
        .collect())
}

/// One line of a results stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub run_fingerprint: String,
    pub grid_point: String,
    pub case_id: String,
    pub final_choice: Option<String>,
    pub correct: bool,
    pub invalid_output: bool,
    pub num_questions: usize,
    pub final_confidence: Option<f64>,
    pub status: Option<EpisodeStatus>,
    pub error: Option<String>,
}

impl CaseRecord {
    pub fn from_outcome(run_fingerprint: &str, grid_point: &str, outcome: &CaseOutcome) -> Self {
        let mut record = Self {
            run_fingerprint: run_fingerprint.to_string(),
            grid_point: grid_point.to_string(),
            case_id: outcome.case_id().to_string(),
            final_choice: None,
            correct: false,
            invalid_output: false,
            num_questions: 0,
            final_confidence: None,
            status: None,
            error: None,
        };
        match outcome {
            CaseOutcome::Episode(r) => {
                record.final_choice = Some(r.final_choice.clone());
                record.correct = r.correct;
                record.invalid_output = r.invalid_output;
                record.num_questions = r.num_questions;
                record.final_confidence = r.final_confidence();
                record.status = Some(r.status);
            }
            CaseOutcome::NonInteractive(r) => {
                record.final_choice = Some(r.final_choice.clone());
                record.correct = r.correct;
                record.invalid_output = r.invalid_output;
            }
            CaseOutcome::Failed { error, .. } => record.error = Some(error.clone()),
        }
        record
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

impl Outcome for CaseRecord {
    fn case_id(&self) -> &str {
        &self.case_id
    }
    fn final_choice(&self) -> &str {
        self.final_choice.as_deref().unwrap_or("")
    }
    fn is_correct(&self) -> bool {
        self.correct
    }
    fn questions_asked(&self) -> usize {
        self.num_questions
    }
}

pub fn write_results(path: impl AsRef<Path>, records: &[CaseRecord]) -> Result<()> {
    Ok(write_jsonl(path, records)?)
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<CaseRecord>> {
    Ok(read_jsonl(path)?)
}

/// A case's stated belief about the most commonly correct option.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeliefRecord {
    pub case_id: String,
    pub belief: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}
