//! Post-hoc transforms of a finished conversation log and re-answering from
//! the transformed history.
//!
//! `Relevant` keeps only turns the record could answer, `Unique` drops
//! near-repeated questions, and `Para` rewrites the log as one paragraph of
//! statements, turning unanswered questions into "... is unavailable."
//! sentences.

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, GenerationRequest};
use crate::episode::{EpisodeConfig, PatientCase, Turn};
use crate::expert::{
    patient_section, render_conversation_log, EpisodeResult, Session, INVALID_CHOICE,
};
use crate::template::{TemplateId, TemplateSet};
use crate::text::{normalize_lexical, normalize_whitespace, strip_quotes};
use crate::{Error, Result};

/// Default similarity at or above which two questions count as repeats.
pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.9;

/// Turns whose response came from the record, in order.
pub fn filter_relevant(log: &[Turn]) -> Vec<Turn> {
    log.iter().filter(|t| t.answered).cloned().collect()
}

/// Normalized edit similarity of two questions after lowercasing and
/// stripping punctuation, in [0, 1].
pub fn question_similarity(a: &str, b: &str) -> f64 {
    strsim::normalized_levenshtein(&normalize_lexical(a), &normalize_lexical(b))
}

/// Keeps the first turn of every group of similar questions. A turn is kept
/// when its question is below `threshold` similarity to every kept one.
pub fn filter_unique(log: &[Turn], threshold: f64) -> Result<Vec<Turn>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!(
            "similarity threshold {threshold} outside (0, 1]"
        )));
    }
    let mut kept: Vec<Turn> = Vec::new();
    for turn in log {
        let repeat = kept
            .iter()
            .any(|k| question_similarity(&k.expert_question, &turn.expert_question) >= threshold);
        if !repeat {
            kept.push(turn.clone());
        }
    }
    Ok(kept)
}

/// Statement used when a question cannot be rewritten.
pub fn fallback_statement(question: &str) -> String {
    let topic = normalize_whitespace(question).replace('?', "");
    format!("Information about: {} is unavailable.", topic.trim())
}

fn rewrite_unanswered(
    question: &str,
    backend: &dyn Backend,
    templates: &TemplateSet,
) -> Result<String> {
    let messages = templates.render(TemplateId::ParagraphRewrite, &[("question", question)])?;
    let reply = match backend.generate(&GenerationRequest::new("rewrite", messages)) {
        Ok(mut r) => r.remove(0),
        Err(e) => {
            tracing::warn!(error = %e, "rewrite failed, using the generic statement");
            return Ok(fallback_statement(question));
        }
    };
    let statement = normalize_whitespace(strip_quotes(&reply));
    if statement.is_empty() || statement.contains('?') {
        tracing::warn!(reply = %reply, "unusable rewrite, using the generic statement");
        return Ok(fallback_statement(question));
    }
    Ok(statement)
}

/// One paragraph in turn order: answered responses verbatim, unanswered
/// questions as "unavailable" statements. Without a backend every
/// unanswered turn gets the generic statement.
pub fn to_paragraph(
    log: &[Turn],
    backend: Option<&dyn Backend>,
    templates: &TemplateSet,
) -> Result<String> {
    let mut parts = Vec::with_capacity(log.len());
    for turn in log {
        if turn.answered {
            parts.push(turn.patient_response.trim().to_string());
        } else {
            parts.push(match backend {
                Some(b) => rewrite_unanswered(&turn.expert_question, b, templates)?,
                None => fallback_statement(&turn.expert_question),
            });
        }
    }
    Ok(parts.join(" "))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformOptions {
    pub relevant: bool,
    pub unique: bool,
    pub paragraph: bool,
    pub similarity_threshold: f64,
}

impl Default for TransformOptions {
    fn default() -> Self {
        Self {
            relevant: false,
            unique: false,
            paragraph: false,
            similarity_threshold: DEFAULT_SIMILARITY_THRESHOLD,
        }
    }
}

impl TransformOptions {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.relevant {
            parts.push("relevant");
        }
        if self.unique {
            parts.push("unique");
        }
        if self.paragraph {
            parts.push("para");
        }
        if parts.is_empty() {
            "original".to_string()
        } else {
            parts.join("+")
        }
    }
}

/// Relevant first, then Unique: unanswered questions are the usual repeats.
pub fn apply_filters(log: &[Turn], options: &TransformOptions) -> Result<Vec<Turn>> {
    let mut out = log.to_vec();
    if options.relevant {
        out = filter_relevant(&out);
    }
    if options.unique {
        out = filter_unique(&out, options.similarity_threshold)?;
    }
    Ok(out)
}

/// A transformed history and the answer given from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reanswer {
    pub case_id: String,
    pub transform: String,
    pub kept_turns: usize,
    pub original_turns: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paragraph: Option<String>,
    pub final_choice: String,
    pub correct: bool,
}

/// Applies the transforms to an episode's log and asks for an answer from
/// the result in a single call.
pub fn reanswer(
    case: &PatientCase,
    result: &EpisodeResult,
    options: &TransformOptions,
    config: &EpisodeConfig,
    backend: &dyn Backend,
    templates: &TemplateSet,
) -> Result<Reanswer> {
    if case.id != result.case_id {
        return Err(Error::InvalidState(format!(
            "result for {} paired with case {}",
            result.case_id, case.id
        )));
    }
    let kept = apply_filters(&result.log, options)?;
    let (section, paragraph) = if options.paragraph {
        let para = to_paragraph(&kept, Some(backend), templates)?;
        let text = if para.is_empty() {
            result.initial_info.clone()
        } else {
            format!("{} {para}", result.initial_info)
        };
        (patient_section(&text), Some(para))
    } else {
        let knowledge = templates.render_user(
            TemplateId::PatientKnowledge,
            &[
                ("initial_info", &result.initial_info),
                ("conversation_log", &render_conversation_log(&kept)),
            ],
        )?;
        (format!("{knowledge}\n\n"), None)
    };
    let session = Session::new(case, config, backend, templates)?;
    let choice = session
        .answer_with_context(&section, "reanswer")?
        .unwrap_or_else(|| INVALID_CHOICE.to_string());
    Ok(Reanswer {
        case_id: case.id.clone(),
        transform: options.label(),
        kept_turns: kept.len(),
        original_turns: result.log.len(),
        paragraph,
        correct: choice == case.answer_label,
        final_choice: choice,
    })
}
