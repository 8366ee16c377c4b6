//! Conversion of single-turn multiple-choice records into patient cases.
//!
//! The first sentence of a record gives the intake (age, gender, chief
//! complaint); the whole paragraph is decomposed into atomic facts once, at
//! conversion time, and stored with the case.

use std::path::Path;
use std::sync::LazyLock;

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, GenerationRequest};
use crate::episode::PatientCase;
use crate::jsonl::{read_jsonl, write_jsonl};
use crate::template::{TemplateId, TemplateSet};
use crate::text::{after_marker, parse_numbered_list, split_sentences, strip_quotes};
use crate::{Error, Result};

/// A raw multiple-choice record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub context: String,
    pub question: String,
    pub options: IndexMap<String, String>,
    pub answer_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_dataset: Option<String>,
}

/// A synthetic question whose ground-truth answer is one atomic fact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevancePair {
    pub atomic_question: String,
    pub ground_truth_statement: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Intake {
    pub age: Option<u32>,
    pub gender: Option<String>,
    pub chief_complaint: String,
}

static INTAKE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?x)^
        (?i:an?)\s+
        (?:(\d{1,3})-year-old\s+)?
        (.+?)\s+
        (?:presents|comes|is\ brought|is\ admitted|is\ evaluated|is\ referred|visits|is\ seen|arrives|returns|reports)\b
        .*?\b(?:with|because\ of|for)\s+
        (.+?)\.?$",
    )
    .unwrap()
});

/// Pattern-based intake extraction from a record's first sentence.
pub fn parse_intake(sentence: &str) -> Option<Intake> {
    let caps = INTAKE.captures(sentence.trim())?;
    let age = caps.get(1).and_then(|m| m.as_str().parse().ok());
    let gender = caps[2].trim().to_string();
    if gender.split_whitespace().count() > 8 {
        return None;
    }
    let complaint = caps[3].trim().to_string();
    if complaint.is_empty() {
        return None;
    }
    Some(Intake {
        age,
        gender: Some(gender),
        chief_complaint: complaint,
    })
}

fn intake_from_backend(
    id: &str,
    sentence: &str,
    backend: &dyn Backend,
    templates: &TemplateSet,
) -> Result<Intake> {
    let messages = templates.render(TemplateId::ChiefComplaint, &[("sentence", sentence)])?;
    let reply = backend
        .generate(&GenerationRequest::new(format!("{id}/intake"), messages))?
        .remove(0);
    let field = |label: &str| -> Option<String> {
        reply.lines().find_map(|line| {
            let (k, v) = line.split_once(':')?;
            if !k.trim().eq_ignore_ascii_case(label) {
                return None;
            }
            let v = strip_quotes(v).trim_end_matches('.').trim();
            (!v.is_empty() && !v.eq_ignore_ascii_case("none")).then(|| v.to_string())
        })
    };
    let chief_complaint = field("chief complaint").ok_or_else(|| Error::Conversion {
        id: id.to_string(),
        reason: "no chief complaint in the first sentence".into(),
    })?;
    Ok(Intake {
        age: field("age").and_then(|a| {
            a.split(|c: char| !c.is_ascii_digit())
                .find(|s| !s.is_empty())?
                .parse()
                .ok()
        }),
        gender: field("gender"),
        chief_complaint,
    })
}

/// Converts one raw record. The intake comes from the first sentence by
/// pattern, falling back to a model extraction; atomic facts are decomposed
/// from the full context.
pub fn parse_case(
    raw: &RawRecord,
    backend: &dyn Backend,
    templates: &TemplateSet,
) -> Result<PatientCase> {
    let conversion = |reason: &str| Error::Conversion {
        id: raw.id.clone(),
        reason: reason.to_string(),
    };
    let context = raw.context.trim();
    if context.is_empty() {
        return Err(conversion("empty context"));
    }
    if raw.options.len() < 2 || !raw.options.contains_key(&raw.answer_label) {
        return Err(conversion(
            "answer label must be one of at least two options",
        ));
    }
    let first = split_sentences(context)
        .into_iter()
        .next()
        .ok_or_else(|| conversion("no first sentence"))?;
    let intake = match parse_intake(&first) {
        Some(i) => i,
        None => intake_from_backend(&raw.id, &first, backend, templates)?,
    };
    let atomic_facts = decompose_facts_tagged(context, backend, templates, &raw.id)
        .map_err(|e| conversion(&e.to_string()))?;
    let case = PatientCase {
        id: raw.id.clone(),
        age: intake.age,
        gender: intake.gender,
        chief_complaint: intake.chief_complaint,
        atomic_facts,
        full_context: context.to_string(),
        mcq_text: raw.question.trim().to_string(),
        options: raw.options.clone(),
        answer_label: raw.answer_label.clone(),
        source_dataset: raw.source_dataset.clone().unwrap_or_default(),
        raw_record: serde_json::to_string(raw)?,
    };
    case.validate()?;
    Ok(case)
}

/// Splits a paragraph into atomic facts with the decomposition template.
pub fn decompose_facts(
    context: &str,
    backend: &dyn Backend,
    templates: &TemplateSet,
) -> Result<Vec<String>> {
    decompose_facts_tagged(context, backend, templates, "facts")
}

pub(crate) fn decompose_facts_tagged(
    context: &str,
    backend: &dyn Backend,
    templates: &TemplateSet,
    tag_prefix: &str,
) -> Result<Vec<String>> {
    if context.trim().is_empty() {
        return Err(Error::Decomposition("empty context".into()));
    }
    let messages = templates.render(TemplateId::FactDecompose, &[("context", context)])?;
    let reply = backend
        .generate(&GenerationRequest::new(
            format!("{tag_prefix}/decompose"),
            messages,
        ))?
        .remove(0);
    let facts: Vec<String> = parse_numbered_list(&reply)
        .into_iter()
        .map(|(_, f)| f)
        .collect();
    if facts.is_empty() {
        return Err(Error::Decomposition(format!(
            "no numbered list in output: {:?}",
            reply.chars().take(80).collect::<String>()
        )));
    }
    Ok(facts)
}

/// One synthetic question per atomic fact. Facts whose rephrasing comes back
/// empty are skipped with a warning.
pub fn build_relevance_evalset(
    case: &PatientCase,
    backend: &dyn Backend,
    templates: &TemplateSet,
) -> Result<Vec<RelevancePair>> {
    if case.atomic_facts.is_empty() {
        return Err(Error::Conversion {
            id: case.id.clone(),
            reason: "no atomic facts to build relevance questions from".into(),
        });
    }
    let mut pairs = Vec::with_capacity(case.atomic_facts.len());
    for fact in &case.atomic_facts {
        let messages = templates.render(TemplateId::RelevanceQuestion, &[("statement", fact)])?;
        let reply = match backend.generate(&GenerationRequest::new(
            format!("{}/rephrase", case.id),
            messages,
        )) {
            Ok(mut r) => r.remove(0),
            Err(Error::EmptyCompletion { .. }) => String::new(),
            Err(e) => return Err(e),
        };
        let question = after_marker(&reply, "atomic question").unwrap_or(&reply);
        let question = strip_quotes(question);
        if question.is_empty() {
            tracing::warn!(case = %case.id, fact = %fact, "empty rephrased question, skipping");
            continue;
        }
        pairs.push(RelevancePair {
            atomic_question: question.to_string(),
            ground_truth_statement: fact.clone(),
        });
    }
    Ok(pairs)
}

pub fn write_dataset(path: impl AsRef<Path>, cases: &[PatientCase]) -> Result<()> {
    write_jsonl(path, cases)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<PatientCase>> {
    read_jsonl(path)
}

pub fn read_raw_records(path: impl AsRef<Path>) -> Result<Vec<RawRecord>> {
    read_jsonl(path)
}
