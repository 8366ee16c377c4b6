//! The patient simulator and its reliability metrics.
//!
//! Five response variants answer an expert question from a [`PatientCase`]:
//! two read the full paragraph, three work from the atomic-fact list. The
//! fact-based variants report which facts they used, which is what makes
//! their output checkable. [`factuality_score`] and [`relevance_score`]
//! measure how well any variant sticks to the record.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::backend::{cosine, Backend, GenerationRequest, Sampling};
use crate::convert::{decompose_facts_tagged, RelevancePair};
use crate::episode::PatientCase;
use crate::template::{TemplateId, TemplateSet};
use crate::text::{
    is_sentinel, normalize_lexical, normalize_whitespace, parse_yes_no, split_sentences,
    strip_quotes, SENTINEL,
};
use crate::{Error, Result};

/// Maximum number of facts a fact-selecting patient may return.
pub const MAX_SELECTED_FACTS: usize = 2;

/// Cosine similarity at or above which a claim counts as supported.
pub const DEFAULT_CONSISTENCY_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatientVariant {
    /// Answers from the full paragraph with a bare prompt.
    Direct,
    /// Answers from the full paragraph with explicit instructions.
    Instruct,
    /// Recites at most two matching atomic facts.
    FactSelect,
    /// Like `FactSelect`, then rewrites the facts in first person.
    FactFp,
    /// One yes/no classification per fact; returns every match.
    FactClassify,
}

impl PatientVariant {
    pub const ALL: [PatientVariant; 5] = [
        Self::Direct,
        Self::Instruct,
        Self::FactSelect,
        Self::FactFp,
        Self::FactClassify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::Instruct => "instruct",
            Self::FactSelect => "fact_select",
            Self::FactFp => "fact_fp",
            Self::FactClassify => "fact_classify",
        }
    }

    pub fn uses_facts(self) -> bool {
        matches!(self, Self::FactSelect | Self::FactFp | Self::FactClassify)
    }
}

impl std::str::FromStr for PatientVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown patient variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientResponse {
    pub text: String,
    pub variant: PatientVariant,
    /// 0-based indices into the case's atomic facts, in fact order for
    /// `FactClassify` and in order of mention otherwise.
    #[serde(default)]
    pub selected_fact_indices: Vec<usize>,
    pub is_sentinel: bool,
}

impl PatientResponse {
    /// The "cannot answer" reply.
    pub fn sentinel(variant: PatientVariant) -> Self {
        Self {
            text: SENTINEL.to_string(),
            variant,
            selected_fact_indices: Vec::new(),
            is_sentinel: true,
        }
    }

    fn from_facts(variant: PatientVariant, case: &PatientCase, indices: Vec<usize>) -> Self {
        if indices.is_empty() {
            return Self::sentinel(variant);
        }
        let text = indices
            .iter()
            .map(|&i| case.atomic_facts[i].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        Self {
            text,
            variant,
            selected_fact_indices: indices,
            is_sentinel: false,
        }
    }
}

/// Renders facts as the numbered list the prompts expect: `1.fact`.
pub fn render_fact_list(facts: &[String]) -> String {
    facts
        .iter()
        .enumerate()
        .map(|(i, f)| format!("{}.{f}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Answers one expert question.
pub fn respond(
    variant: PatientVariant,
    case: &PatientCase,
    question: &str,
    backend: &dyn Backend,
    templates: &TemplateSet,
) -> Result<PatientResponse> {
    respond_with(
        variant,
        case,
        question,
        backend,
        templates,
        Sampling::default(),
    )
}

pub fn respond_with(
    variant: PatientVariant,
    case: &PatientCase,
    question: &str,
    backend: &dyn Backend,
    templates: &TemplateSet,
    sampling: Sampling,
) -> Result<PatientResponse> {
    let question = question.trim();
    if question.is_empty() {
        return Err(Error::InvalidTurn("empty question for the patient".into()));
    }
    let tag = format!("{}/patient", case.id);
    let ask = |id: TemplateId, vars: &[(&str, &str)]| -> Result<String> {
        let messages = templates.render(id, vars)?;
        let request = GenerationRequest::new(tag.as_str(), messages).sampled(sampling);
        Ok(backend.generate(&request)?.remove(0))
    };
    match variant {
        PatientVariant::Direct | PatientVariant::Instruct => {
            let id = if variant == PatientVariant::Direct {
                TemplateId::PatientDirect
            } else {
                TemplateId::PatientInstruct
            };
            let reply = ask(
                id,
                &[("context", &case.full_context), ("question", question)],
            )?;
            let text = strip_quotes(&reply).to_string();
            Ok(PatientResponse {
                is_sentinel: is_sentinel(&text),
                text,
                variant,
                selected_fact_indices: Vec::new(),
            })
        }
        PatientVariant::FactSelect => {
            let facts = render_fact_list(&case.atomic_facts);
            let reply = ask(
                TemplateId::PatientFactSelect,
                &[("facts", &facts), ("question", question)],
            )?;
            let indices = clip_selection(&case.id, match_facts(&reply, &case.atomic_facts));
            if indices.is_empty() && !is_sentinel(&reply) {
                tracing::warn!(case = %case.id, reply = %reply, "no fact matched, answering with the sentinel");
            }
            Ok(PatientResponse::from_facts(variant, case, indices))
        }
        PatientVariant::FactFp => {
            let facts = render_fact_list(&case.atomic_facts);
            let reply = ask(
                TemplateId::PatientFactFp,
                &[("facts", &facts), ("question", question)],
            )?;
            Ok(parse_first_person(&case.id, &reply, case))
        }
        PatientVariant::FactClassify => {
            let indices = classify_facts(case, question, backend, templates, sampling)?;
            Ok(PatientResponse::from_facts(variant, case, indices))
        }
    }
}

/// Indices of the facts that occur in `reply` after whitespace
/// normalization, in order of first mention. A fact contained in a longer
/// matched fact at the same place is dropped.
pub fn match_facts(reply: &str, facts: &[String]) -> Vec<usize> {
    let haystack = normalize_whitespace(reply).to_lowercase();
    let mut hits: Vec<(usize, usize, usize)> = Vec::new(); // (start, end, fact)
    for (i, fact) in facts.iter().enumerate() {
        let needle = normalize_whitespace(fact).to_lowercase();
        if needle.is_empty() {
            continue;
        }
        if let Some(start) = haystack.find(&needle) {
            hits.push((start, start + needle.len(), i));
        }
    }
    // Longest first at equal starts so nested matches are dropped below.
    hits.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    let mut kept: Vec<(usize, usize, usize)> = Vec::new();
    for hit in hits {
        let nested = kept.iter().any(|k| k.0 <= hit.0 && hit.1 <= k.1);
        if !nested {
            kept.push(hit);
        }
    }
    kept.into_iter().map(|(_, _, i)| i).collect()
}

fn clip_selection(case_id: &str, mut indices: Vec<usize>) -> Vec<usize> {
    if indices.len() > MAX_SELECTED_FACTS {
        tracing::warn!(
            case = %case_id,
            selected = indices.len(),
            "patient selected more than {MAX_SELECTED_FACTS} facts, keeping the first"
        );
        indices.truncate(MAX_SELECTED_FACTS);
    }
    indices
}

fn section<'a>(reply: &'a str, start: &str, end: Option<&str>) -> Option<&'a str> {
    let lower = reply.to_ascii_lowercase();
    let from = lower.find(&start.to_ascii_lowercase())? + start.len();
    let to = end
        .and_then(|e| {
            lower[from..]
                .find(&e.to_ascii_lowercase())
                .map(|p| from + p)
        })
        .unwrap_or(reply.len());
    Some(&reply[from..to])
}

fn parse_first_person(case_id: &str, reply: &str, case: &PatientCase) -> PatientResponse {
    let statements = section(reply, "STATEMENTS:", Some("FIRST PERSON:")).unwrap_or(reply);
    let indices = clip_selection(case_id, match_facts(statements, &case.atomic_facts));
    let first_person = section(reply, "FIRST PERSON:", None)
        .map(|s| normalize_whitespace(strip_quotes(s)))
        .filter(|s| !s.is_empty());
    if indices.is_empty() {
        if !is_sentinel(reply) {
            tracing::warn!(case = %case_id, reply = %reply, "no fact matched, answering with the sentinel");
        }
        return PatientResponse::sentinel(PatientVariant::FactFp);
    }
    let text = match first_person {
        Some(fp) if !is_sentinel(&fp) => fp,
        _ => PatientResponse::from_facts(PatientVariant::FactFp, case, indices.clone()).text,
    };
    PatientResponse {
        text,
        variant: PatientVariant::FactFp,
        selected_fact_indices: indices,
        is_sentinel: false,
    }
}

/// Runs the per-fact classifier and returns the indices answered YES.
/// Unparseable verdicts count as NO.
pub fn classify_facts(
    case: &PatientCase,
    question: &str,
    backend: &dyn Backend,
    templates: &TemplateSet,
    sampling: Sampling,
) -> Result<Vec<usize>> {
    let tag = format!("{}/classify", case.id);
    let mut selected = Vec::new();
    for (i, fact) in case.atomic_facts.iter().enumerate() {
        let messages = templates.render(
            TemplateId::PatientFactClassify,
            &[("statement", fact), ("question", question)],
        )?;
        let reply = backend
            .generate(&GenerationRequest::new(tag.as_str(), messages).sampled(sampling))?
            .remove(0);
        match parse_yes_no(&reply) {
            Some(true) => selected.push(i),
            Some(false) => {}
            None => {
                tracing::warn!(case = %case.id, fact = i, reply = %reply, "unparseable classifier verdict, treating as NO")
            }
        }
    }
    Ok(selected)
}

/// How a claim is checked against the record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ConsistencyMode {
    /// Whitespace-normalized string equality with some reference.
    ExactMatch,
    /// Max cosine similarity against the references reaches the threshold.
    EmbeddingThreshold(f64),
    /// A judge prompt answers YES for some reference.
    JudgeBinary,
}

impl Default for ConsistencyMode {
    fn default() -> Self {
        Self::EmbeddingThreshold(DEFAULT_CONSISTENCY_THRESHOLD)
    }
}

/// Checks one claim against a non-empty list of reference statements.
pub fn is_consistent(
    claim: &str,
    references: &[String],
    mode: ConsistencyMode,
    backend: &dyn Backend,
    templates: &TemplateSet,
) -> Result<bool> {
    is_consistent_tagged(claim, references, mode, backend, templates, "judge")
}

fn is_consistent_tagged(
    claim: &str,
    references: &[String],
    mode: ConsistencyMode,
    backend: &dyn Backend,
    templates: &TemplateSet,
    tag: &str,
) -> Result<bool> {
    if references.is_empty() {
        return Err(Error::Metric("no reference statements".into()));
    }
    match mode {
        ConsistencyMode::ExactMatch => {
            let claim = normalize_whitespace(claim);
            Ok(references.iter().any(|r| normalize_whitespace(r) == claim))
        }
        ConsistencyMode::EmbeddingThreshold(threshold) => {
            let mut texts = Vec::with_capacity(references.len() + 1);
            texts.push(claim.to_string());
            texts.extend(references.iter().cloned());
            let vectors = backend
                .embed(&texts)
                .map_err(|e| Error::Metric(format!("embedding failed: {e}")))?;
            if vectors.len() != texts.len() {
                return Err(Error::Metric("embedding count mismatch".into()));
            }
            let best = vectors[1..]
                .iter()
                .map(|v| cosine(&vectors[0], v))
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(best >= threshold)
        }
        ConsistencyMode::JudgeBinary => {
            for reference in references {
                let messages = templates.render(
                    TemplateId::FactualityJudge,
                    &[("claim", claim), ("reference", reference)],
                )?;
                let reply = backend
                    .generate(&GenerationRequest::new(tag, messages))?
                    .remove(0);
                match parse_yes_no(&reply) {
                    Some(true) => return Ok(true),
                    Some(false) => {}
                    None => {
                        tracing::warn!(reply = %reply, "unparseable judge verdict, treating as inconsistent")
                    }
                }
            }
            Ok(false)
        }
    }
}

/// Where a response's atomic claims come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimSource {
    /// The decomposition prompt, as for patient records.
    #[default]
    Decompose,
    /// Offline sentence splitting.
    Sentences,
}

/// What claims are checked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    #[default]
    AtomicFacts,
    ContextSentences,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FactualityOptions {
    pub claims: ClaimSource,
    pub reference: ReferenceSource,
    pub mode: ConsistencyMode,
}

impl FactualityOptions {
    /// First-person answers paraphrase the record, so they get the judge.
    pub fn for_variant(variant: PatientVariant) -> Self {
        let mode = if variant == PatientVariant::FactFp {
            ConsistencyMode::JudgeBinary
        } else {
            ConsistencyMode::default()
        };
        Self {
            mode,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FactualityReport {
    pub per_response_scores: Vec<f64>,
    pub mean_score: f64,
    pub total_atomic_claims: usize,
    pub supported_claims: usize,
    pub excluded_sentinel: usize,
    /// Responses that yielded no claims.
    pub excluded_empty: usize,
}

impl FactualityReport {
    /// Pools reports from several cases into one average over all responses.
    pub fn merge(reports: &[FactualityReport]) -> Result<Self> {
        let mut out = FactualityReport::default();
        for r in reports {
            out.per_response_scores
                .extend_from_slice(&r.per_response_scores);
            out.total_atomic_claims += r.total_atomic_claims;
            out.supported_claims += r.supported_claims;
            out.excluded_sentinel += r.excluded_sentinel;
            out.excluded_empty += r.excluded_empty;
        }
        out.mean_score = order_free_mean(&out.per_response_scores)
            .ok_or_else(|| Error::Metric("no scorable responses".into()))?;
        Ok(out)
    }
}

/// Mean that does not depend on input order: values are summed sorted.
pub(crate) fn order_free_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(sorted.iter().sum::<f64>() / sorted.len() as f64)
}

/// Share of supported atomic claims per response, averaged over responses.
/// Sentinel replies and replies without claims are left out of the average.
pub fn factuality_score(
    responses: &[PatientResponse],
    case: &PatientCase,
    options: FactualityOptions,
    backend: &dyn Backend,
    templates: &TemplateSet,
) -> Result<FactualityReport> {
    if responses.is_empty() {
        return Err(Error::Metric("no responses to score".into()));
    }
    let references = match options.reference {
        ReferenceSource::AtomicFacts => case.atomic_facts.clone(),
        ReferenceSource::ContextSentences => split_sentences(&case.full_context),
    };
    let items: Vec<(&PatientResponse, &[String])> = responses
        .iter()
        .map(|r| (r, references.as_slice()))
        .collect();
    claim_support(&items, &case.id, options, backend, templates)
}

/// Claim-level relevance: the share of each response's claims that agree
/// with that response's own ground-truth statements, averaged over scorable
/// responses. `truths[i]` pairs with `responses[i]`.
pub fn claim_relevance_score(
    responses: &[PatientResponse],
    truths: &[Vec<String>],
    case: &PatientCase,
    options: FactualityOptions,
    backend: &dyn Backend,
    templates: &TemplateSet,
) -> Result<FactualityReport> {
    if responses.is_empty() {
        return Err(Error::Metric("no responses to score".into()));
    }
    if responses.len() != truths.len() {
        return Err(Error::Metric(format!(
            "{} responses but {} ground-truth sets",
            responses.len(),
            truths.len()
        )));
    }
    let items: Vec<(&PatientResponse, &[String])> = responses
        .iter()
        .zip(truths)
        .map(|(r, t)| (r, t.as_slice()))
        .collect();
    claim_support(&items, &case.id, options, backend, templates)
}

fn claim_support(
    items: &[(&PatientResponse, &[String])],
    case_id: &str,
    options: FactualityOptions,
    backend: &dyn Backend,
    templates: &TemplateSet,
) -> Result<FactualityReport> {
    let claim_prefix = format!("{case_id}/claims");
    let judge_tag = format!("{case_id}/judge");
    let mut report = FactualityReport::default();
    for (response, references) in items {
        if response.is_sentinel || is_sentinel(&response.text) {
            report.excluded_sentinel += 1;
            continue;
        }
        let claims = match options.claims {
            ClaimSource::Sentences => split_sentences(&response.text),
            ClaimSource::Decompose if response.text.trim().is_empty() => Vec::new(),
            ClaimSource::Decompose => {
                match decompose_facts_tagged(&response.text, backend, templates, &claim_prefix) {
                    Ok(c) => c,
                    Err(Error::Decomposition(reason)) => {
                        tracing::warn!(case = %case_id, %reason, "response yielded no claims");
                        Vec::new()
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        if claims.is_empty() {
            report.excluded_empty += 1;
            continue;
        }
        let mut supported = 0;
        for claim in &claims {
            if is_consistent_tagged(
                claim,
                references,
                options.mode,
                backend,
                templates,
                &judge_tag,
            )? {
                supported += 1;
            }
        }
        report.total_atomic_claims += claims.len();
        report.supported_claims += supported;
        report
            .per_response_scores
            .push(supported as f64 / claims.len() as f64);
    }
    report.mean_score = order_free_mean(&report.per_response_scores)
        .ok_or_else(|| Error::Metric(format!("case {case_id}: no scorable responses")))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub per_pair_similarities: Vec<f64>,
    pub mean_score: f64,
}

impl RelevanceReport {
    pub fn from_similarities(per_pair_similarities: Vec<f64>) -> Result<Self> {
        let mean_score = order_free_mean(&per_pair_similarities)
            .ok_or_else(|| Error::Metric("empty relevance set".into()))?;
        Ok(Self {
            per_pair_similarities,
            mean_score,
        })
    }

    pub fn merge(reports: &[RelevanceReport]) -> Result<Self> {
        Self::from_similarities(
            reports
                .iter()
                .flat_map(|r| r.per_pair_similarities.iter().copied())
                .collect(),
        )
    }
}

/// Asks each synthetic question and compares the answer with the fact it was
/// built from by embedding cosine.
pub fn relevance_score(
    evalset: &[RelevancePair],
    variant: PatientVariant,
    case: &PatientCase,
    backend: &dyn Backend,
    templates: &TemplateSet,
) -> Result<RelevanceReport> {
    if evalset.is_empty() {
        return Err(Error::Metric(format!(
            "case {}: empty relevance set",
            case.id
        )));
    }
    let mut texts = Vec::with_capacity(evalset.len() * 2);
    for pair in evalset {
        let response = respond(variant, case, &pair.atomic_question, backend, templates)?;
        texts.push(response.text);
        texts.push(pair.ground_truth_statement.clone());
    }
    let vectors = backend
        .embed(&texts)
        .map_err(|e| Error::Metric(format!("embedding failed: {e}")))?;
    if vectors.len() != texts.len() {
        return Err(Error::Metric("embedding count mismatch".into()));
    }
    RelevanceReport::from_similarities(
        vectors
            .chunks(2)
            .map(|pair| cosine(&pair[0], &pair[1]))
            .collect(),
    )
}

/// Drops repeated questions, comparing lowercase text without punctuation.
/// First occurrences are kept in order.
pub fn dedup_questions<S: AsRef<str>>(questions: &[S]) -> Vec<String> {
    let mut seen = HashSet::new();
    questions
        .iter()
        .map(AsRef::as_ref)
        .filter(|q| !q.trim().is_empty() && seen.insert(normalize_lexical(q)))
        .map(str::to_string)
        .collect()
}

/// Answers each distinct question once.
pub fn collect_responses<S: AsRef<str>>(
    variant: PatientVariant,
    case: &PatientCase,
    questions: &[S],
    backend: &dyn Backend,
    templates: &TemplateSet,
) -> Result<Vec<(String, PatientResponse)>> {
    dedup_questions(questions)
        .into_iter()
        .map(|q| {
            let r = respond(variant, case, &q, backend, templates)?;
            Ok((q, r))
        })
        .collect()
}
