//! The expert: initial assessment, abstention, question generation and the
//! final decision, plus the driver that runs a whole episode.
//!
//! Every module prompt is appended to one conversation thread that opens with
//! the task framing and the expert's own initial assessment, so the
//! assessment conditions every later step.

use std::collections::HashMap;
use std::sync::LazyLock;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, ChatMessage, GenerationRequest, Sampling};
use crate::episode::{
    render_initial_info, AbstainStrategy, AbstentionRecord, Decision, EpisodeConfig, EpisodeState,
    EpisodeStatus, PatientCase, ScaleLevel, Threshold, Turn,
};
use crate::patient::respond_with;
use crate::template::{TemplateId, TemplateSet};
use crate::text::{after_marker, fnv1a64, normalize_whitespace, parse_yes_no, strip_quotes};
use crate::{Error, Result};

/// Label recorded when no option could be read from the decision call.
pub const INVALID_CHOICE: &str = "INVALID";

/// Numeric confidences this close outside [0, 1] are clamped rather than
/// rejected.
const CLAMP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    NumericConfidence,
    BinaryDecision,
    ScaleRating,
    OptionChoice,
    AtomicQuestion,
    Rationale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ParsedValue {
    Confidence(f64),
    Binary(bool),
    Scale(ScaleLevel),
    Option(String),
    Question(String),
    Rationale(String),
}

impl ParsedValue {
    pub fn kind(&self) -> OutputKind {
        match self {
            Self::Confidence(_) => OutputKind::NumericConfidence,
            Self::Binary(_) => OutputKind::BinaryDecision,
            Self::Scale(_) => OutputKind::ScaleRating,
            Self::Option(_) => OutputKind::OptionChoice,
            Self::Question(_) => OutputKind::AtomicQuestion,
            Self::Rationale(_) => OutputKind::Rationale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub value: ParsedValue,
    pub raw: String,
}

impl ParsedOutput {
    pub fn kind(&self) -> OutputKind {
        self.value.kind()
    }
}

static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(-?(?:\d+(?:\.\d+)?|\.\d+))(\s*%)?").unwrap());

static SCALE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(neither\s+confident\s+(?:or|nor)\s+unconfident|somewhat\s+unconfident|somewhat\s+confident|very\s+unconfident|very\s+confident)\b",
    )
    .unwrap()
});

/// Reads one output of the requested kind. `labels` are the valid option
/// labels and only matter for [`OutputKind::OptionChoice`]. `None` is a parse
/// failure.
pub fn parse_model_output(kind: OutputKind, text: &str, labels: &[String]) -> Option<ParsedOutput> {
    let decision_scope = || after_marker(text, "decision").unwrap_or(text);
    let value = match kind {
        OutputKind::NumericConfidence => {
            ParsedValue::Confidence(parse_confidence(decision_scope())?)
        }
        OutputKind::BinaryDecision => ParsedValue::Binary(parse_yes_no(text)?),
        OutputKind::ScaleRating => {
            let m = SCALE.find(decision_scope())?;
            let words = normalize_whitespace(m.as_str()).to_lowercase();
            let level = match words.as_str() {
                "very unconfident" => ScaleLevel::VeryUnconfident,
                "somewhat unconfident" => ScaleLevel::SomewhatUnconfident,
                "somewhat confident" => ScaleLevel::SomewhatConfident,
                "very confident" => ScaleLevel::VeryConfident,
                _ => ScaleLevel::Neither,
            };
            ParsedValue::Scale(level)
        }
        OutputKind::OptionChoice => ParsedValue::Option(parse_option(text, labels)?),
        OutputKind::AtomicQuestion => {
            let q = after_marker(text, "atomic question").unwrap_or(text);
            let q = normalize_whitespace(strip_quotes(q));
            if q.is_empty() {
                return None;
            }
            ParsedValue::Question(q)
        }
        OutputKind::Rationale => {
            let lower = text.to_ascii_lowercase();
            let start = lower.find("reason:")? + "reason:".len();
            let end = lower[start..]
                .find("decision:")
                .map_or(text.len(), |p| start + p);
            let r = normalize_whitespace(strip_quotes(&text[start..end]));
            if r.is_empty() {
                return None;
            }
            ParsedValue::Rationale(r)
        }
    };
    Some(ParsedOutput {
        value,
        raw: text.to_string(),
    })
}

fn parse_confidence(scope: &str) -> Option<f64> {
    let caps = NUMBER.captures(scope)?;
    let mut v: f64 = caps[1].parse().ok()?;
    if caps.get(2).is_some() {
        v /= 100.0;
    }
    if (0.0..=1.0).contains(&v) {
        Some(v)
    } else if v > 1.0 && v - 1.0 <= CLAMP_TOLERANCE {
        Some(1.0)
    } else if v < 0.0 && -v <= CLAMP_TOLERANCE {
        Some(0.0)
    } else {
        None
    }
}

fn label_alternation(labels: &[String]) -> String {
    let mut sorted: Vec<&String> = labels.iter().collect();
    sorted.sort_by_key(|l| std::cmp::Reverse(l.len()));
    sorted
        .iter()
        .map(|l| regex::escape(l))
        .collect::<Vec<_>>()
        .join("|")
}

fn canonical_label(token: &str, labels: &[String]) -> Option<String> {
    labels
        .iter()
        .find(|l| l.as_str() == token)
        .or_else(|| labels.iter().find(|l| l.eq_ignore_ascii_case(token)))
        .cloned()
}

fn bare_token(s: &str) -> &str {
    strip_quotes(s).trim_matches(|c: char| {
        matches!(c, '(' | ')' | '[' | ']' | '*' | '.' | ':' | ',') || c.is_whitespace()
    })
}

/// Option-label grammar, in tiers; the first tier that yields exactly one
/// label wins:
/// 1. the token after the last `FINAL CHOICE:` marker;
/// 2. the whole reply is a label (`D`, `"D"`, `(D).`);
/// 3. `(X)`, `answer is X` or `option X` patterns.
fn parse_option(text: &str, labels: &[String]) -> Option<String> {
    if labels.is_empty() {
        return None;
    }
    if let Some(scope) = after_marker(text, "final choice") {
        let token = bare_token(scope)
            .split(|c: char| !c.is_alphanumeric())
            .next()
            .unwrap_or("");
        if let Some(l) = canonical_label(token, labels) {
            return Some(l);
        }
    }
    if let Some(l) = canonical_label(bare_token(text), labels) {
        return Some(l);
    }
    let alt = label_alternation(labels);
    let patterns = [
        format!(r"\(\s*({alt})\s*\)"),
        format!(r"(?i:answer\s+is|answer:|choice\s+is|option)\s*\(?\s*({alt})\b"),
    ];
    let mut found: Vec<String> = Vec::new();
    for p in &patterns {
        let re = Regex::new(p).ok()?;
        for caps in re.captures_iter(text) {
            let l = caps[1].to_string();
            if !found.contains(&l) {
                found.push(l);
            }
        }
    }
    match found.as_slice() {
        [one] => Some(one.clone()),
        _ => None,
    }
}

/// Self-consistency aggregate of one abstention call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Aggregate {
    /// Mean numeric confidence, rounded to 12 decimals so that decimal
    /// inputs such as 0.6, 0.8, 0.7 average to exactly 0.7.
    Confidence { mean: f64 },
    /// Ordinal sum and count; decisions compare integers.
    Scale { sum: u32, count: u32 },
    /// Mode of the yes/no votes; a tie is a NO.
    Binary { yes: usize, count: usize },
}

impl Aggregate {
    /// The aggregate on [0, 1]: the mean, the mapped ordinal mean, or the
    /// share of YES votes.
    pub fn confidence(&self) -> f64 {
        match *self {
            Self::Confidence { mean } => mean,
            Self::Scale { .. } => ScaleLevel::ordinal_to_unit(self.scale_mean().unwrap_or(1.0)),
            Self::Binary { yes, count } => yes as f64 / count as f64,
        }
    }

    pub fn scale_mean(&self) -> Option<f64> {
        match *self {
            Self::Scale { sum, count } => Some(f64::from(sum) / f64::from(count)),
            _ => None,
        }
    }

    /// Level nearest to the ordinal mean, halves rounding up.
    pub fn rating(&self) -> Option<ScaleLevel> {
        let mean = self.scale_mean()?;
        ScaleLevel::from_ordinal((mean + 0.5).floor() as u32)
    }

    /// Majority vote; ties resolve to NO.
    pub fn mode(&self) -> Option<bool> {
        match *self {
            Self::Binary { yes, count } => Some(2 * yes > count),
            _ => None,
        }
    }
}

fn round12(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

/// Mean for numeric and ordinal samples, mode for binary ones.
pub fn aggregate_samples(samples: &[ParsedOutput]) -> Result<Aggregate> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidState("no samples to aggregate".into()))?;
    let kind = first.kind();
    if samples.iter().any(|s| s.kind() != kind) {
        return Err(Error::InvalidState("mixed sample kinds".into()));
    }
    let n = samples.len();
    match kind {
        OutputKind::NumericConfidence => {
            let sum: f64 = samples
                .iter()
                .map(|s| match s.value {
                    ParsedValue::Confidence(v) => v,
                    _ => unreachable!(),
                })
                .sum();
            Ok(Aggregate::Confidence {
                mean: round12(sum / n as f64),
            })
        }
        OutputKind::ScaleRating => {
            let sum = samples
                .iter()
                .map(|s| match s.value {
                    ParsedValue::Scale(l) => l.ordinal(),
                    _ => unreachable!(),
                })
                .sum();
            Ok(Aggregate::Scale {
                sum,
                count: n as u32,
            })
        }
        OutputKind::BinaryDecision => {
            let yes = samples
                .iter()
                .filter(|s| s.value == ParsedValue::Binary(true))
                .count();
            Ok(Aggregate::Binary { yes, count: n })
        }
        other => Err(Error::InvalidState(format!(
            "{other:?} samples cannot be aggregated"
        ))),
    }
}

/// Maps an aggregate to a decision under the strategy's threshold.
pub fn decide(aggregate: &Aggregate, threshold: Threshold) -> Result<Decision> {
    let answer = match (*aggregate, threshold) {
        (Aggregate::Confidence { mean }, Threshold::Confidence(t)) => mean >= t,
        (Aggregate::Scale { sum, count }, Threshold::Scale(level)) => {
            sum >= level.ordinal() * count
        }
        (Aggregate::Binary { .. }, Threshold::None) => aggregate.mode() == Some(true),
        (a, t) => {
            return Err(Error::Config(format!(
                "threshold {t:?} does not apply to {a:?}"
            )))
        }
    };
    Ok(if answer {
        Decision::Answer
    } else {
        Decision::Ask
    })
}

/// The options as the expert sees them. With a shuffle seed the option
/// texts are permuted over the same labels; answers are mapped back.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionView {
    shown: IndexMap<String, String>,
    to_original: HashMap<String, String>,
}

impl OptionView {
    pub fn new(case: &PatientCase, seed: Option<u64>) -> Self {
        let labels = case.labels();
        let mut order = labels.clone();
        if let Some(seed) = seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(case.id.as_bytes()));
            order.shuffle(&mut rng);
        }
        let shown = labels
            .iter()
            .zip(&order)
            .map(|(shown, orig)| (shown.clone(), case.options[orig].clone()))
            .collect();
        let to_original = labels.iter().cloned().zip(order).collect();
        Self { shown, to_original }
    }

    pub fn labels(&self) -> Vec<String> {
        self.shown.keys().cloned().collect()
    }

    pub fn shown(&self) -> &IndexMap<String, String> {
        &self.shown
    }

    /// Maps a label as shown back to the case's own label.
    pub fn original(&self, shown_label: &str) -> Option<&str> {
        self.to_original.get(shown_label).map(String::as_str)
    }

    /// `"A": "Diazepam", "B": "Paroxetine", ...`
    pub fn render(&self) -> String {
        self.shown
            .iter()
            .map(|(k, v)| format!("\"{k}\": \"{v}\""))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

fn number_word(n: usize) -> String {
    const WORDS: [&str; 11] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    ];
    WORDS
        .get(n)
        .map_or_else(|| n.to_string(), |w| w.to_string())
}

/// Renders the conversation log the way the expert reads it.
pub fn render_conversation_log(log: &[Turn]) -> String {
    if log.is_empty() {
        return "None".to_string();
    }
    log.iter()
        .map(|t| {
            format!(
                "Doctor Question: \"{}\"\nPatient Response: \"{}\"",
                t.expert_question, t.patient_response
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Outcome of one abstention step.
#[derive(Debug, Clone, PartialEq)]
pub struct Abstention {
    pub record: AbstentionRecord,
    /// Basic strategy only: the option named (as shown) when it answered.
    pub choice: Option<String>,
    /// Basic strategy only: the question asked when it did not answer.
    pub question: Option<String>,
}

/// Everything in one episode that does not change from turn to turn.
pub struct Session<'a> {
    case: &'a PatientCase,
    config: &'a EpisodeConfig,
    backend: &'a dyn Backend,
    patient_backend: &'a dyn Backend,
    templates: &'a TemplateSet,
    view: OptionView,
    sampling: Sampling,
}

impl<'a> Session<'a> {
    pub fn new(
        case: &'a PatientCase,
        config: &'a EpisodeConfig,
        backend: &'a dyn Backend,
        templates: &'a TemplateSet,
    ) -> Result<Self> {
        case.validate()?;
        config.validate()?;
        Ok(Self {
            case,
            config,
            backend,
            patient_backend: backend,
            templates,
            view: OptionView::new(case, config.shuffle_options_seed),
            sampling: Sampling {
                temperature: config.temperature,
                top_p: config.top_p,
            },
        })
    }

    /// Answers patient questions with a different backend than the expert.
    pub fn with_patient_backend(mut self, backend: &'a dyn Backend) -> Self {
        self.patient_backend = backend;
        self
    }

    pub fn view(&self) -> &OptionView {
        &self.view
    }

    fn tag(&self, step: &str) -> String {
        format!("{}/{step}", self.case.id)
    }

    fn generate(&self, step: &str, messages: Vec<ChatMessage>, n: usize) -> Result<Vec<String>> {
        let request = GenerationRequest::new(self.tag(step), messages)
            .with_samples(n)
            .sampled(self.sampling);
        self.backend.generate(&request)
    }

    fn expert_vars(&self, initial_info: &str) -> Vec<(&'static str, String)> {
        let labels = self.view.labels();
        vec![
            ("first_label", labels.first().cloned().unwrap_or_default()),
            ("last_label", labels.last().cloned().unwrap_or_default()),
            ("initial_info", initial_info.to_string()),
            ("option_count", number_word(labels.len())),
            ("inquiry", self.case.mcq_text.clone()),
            ("options", self.view.render()),
        ]
    }

    fn opening(&self, initial_info: &str) -> Result<Vec<ChatMessage>> {
        let vars = self.expert_vars(initial_info);
        let vars: Vec<(&str, &str)> = vars.iter().map(|(k, v)| (*k, v.as_str())).collect();
        self.templates.render(TemplateId::ExpertInitial, &vars)
    }

    /// Opening prompt followed by the stored assessment.
    fn thread(&self, state: &EpisodeState) -> Result<Vec<ChatMessage>> {
        let assessment = state
            .initial_assessment
            .as_deref()
            .ok_or_else(|| Error::InvalidState("initial assessment has not run".into()))?;
        let mut messages = self.opening(&state.initial_info)?;
        messages.push(ChatMessage::assistant(assessment));
        Ok(messages)
    }

    fn patient_info(&self, state: &EpisodeState) -> Result<String> {
        let log = render_conversation_log(&state.log);
        self.templates.render_user(
            TemplateId::PatientKnowledge,
            &[
                ("initial_info", &state.initial_info),
                ("conversation_log", &log),
            ],
        )
    }

    fn module_prompt(&self, id: TemplateId, state: &EpisodeState) -> Result<String> {
        let info = self.patient_info(state)?;
        self.templates.render_user(id, &[("patient_info", &info)])
    }

    /// Step 1: reason about the case once and keep the result in the thread.
    pub fn initial_assessment(&self, state: &mut EpisodeState) -> Result<String> {
        if state.initial_assessment.is_some() {
            return Err(Error::InvalidState(
                "initial assessment already produced".into(),
            ));
        }
        let messages = self.opening(&state.initial_info)?;
        let reply = self.generate("assess", messages, 1)?.remove(0);
        let reply = reply.trim().to_string();
        state.set_assessment(reply.clone())?;
        Ok(reply)
    }

    fn abstain_template(&self) -> TemplateId {
        let rg = self.config.rationale_active();
        match (self.config.abstain_strategy, rg) {
            (AbstainStrategy::Numerical, false) => TemplateId::AbstainNumerical,
            (AbstainStrategy::Numerical, true) => TemplateId::AbstainNumericalRg,
            (AbstainStrategy::Binary, false) => TemplateId::AbstainBinary,
            (AbstainStrategy::Binary, true) => TemplateId::AbstainBinaryRg,
            (AbstainStrategy::Scale, false) => TemplateId::AbstainScale,
            (AbstainStrategy::Scale, true) => TemplateId::AbstainScaleRg,
            (AbstainStrategy::Basic | AbstainStrategy::Fixed, _) => TemplateId::AbstainBasic,
        }
    }

    /// Step 2: decide whether to answer now or ask another question.
    pub fn abstain(&self, state: &EpisodeState) -> Result<Abstention> {
        if state.status != EpisodeStatus::InProgress {
            return Err(Error::InvalidState("abstain on a finished episode".into()));
        }
        let strategy = self.config.abstain_strategy;
        let turn_index = state.num_questions();
        let mut record = AbstentionRecord {
            turn_index,
            strategy,
            rationale_used: self.config.rationale_active(),
            sc_factor: 0,
            raw_samples: Vec::new(),
            aggregated_confidence: None,
            scale_mean: None,
            rating: None,
            decision: Decision::Ask,
            parse_failures: 0,
        };
        if strategy == AbstainStrategy::Fixed {
            let Threshold::Questions(limit) = self.config.threshold else {
                return Err(Error::Config(
                    "fixed strategy needs a question count".into(),
                ));
            };
            if turn_index >= limit {
                record.decision = Decision::Answer;
            }
            return Ok(Abstention {
                record,
                choice: None,
                question: None,
            });
        }

        let n = self.config.samples_per_decision();
        let mut messages = self.thread(state)?;
        messages.push(ChatMessage::user(
            self.module_prompt(self.abstain_template(), state)?,
        ));
        let samples = self.generate("abstain", messages, n)?;
        record.sc_factor = n;
        record.raw_samples = samples.clone();

        if strategy == AbstainStrategy::Basic {
            let raw = &samples[0];
            let labels = self.view.labels();
            if let Some(p) = parse_model_output(OutputKind::OptionChoice, raw, &labels)
                .filter(|_| !raw.contains('?'))
            {
                let ParsedValue::Option(label) = p.value else {
                    unreachable!()
                };
                record.decision = Decision::Answer;
                return Ok(Abstention {
                    record,
                    choice: Some(label),
                    question: None,
                });
            }
            let question = match parse_model_output(OutputKind::AtomicQuestion, raw, &[]) {
                Some(ParsedOutput {
                    value: ParsedValue::Question(q),
                    ..
                }) => q,
                _ => raw.trim().to_string(),
            };
            return Ok(Abstention {
                record,
                choice: None,
                question: Some(question),
            });
        }

        let kind = match strategy {
            AbstainStrategy::Numerical => OutputKind::NumericConfidence,
            AbstainStrategy::Binary => OutputKind::BinaryDecision,
            _ => OutputKind::ScaleRating,
        };
        let parsed: Vec<ParsedOutput> = samples
            .iter()
            .filter_map(|s| parse_model_output(kind, s, &[]))
            .collect();
        record.parse_failures = n - parsed.len();
        if record.parse_failures > 0 {
            tracing::warn!(
                case = %self.case.id,
                failures = record.parse_failures,
                "unparseable abstention samples"
            );
        }
        if !parsed.is_empty() {
            let aggregate = aggregate_samples(&parsed)?;
            record.aggregated_confidence = Some(aggregate.confidence());
            record.scale_mean = aggregate.scale_mean();
            record.rating = aggregate.rating();
            record.decision = decide(&aggregate, self.config.threshold)?;
        }
        Ok(Abstention {
            record,
            choice: None,
            question: None,
        })
    }

    /// Step 3: ask for the most useful missing piece of information. With
    /// `include_abstain_context` the abstention exchange of this turn stays
    /// in the thread.
    pub fn generate_question(
        &self,
        state: &EpisodeState,
        abstention: Option<&AbstentionRecord>,
    ) -> Result<String> {
        let mut messages = self.thread(state)?;
        if self.config.include_abstain_context_in_qgen {
            if let Some(record) = abstention.filter(|r| !r.raw_samples.is_empty()) {
                messages.push(ChatMessage::user(
                    self.module_prompt(self.abstain_template(), state)?,
                ));
                messages.push(ChatMessage::assistant(record.raw_samples[0].clone()));
            }
        }
        messages.push(ChatMessage::user(
            self.module_prompt(TemplateId::QuestionGeneration, state)?,
        ));
        for attempt in 0..2 {
            let reply = match self.generate("question", messages.clone(), 1) {
                Ok(mut r) => r.remove(0),
                Err(Error::EmptyCompletion { .. }) => String::new(),
                Err(e) => return Err(e),
            };
            if let Some(ParsedOutput {
                value: ParsedValue::Question(q),
                ..
            }) = parse_model_output(OutputKind::AtomicQuestion, &reply, &[])
            {
                return Ok(q);
            }
            tracing::warn!(case = %self.case.id, attempt, "empty question, retrying");
        }
        Err(Error::EmptyCompletion {
            tag: self.tag("question"),
        })
    }

    /// Reads an option from `messages`, re-prompting once with the format
    /// reminder. Returns the original label, or `None` when both replies
    /// are unreadable.
    fn decide_option(&self, step: &str, mut messages: Vec<ChatMessage>) -> Result<Option<String>> {
        let labels = self.view.labels();
        for attempt in 0..2 {
            let reply = self.generate(step, messages.clone(), 1)?.remove(0);
            if let Some(ParsedOutput {
                value: ParsedValue::Option(shown),
                ..
            }) = parse_model_output(OutputKind::OptionChoice, &reply, &labels)
            {
                return Ok(self.view.original(&shown).map(str::to_string));
            }
            if attempt == 0 {
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(
                    self.templates
                        .render_user(TemplateId::DecisionReminder, &[])?,
                ));
            }
        }
        tracing::warn!(case = %self.case.id, step, "no option could be read");
        Ok(None)
    }

    /// Step 5: commit to an option. `status` is the terminal status to record
    /// when an option is read; unreadable output ends the episode as
    /// truncated with [`INVALID_CHOICE`].
    pub fn final_decision(
        &self,
        state: &mut EpisodeState,
        status: EpisodeStatus,
    ) -> Result<String> {
        let mut messages = self.thread(state)?;
        messages.push(ChatMessage::user(
            self.module_prompt(TemplateId::Decision, state)?,
        ));
        match self.decide_option("decide", messages)? {
            Some(label) => {
                state.finish(label.clone(), status)?;
                Ok(label)
            }
            None => {
                state.finish(INVALID_CHOICE.to_string(), EpisodeStatus::Truncated)?;
                Ok(INVALID_CHOICE.to_string())
            }
        }
    }

    /// Runs the whole episode.
    pub fn run(&self) -> Result<EpisodeResult> {
        let mut state = EpisodeState::new(self.case)?;
        self.initial_assessment(&mut state)?;
        let status = loop {
            if state.num_questions() >= self.config.max_questions {
                break EpisodeStatus::Truncated;
            }
            let abstention = self.abstain(&state)?;
            state.record_abstention(abstention.record.clone())?;
            if abstention.record.decision == Decision::Answer {
                if let Some(shown) = abstention.choice {
                    let label = self
                        .view
                        .original(&shown)
                        .ok_or_else(|| Error::InvalidState(format!("unknown label {shown}")))?
                        .to_string();
                    state.finish(label, EpisodeStatus::Answered)?;
                }
                break EpisodeStatus::Answered;
            }
            let question = match abstention.question {
                Some(q) => q,
                None => self.generate_question(&state, Some(&abstention.record))?,
            };
            let response = respond_with(
                self.config.patient_variant,
                self.case,
                &question,
                self.patient_backend,
                self.templates,
                Sampling::default(),
            )?;
            state.integrate_turn(&question, &response.text, !response.is_sentinel)?;
        };
        if state.final_choice.is_none() {
            self.final_decision(&mut state, status)?;
        }
        Ok(EpisodeResult::from_state(self.case, self.config, state))
    }

    /// Answers in one call from whatever patient text `patient_section`
    /// carries, with no questions asked.
    pub fn answer_with_context(&self, patient_section: &str, step: &str) -> Result<Option<String>> {
        let vars = self.expert_vars("");
        let mut vars: Vec<(&str, &str)> = vars.iter().map(|(k, v)| (*k, v.as_str())).collect();
        vars.push(("patient_section", patient_section));
        let messages = self.templates.render(TemplateId::NonInteractive, &vars)?;
        self.decide_option(step, messages)
    }

    /// Asks which option is most often correct for this inquiry, with no
    /// patient information at all.
    pub fn common_option_belief(&self) -> Result<Option<String>> {
        let vars = self.expert_vars("");
        let vars: Vec<(&str, &str)> = vars.iter().map(|(k, v)| (*k, v.as_str())).collect();
        let messages = self.templates.render(TemplateId::CommonOption, &vars)?;
        self.decide_option("belief", messages)
    }
}

/// Everything recorded about one finished episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub case_id: String,
    pub final_choice: String,
    pub correct: bool,
    /// True when no option could be read; such episodes are not wrong
    /// answers but are not correct either.
    pub invalid_output: bool,
    pub num_questions: usize,
    /// (questions asked, aggregated confidence) per abstention call that
    /// produced one.
    pub confidence_trace: Vec<(usize, f64)>,
    pub status: EpisodeStatus,
    pub initial_info: String,
    pub initial_assessment: String,
    pub log: Vec<Turn>,
    pub abstention_trace: Vec<AbstentionRecord>,
    pub config_fingerprint: String,
}

impl EpisodeResult {
    fn from_state(case: &PatientCase, config: &EpisodeConfig, state: EpisodeState) -> Self {
        let final_choice = state
            .final_choice
            .unwrap_or_else(|| INVALID_CHOICE.to_string());
        let confidence_trace = state
            .abstention_trace
            .iter()
            .filter_map(|r| r.aggregated_confidence.map(|c| (r.turn_index, c)))
            .collect();
        Self {
            case_id: case.id.clone(),
            correct: final_choice == case.answer_label,
            invalid_output: final_choice == INVALID_CHOICE,
            final_choice,
            num_questions: state.log.len(),
            confidence_trace,
            status: state.status,
            initial_info: state.initial_info,
            initial_assessment: state.initial_assessment.unwrap_or_default(),
            log: state.log,
            abstention_trace: state.abstention_trace,
            config_fingerprint: config.fingerprint(),
        }
    }

    /// Confidence of the last abstention call that produced one.
    pub fn final_confidence(&self) -> Option<f64> {
        self.confidence_trace.last().map(|(_, c)| *c)
    }
}

/// Runs one interactive episode with the configured patient variant; expert
/// and patient share `backend`.
pub fn run_interaction(
    case: &PatientCase,
    config: &EpisodeConfig,
    backend: &dyn Backend,
    templates: &TemplateSet,
) -> Result<EpisodeResult> {
    Session::new(case, config, backend, templates)?.run()
}

/// How much of the record a single-call baseline sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoLevel {
    /// The whole paragraph: the ordinary QA setting.
    Full,
    /// Age, gender and chief complaint only.
    Initial,
    /// The question and options alone.
    None,
}

impl InfoLevel {
    pub const ALL: [InfoLevel; 3] = [Self::Full, Self::Initial, Self::None];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Initial => "initial",
            Self::None => "none",
        }
    }
}

impl std::str::FromStr for InfoLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown info level `{s}`")))
    }
}

/// Patient text block that opens a single-call prompt.
pub fn patient_section(text: &str) -> String {
    format!("PATIENT INFORMATION: \"{text}\"\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonInteractiveResult {
    pub case_id: String,
    pub level: InfoLevel,
    pub final_choice: String,
    pub correct: bool,
    pub invalid_output: bool,
    pub config_fingerprint: String,
}

/// Single-call baseline at the given information level.
pub fn non_interactive_answer(
    case: &PatientCase,
    level: InfoLevel,
    config: &EpisodeConfig,
    backend: &dyn Backend,
    templates: &TemplateSet,
) -> Result<NonInteractiveResult> {
    let session = Session::new(case, config, backend, templates)?;
    let section = match level {
        InfoLevel::Full => patient_section(&case.full_context),
        InfoLevel::Initial => patient_section(&render_initial_info(case)?),
        InfoLevel::None => String::new(),
    };
    let choice = session
        .answer_with_context(&section, "answer")?
        .unwrap_or_else(|| INVALID_CHOICE.to_string());
    Ok(NonInteractiveResult {
        case_id: case.id.clone(),
        level,
        correct: choice == case.answer_label,
        invalid_output: choice == INVALID_CHOICE,
        final_choice: choice,
        config_fingerprint: config.fingerprint(),
    })
}

/// The expert's belief about the most commonly correct option, as a case
/// label; `None` when unreadable.
pub fn elicit_common_option(
    case: &PatientCase,
    config: &EpisodeConfig,
    backend: &dyn Backend,
    templates: &TemplateSet,
) -> Result<Option<String>> {
    Session::new(case, config, backend, templates)?.common_option_belief()
}
