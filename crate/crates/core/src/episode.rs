//! Domain types and the episode state machine.
//!
//! An episode starts from the initial presentation of a [`PatientCase`] and
//! grows an append-only log of question/response [`Turn`]s until the expert
//! commits to an option or the question cap is reached.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::patient::PatientVariant;
use crate::text::{is_sentinel, normalize_whitespace};
use crate::{Error, Result};

/// One converted multiple-choice record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientCase {
    pub id: String,
    pub age: Option<u32>,
    pub gender: Option<String>,
    pub chief_complaint: String,
    pub atomic_facts: Vec<String>,
    pub full_context: String,
    pub mcq_text: String,
    pub options: IndexMap<String, String>,
    pub answer_label: String,
    pub source_dataset: String,
    pub raw_record: String,
}

impl PatientCase {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| {
            Err(Error::Conversion {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.options.len() < 2 {
            return fail("fewer than two options");
        }
        if !self.options.contains_key(&self.answer_label) {
            return fail("answer label is not an option");
        }
        if self.atomic_facts.is_empty() {
            return fail("no atomic facts");
        }
        if self.atomic_facts.iter().any(|f| f.trim().is_empty()) {
            return fail("empty atomic fact");
        }
        if self.chief_complaint.trim().is_empty() {
            return fail("missing chief complaint");
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        self.options.keys().cloned().collect()
    }
}

/// The expert's opening view of the patient: age, gender and chief complaint
/// in one sentence, e.g. "A 40-year-old woman presents with ...".
pub fn render_initial_info(case: &PatientCase) -> Result<String> {
    let complaint = normalize_whitespace(&case.chief_complaint);
    let complaint = complaint.trim_end_matches('.');
    if complaint.is_empty() {
        return Err(Error::Conversion {
            id: case.id.clone(),
            reason: "missing chief complaint".into(),
        });
    }
    let who = case
        .gender
        .as_deref()
        .map(str::trim)
        .filter(|g| !g.is_empty())
        .unwrap_or("patient");
    let subject = match case.age {
        Some(age) => format!("{} {age}-year-old {who}", article_for_number(age)),
        None => format!("{} {who}", article_for_word(who)),
    };
    Ok(format!("{subject} presents with {complaint}."))
}

fn article_for_number(n: u32) -> &'static str {
    // "an 8-", "an 11-", "an 18-", "an 80-" ...
    let s = n.to_string();
    if s.starts_with('8') || n == 11 || n == 18 || (1100..1200).contains(&n) {
        "An"
    } else {
        "A"
    }
}

fn article_for_word(w: &str) -> &'static str {
    let digits: String = w.chars().take_while(char::is_ascii_digit).collect();
    if let Ok(n) = digits.parse() {
        return article_for_number(n);
    }
    match w.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "An",
        _ => "A",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    /// 1-based position in the log.
    pub index: usize,
    pub expert_question: String,
    pub patient_response: String,
    /// False when the response is the cannot-answer sentinel.
    pub answered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    InProgress,
    Answered,
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbstainStrategy {
    /// The expert either names an option or asks a question.
    Basic,
    Numerical,
    Binary,
    Scale,
    /// Answer once a fixed number of questions has been asked.
    Fixed,
}

impl AbstainStrategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::Basic => "basic",
            Self::Numerical => "numerical",
            Self::Binary => "binary",
            Self::Scale => "scale",
            Self::Fixed => "fixed",
        }
    }

    /// Whether the strategy queries the model for a confidence signal that
    /// self-consistency and rationale generation apply to.
    pub fn elicits_confidence(self) -> bool {
        matches!(self, Self::Numerical | Self::Binary | Self::Scale)
    }
}

/// The five-level verbal confidence scale, ordered from least to most
/// confident. Ordinals run 1..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleLevel {
    VeryUnconfident,
    SomewhatUnconfident,
    Neither,
    SomewhatConfident,
    VeryConfident,
}

impl ScaleLevel {
    pub const ALL: [ScaleLevel; 5] = [
        Self::VeryUnconfident,
        Self::SomewhatUnconfident,
        Self::Neither,
        Self::SomewhatConfident,
        Self::VeryConfident,
    ];

    pub fn ordinal(self) -> u32 {
        self as u32 + 1
    }

    pub fn from_ordinal(n: u32) -> Option<Self> {
        Self::ALL.get((n as usize).checked_sub(1)?).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::VeryUnconfident => "Very Unconfident",
            Self::SomewhatUnconfident => "Somewhat Unconfident",
            Self::Neither => "Neither Confident or Unconfident",
            Self::SomewhatConfident => "Somewhat Confident",
            Self::VeryConfident => "Very Confident",
        }
    }

    /// Places an ordinal (possibly a mean) on [0, 1] at bin centres:
    /// (2r - 1) / 10.
    pub fn ordinal_to_unit(r: f64) -> f64 {
        (2.0 * r - 1.0) / 10.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Ask,
    Answer,
}

/// One turn's confidence elicitation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstentionRecord {
    /// Questions already asked when the decision was taken.
    pub turn_index: usize,
    pub strategy: AbstainStrategy,
    pub rationale_used: bool,
    pub sc_factor: usize,
    pub raw_samples: Vec<String>,
    /// Mean confidence on [0, 1]; Scale means are mapped with
    /// [`ScaleLevel::ordinal_to_unit`]. Absent when nothing parsed.
    pub aggregated_confidence: Option<f64>,
    /// Mean ordinal for Scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_mean: Option<f64>,
    /// Level nearest to the mean ordinal, for Scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<ScaleLevel>,
    pub decision: Decision,
    /// Samples that could not be parsed.
    #[serde(default)]
    pub parse_failures: usize,
}

/// Strategy-specific stopping threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Threshold {
    None,
    Confidence(f64),
    Scale(ScaleLevel),
    Questions(usize),
}

/// Default question cap.
pub const DEFAULT_MAX_QUESTIONS: usize = 10;
/// Default self-consistency factor when self-consistency is enabled.
pub const DEFAULT_SC_FACTOR: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub max_questions: usize,
    pub abstain_strategy: AbstainStrategy,
    pub threshold: Threshold,
    pub rationale_generation: bool,
    pub self_consistency: bool,
    pub sc_factor: usize,
    /// Allow an even factor with Binary (ties then resolve to Ask).
    #[serde(default)]
    pub allow_even_binary_sc: bool,
    pub include_abstain_context_in_qgen: bool,
    pub patient_variant: PatientVariant,
    pub temperature: f64,
    pub top_p: f64,
    pub shuffle_options_seed: Option<u64>,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_questions: DEFAULT_MAX_QUESTIONS,
            abstain_strategy: AbstainStrategy::Basic,
            threshold: Threshold::None,
            rationale_generation: false,
            self_consistency: false,
            sc_factor: DEFAULT_SC_FACTOR,
            allow_even_binary_sc: false,
            include_abstain_context_in_qgen: true,
            patient_variant: PatientVariant::FactSelect,
            temperature: crate::backend::DEFAULT_TEMPERATURE,
            top_p: crate::backend::DEFAULT_TOP_P,
            shuffle_options_seed: None,
        }
    }
}

impl EpisodeConfig {
    pub fn with_strategy(strategy: AbstainStrategy, threshold: Threshold) -> Self {
        Self {
            abstain_strategy: strategy,
            threshold,
            ..Self::default()
        }
    }

    /// Hex SHA-256 of the configuration's JSON form.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Samples drawn per abstention call.
    pub fn samples_per_decision(&self) -> usize {
        if self.self_consistency && self.abstain_strategy.elicits_confidence() {
            self.sc_factor
        } else {
            1
        }
    }

    pub fn rationale_active(&self) -> bool {
        self.rationale_generation && self.abstain_strategy.elicits_confidence()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sc_factor == 0 {
            return bad("sc_factor must be at least 1".into());
        }
        if self.abstain_strategy == AbstainStrategy::Binary
            && self.samples_per_decision().is_multiple_of(2)
            && !self.allow_even_binary_sc
        {
            return bad(format!(
                "binary abstention needs an odd sc_factor, got {}",
                self.sc_factor
            ));
        }
        if self.temperature.is_nan()
            || self.temperature < 0.0
            || !(self.top_p > 0.0 && self.top_p <= 1.0)
        {
            return bad("temperature must be >= 0 and top_p in (0, 1]".into());
        }
        use AbstainStrategy as S;
        match (self.abstain_strategy, self.threshold) {
            (S::Numerical, Threshold::Confidence(t)) if (0.0..=1.0).contains(&t) => Ok(()),
            (S::Scale, Threshold::Scale(_)) => Ok(()),
            (S::Fixed, Threshold::Questions(_)) => Ok(()),
            (S::Basic | S::Binary, Threshold::None) => Ok(()),
            (s, t) => bad(format!(
                "threshold {t:?} does not fit strategy {}",
                s.name()
            )),
        }
    }
}

/// The expert's evolving knowledge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub case_id: String,
    pub initial_info: String,
    pub initial_assessment: Option<String>,
    pub log: Vec<Turn>,
    pub abstention_trace: Vec<AbstentionRecord>,
    pub final_choice: Option<String>,
    pub status: EpisodeStatus,
}

impl EpisodeState {
    pub fn new(case: &PatientCase) -> Result<Self> {
        Ok(Self {
            case_id: case.id.clone(),
            initial_info: render_initial_info(case)?,
            initial_assessment: None,
            log: Vec::new(),
            abstention_trace: Vec::new(),
            final_choice: None,
            status: EpisodeStatus::InProgress,
        })
    }

    pub fn num_questions(&self) -> usize {
        self.log.len()
    }

    fn require_in_progress(&self, what: &str) -> Result<()> {
        if self.status == EpisodeStatus::InProgress {
            Ok(())
        } else {
            Err(Error::InvalidState(format!(
                "{what} on a finished episode ({:?})",
                self.status
            )))
        }
    }

    /// Appends one question/response pair.
    pub fn integrate_turn(
        &mut self,
        question: &str,
        response: &str,
        answered: bool,
    ) -> Result<&Turn> {
        self.require_in_progress("integrate_turn")?;
        if question.trim().is_empty() {
            return Err(Error::InvalidTurn("empty expert question".into()));
        }
        self.log.push(Turn {
            index: self.log.len() + 1,
            expert_question: question.to_string(),
            patient_response: response.to_string(),
            answered,
        });
        Ok(self.log.last().unwrap())
    }

    /// Like [`integrate_turn`](Self::integrate_turn) with `answered` derived
    /// from the sentinel detector.
    pub fn integrate_response(&mut self, question: &str, response: &str) -> Result<&Turn> {
        self.integrate_turn(question, response, !is_sentinel(response))
    }

    pub fn set_assessment(&mut self, assessment: String) -> Result<()> {
        self.require_in_progress("set_assessment")?;
        if self.initial_assessment.is_some() {
            return Err(Error::InvalidState(
                "initial assessment already produced".into(),
            ));
        }
        self.initial_assessment = Some(assessment);
        Ok(())
    }

    pub fn record_abstention(&mut self, record: AbstentionRecord) -> Result<()> {
        self.require_in_progress("record_abstention")?;
        self.abstention_trace.push(record);
        Ok(())
    }

    /// Sets the final choice; `status` must be terminal.
    pub fn finish(&mut self, choice: String, status: EpisodeStatus) -> Result<()> {
        self.require_in_progress("finish")?;
        if status == EpisodeStatus::InProgress {
            return Err(Error::InvalidState("finish needs a terminal status".into()));
        }
        self.final_choice = Some(choice);
        self.status = status;
        Ok(())
    }

    /// Patient responses visible after `t` turns.
    pub fn known_responses(&self, t: usize) -> Vec<&str> {
        self.log
            .iter()
            .take(t)
            .map(|turn| turn.patient_response.as_str())
            .collect()
    }
}

/// True iff a choice was made or the question cap is reached.
pub fn is_terminal(state: &EpisodeState, config: &EpisodeConfig) -> bool {
    state.final_choice.is_some() || state.log.len() >= config.max_questions
}
