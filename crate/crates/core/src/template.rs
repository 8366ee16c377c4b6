//! Prompt templates with `{name}` placeholders.
//!
//! Every prompt the harness sends lives in an editable text file. The defaults
//! are compiled in from `templates/`; [`TemplateSet::from_dir`] overrides any
//! subset of them from a directory using the same file names
//! (`<stem>.txt` for the user turn, `<stem>.system.txt` for the system turn).
//! `{{` and `}}` produce literal braces.

use std::collections::HashMap;
use std::path::Path;

use crate::backend::ChatMessage;
use crate::{Error, Result};

macro_rules! templates {
    ($( $variant:ident => $stem:literal, system: $sys:expr ;)*) => {
        /// Identifies one prompt template.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum TemplateId {
            $( $variant, )*
        }

        impl TemplateId {
            pub const ALL: &'static [TemplateId] = &[$( TemplateId::$variant, )*];

            /// File stem of the template on disk.
            pub fn stem(self) -> &'static str {
                match self {
                    $( TemplateId::$variant => $stem, )*
                }
            }

            fn default_text(self) -> (Option<&'static str>, &'static str) {
                match self {
                    $( TemplateId::$variant => (
                        $sys,
                        include_str!(concat!("../templates/", $stem, ".txt")),
                    ), )*
                }
            }
        }
    };
}

const EXPERT_SYSTEM: Option<&str> = Some(include_str!("../templates/expert.system.txt"));
const PATIENT_SYSTEM: Option<&str> = Some(include_str!("../templates/patient_instruct.system.txt"));

templates! {
    PatientDirect => "patient_direct", system: None;
    PatientInstruct => "patient_instruct", system: PATIENT_SYSTEM;
    PatientFactSelect => "patient_fact_select", system: Some(include_str!("../templates/patient_fact_select.system.txt"));
    PatientFactFp => "patient_fact_fp", system: Some(include_str!("../templates/patient_fact_fp.system.txt"));
    PatientFactClassify => "patient_fact_classify", system: Some(include_str!("../templates/patient_fact_classify.system.txt"));
    FactDecompose => "fact_decompose", system: Some(include_str!("../templates/fact_decompose.system.txt"));
    FactualityJudge => "factuality_judge", system: Some(include_str!("../templates/factuality_judge.system.txt"));
    RelevanceQuestion => "relevance_question", system: None;
    ChiefComplaint => "chief_complaint", system: None;
    ExpertInitial => "expert_initial", system: EXPERT_SYSTEM;
    PatientKnowledge => "patient_knowledge", system: None;
    AbstainBasic => "abstain_basic", system: None;
    AbstainBinary => "abstain_binary", system: None;
    AbstainNumerical => "abstain_numerical", system: None;
    AbstainScale => "abstain_scale", system: None;
    AbstainBinaryRg => "abstain_binary_rg", system: None;
    AbstainNumericalRg => "abstain_numerical_rg", system: None;
    AbstainScaleRg => "abstain_scale_rg", system: None;
    QuestionGeneration => "question_generation", system: None;
    Decision => "decision", system: None;
    DecisionReminder => "decision_reminder", system: None;
    NonInteractive => "non_interactive", system: EXPERT_SYSTEM;
    CommonOption => "common_option", system: EXPERT_SYSTEM;
    ParagraphRewrite => "paragraph_rewrite", system: None;
}

/// One template: an optional system turn and a user turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub system: Option<String>,
    pub user: String,
}

impl Template {
    pub fn new(system: Option<&str>, user: &str) -> Self {
        Self {
            system: system.map(|s| trim_final_newline(s).to_string()),
            user: trim_final_newline(user).to_string(),
        }
    }

    /// Renders into chat messages: the system turn (if any) then the user turn.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<Vec<ChatMessage>> {
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = &self.system {
            messages.push(ChatMessage::system(substitute(system, vars)?));
        }
        messages.push(ChatMessage::user(substitute(&self.user, vars)?));
        Ok(messages)
    }
}

fn trim_final_newline(s: &str) -> &str {
    s.strip_suffix("\r\n")
        .or_else(|| s.strip_suffix('\n'))
        .unwrap_or(s)
}

/// Replaces `{name}` placeholders. A placeholder without a value is an error.
pub fn substitute(template: &str, vars: &[(&str, &str)]) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("{{") {
            out.push('{');
            rest = after;
        } else if let Some(after) = tail.strip_prefix("}}") {
            out.push('}');
            rest = after;
        } else if tail.starts_with('}') {
            return Err(Error::Template(format!(
                "unmatched `}}` in template near {:?}",
                preview(tail)
            )));
        } else {
            let close = tail.find('}').ok_or_else(|| {
                Error::Template(format!("unclosed placeholder near {:?}", preview(tail)))
            })?;
            let name = &tail[1..close];
            let value = vars
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Template(format!("no value for placeholder {{{name}}}")))?;
            out.push_str(value);
            rest = &tail[close + 1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn preview(s: &str) -> String {
    s.chars().take(24).collect()
}

/// The full set of prompt templates used by one run.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: HashMap<TemplateId, Template>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        let templates = TemplateId::ALL
            .iter()
            .map(|&id| {
                let (system, user) = id.default_text();
                (id, Template::new(system, user))
            })
            .collect();
        Self { templates }
    }
}

impl TemplateSet {
    /// Defaults overridden by whatever `<stem>.txt` / `<stem>.system.txt`
    /// files exist in `dir`.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut set = Self::default();
        for &id in TemplateId::ALL {
            let user_path = dir.join(format!("{}.txt", id.stem()));
            let system_path = dir.join(format!("{}.system.txt", id.stem()));
            let entry = set.templates.get_mut(&id).expect("all ids present");
            if user_path.exists() {
                entry.user = trim_final_newline(&std::fs::read_to_string(&user_path)?).to_string();
            }
            if system_path.exists() {
                entry.system =
                    Some(trim_final_newline(&std::fs::read_to_string(&system_path)?).to_string());
            }
        }
        Ok(set)
    }

    pub fn get(&self, id: TemplateId) -> &Template {
        &self.templates[&id]
    }

    pub fn set(&mut self, id: TemplateId, template: Template) {
        self.templates.insert(id, template);
    }

    pub fn render(&self, id: TemplateId, vars: &[(&str, &str)]) -> Result<Vec<ChatMessage>> {
        self.get(id).render(vars)
    }

    /// Renders only the user turn, for prompts appended to an existing thread.
    pub fn render_user(&self, id: TemplateId, vars: &[(&str, &str)]) -> Result<String> {
        substitute(&self.get(id).user, vars)
    }

    pub fn render_system(&self, id: TemplateId, vars: &[(&str, &str)]) -> Result<Option<String>> {
        self.get(id)
            .system
            .as_deref()
            .map(|s| substitute(s, vars))
            .transpose()
    }
}
