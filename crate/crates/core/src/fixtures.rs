//! Shared test fixtures.

use indexmap::IndexMap;

use crate::episode::PatientCase;

pub const INSOMNIA_INTAKE: &str = "A 40-year-old woman presents with difficulty falling asleep, diminished appetite, and tiredness for the past 6 weeks.";

pub const INSOMNIA_PARAGRAPH: &str = "She says that, despite going to bed early at night, she is unable to fall asleep. She denies feeling anxious or having disturbing thoughts while in bed. Even when she manages to fall asleep, she wakes up early in the morning and is unable to fall back asleep. She says she has grown increasingly irritable and feels increasingly hopeless, and her concentration and interest at work have diminished. The patient denies thoughts of suicide or death. Because of her diminished appetite, she has lost 4 kg (8.8 lb) in the last few weeks and has started drinking a glass of wine every night instead of eating dinner. She has no significant past medical history and is not on any medications.";

/// Decomposition output exactly as a model printed it, stray quote included.
pub const INSOMNIA_DECOMPOSITION: &str =
    "1.Patient goes to bed early at night but is unable to fall asleep.
        2.Patient denies feeling anxious or having disturbing thoughts while in bed.
        3.Patient wakes up early in the morning and is unable to fall back asleep.
        4.Patient has grown increasingly irritable and feels increasingly hopeless.
        5.Patient's concentration and interest at work have diminished.
        6.Patient denies thoughts of suicide or death.
        7.Patient has lost 4 kg (8.8 lb) in the last few weeks.
        8.Patient started drinking a glass of wine every night instead of eating dinner.
        9.Patient has no significant past medical history.
        10.Patient is not on any medications.\"";

pub fn insomnia_facts() -> Vec<String> {
    crate::text::parse_numbered_list(INSOMNIA_DECOMPOSITION)
        .into_iter()
        .map(|(_, f)| f)
        .collect()
}

pub fn insomnia_options() -> IndexMap<String, String> {
    [
        ("A", "Diazepam"),
        ("B", "Paroxetine"),
        ("C", "Zolpidem"),
        ("D", "Trazodone"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

pub fn insomnia_case() -> PatientCase {
    PatientCase {
        id: "insomnia".into(),
        age: Some(40),
        gender: Some("woman".into()),
        chief_complaint:
            "difficulty falling asleep, diminished appetite, and tiredness for the past 6 weeks"
                .into(),
        atomic_facts: insomnia_facts(),
        full_context: format!("{INSOMNIA_INTAKE} {INSOMNIA_PARAGRAPH}"),
        mcq_text: "Which of the following is the best course of treatment in this patient?".into(),
        options: insomnia_options(),
        answer_label: "D".into(),
        source_dataset: "fixture".into(),
        raw_record: format!("{INSOMNIA_INTAKE} {INSOMNIA_PARAGRAPH}"),
    }
}
