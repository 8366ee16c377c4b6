//! Small text utilities shared by the parsers.

use std::sync::LazyLock;

use regex::Regex;

/// Reply the patient gives when the record holds no answer.
pub const SENTINEL: &str =
    "The patient cannot answer this question, please do not ask this question again.";

const SENTINEL_MARKER: &str = "cannot answer this question";

/// A reply is unanswered iff it contains the sentinel phrase, case-insensitively.
pub fn is_sentinel(response: &str) -> bool {
    response.to_lowercase().contains(SENTINEL_MARKER)
}

/// Collapses runs of whitespace to a single space and trims the ends.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Strips wrapping quotes (straight or curly) and surrounding whitespace.
///
/// Quotes are removed from each end independently, so an unbalanced trailing
/// quote left over from a list is dropped as well.
pub fn strip_quotes(s: &str) -> &str {
    s.trim()
        .trim_matches(|c| matches!(c, '"' | '\'' | '“' | '”' | '`'))
        .trim()
}

static NUMBERED_ITEM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(\d+)\s*[.)]\s*(.*?)\s*$").unwrap());

/// Parses a numbered list (`1. foo`, `2) bar`, `3.baz`) into its items.
///
/// Lines without an index are ignored; items that are empty after stripping
/// quotes are dropped. Order of appearance is preserved.
pub fn parse_numbered_list(text: &str) -> Vec<(usize, String)> {
    text.lines()
        .filter_map(|line| {
            let caps = NUMBERED_ITEM.captures(line)?;
            let index = caps[1].parse().ok()?;
            let item = strip_quotes(&caps[2]);
            (!item.is_empty()).then(|| (index, item.to_string()))
        })
        .collect()
}

static SENTENCE_END: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#"[.!?]["”']?\s+"#).unwrap());

/// Splits text into sentences at `.`, `!` or `?` followed by whitespace.
///
/// Decimal points ("8.8 lb") are not followed by whitespace and stay intact.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    for m in SENTENCE_END.find_iter(text) {
        let end = m.start() + text[m.start()..m.end()].trim_end().len();
        push_trimmed(&mut out, &text[start..end]);
        start = m.end();
    }
    push_trimmed(&mut out, &text[start..]);
    out
}

fn push_trimmed(out: &mut Vec<String>, s: &str) {
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

/// Returns the text following the last `LABEL:` marker (case-insensitive), or
/// `None` when the marker is absent. Used for `DECISION:` style answers.
pub fn after_marker<'a>(text: &'a str, label: &str) -> Option<&'a str> {
    let lower = text.to_lowercase();
    let needle = format!("{}:", label.to_lowercase());
    // Lowercasing can change byte lengths for non-ASCII text; only trust the
    // offset when it still lands on the same boundary.
    let pos = lower.rfind(&needle)?;
    let start = pos + needle.len();
    if lower.len() == text.len() && text.is_char_boundary(start) {
        Some(&text[start..])
    } else {
        None
    }
}

static YES_NO: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(yes|no)\b").unwrap());

/// Reads a YES/NO answer: the first standalone yes or no, looking after a
/// `DECISION:` marker when one is present.
pub fn parse_yes_no(text: &str) -> Option<bool> {
    let scope = after_marker(text, "decision").unwrap_or(text);
    let m = YES_NO.find(scope)?;
    Some(m.as_str().eq_ignore_ascii_case("yes"))
}

/// Lowercase, punctuation stripped, whitespace collapsed. Used to compare
/// questions lexically.
pub fn normalize_lexical(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    normalize_whitespace(&cleaned.to_lowercase())
}

/// 64-bit FNV-1a, used where a stable, dependency-free hash is needed.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
