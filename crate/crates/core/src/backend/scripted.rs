use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{check_completions, Backend, GenerationRequest, HashEmbedder};
use crate::{Error, Result};

/// How a script entry selects the calls it answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// The last user message equals the key byte for byte.
    ExactPrompt,
    /// The last user message contains the key.
    SubstringOfLastUser,
    /// Key `tag:N` answers the N-th call (1-based) carrying `tag`; a bare
    /// `tag` answers every call carrying it.
    ByTagAndSequence,
}

/// One line of a script file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub matcher: Matcher,
    pub key: String,
    /// Completions, consumed cyclically when more samples are requested.
    pub responses: Vec<String>,
}

impl ScriptEntry {
    pub fn new<I, S>(matcher: Matcher, key: impl Into<String>, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            matcher,
            key: key.into(),
            responses: responses.into_iter().map(Into::into).collect(),
        }
    }

    pub fn exact(key: impl Into<String>, response: impl Into<String>) -> Self {
        Self::new(Matcher::ExactPrompt, key, [response.into()])
    }

    pub fn substring(key: impl Into<String>, response: impl Into<String>) -> Self {
        Self::new(Matcher::SubstringOfLastUser, key, [response.into()])
    }

    pub fn tagged(tag: &str, seq: usize, response: impl Into<String>) -> Self {
        Self::new(
            Matcher::ByTagAndSequence,
            format!("{tag}:{seq}"),
            [response.into()],
        )
    }

    fn matches(&self, request: &GenerationRequest, seq: usize) -> bool {
        match self.matcher {
            Matcher::ExactPrompt => request.last_user() == self.key,
            Matcher::SubstringOfLastUser => request.last_user().contains(self.key.as_str()),
            Matcher::ByTagAndSequence => match split_sequence(&self.key) {
                (tag, Some(n)) => tag == request.tag && n == seq,
                (tag, None) => tag == request.tag,
            },
        }
    }
}

fn split_sequence(key: &str) -> (&str, Option<usize>) {
    if let Some((tag, n)) = key.rsplit_once(':') {
        if !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()) {
            return (tag, n.parse().ok());
        }
    }
    (key, None)
}

/// Replays completions from a script. Entries are tried in order; the first
/// match answers. Call sequence numbers are counted per tag, so concurrent
/// episodes with distinct tags see identical outputs in any schedule.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    entries: Vec<ScriptEntry>,
    sequence: Mutex<HashMap<String, usize>>,
    hits: Vec<AtomicUsize>,
    embedder: HashEmbedder,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        let hits = entries.iter().map(|_| AtomicUsize::new(0)).collect();
        Self {
            entries,
            sequence: Mutex::new(HashMap::new()),
            hits,
            embedder: HashEmbedder::default(),
        }
    }

    pub fn entries(&self) -> &[ScriptEntry] {
        &self.entries
    }

    /// Same script, counters reset.
    pub fn fresh(&self) -> Self {
        Self::new(self.entries.clone())
    }

    /// How many calls each entry has answered, in script order.
    pub fn hit_counts(&self) -> Vec<usize> {
        self.hits
            .iter()
            .map(|h| h.load(Ordering::Relaxed))
            .collect()
    }

    fn next_seq(&self, tag: &str) -> usize {
        let mut seq = self.sequence.lock().unwrap();
        let n = seq.entry(tag.to_string()).or_insert(0);
        *n += 1;
        *n
    }
}

impl Backend for ScriptedBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>> {
        request.validate()?;
        let seq = self.next_seq(&request.tag);
        let (idx, entry) = self
            .entries
            .iter()
            .enumerate()
            .find(|(_, e)| e.matches(request, seq))
            .ok_or_else(|| Error::UnmatchedPrompt {
                tag: request.tag.clone(),
                seq,
                preview: request.last_user().chars().take(120).collect(),
            })?;
        self.hits[idx].fetch_add(1, Ordering::Relaxed);
        let out: Vec<String> = entry
            .responses
            .iter()
            .cycle()
            .take(request.n_samples)
            .cloned()
            .collect();
        check_completions(&request.tag, request.n_samples, &out)?;
        Ok(out)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(self.embedder.embed(texts))
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

/// Reads a script: one JSON [`ScriptEntry`] per line, blank lines ignored.
pub fn load_script(path: impl AsRef<Path>) -> Result<ScriptedBackend> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let format_err = |message: String| Error::Format {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let entry: ScriptEntry =
            serde_json::from_str(&line).map_err(|e| format_err(e.to_string()))?;
        if entry.responses.is_empty() {
            return Err(format_err("script entry has no responses".into()));
        }
        entries.push(entry);
    }
    Ok(ScriptedBackend::new(entries))
}

pub fn save_script(path: impl AsRef<Path>, entries: &[ScriptEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
