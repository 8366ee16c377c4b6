//! Experiment-level statistics over finished episodes.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::episode::ScaleLevel;
use crate::expert::{EpisodeResult, NonInteractiveResult};
use crate::patient::order_free_mean;
use crate::{Error, Result};

/// Default number of equal-width calibration bins.
pub const DEFAULT_ECE_BINS: usize = 10;

/// What the metrics need from a per-case result.
pub trait Outcome {
    fn case_id(&self) -> &str;
    fn final_choice(&self) -> &str;
    fn is_correct(&self) -> bool;
    fn questions_asked(&self) -> usize;
}

impl Outcome for EpisodeResult {
    fn case_id(&self) -> &str {
        &self.case_id
    }
    fn final_choice(&self) -> &str {
        &self.final_choice
    }
    fn is_correct(&self) -> bool {
        self.correct
    }
    fn questions_asked(&self) -> usize {
        self.num_questions
    }
}

impl Outcome for NonInteractiveResult {
    fn case_id(&self) -> &str {
        &self.case_id
    }
    fn final_choice(&self) -> &str {
        &self.final_choice
    }
    fn is_correct(&self) -> bool {
        self.correct
    }
    fn questions_asked(&self) -> usize {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub p: f64,
    pub n: usize,
    pub correct: usize,
    /// Binomial standard deviation of `p`.
    pub sd: f64,
}

/// Standard deviation of an accuracy `p` over `n` independent cases,
/// sqrt(p(1 - p)/n).
pub fn binomial_sd(p: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Metric("binomial SD needs n >= 1".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Metric(format!("accuracy {p} outside [0, 1]")));
    }
    Ok((p * (1.0 - p) / n as f64).sqrt())
}

pub fn accuracy_summary<R: Outcome>(results: &[R]) -> Result<AccuracySummary> {
    let n = results.len();
    if n == 0 {
        return Err(Error::Metric("no results to summarize".into()));
    }
    let correct = results.iter().filter(|r| r.is_correct()).count();
    let p = correct as f64 / n as f64;
    Ok(AccuracySummary {
        p,
        n,
        correct,
        sd: binomial_sd(p, n)?,
    })
}

/// Mean number of questions asked.
pub fn mean_questions<R: Outcome>(results: &[R]) -> Option<f64> {
    let counts: Vec<f64> = results.iter().map(|r| r.questions_asked() as f64).collect();
    order_free_mean(&counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub confidence: f64,
    pub correct: bool,
}

impl CalibrationRecord {
    pub fn new(confidence: f64, correct: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Metric(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Self {
            confidence,
            correct,
        })
    }

    /// A verbal rating placed on [0, 1] at its bin centre.
    pub fn from_rating(level: ScaleLevel, correct: bool) -> Self {
        Self {
            confidence: ScaleLevel::ordinal_to_unit(f64::from(level.ordinal())),
            correct,
        }
    }
}

/// One record per episode: the last aggregated confidence against the final
/// answer's correctness. Episodes that never produced a confidence are
/// skipped.
pub fn calibration_records(results: &[EpisodeResult]) -> Vec<CalibrationRecord> {
    results
        .iter()
        .filter_map(|r| {
            r.final_confidence().map(|c| CalibrationRecord {
                confidence: c,
                correct: r.correct,
            })
        })
        .collect()
}

/// Expected calibration error over `bins` equal-width bins on [0, 1]; a
/// confidence of exactly 1 falls in the last bin.
pub fn expected_calibration_error(records: &[CalibrationRecord], bins: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Metric("no calibration records".into()));
    }
    if bins == 0 {
        return Err(Error::Metric("need at least one bin".into()));
    }
    let mut confidences: Vec<Vec<f64>> = vec![Vec::new(); bins];
    let mut hits = vec![0usize; bins];
    for r in records {
        if !(0.0..=1.0).contains(&r.confidence) {
            return Err(Error::Metric(format!(
                "confidence {} outside [0, 1]",
                r.confidence
            )));
        }
        let b = ((r.confidence * bins as f64).floor() as usize).min(bins - 1);
        confidences[b].push(r.confidence);
        hits[b] += usize::from(r.correct);
    }
    let total = records.len() as f64;
    let mut ece = 0.0;
    for (confs, hit) in confidences.iter().zip(hits) {
        if confs.is_empty() {
            continue;
        }
        let size = confs.len() as f64;
        let conf = order_free_mean(confs).unwrap_or(0.0);
        let acc = hit as f64 / size;
        ece += size / total * (acc - conf).abs();
    }
    Ok(ece)
}

/// Number of episodes per question count.
pub fn question_histogram<R: Outcome>(results: &[R]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for r in results {
        *hist.entry(r.questions_asked()).or_insert(0) += 1;
    }
    hist
}

/// Share of cases where the final choice equals the expert's stated belief
/// about the most commonly correct option.
pub fn generality_agreement<R: Outcome>(
    results: &[R],
    beliefs: &HashMap<String, String>,
) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Metric("no results for agreement".into()));
    }
    let mut agree = 0;
    for r in results {
        let belief = beliefs.get(r.case_id()).ok_or_else(|| {
            Error::Metric(format!("no common-option belief for case {}", r.case_id()))
        })?;
        agree += usize::from(belief == r.final_choice());
    }
    Ok(agree as f64 / results.len() as f64)
}
