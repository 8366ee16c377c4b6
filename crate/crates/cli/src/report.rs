//! The flat key=value summary, always recomputed from persisted streams.
//!
//! Numbers use fixed precision and the file holds no timestamps, so equal
//! results give equal bytes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use consult_core::metrics::{
    accuracy_summary, expected_calibration_error, generality_agreement, mean_questions,
    question_histogram, CalibrationRecord,
};

use crate::records::{read_results, BeliefRecord, CaseRecord};
use crate::runner::Manifest;
use crate::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.txt";
/// A grid point is flagged when more than this share of its cases failed.
pub const FAILURE_FLAG_RATE: f64 = 0.10;

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

fn fixed(x: f64) -> String {
    format!("{x:.6}")
}

fn opt(x: Option<f64>) -> String {
    x.map(fixed).unwrap_or_else(|| "na".into())
}

fn failure_rate(records: &[CaseRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.failed()).count() as f64 / records.len() as f64
}

pub fn is_flagged(records: &[CaseRecord]) -> bool {
    failure_rate(records) > FAILURE_FLAG_RATE
}

/// Summary lines for one grid point's results stream.
pub fn summarize_point(
    label: &str,
    records: &[CaseRecord],
    ece_bins: usize,
    beliefs: Option<&HashMap<String, String>>,
) -> Result<String> {
    let mut s = String::new();
    let completed: Vec<CaseRecord> = records.iter().filter(|r| !r.failed()).cloned().collect();
    let failures = records.len() - completed.len();
    let failure_rate = failure_rate(records);
    let w = &mut s;
    writeln!(w, "{label}.cases={}", records.len()).ok();
    writeln!(w, "{label}.completed={}", completed.len()).ok();
    writeln!(w, "{label}.failures={failures}").ok();
    writeln!(w, "{label}.failure_rate={}", fixed(failure_rate)).ok();
    writeln!(w, "{label}.flagged={}", is_flagged(records)).ok();
    match accuracy_summary(&completed) {
        Ok(acc) => {
            writeln!(w, "{label}.correct={}", acc.correct).ok();
            writeln!(w, "{label}.accuracy={}", fixed(acc.p)).ok();
            writeln!(w, "{label}.accuracy_sd={}", fixed(acc.sd)).ok();
        }
        Err(_) => {
            writeln!(w, "{label}.correct=0").ok();
            writeln!(w, "{label}.accuracy=na").ok();
            writeln!(w, "{label}.accuracy_sd=na").ok();
        }
    }
    let invalid = completed.iter().filter(|r| r.invalid_output).count();
    writeln!(w, "{label}.invalid_outputs={invalid}").ok();
    writeln!(
        w,
        "{label}.mean_questions={}",
        opt(mean_questions(&completed))
    )
    .ok();
    let calibration = completed
        .iter()
        .filter_map(|r| {
            r.final_confidence
                .map(|c| CalibrationRecord::new(c, r.correct))
        })
        .collect::<consult_core::Result<Vec<_>>>()?;
    let ece = if calibration.is_empty() {
        None
    } else {
        Some(expected_calibration_error(&calibration, ece_bins)?)
    };
    writeln!(w, "{label}.ece={}", opt(ece)).ok();
    writeln!(w, "{label}.ece_records={}", calibration.len()).ok();
    let histogram = question_histogram(&completed)
        .iter()
        .map(|(q, n)| format!("{q}:{n}"))
        .collect::<Vec<_>>()
        .join(",");
    writeln!(w, "{label}.question_histogram={histogram}").ok();
    if let Some(beliefs) = beliefs {
        let scored: Vec<CaseRecord> = completed
            .iter()
            .filter(|r| beliefs.contains_key(&r.case_id))
            .cloned()
            .collect();
        let agreement = if scored.is_empty() {
            None
        } else {
            Some(generality_agreement(&scored, beliefs)?)
        };
        writeln!(w, "{label}.generality_agreement={}", opt(agreement)).ok();
        writeln!(w, "{label}.generality_cases={}", scored.len()).ok();
    }
    Ok(s)
}

/// Renders the report for a run directory from its manifest and streams.
pub fn render_report(dir: &Path) -> Result<String> {
    let manifest = read_manifest(dir)?;
    let beliefs = match &manifest.beliefs {
        Some(file) => {
            let records: Vec<BeliefRecord> = consult_core::jsonl::read_jsonl(dir.join(file))?;
            Some(
                records
                    .into_iter()
                    .filter_map(|b| b.belief.map(|belief| (b.case_id, belief)))
                    .collect::<HashMap<_, _>>(),
            )
        }
        None => None,
    };
    let mut s = String::new();
    writeln!(s, "run_fingerprint={}", manifest.run_fingerprint).ok();
    writeln!(s, "cases={}", manifest.cases).ok();
    writeln!(s, "grid_points={}", manifest.grid_points.len()).ok();
    writeln!(s, "ece_bins={}", manifest.ece_bins).ok();
    let mut flagged = Vec::new();
    for mp in &manifest.grid_points {
        let label = &mp.point.label;
        let records = read_results(dir.join(&mp.results))?;
        if let Some(r) = records
            .iter()
            .find(|r| r.run_fingerprint != manifest.run_fingerprint)
        {
            return Err(CliError::Transcript(format!(
                "{}: case {} belongs to run {}",
                mp.results, r.case_id, r.run_fingerprint
            )));
        }
        writeln!(
            s,
            "{label}.kind={}",
            if mp.point.is_interactive() {
                "interactive"
            } else {
                "noninteractive"
            }
        )
        .ok();
        writeln!(
            s,
            "{label}.episode_config_fingerprint={}",
            mp.episode_config_fingerprint
        )
        .ok();
        if is_flagged(&records) {
            flagged.push(label.clone());
        }
        s.push_str(&summarize_point(
            label,
            &records,
            manifest.ece_bins,
            beliefs.as_ref(),
        )?);
    }
    writeln!(s, "flagged_grid_points={}", flagged.join(",")).ok();
    Ok(s)
}

/// Writes `report.txt` into the run directory.
pub fn write_report(dir: &Path) -> Result<PathBuf> {
    let path = dir.join(REPORT_FILE);
    std::fs::write(&path, render_report(dir)?)?;
    Ok(path)
}

/// Parses a report back into key/value pairs.
pub fn parse_report(text: &str) -> HashMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}
