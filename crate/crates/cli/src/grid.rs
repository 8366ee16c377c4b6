//! Expansion of the configured axes into concrete grid points.
//!
//! Interactive points are strategy × threshold × rationale × self-consistency
//! × patient variant; rationale and self-consistency apply only to the
//! strategies that elicit a confidence. Each info level adds one
//! non-interactive point.

use consult_core::episode::{AbstainStrategy, EpisodeConfig, ScaleLevel, Threshold};
use consult_core::expert::InfoLevel;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PointKind {
    Interactive {
        config: EpisodeConfig,
    },
    NonInteractive {
        level: InfoLevel,
        config: EpisodeConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    /// File-name-safe identifier, e.g. `numerical-t0.7-rg-sc3-fact_select`.
    pub label: String,
    #[serde(flatten)]
    pub kind: PointKind,
}

impl GridPoint {
    pub fn episode_config(&self) -> &EpisodeConfig {
        match &self.kind {
            PointKind::Interactive { config } | PointKind::NonInteractive { config, .. } => config,
        }
    }

    pub fn is_interactive(&self) -> bool {
        matches!(self.kind, PointKind::Interactive { .. })
    }
}

fn base_config(exp: &ExperimentConfig) -> EpisodeConfig {
    EpisodeConfig {
        max_questions: exp.max_questions,
        include_abstain_context_in_qgen: exp.include_abstain_context,
        temperature: exp.temperature,
        top_p: exp.top_p,
        shuffle_options_seed: exp.seed,
        ..EpisodeConfig::default()
    }
}

fn thresholds(
    exp: &ExperimentConfig,
    strategy: AbstainStrategy,
) -> Result<Vec<(Threshold, String)>> {
    Ok(match strategy {
        AbstainStrategy::Basic | AbstainStrategy::Binary => vec![(Threshold::None, String::new())],
        AbstainStrategy::Numerical => exp
            .grid
            .numerical_thresholds
            .iter()
            .map(|&t| (Threshold::Confidence(t), format!("-t{t}")))
            .collect(),
        AbstainStrategy::Scale => exp
            .grid
            .scale_thresholds
            .iter()
            .map(|&t| {
                ScaleLevel::from_ordinal(t)
                    .map(|level| (Threshold::Scale(level), format!("-t{t}")))
                    .ok_or_else(|| CliError::Config(format!("scale threshold {t} is not 1..=5")))
            })
            .collect::<Result<_>>()?,
        AbstainStrategy::Fixed => exp
            .grid
            .fixed_thresholds
            .iter()
            .map(|&q| (Threshold::Questions(q), format!("-q{q}")))
            .collect(),
    })
}

/// All grid points in a stable order: interactive points by strategy,
/// threshold, rationale, self-consistency and variant, then the
/// non-interactive levels. Every episode config is validated.
pub fn expand(exp: &ExperimentConfig) -> Result<Vec<GridPoint>> {
    let base = base_config(exp);
    let mut points = Vec::new();
    for &strategy in &exp.grid.strategies {
        let confident = strategy.elicits_confidence();
        let rationale: &[bool] = if confident {
            &exp.grid.rationale
        } else {
            &[false]
        };
        let sc_factors: &[usize] = if confident {
            &exp.grid.sc_factors
        } else {
            &[1]
        };
        for (threshold, t_label) in thresholds(exp, strategy)? {
            for &rg in rationale {
                for &sc in sc_factors {
                    for &variant in &exp.grid.patient_variants {
                        let config = EpisodeConfig {
                            abstain_strategy: strategy,
                            threshold,
                            rationale_generation: rg,
                            self_consistency: sc > 1,
                            sc_factor: sc,
                            patient_variant: variant,
                            ..base.clone()
                        };
                        let mut label = format!("{}{t_label}", strategy.name());
                        if rg {
                            label.push_str("-rg");
                        }
                        if sc > 1 {
                            label.push_str(&format!("-sc{sc}"));
                        }
                        label.push('-');
                        label.push_str(variant.name());
                        config
                            .validate()
                            .map_err(|e| CliError::Config(format!("grid point {label}: {e}")))?;
                        points.push(GridPoint {
                            label,
                            kind: PointKind::Interactive { config },
                        });
                    }
                }
            }
        }
    }
    for &level in &exp.grid.info_levels {
        points.push(GridPoint {
            label: format!("noninteractive-{}", level.name()),
            kind: PointKind::NonInteractive {
                level,
                config: base.clone(),
            },
        });
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = points.iter().find(|p| !seen.insert(p.label.clone())) {
        return Err(CliError::Config(format!(
            "grid point {} appears twice",
            dup.label
        )));
    }
    Ok(points)
}
