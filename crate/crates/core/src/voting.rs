//! Confidence weights and weighted answer aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filtering::ThresholdSet;
use crate::reliability::StageScore;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VoteError {
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("no votes to aggregate")]
    EmptyVote,
    #[error("vote weight must be positive and finite, got {0}")]
    InvalidWeight(f64),
}

/// Clamp on `|w_t|` for fully confident traces.
pub const WEIGHT_EPSILON: f64 = 1e-9;
/// Exponent bound; keeps every weight finite and strictly positive.
pub const MAX_EXPONENT: f64 = 700.0;

/// `exp(leap / (|w_t| * tau))` for two-stage traces and
/// `exp((eta_r - eta_m) / (|w_t| * tau))` for single-stage ones.
pub fn confidence_weight(
    score: &StageScore,
    thresholds: &ThresholdSet,
    tau: f64,
) -> Result<f64, VoteError> {
    if !(tau > 0.0) {
        return Err(VoteError::InvalidTemperature(tau));
    }
    let numerator = if score.two_stage {
        score.delta
    } else {
        thresholds.eta_r - thresholds.eta_m
    };
    let exponent = numerator / (score.w_t.abs().max(WEIGHT_EPSILON) * tau);
    Ok(exponent.clamp(-MAX_EXPONENT, MAX_EXPONENT).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteTally {
    /// Accumulated weight per answer.
    pub totals: BTreeMap<String, f64>,
    pub chosen: String,
    /// `V(chosen) / sum V`.
    pub consensus: f64,
}

/// Aggregates weights per answer.
///
/// Ties on the total go to the answer holding the single heaviest vote, then
/// to the lexicographically smallest answer. Per-answer sums are taken in a
/// canonical order so the result does not depend on entry order.
pub fn weighted_vote<S: AsRef<str>>(entries: &[(S, f64)]) -> Result<VoteTally, VoteError> {
    if entries.is_empty() {
        return Err(VoteError::EmptyVote);
    }
    let mut per_answer: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (answer, w) in entries {
        if !(*w > 0.0 && w.is_finite()) {
            return Err(VoteError::InvalidWeight(*w));
        }
        per_answer.entry(answer.as_ref()).or_default().push(*w);
    }

    let mut totals = BTreeMap::new();
    let mut best: Option<(&str, f64, f64)> = None;
    for (answer, weights) in per_answer.iter_mut() {
        weights.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = weights.iter().sum();
        let heaviest = weights[0];
        totals.insert((*answer).to_owned(), total);
        // BTreeMap iteration is lexicographic, so strict comparisons keep the
        // smallest answer on a full tie
        let better = match best {
            None => true,
            Some((_, bt, bh)) => total > bt || (total == bt && heaviest > bh),
        };
        if better {
            best = Some((answer, total, heaviest));
        }
    }

    let (chosen, chosen_total, _) = best.expect("entries are nonempty");
    let grand: f64 = totals.values().sum();
    Ok(VoteTally {
        chosen: chosen.to_owned(),
        consensus: chosen_total / grand,
        totals,
    })
}

/// Plain self-consistency vote: every answer weighs 1.
pub fn majority_vote<S: AsRef<str>>(answers: &[S]) -> Result<VoteTally, VoteError> {
    let entries: Vec<(&str, f64)> = answers.iter().map(|a| (a.as_ref(), 1.0)).collect();
    weighted_vote(&entries)
}
