//! Percentile thresholds, dual-stage trace filtering and the online abort rule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reliability::{RunningTurnStat, StageScore};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("no reliabilities to estimate a threshold from")]
    EmptySelection,
    #[error("filtering ratio {0} outside [0, 1)")]
    InvalidAlpha(f64),
}

/// Per-question thresholds estimated from a selection set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub eta_m: f64,
    pub eta_r: f64,
    pub k: usize,
    pub alpha: f64,
}

impl ThresholdSet {
    /// Estimates both thresholds from the selection scores.
    ///
    /// `eta_r` uses every trace (single-stage ones have a reasoning stage too);
    /// `eta_m` uses the two-stage traces and falls back to `eta_r` when there
    /// are none.
    pub fn estimate(scores: &[StageScore], alpha: f64, k: usize) -> Result<Self, FilterError> {
        let w_r: Vec<f64> = scores.iter().map(|s| s.w_r).collect();
        let eta_r = stage_threshold(&w_r, alpha)?;
        let w_m: Vec<f64> = scores.iter().filter_map(|s| s.w_m).collect();
        let eta_m = if w_m.is_empty() {
            eta_r
        } else {
            stage_threshold(&w_m, alpha)?
        };
        Ok(Self {
            eta_m,
            eta_r,
            k,
            alpha,
        })
    }

    /// Thresholds that keep everything and never abort.
    pub fn permissive(k: usize) -> Self {
        Self {
            eta_m: f64::NEG_INFINITY,
            eta_r: f64::NEG_INFINITY,
            k,
            alpha: 0.0,
        }
    }
}

/// Nearest-rank lower percentile: the value at index `floor(alpha * n)` of the
/// ascending sort. Keeping `w >= eta` drops exactly `floor(alpha * n)` values
/// when there are no ties at the threshold.
pub fn stage_threshold(values: &[f64], alpha: f64) -> Result<f64, FilterError> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(FilterError::InvalidAlpha(alpha));
    }
    if values.is_empty() {
        return Err(FilterError::EmptySelection);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((alpha * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    Ok(sorted[idx])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MiningBelowThreshold,
    ReasoningBelowThreshold,
    BothBelowThreshold,
}

/// Keep decision for a single trace; `None` means kept.
pub fn filter_decision(score: &StageScore, thresholds: &ThresholdSet) -> Option<RejectReason> {
    let mining_ok = score.w_m.is_none_or(|w_m| w_m >= thresholds.eta_m);
    let reasoning_ok = score.w_r >= thresholds.eta_r;
    match (mining_ok, reasoning_ok) {
        (true, true) => None,
        (false, true) => Some(RejectReason::MiningBelowThreshold),
        (true, false) => Some(RejectReason::ReasoningBelowThreshold),
        (false, false) => Some(RejectReason::BothBelowThreshold),
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterOutcome {
    /// Kept trace ids, in input order.
    pub kept: Vec<String>,
    pub rejected: Vec<(String, RejectReason)>,
}

pub fn dual_stage_filter<'a, I>(scores: I, thresholds: &ThresholdSet) -> FilterOutcome
where
    I: IntoIterator<Item = (&'a str, &'a StageScore)>,
{
    let mut outcome = FilterOutcome::default();
    for (id, score) in scores {
        match filter_decision(score, thresholds) {
            None => outcome.kept.push(id.to_owned()),
            Some(reason) => outcome.rejected.push((id.to_owned(), reason)),
        }
    }
    outcome
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortDecision {
    Continue,
    Abort,
}

/// Abort once the turn has at least `k` tokens and its running reliability has
/// dropped below the mining threshold. The running value can only fall from
/// there on, so the finished turn would fail the same check.
pub fn online_abort_check(stat: &RunningTurnStat, eta_m: f64) -> AbortDecision {
    if stat.n_seen() >= stat.k() && stat.reliability() < eta_m {
        AbortDecision::Abort
    } else {
        AbortDecision::Continue
    }
}
