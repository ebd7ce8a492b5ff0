//! Per-question offline filtering and voting, online replay with early
//! stopping, and corpus-level aggregation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filtering::{
    filter_decision, online_abort_check, AbortDecision, FilterError, RejectReason, ThresholdSet,
};
use crate::parallel::{map_ordered, Execution};
use crate::reliability::{
    entropies, score_trace, select_k, ReliabilityError, RunningTurnStat, StageEntropies,
    StageScore, DEFAULT_FALLBACK_K, DEFAULT_K_GRID,
};
use crate::trace::{QuestionBundle, TraceRecord};
use crate::voting::{confidence_weight, majority_vote, weighted_vote, VoteError, VoteTally};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunError {
    #[error("question {0} has no valid trace")]
    QuestionSkipped(String),
    #[error("question {question_id}: {have} traces available, warmup needs {need}")]
    InsufficientTraces {
        question_id: String,
        have: usize,
        need: usize,
    },
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("token accounting: {0}")]
    Accounting(String),
    #[error(transparent)]
    Reliability(#[from] ReliabilityError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Vote(#[from] VoteError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Offline,
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Confidence weights from reliability and leap.
    #[default]
    Reliable,
    /// Every kept trace weighs 1.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub alpha: f64,
    pub tau: f64,
    pub beta: f64,
    pub budget: usize,
    /// Warmup size; `None` means 8 online and the whole budget offline.
    pub warmup: Option<usize>,
    pub k_grid: Vec<usize>,
    pub fallback_k: usize,
    /// Skips adaptive selection when set.
    pub fixed_k: Option<usize>,
    pub mode: Mode,
    pub weighting: Weighting,
    /// Per-token early abort during online replay.
    pub online_abort: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            tau: 0.1,
            beta: 0.9,
            budget: 32,
            warmup: None,
            k_grid: DEFAULT_K_GRID.to_vec(),
            fallback_k: DEFAULT_FALLBACK_K,
            fixed_k: None,
            mode: Mode::Offline,
            weighting: Weighting::Reliable,
            online_abort: true,
        }
    }
}

impl RunConfig {
    pub fn online() -> Self {
        Self {
            mode: Mode::Online,
            ..Self::default()
        }
    }

    pub fn effective_warmup(&self) -> usize {
        match (self.warmup, self.mode) {
            (Some(w), _) => w,
            (None, Mode::Online) => 8.min(self.budget),
            (None, Mode::Offline) => self.budget,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1)", self.alpha));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("beta {} outside (0, 1]", self.beta));
        }
        if self.budget == 0 {
            return bad("budget must be at least 1".into());
        }
        let w = self.effective_warmup();
        if w == 0 || w > self.budget {
            return bad(format!("warmup {w} outside [1, budget = {}]", self.budget));
        }
        if self.fallback_k == 0 || self.fixed_k == Some(0) {
            return bad("k must be at least 1".into());
        }
        if self.fixed_k.is_none() && self.k_grid.iter().all(|&k| k == 0) {
            return bad("k grid has no usable value".into());
        }
        Ok(())
    }
}

/// Entropies of one trace, per turn and per stage.
#[derive(Debug, Clone)]
pub struct PreparedTrace {
    pub trace_id: String,
    pub answer: Option<String>,
    pub tokens: usize,
    pub turn_entropies: Vec<Vec<f64>>,
    pub stages: StageEntropies,
}

impl PreparedTrace {
    pub fn new(trace: &TraceRecord) -> Result<Self, ReliabilityError> {
        let turn_entropies = trace
            .turns
            .iter()
            .map(|t| entropies(&t.tokens))
            .collect::<Result<Vec<_>, _>>()?;
        let n = turn_entropies.len();
        let stages = StageEntropies {
            mining: turn_entropies[..n - 1].concat(),
            reasoning: turn_entropies[n - 1].clone(),
        };
        Ok(Self {
            trace_id: trace.trace_id.clone(),
            answer: trace.answer.clone(),
            tokens: trace.total_tokens,
            turn_entropies,
            stages,
        })
    }

    /// Same trace with every entropy multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            turn_entropies: self
                .turn_entropies
                .iter()
                .map(|t| t.iter().map(|h| h * c).collect())
                .collect(),
            stages: self.stages.scaled(c),
            ..self.clone()
        }
    }
}

/// Where a replayed trace stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AbortPoint {
    /// 1-based turn index.
    pub turn: usize,
    /// 0-based token index inside that turn; this token was generated.
    pub token: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayOutcome {
    pub tokens_consumed: usize,
    pub aborted: Option<AbortPoint>,
}

/// Streams a trace token by token, applying the per-turn abort rule.
pub fn replay_trace(turn_entropies: &[Vec<f64>], k: usize, eta_m: f64) -> ReplayOutcome {
    let mut consumed = 0;
    for (ti, turn) in turn_entropies.iter().enumerate() {
        let mut stat = RunningTurnStat::new(k);
        for (j, &h) in turn.iter().enumerate() {
            stat.push(h);
            consumed += 1;
            if online_abort_check(&stat, eta_m) == AbortDecision::Abort {
                return ReplayOutcome {
                    tokens_consumed: consumed,
                    aborted: Some(AbortPoint {
                        turn: ti + 1,
                        token: j,
                    }),
                };
            }
        }
    }
    ReplayOutcome {
        tokens_consumed: consumed,
        aborted: None,
    }
}

/// Outcome of one trace inside a question run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceOutcome {
    pub trace_id: String,
    pub answer: Option<String>,
    /// Absent for traces that were aborted or never attempted.
    pub score: Option<StageScore>,
    pub weight: Option<f64>,
    pub kept: bool,
    pub reject_reason: Option<RejectReason>,
    pub aborted: bool,
    pub tokens_consumed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub question_id: String,
    pub chosen: Option<String>,
    pub ground_truth: Option<String>,
    pub correct: Option<bool>,
    /// Plain majority vote over every completed trace, for comparison.
    pub majority_answer: Option<String>,
    pub majority_correct: Option<bool>,
    pub consensus: Option<f64>,
    pub k: usize,
    pub thresholds: ThresholdSet,
    pub kept_trace_ids: Vec<String>,
    pub rel_size: usize,
    pub traces_attempted: usize,
    pub traces_aborted: usize,
    pub tokens_used: usize,
    pub tokens_full: usize,
    /// The filter emptied the reliable set and voting fell back to all traces.
    pub fallback: bool,
    pub traces: Vec<TraceOutcome>,
}

impl QuestionResult {
    pub fn tsr(&self) -> Result<f64, RunError> {
        token_saving_ratio(self.tokens_used, self.tokens_full)
    }
}

/// `1 - used / full`.
pub fn token_saving_ratio(tokens_used: usize, tokens_full: usize) -> Result<f64, RunError> {
    if tokens_full == 0 {
        return Err(RunError::Accounting("full-budget token count is zero".into()));
    }
    if tokens_used == 0 {
        return Err(RunError::Accounting("no tokens consumed".into()));
    }
    if tokens_used > tokens_full {
        return Err(RunError::Accounting(format!(
            "used {tokens_used} tokens out of a {tokens_full}-token budget"
        )));
    }
    Ok(1.0 - tokens_used as f64 / tokens_full as f64)
}

/// Selection-set statistics shared by both modes.
struct Calibration {
    k: usize,
    thresholds: ThresholdSet,
}

fn calibrate(selection: &[PreparedTrace], config: &RunConfig) -> Result<Calibration, RunError> {
    let k = match config.fixed_k {
        Some(k) => k,
        None => {
            let stages: Vec<StageEntropies> = selection.iter().map(|t| t.stages.clone()).collect();
            select_k(&stages, &config.k_grid, config.fallback_k)
        }
    };
    let scores = selection
        .iter()
        .map(|t| score_trace(&t.stages, k))
        .collect::<Result<Vec<_>, _>>()?;
    let thresholds = ThresholdSet::estimate(&scores, config.alpha, k)?;
    Ok(Calibration { k, thresholds })
}

fn weight_of(score: &StageScore, thresholds: &ThresholdSet, config: &RunConfig) -> Result<f64, RunError> {
    Ok(match config.weighting {
        Weighting::Reliable => confidence_weight(score, thresholds, config.tau)?,
        Weighting::Uniform => 1.0,
    })
}

fn scored_outcome(
    trace: &PreparedTrace,
    cal: &Calibration,
    config: &RunConfig,
) -> Result<TraceOutcome, RunError> {
    let score = score_trace(&trace.stages, cal.k)?;
    let reject_reason = filter_decision(&score, &cal.thresholds);
    Ok(TraceOutcome {
        trace_id: trace.trace_id.clone(),
        answer: trace.answer.clone(),
        weight: Some(weight_of(&score, &cal.thresholds, config)?),
        score: Some(score),
        kept: reject_reason.is_none(),
        reject_reason,
        aborted: false,
        tokens_consumed: trace.tokens,
    })
}

fn vote_over<'a, I>(outcomes: I) -> Result<Option<VoteTally>, RunError>
where
    I: IntoIterator<Item = &'a TraceOutcome>,
{
    let entries: Vec<(&str, f64)> = outcomes
        .into_iter()
        .filter_map(|o| Some((o.answer.as_deref()?, o.weight?)))
        .collect();
    if entries.is_empty() {
        return Ok(None);
    }
    Ok(Some(weighted_vote(&entries)?))
}

fn majority_over(outcomes: &[TraceOutcome]) -> Result<Option<VoteTally>, RunError> {
    let answers: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.aborted)
        .filter_map(|o| o.answer.as_deref())
        .collect();
    if answers.is_empty() {
        return Ok(None);
    }
    Ok(Some(majority_vote(&answers)?))
}

fn prepare(bundle: &QuestionBundle, limit: usize) -> Result<Vec<PreparedTrace>, RunError> {
    bundle
        .traces
        .iter()
        .take(limit)
        .map(|t| PreparedTrace::new(t).map_err(RunError::from))
        .collect()
}

/// Reliable set vote, falling back to every completed trace when the filter
/// left nothing with an answer.
fn final_vote(outcomes: &[TraceOutcome]) -> Result<(Option<VoteTally>, bool), RunError> {
    if let Some(t) = vote_over(outcomes.iter().filter(|o| o.kept))? {
        return Ok((Some(t), false));
    }
    let fallback = vote_over(outcomes.iter().filter(|o| !o.aborted))?;
    Ok((fallback, true))
}

fn finish(
    bundle: &QuestionBundle,
    cal: Calibration,
    outcomes: Vec<TraceOutcome>,
    tokens_used: usize,
    tokens_full: usize,
) -> Result<QuestionResult, RunError> {
    let (tally, fallback) = final_vote(&outcomes)?;
    let majority = majority_over(&outcomes)?;
    let truth = bundle.normalized_truth();
    let chosen = tally.as_ref().map(|t| t.chosen.clone());
    let majority_answer = majority.map(|t| t.chosen);
    let grade = |a: &Option<String>| truth.as_ref().map(|gt| a.as_ref() == Some(gt));
    let kept_trace_ids: Vec<String> = outcomes
        .iter()
        .filter(|o| o.kept)
        .map(|o| o.trace_id.clone())
        .collect();
    let rejected = bundle.rejected_tokens();
    Ok(QuestionResult {
        question_id: bundle.question_id.clone(),
        correct: grade(&chosen),
        majority_correct: grade(&majority_answer),
        chosen,
        majority_answer,
        ground_truth: truth,
        consensus: tally.map(|t| t.consensus),
        k: cal.k,
        thresholds: cal.thresholds,
        rel_size: kept_trace_ids.len(),
        kept_trace_ids,
        traces_attempted: outcomes.iter().filter(|o| o.tokens_consumed > 0).count(),
        traces_aborted: outcomes.iter().filter(|o| o.aborted).count(),
        tokens_used: tokens_used + rejected,
        tokens_full: tokens_full + rejected,
        fallback,
        traces: outcomes,
    })
}

/// Scores every trace, estimates thresholds on the whole set, filters and
/// votes.
pub fn run_offline(bundle: &QuestionBundle, config: &RunConfig) -> Result<QuestionResult, RunError> {
    config.validate()?;
    let traces = prepare(bundle, config.budget)?;
    if traces.is_empty() {
        return Err(RunError::QuestionSkipped(bundle.question_id.clone()));
    }
    let cal = calibrate(&traces, config)?;
    let outcomes = traces
        .iter()
        .map(|t| scored_outcome(t, &cal, config))
        .collect::<Result<Vec<_>, _>>()?;
    let total: usize = traces.iter().map(|t| t.tokens).sum();
    finish(bundle, cal, outcomes, total, total)
}

/// Replays stored traces in order as if they were generated live.
///
/// The warmup traces are consumed whole and fix `k` and the thresholds. After
/// that, traces are streamed token by token until the weighted consensus
/// reaches `beta` or the budget is spent; a trace whose running per-turn
/// reliability drops below the mining threshold is aborted on the spot.
pub fn run_online_replay(
    bundle: &QuestionBundle,
    config: &RunConfig,
) -> Result<QuestionResult, RunError> {
    config.validate()?;
    let warmup = config.effective_warmup();
    let traces = prepare(bundle, config.budget)?;
    if traces.is_empty() {
        return Err(RunError::QuestionSkipped(bundle.question_id.clone()));
    }
    if traces.len() < warmup {
        return Err(RunError::InsufficientTraces {
            question_id: bundle.question_id.clone(),
            have: traces.len(),
            need: warmup,
        });
    }

    let cal = calibrate(&traces[..warmup], config)?;
    let mut outcomes = traces[..warmup]
        .iter()
        .map(|t| scored_outcome(t, &cal, config))
        .collect::<Result<Vec<_>, _>>()?;
    let mut tokens_used: usize = traces[..warmup].iter().map(|t| t.tokens).sum();
    let eta_abort = if config.online_abort {
        cal.thresholds.eta_m
    } else {
        f64::NEG_INFINITY
    };

    let consensus = |outcomes: &[TraceOutcome]| -> Result<f64, RunError> {
        Ok(vote_over(outcomes.iter().filter(|o| o.kept))?.map_or(0.0, |t| t.consensus))
    };

    let mut next = warmup;
    while next < traces.len() && consensus(&outcomes)? < config.beta {
        let trace = &traces[next];
        next += 1;
        let replay = replay_trace(&trace.turn_entropies, cal.k, eta_abort);
        tokens_used += replay.tokens_consumed;
        if replay.aborted.is_some() {
            outcomes.push(TraceOutcome {
                trace_id: trace.trace_id.clone(),
                answer: trace.answer.clone(),
                score: None,
                weight: None,
                kept: false,
                reject_reason: None,
                aborted: true,
                tokens_consumed: replay.tokens_consumed,
            });
        } else {
            outcomes.push(scored_outcome(trace, &cal, config)?);
        }
    }

    let tokens_full: usize = traces.iter().map(|t| t.tokens).sum();
    finish(bundle, cal, outcomes, tokens_used, tokens_full)
}

pub fn run_question(bundle: &QuestionBundle, config: &RunConfig) -> Result<QuestionResult, RunError> {
    match config.mode {
        Mode::Offline => run_offline(bundle, config),
        Mode::Online => run_online_replay(bundle, config),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedQuestion {
    pub question_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub questions: usize,
    /// Questions with a ground truth to grade against.
    pub graded: usize,
    /// Percent; `None` when nothing could be graded.
    pub accuracy: Option<f64>,
    pub majority_accuracy: Option<f64>,
    pub tsr: Option<f64>,
    pub tokens_used: usize,
    pub tokens_full: usize,
    pub fallbacks: usize,
    pub mean_traces_used: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub corpus: CorpusSummary,
    pub per_question: Vec<QuestionResult>,
    #[serde(default)]
    pub skipped: Vec<SkippedQuestion>,
}

impl RunReport {
    pub fn question(&self, question_id: &str) -> Option<&QuestionResult> {
        self.per_question.iter().find(|q| q.question_id == question_id)
    }
}

fn percent(flags: impl Iterator<Item = Option<bool>>) -> (usize, Option<f64>) {
    let graded: Vec<bool> = flags.flatten().collect();
    if graded.is_empty() {
        return (0, None);
    }
    let correct = graded.iter().filter(|c| **c).count();
    (graded.len(), Some(100.0 * correct as f64 / graded.len() as f64))
}

pub fn summarize(per_question: &[QuestionResult], skipped: usize) -> CorpusSummary {
    let (graded, accuracy) = percent(per_question.iter().map(|q| q.correct));
    let (_, majority_accuracy) = percent(per_question.iter().map(|q| q.majority_correct));
    let tokens_used: usize = per_question.iter().map(|q| q.tokens_used).sum();
    let tokens_full: usize = per_question.iter().map(|q| q.tokens_full).sum();
    let mean_traces_used = if per_question.is_empty() {
        0.0
    } else {
        per_question.iter().map(|q| q.traces_attempted).sum::<usize>() as f64
            / per_question.len() as f64
    };
    CorpusSummary {
        questions: per_question.len(),
        graded,
        accuracy,
        majority_accuracy,
        tsr: token_saving_ratio(tokens_used, tokens_full).ok(),
        tokens_used,
        tokens_full,
        fallbacks: per_question.iter().filter(|q| q.fallback).count(),
        mean_traces_used,
        skipped,
    }
}

pub fn run_benchmark(bundles: &[QuestionBundle], config: &RunConfig) -> Result<RunReport, RunError> {
    run_benchmark_with(bundles, config, Execution::default())
}

/// Runs every question independently and reduces in question-id order.
/// Questions that cannot be run are listed in `skipped`; configuration errors
/// abort the whole run.
pub fn run_benchmark_with(
    bundles: &[QuestionBundle],
    config: &RunConfig,
    exec: Execution,
) -> Result<RunReport, RunError> {
    config.validate()?;
    let results = map_ordered(bundles, exec, |b| run_question(b, config));
    let mut per_question = Vec::with_capacity(results.len());
    let mut skipped = Vec::new();
    for (bundle, result) in bundles.iter().zip(results) {
        match result {
            Ok(r) => per_question.push(r),
            Err(e @ (RunError::QuestionSkipped(_) | RunError::InsufficientTraces { .. })) => {
                skipped.push(SkippedQuestion {
                    question_id: bundle.question_id.clone(),
                    reason: e.to_string(),
                })
            }
            Err(e) => return Err(e),
        }
    }
    per_question.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    skipped.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    Ok(RunReport {
        config: config.clone(),
        corpus: summarize(&per_question, skipped.len()),
        per_question,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{BBox, TokenInfo, Turn};

    fn toks(h: &[f64]) -> Vec<TokenInfo> {
        h.iter().map(|&h| TokenInfo::from_entropy(h)).collect()
    }

    fn trace(id: &str, mining: &[&[f64]], reasoning: &[f64], answer: &str) -> TraceRecord {
        let mut turns: Vec<Turn> = mining
            .iter()
            .map(|m| Turn::mining(toks(m), BBox::new(0.0, 0.0, 10.0, 10.0)))
            .collect();
        let text = format!("so \\boxed{{{answer}}}");
        turns.push(Turn::reasoning(toks(reasoning), text.clone()));
        TraceRecord::new("q", id, turns, text).unwrap()
    }

    fn bundle(traces: Vec<TraceRecord>, truth: Option<&str>) -> QuestionBundle {
        let mut b = QuestionBundle::new("q", traces);
        b.ground_truth = truth.map(String::from);
        b
    }

    fn k1() -> RunConfig {
        RunConfig {
            fixed_k: Some(1),
            ..RunConfig::default()
        }
    }

    #[test]
    fn offline_micro_instance() {
        let b = bundle(
            vec![
                trace("t0", &[&[0.2]], &[0.1], "A"),
                trace("t1", &[&[0.9]], &[0.8], "B"),
                trace("t2", &[&[0.3]], &[0.1], "A"),
            ],
            Some("A"),
        );
        let r = run_offline(&b, &k1()).unwrap();
        assert_eq!(r.kept_trace_ids, ["t0", "t2"]);
        assert_eq!(r.chosen.as_deref(), Some("A"));
        assert_eq!(r.correct, Some(true));
        assert!(!r.fallback);
        assert_eq!(r.traces[1].reject_reason, Some(RejectReason::BothBelowThreshold));
    }

    #[test]
    fn offline_singleton_and_unanimity() {
        let b = bundle(vec![trace("t0", &[], &[0.7, 0.2], "C")], None);
        for alpha in [0.0, 0.5, 0.99] {
            let r = run_offline(&b, &RunConfig { alpha, ..k1() }).unwrap();
            assert_eq!(r.chosen.as_deref(), Some("C"));
            assert_eq!(r.correct, None);
        }

        let same = (0..5)
            .map(|i| trace(&format!("t{i}"), &[&[0.4, 0.1]], &[0.2, 0.3], "B"))
            .collect();
        let r = run_offline(&bundle(same, None), &RunConfig::default()).unwrap();
        assert_eq!((r.chosen.as_deref(), r.consensus), (Some("B"), Some(1.0)));
    }

    #[test]
    fn offline_rejects_empty_bundle() {
        let b = bundle(vec![], None);
        assert_eq!(
            run_offline(&b, &RunConfig::default()),
            Err(RunError::QuestionSkipped("q".into()))
        );
    }

    #[test]
    fn online_needs_warmup_traces() {
        let b = bundle(vec![trace("t0", &[], &[0.1], "A")], None);
        let err = run_online_replay(&b, &RunConfig::online()).unwrap_err();
        assert!(matches!(err, RunError::InsufficientTraces { have: 1, need: 8, .. }));
    }

    #[test]
    fn unanimous_warmup_stops_immediately() {
        let traces = (0..4)
            .map(|i| trace(&format!("t{i}"), &[&[0.3; 3]], &[0.1; 5], "D"))
            .collect();
        let b = bundle(traces, None);
        let cfg = RunConfig {
            warmup: Some(2),
            budget: 4,
            ..RunConfig::online()
        };
        let r = run_online_replay(&b, &cfg).unwrap();
        assert_eq!(r.traces_attempted, 2);
        assert_eq!((r.tokens_used, r.tokens_full), (16, 32));
        assert_eq!(r.tsr().unwrap(), 0.5);
    }

    #[test]
    fn abort_at_first_violating_token() {
        let b = bundle(
            vec![
                trace("w0", &[&[0.1, 0.1]], &[0.1, 0.1], "A"),
                trace("w1", &[&[0.1, 0.1]], &[0.1, 0.1], "B"),
                trace("x", &[&[0.05; 3], &[0.05, 0.05, 0.3, 0.05]], &[0.1, 0.1], "A"),
            ],
            None,
        );
        let cfg = RunConfig {
            alpha: 0.0,
            beta: 1.0,
            warmup: Some(2),
            budget: 3,
            fixed_k: Some(2),
            ..RunConfig::online()
        };
        let r = run_online_replay(&b, &cfg).unwrap();
        let x = &r.traces[2];
        assert!(x.aborted && !x.kept && x.weight.is_none());
        assert_eq!(x.tokens_consumed, 6);
        assert_eq!((r.tokens_used, r.tokens_full), (14, 17));
        assert_eq!(r.traces_aborted, 1);

        let replay = replay_trace(&PreparedTrace::new(&b.traces[2]).unwrap().turn_entropies, 2, -0.1);
        assert_eq!(replay.aborted, Some(AbortPoint { turn: 2, token: 2 }));
    }

    #[test]
    fn degenerate_online_matches_majority() {
        let answers = ["A", "B", "B", "C", "B", "A"];
        let traces = answers
            .iter()
            .enumerate()
            .map(|(i, a)| trace(&format!("t{i}"), &[&[0.1 * (i + 1) as f64]], &[0.9, 0.05 * i as f64], a))
            .collect();
        let b = bundle(traces, Some("B"));
        let cfg = RunConfig {
            alpha: 0.0,
            beta: 1.0,
            budget: 6,
            warmup: Some(6),
            weighting: Weighting::Uniform,
            ..RunConfig::online()
        };
        let on = run_online_replay(&b, &cfg).unwrap();
        let off = run_offline(&b, &RunConfig { mode: Mode::Offline, ..cfg.clone() }).unwrap();
        assert_eq!(on.chosen, off.majority_answer);
        assert_eq!(on.chosen.as_deref(), Some("B"));
        assert_eq!(on.tsr().unwrap(), 0.0);
    }

    #[test]
    fn tsr_examples() {
        assert!((token_saving_ratio(400, 1000).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(token_saving_ratio(1000, 1000).unwrap(), 0.0);
        assert!(matches!(token_saving_ratio(0, 1000), Err(RunError::Accounting(_))));
        assert!(matches!(token_saving_ratio(1001, 1000), Err(RunError::Accounting(_))));
        assert!(token_saving_ratio(0, 0).is_err());
    }

    fn one_trace_question(qid: &str, answer: &str, truth: Option<&str>) -> QuestionBundle {
        let mut t = trace("t0", &[], &[0.2], answer);
        t.question_id = qid.into();
        let mut b = bundle(vec![t], truth);
        b.question_id = qid.into();
        b
    }

    #[test]
    fn benchmark_accuracy() {
        let both = [
            one_trace_question("q1", "A", Some("A")),
            one_trace_question("q0", "B", Some("B")),
        ];
        let r = run_benchmark(&both, &RunConfig::default()).unwrap();
        assert_eq!(r.corpus.accuracy, Some(100.0));
        assert_eq!(r.per_question[0].question_id, "q0");

        let mixed = [
            one_trace_question("q0", "A", Some("A")),
            one_trace_question("q1", "B", Some("B")),
            one_trace_question("q2", "C", Some("C")),
            one_trace_question("q3", "C", Some("D")),
        ];
        let r = run_benchmark(&mixed, &RunConfig::default()).unwrap();
        assert_eq!(r.corpus.accuracy, Some(75.0));

        let ungraded = [one_trace_question("q0", "A", None)];
        let r = run_benchmark(&ungraded, &RunConfig::default()).unwrap();
        assert_eq!((r.corpus.accuracy, r.corpus.graded), (None, 0));
    }

    #[test]
    fn benchmark_skips_unrunnable_questions() {
        let qs = [one_trace_question("q0", "A", Some("A")), bundle(vec![], None)];
        let r = run_benchmark(&qs, &RunConfig::default()).unwrap();
        assert_eq!(r.per_question.len(), 1);
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.corpus.skipped, 1);
    }

    #[test]
    fn config_validation() {
        let bad = [
            RunConfig { alpha: 1.0, ..RunConfig::default() },
            RunConfig { tau: 0.0, ..RunConfig::default() },
            RunConfig { beta: 0.0, ..RunConfig::default() },
            RunConfig { warmup: Some(40), ..RunConfig::default() },
            RunConfig { budget: 0, ..RunConfig::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(RunError::InvalidConfig(_))), "{c:?}");
        }
        assert_eq!(RunConfig::online().effective_warmup(), 8);
        assert_eq!(RunConfig::default().effective_warmup(), 32);
    }
}
