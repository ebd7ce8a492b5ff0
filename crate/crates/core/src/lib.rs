//! Reliability-aware test-time scaling over multi-turn image-text reasoning
//! traces.
//!
//! Traces are scored by the entropy of their most uncertain tokens, stage by
//! stage; unreliable traces are filtered per question with percentile
//! thresholds and the survivors vote with confidence weights. An online replay
//! mode early-stops traces and questions to save tokens.

pub mod filtering;
pub mod metrics;
pub mod orchestrator;
pub mod parallel;
pub mod reliability;
pub mod synth;
pub mod trace;
pub mod voting;

pub use filtering::{
    dual_stage_filter, online_abort_check, stage_threshold, AbortDecision, FilterOutcome,
    RejectReason, ThresholdSet,
};
pub use orchestrator::{
    run_benchmark, run_offline, run_online_replay, token_saving_ratio, Mode, QuestionResult,
    RunConfig, RunError, RunReport, Weighting,
};
pub use parallel::Execution;
pub use reliability::{
    score_trace, select_k, stage_reliability, token_entropy, RunningTurnStat, StageEntropies,
    StageScore,
};
pub use trace::{
    extract_answer, parse_trace_log, segment_stages, BBox, QuestionBundle, TokenInfo, TraceRecord,
    Turn, TurnKind,
};
pub use voting::{confidence_weight, majority_vote, weighted_vote, VoteTally};

