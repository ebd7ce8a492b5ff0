//! Live trace acquisition: drives an OpenAI-compatible chat endpoint that
//! reports per-token log-probabilities through a crop-and-requery loop and
//! records the dialogues as trace-log records.

pub mod client;
pub mod crop;
pub mod harvest;
pub mod mock;

use thiserror::Error;

pub use client::{DecodingParams, Endpoint, Matcher, RetryPolicy};
pub use crop::{crop_tool, Crop, ToolError};
pub use harvest::{
    harvest_question, harvest_trace, read_questions, HarvestConfig, HarvestedQuestion, Question,
    TraceAttempt,
};

#[derive(Debug, Error)]
pub enum HarvestError {
    #[error("endpoint does not support log-probabilities: {0}")]
    UnsupportedEndpoint(String),
    #[error("transport failed after {attempts} attempts: {reason}")]
    Transport { attempts: u32, reason: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed reply: {0}")]
    BadReply(String),
    #[error("trace {trace_id} failed validation: {reason}")]
    Invalid { trace_id: String, reason: String },
    #[error("question input line {line}: {reason}")]
    Input { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
