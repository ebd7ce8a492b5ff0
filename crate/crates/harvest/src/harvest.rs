//! Multi-turn trace collection: query, crop, re-query until an answer.

use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracevote_core::trace::{normalize_answer, QuestionBundle};
use tracevote_core::{extract_answer, TraceRecord, Turn};

use crate::client::{DecodingParams, Endpoint, Matcher};
use crate::crop::crop_tool;
use crate::HarvestError;

pub const MULTIPLE_CHOICE_PROMPT: &str = include_str!("../prompts/multiple_choice.txt");
pub const OPEN_ENDED_PROMPT: &str = include_str!("../prompts/open_ended.txt");

/// One line of the question file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub image_path: PathBuf,
    pub question_text: String,
    #[serde(default)]
    pub choices: Option<Vec<String>>,
    #[serde(default)]
    pub ground_truth: Option<String>,
}

impl Question {
    pub fn user_text(&self) -> String {
        match &self.choices {
            None => self.question_text.clone(),
            Some(choices) => {
                let mut s = self.question_text.clone();
                s.push_str("\nOptions:");
                for (i, c) in choices.iter().enumerate() {
                    let letter = (b'A' + i as u8) as char;
                    s.push_str(&format!("\n({letter}) {c}"));
                }
                s
            }
        }
    }

    /// System prompt for this question: multiple choice when choices exist.
    pub fn default_prompt(&self) -> &'static str {
        if self.choices.is_some() {
            MULTIPLE_CHOICE_PROMPT
        } else {
            OPEN_ENDED_PROMPT
        }
    }
}

pub fn read_questions<R: BufRead>(reader: R) -> Result<Vec<Question>, HarvestError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: Question = serde_json::from_str(&line).map_err(|e| HarvestError::Input {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(q);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct HarvestConfig {
    pub traces: usize,
    /// Turns per trace before it is given up as truncated.
    pub max_turns: usize,
    pub concurrency: usize,
    pub decoding: DecodingParams,
    /// Overrides the per-question system prompt.
    pub system_prompt: Option<String>,
    /// Where crops are written.
    pub work_dir: PathBuf,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        Self {
            traces: 32,
            max_turns: 8,
            concurrency: 4,
            decoding: DecodingParams::default(),
            system_prompt: None,
            work_dir: std::env::temp_dir(),
        }
    }
}

/// Result of driving one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceAttempt {
    pub trace_id: String,
    pub record: Option<TraceRecord>,
    /// Set when the dialogue ended without a usable trace.
    pub truncated: Option<String>,
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarvestedQuestion {
    /// Valid traces only, in trace-index order.
    pub bundle: QuestionBundle,
    /// Trace ids left out, with the reason.
    pub excluded: Vec<(String, String)>,
    pub retries: u32,
}

fn data_url(path: &Path) -> Result<String, HarvestError> {
    let bytes = std::fs::read(path).map_err(|e| HarvestError::Input {
        line: 0,
        reason: format!("{}: {e}", path.display()),
    })?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(e) if e == "jpg" || e == "jpeg" => "image/jpeg",
        _ => "image/png",
    };
    let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{mime};base64,{b64}"))
}

fn image_part(url: String) -> Value {
    json!({"type": "image_url", "image_url": {"url": url}})
}

/// Runs the query/crop loop for one trace.
pub fn harvest_trace(
    endpoint: &Endpoint,
    question: &Question,
    image: &Path,
    trace_id: &str,
    config: &HarvestConfig,
) -> Result<TraceAttempt, HarvestError> {
    let system = config
        .system_prompt
        .clone()
        .unwrap_or_else(|| question.default_prompt().to_owned());
    let mut messages = vec![
        json!({"role": "system", "content": system}),
        json!({"role": "user", "content": [
            image_part(data_url(image)?),
            {"type": "text", "text": question.user_text()},
        ]}),
    ];
    let mut turns = Vec::new();
    let mut matchers: Vec<Matcher> = Vec::new();
    let mut tool_errors = Vec::new();
    let mut retries = 0;

    for turn_no in 1..=config.max_turns {
        let (reply, used) = endpoint.complete(&messages, &config.decoding, trace_id)?;
        retries += used;
        if reply.tokens.is_empty() {
            return Err(HarvestError::BadReply(format!("{trace_id}: empty completion")));
        }
        let answered = extract_answer(&reply.content).is_some();
        match reply.tool.filter(|_| !answered) {
            None => {
                // a reply with no box to crop ends the trace, answered or not
                turns.push(Turn::reasoning(reply.tokens, reply.content.clone()));
                let meta = json!({
                    "retries": retries,
                    "matchers": matchers,
                    "tool_errors": tool_errors,
                });
                let mut record = TraceRecord::new(&question.question_id, trace_id, turns, reply.content)
                    .map_err(|reason| HarvestError::Invalid {
                        trace_id: trace_id.to_owned(),
                        reason,
                    })?;
                record.meta = Some(meta);
                return Ok(TraceAttempt {
                    trace_id: trace_id.to_owned(),
                    record: Some(record),
                    truncated: None,
                    retries,
                });
            }
            Some(tool) => {
                matchers.push(tool.matcher);
                messages.push(reply.message.clone());
                let out = config.work_dir.join(format!("{trace_id}-turn{turn_no}.png"));
                let (bbox, feedback) = match crop_tool(image, &tool.bbox, &out) {
                    Ok(crop) => (crop.bbox, Ok(crop.path)),
                    Err(e) => {
                        tool_errors.push(json!({"turn": turn_no, "error": e.to_string()}));
                        let fallback = crate::crop::clamp_bbox(&tool.bbox, u32::MAX, u32::MAX).0;
                        (fallback, Err(e.to_string()))
                    }
                };
                let mut turn = Turn::mining(reply.tokens, bbox);
                turn.text = Some(reply.content);
                turns.push(turn);

                let content = match feedback {
                    Ok(path) => json!([
                        {"type": "text", "text": format!("Cropped region {:?}:", <[f64; 4]>::from(bbox))},
                        image_part(data_url(&path)?),
                    ]),
                    Err(e) => json!([{"type": "text", "text": format!("Tool error: {e}")}]),
                };
                match tool.call_id {
                    Some(id) => {
                        let text = match &content[0]["text"] {
                            Value::String(s) => s.clone(),
                            _ => String::new(),
                        };
                        messages.push(json!({"role": "tool", "tool_call_id": id, "content": text}));
                        if content.as_array().is_some_and(|c| c.len() > 1) {
                            messages.push(json!({"role": "user", "content": [content[1].clone()]}));
                        }
                    }
                    None => messages.push(json!({"role": "user", "content": content})),
                }
            }
        }
    }
    Ok(TraceAttempt {
        trace_id: trace_id.to_owned(),
        record: None,
        truncated: Some(format!("no answer after {} turns", config.max_turns)),
        retries,
    })
}

/// Collects `config.traces` traces for one question with up to
/// `config.concurrency` dialogues in flight.
pub fn harvest_question(
    endpoint: &Endpoint,
    question: &Question,
    image_root: &Path,
    config: &HarvestConfig,
) -> Result<HarvestedQuestion, HarvestError> {
    let image = image_root.join(&question.image_path);
    let slots: Vec<Mutex<Option<Result<TraceAttempt, HarvestError>>>> =
        (0..config.traces).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = config.concurrency.clamp(1, config.traces.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= config.traces {
                    break;
                }
                let trace_id = format!("{}-t{i:02}", question.question_id);
                let r = harvest_trace(endpoint, question, &image, &trace_id, config);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });

    let mut traces = Vec::new();
    let mut excluded = Vec::new();
    let mut retries = 0;
    for slot in slots {
        let attempt = slot.into_inner().expect("slot lock").expect("every slot is filled")?;
        retries += attempt.retries;
        match (attempt.record, attempt.truncated) {
            (Some(r), _) => traces.push(r),
            (None, reason) => {
                let reason = reason.unwrap_or_default();
                log::warn!("{}: excluded ({reason})", attempt.trace_id);
                excluded.push((attempt.trace_id, reason));
            }
        }
    }
    let mut bundle = QuestionBundle::new(&question.question_id, traces);
    bundle.ground_truth = question.ground_truth.as_deref().and_then(normalize_answer);
    bundle.prompt_meta = Some(json!({
        "model": endpoint.model,
        "decoding": config.decoding,
        "max_turns": config.max_turns,
        "prompt": if config.system_prompt.is_some() { "custom" }
            else if question.choices.is_some() { "multiple_choice" } else { "open_ended" },
    }));
    Ok(HarvestedQuestion {
        bundle,
        excluded,
        retries,
    })
}
