//! Trace data model, JSONL log schema, validation and answer extraction.
//!
//! A trace is an ordered list of turns. Every turn but the last is a
//! *mining* turn that ends in a tool call (a crop box); the last turn is the
//! *reasoning* turn that states the final answer inside `\boxed{...}`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Tolerance on the total mass of a top-k probability list.
const MASS_TOLERANCE: f64 = 1e-6;
/// Largest number of alternatives recorded per token.
pub const MAX_TOP_PROBS: usize = 10;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: malformed record: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: trace {trace_id}: {reason}")]
    Validation {
        line: usize,
        trace_id: String,
        reason: String,
    },
    #[error("line {line}: duplicate trace_id {trace_id} in question {question_id}")]
    DuplicateTrace {
        line: usize,
        question_id: String,
        trace_id: String,
    },
    #[error("line {line}: malformed answer key entry: {source}")]
    MalformedKey {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned box in original-image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn validate(&self) -> Result<(), String> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(format!("bbox {coords:?} has negative or non-finite coordinates"));
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(format!("bbox {coords:?} is degenerate"));
        }
        Ok(())
    }
}

impl From<[f64; 4]> for BBox {
    fn from(c: [f64; 4]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

/// Per-token probability data: either the top alternatives' probabilities or
/// a precomputed entropy in nats. When both are present the entropy wins.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TokenInfo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
}

impl TokenInfo {
    pub fn from_probs(top_probs: Vec<f64>) -> Self {
        Self {
            top_probs: Some(top_probs),
            entropy: None,
        }
    }

    pub fn from_entropy(entropy: f64) -> Self {
        Self {
            top_probs: None,
            entropy: Some(entropy),
        }
    }

    fn validate(&self) -> Result<(), String> {
        if let Some(h) = self.entropy {
            if !h.is_finite() || h < 0.0 {
                return Err(format!("token entropy {h} is negative or non-finite"));
            }
        }
        match &self.top_probs {
            Some(p) => {
                if p.is_empty() || p.len() > MAX_TOP_PROBS {
                    return Err(format!("token has {} probabilities, expected 1..=10", p.len()));
                }
                if let Some(bad) = p.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
                    return Err(format!("token probability {bad} outside (0, 1]"));
                }
                let mass: f64 = p.iter().sum();
                if mass > 1.0 + MASS_TOLERANCE {
                    return Err(format!("token probabilities sum to {mass} > 1"));
                }
                Ok(())
            }
            None if self.entropy.is_some() => Ok(()),
            None => Err("token carries neither top_probs nor entropy".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnKind {
    Mining,
    Reasoning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    /// 1-based position inside the trace; assigned on parse.
    #[serde(skip)]
    pub index: usize,
    pub kind: TurnKind,
    #[serde(default)]
    pub tool_call: Option<ToolCall>,
    #[serde(default)]
    pub text: Option<String>,
    pub tokens: Vec<TokenInfo>,
}

impl Turn {
    pub fn mining(tokens: Vec<TokenInfo>, bbox: BBox) -> Self {
        Self {
            index: 0,
            kind: TurnKind::Mining,
            tool_call: Some(ToolCall {
                name: "crop".into(),
                bbox,
            }),
            text: None,
            tokens,
        }
    }

    pub fn reasoning(tokens: Vec<TokenInfo>, text: impl Into<String>) -> Self {
        Self {
            index: 0,
            kind: TurnKind::Reasoning,
            tool_call: None,
            text: Some(text.into()),
            tokens,
        }
    }
}

/// One line of the trace log, exactly as serialized.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawRecord {
    question_id: String,
    trace_id: String,
    #[serde(default)]
    ground_truth: Option<String>,
    #[serde(default)]
    gt_bboxes: Option<Vec<BBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt_meta: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<Value>,
    turns: Vec<Turn>,
    answer_raw: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub question_id: String,
    pub trace_id: String,
    pub turns: Vec<Turn>,
    pub answer_raw: String,
    /// Normalized answer extracted from `answer_raw`.
    pub answer: Option<String>,
    pub total_tokens: usize,
    /// Free-form per-trace diagnostics (harvest retries, tool-call matcher).
    pub meta: Option<Value>,
}

impl TraceRecord {
    /// Builds and validates a record, numbering turns and extracting the answer.
    pub fn new(
        question_id: impl Into<String>,
        trace_id: impl Into<String>,
        mut turns: Vec<Turn>,
        answer_raw: impl Into<String>,
    ) -> Result<Self, String> {
        for (i, t) in turns.iter_mut().enumerate() {
            t.index = i + 1;
        }
        let answer_raw = answer_raw.into();
        let record = Self {
            question_id: question_id.into(),
            trace_id: trace_id.into(),
            total_tokens: turns.iter().map(|t| t.tokens.len()).sum(),
            answer: extract_answer(&answer_raw),
            turns,
            answer_raw,
            meta: None,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<(), String> {
        let Some(last) = self.turns.last() else {
            return Err("trace has no turns".into());
        };
        if last.kind != TurnKind::Reasoning {
            return Err("final turn is not a reasoning turn".into());
        }
        for turn in &self.turns {
            if turn.tokens.is_empty() {
                return Err(format!("turn {} has no tokens", turn.index));
            }
            match (turn.kind, &turn.tool_call) {
                (TurnKind::Reasoning, Some(_)) => {
                    return Err(format!("reasoning turn {} carries a tool call", turn.index))
                }
                (TurnKind::Mining, None) => {
                    return Err(format!("mining turn {} has no tool call", turn.index))
                }
                (TurnKind::Mining, Some(call)) => call
                    .bbox
                    .validate()
                    .map_err(|e| format!("turn {}: {e}", turn.index))?,
                _ => {}
            }
            for token in &turn.tokens {
                token
                    .validate()
                    .map_err(|e| format!("turn {}: {e}", turn.index))?;
            }
        }
        let reasoning = self
            .turns
            .iter()
            .filter(|t| t.kind == TurnKind::Reasoning)
            .count();
        if reasoning != 1 {
            return Err(format!("trace has {reasoning} reasoning turns, expected 1"));
        }
        let counted: usize = self.turns.iter().map(|t| t.tokens.len()).sum();
        if counted != self.total_tokens {
            return Err(format!(
                "total_tokens {} disagrees with turn token count {counted}",
                self.total_tokens
            ));
        }
        Ok(())
    }

    pub fn is_two_stage(&self) -> bool {
        self.turns.len() > 1
    }

    /// Crop boxes issued by the mining turns, in order.
    pub fn tool_boxes(&self) -> Vec<BBox> {
        self.turns
            .iter()
            .filter_map(|t| t.tool_call.as_ref().map(|c| c.bbox))
            .collect()
    }

    pub fn segment(&self) -> Segments<'_> {
        segment_stages(self)
    }
}

/// Mining tokens pooled across all mining turns, plus the reasoning turn's tokens.
#[derive(Debug, Clone)]
pub struct Segments<'a> {
    pub mining_tokens: Vec<&'a TokenInfo>,
    pub reasoning_tokens: Vec<&'a TokenInfo>,
}

pub fn segment_stages(trace: &TraceRecord) -> Segments<'_> {
    let (mining, reasoning): (Vec<&Turn>, Vec<&Turn>) = trace
        .turns
        .iter()
        .partition(|t| t.kind == TurnKind::Mining);
    Segments {
        mining_tokens: mining.iter().flat_map(|t| t.tokens.iter()).collect(),
        reasoning_tokens: reasoning.iter().flat_map(|t| t.tokens.iter()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionBundle {
    pub question_id: String,
    pub traces: Vec<TraceRecord>,
    pub ground_truth: Option<String>,
    pub gt_bboxes: Option<Vec<BBox>>,
    pub prompt_meta: Option<Value>,
    /// Traces dropped by lenient parsing because they lacked a final reasoning turn.
    pub rejected: Vec<RejectedTrace>,
}

impl QuestionBundle {
    pub fn new(question_id: impl Into<String>, traces: Vec<TraceRecord>) -> Self {
        Self {
            question_id: question_id.into(),
            traces,
            ground_truth: None,
            gt_bboxes: None,
            prompt_meta: None,
            rejected: Vec::new(),
        }
    }

    /// Normalized ground truth, comparable with trace answers.
    pub fn normalized_truth(&self) -> Option<String> {
        self.ground_truth.as_deref().and_then(normalize_answer)
    }

    pub fn rejected_tokens(&self) -> usize {
        self.rejected.iter().map(|r| r.tokens).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedTrace {
    pub trace_id: String,
    pub tokens: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Any invalid trace aborts the parse.
    #[default]
    Strict,
    /// Traces whose final turn is not a reasoning turn (truncated generations)
    /// are set aside on their bundle instead of failing the parse.
    Lenient,
}

/// Parses a trace log in strict mode.
pub fn parse_trace_log<R: BufRead>(reader: R) -> Result<Vec<QuestionBundle>, TraceError> {
    parse_trace_log_with(reader, ParseMode::Strict)
}

pub fn parse_trace_log_with<R: BufRead>(
    reader: R,
    mode: ParseMode,
) -> Result<Vec<QuestionBundle>, TraceError> {
    let mut order: Vec<String> = Vec::new();
    let mut bundles: HashMap<String, QuestionBundle> = HashMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|source| TraceError::Malformed {
            line: line_no,
            source,
        })?;
        if !seen.insert((raw.question_id.clone(), raw.trace_id.clone())) {
            return Err(TraceError::DuplicateTrace {
                line: line_no,
                question_id: raw.question_id,
                trace_id: raw.trace_id,
            });
        }

        let bundle = bundles.entry(raw.question_id.clone()).or_insert_with(|| {
            order.push(raw.question_id.clone());
            QuestionBundle::new(raw.question_id.clone(), Vec::new())
        });
        if bundle.ground_truth.is_none() {
            bundle.ground_truth = raw.ground_truth.clone();
        }
        if bundle.gt_bboxes.is_none() {
            bundle.gt_bboxes = raw.gt_bboxes.clone();
        }
        if bundle.prompt_meta.is_none() {
            bundle.prompt_meta = raw.prompt_meta.clone();
        }

        let truncated = raw.turns.last().map(|t| t.kind) != Some(TurnKind::Reasoning);
        let tokens: usize = raw.turns.iter().map(|t| t.tokens.len()).sum();
        let trace_id = raw.trace_id.clone();
        let built = TraceRecord::new(raw.question_id, raw.trace_id, raw.turns, raw.answer_raw)
            .map(|mut r| {
                r.meta = raw.meta;
                r
            });
        match built {
            Ok(record) => bundle.traces.push(record),
            Err(reason) if truncated && mode == ParseMode::Lenient => {
                bundle.rejected.push(RejectedTrace {
                    trace_id,
                    tokens,
                    reason,
                });
            }
            Err(reason) => {
                return Err(TraceError::Validation {
                    line: line_no,
                    trace_id,
                    reason,
                })
            }
        }
    }

    Ok(order
        .into_iter()
        .filter_map(|qid| bundles.remove(&qid))
        .collect())
}

/// Writes bundles back out in the log schema, one trace per line.
pub fn write_trace_log<W: Write>(mut out: W, bundles: &[QuestionBundle]) -> Result<(), TraceError> {
    for bundle in bundles {
        for trace in &bundle.traces {
            write_trace_line(&mut out, bundle, trace)?;
        }
    }
    Ok(())
}

pub fn write_trace_line<W: Write>(
    out: &mut W,
    bundle: &QuestionBundle,
    trace: &TraceRecord,
) -> Result<(), TraceError> {
    let raw = RawRecord {
        question_id: trace.question_id.clone(),
        trace_id: trace.trace_id.clone(),
        ground_truth: bundle.ground_truth.clone(),
        gt_bboxes: bundle.gt_bboxes.clone(),
        prompt_meta: bundle.prompt_meta.clone(),
        meta: trace.meta.clone(),
        turns: trace.turns.clone(),
        answer_raw: trace.answer_raw.clone(),
    };
    serde_json::to_writer(&mut *out, &raw).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerKeyEntry {
    pub question_id: String,
    #[serde(default)]
    pub ground_truth: Option<String>,
    #[serde(default)]
    pub gt_bboxes: Option<Vec<BBox>>,
}

pub type AnswerKey = BTreeMap<String, AnswerKeyEntry>;

pub fn parse_answer_key<R: BufRead>(reader: R) -> Result<AnswerKey, TraceError> {
    let mut key = AnswerKey::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: AnswerKeyEntry =
            serde_json::from_str(&line).map_err(|source| TraceError::MalformedKey {
                line: i + 1,
                source,
            })?;
        key.insert(entry.question_id.clone(), entry);
    }
    Ok(key)
}

pub fn write_answer_key<W: Write>(mut out: W, key: &AnswerKey) -> Result<(), TraceError> {
    for entry in key.values() {
        serde_json::to_writer(&mut out, entry).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Key file values override whatever the trace log carried inline.
pub fn apply_answer_key(bundles: &mut [QuestionBundle], key: &AnswerKey) {
    for bundle in bundles {
        if let Some(entry) = key.get(&bundle.question_id) {
            if entry.ground_truth.is_some() {
                bundle.ground_truth = entry.ground_truth.clone();
            }
            if entry.gt_bboxes.is_some() {
                bundle.gt_bboxes = entry.gt_bboxes.clone();
            }
        }
    }
}

/// Returns the normalized content of the last well-formed `\boxed{...}` span.
pub fn extract_answer(final_text: &str) -> Option<String> {
    const OPEN: &str = "\\boxed{";
    let starts: Vec<usize> = final_text.match_indices(OPEN).map(|(i, _)| i).collect();
    starts.iter().rev().find_map(|&start| {
        let body = &final_text[start + OPEN.len()..];
        let mut depth = 1usize;
        for (i, c) in body.char_indices() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        return normalize_answer(&body[..i]);
                    }
                }
                _ => {}
            }
        }
        None
    })
}

/// Collapses whitespace and upper-cases a lone ASCII letter; empty input yields `None`.
pub fn normalize_answer(raw: &str) -> Option<String> {
    let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    if collapsed.is_empty() {
        return None;
    }
    let mut chars = collapsed.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => Some(c.to_ascii_uppercase().to_string()),
        _ => Some(collapsed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(n: usize) -> Vec<TokenInfo> {
        vec![TokenInfo::from_probs(vec![0.6, 0.3]); n]
    }

    fn bbox() -> BBox {
        BBox::new(0.0, 0.0, 10.0, 10.0)
    }

    #[test]
    fn extracts_boxed_letter() {
        assert_eq!(extract_answer("the answer is \\boxed{B}."), Some("B".into()));
        assert_eq!(extract_answer("\\boxed{b}"), Some("B".into()));
    }

    #[test]
    fn last_boxed_wins() {
        assert_eq!(
            extract_answer("\\boxed{12}; no wait \\boxed{ 15 }"),
            Some("15".into())
        );
    }

    #[test]
    fn no_boxed_is_none() {
        assert_eq!(extract_answer("no boxed content"), None);
        assert_eq!(extract_answer("\\boxed{   }"), None);
    }

    #[test]
    fn nested_braces_and_unclosed_tail() {
        assert_eq!(
            extract_answer("\\boxed{\\frac{1}{2}}"),
            Some("\\frac{1}{2}".into())
        );
        // an unterminated final span falls back to the previous complete one
        assert_eq!(extract_answer("\\boxed{C} then \\boxed{D"), Some("C".into()));
    }

    #[test]
    fn whitespace_collapses_and_case_is_kept_for_words() {
        assert_eq!(
            extract_answer("\\boxed{  red   car\n}"),
            Some("red car".into())
        );
    }

    #[test]
    fn segments_pool_mining_turns() {
        let t = TraceRecord::new(
            "q",
            "t",
            vec![
                Turn::mining(tok(2), bbox()),
                Turn::mining(tok(3), bbox()),
                Turn::reasoning(tok(4), "\\boxed{A}"),
            ],
            "\\boxed{A}",
        )
        .unwrap();
        let s = segment_stages(&t);
        assert_eq!((s.mining_tokens.len(), s.reasoning_tokens.len()), (5, 4));
        assert_eq!(t.turns.iter().map(|t| t.index).collect::<Vec<_>>(), [1, 2, 3]);
    }

    #[test]
    fn single_stage_segments() {
        let t = TraceRecord::new("q", "t", vec![Turn::reasoning(tok(6), "")], "\\boxed{A}").unwrap();
        let s = segment_stages(&t);
        assert_eq!((s.mining_tokens.len(), s.reasoning_tokens.len()), (0, 6));
        let t = TraceRecord::new(
            "q",
            "t",
            vec![Turn::mining(tok(1), bbox()), Turn::reasoning(tok(1), "")],
            "",
        )
        .unwrap();
        let s = segment_stages(&t);
        assert_eq!((s.mining_tokens.len(), s.reasoning_tokens.len()), (1, 1));
    }

    #[test]
    fn rejects_structural_violations() {
        let err = TraceRecord::new("q", "t", vec![Turn::mining(tok(1), bbox())], "").unwrap_err();
        assert!(err.contains("final turn"), "{err}");

        let mut bad = Turn::reasoning(tok(1), "");
        bad.tool_call = Some(ToolCall {
            name: "crop".into(),
            bbox: bbox(),
        });
        assert!(TraceRecord::new("q", "t", vec![bad], "").is_err());

        let two_reasoning = vec![Turn::reasoning(tok(1), ""), Turn::reasoning(tok(1), "")];
        assert!(TraceRecord::new("q", "t", two_reasoning, "").is_err());

        assert!(TraceRecord::new("q", "t", vec![Turn::reasoning(vec![], "")], "").is_err());
    }

    #[test]
    fn token_validation() {
        assert!(TokenInfo::from_probs(vec![]).validate().is_err());
        assert!(TokenInfo::from_probs(vec![0.1; 11]).validate().is_err());
        assert!(TokenInfo::from_probs(vec![0.0, 0.5]).validate().is_err());
        assert!(TokenInfo::from_probs(vec![0.7, 0.4]).validate().is_err());
        assert!(TokenInfo::from_probs(vec![0.1; 10]).validate().is_ok());
        assert!(TokenInfo::from_entropy(-0.1).validate().is_err());
        assert!(TokenInfo::default().validate().is_err());
    }

    #[test]
    fn bbox_validation() {
        assert!(BBox::new(0.0, 0.0, 1.0, 1.0).validate().is_ok());
        assert!(BBox::new(1.0, 0.0, 1.0, 1.0).validate().is_err());
        assert!(BBox::new(-1.0, 0.0, 1.0, 1.0).validate().is_err());
    }
}
