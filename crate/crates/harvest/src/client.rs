//! Chat-completions client with per-token log-probabilities and retries.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracevote_core::{BBox, TokenInfo};

use crate::HarvestError;

/// Sampling settings sent with every request and recorded with the traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_p: f64,
    /// 0 leaves top-k sampling off.
    pub top_k: u32,
    pub max_tokens: u32,
}

impl DecodingParams {
    pub const PRESETS: [(&'static str, DecodingParams); 3] = [
        ("qwen3-vl-thinking", DecodingParams::new(0.6, 0.95, 20, 51200)),
        ("qwen3-vl-instruct", DecodingParams::new(1.0, 1.0, 0, 51200)),
        ("deepeyes", DecodingParams::new(1.0, 1.0, 0, 51200)),
    ];

    pub const fn new(temperature: f64, top_p: f64, top_k: u32, max_tokens: u32) -> Self {
        Self {
            temperature,
            top_p,
            top_k,
            max_tokens,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        Self::PRESETS.iter().find(|(n, _)| *n == name).map(|(_, p)| *p)
    }
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self::PRESETS[0].1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        self.base_delay.saturating_mul(1 << attempt.min(16))
    }
}

/// How a tool call was recognised in a reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// `tool_calls[].function.arguments` of the message.
    Structured,
    /// A JSON object with a `"bbox"` key inside the reply text.
    Inline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolRequest {
    pub bbox: BBox,
    pub matcher: Matcher,
    /// Id to answer a structured call with.
    pub call_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub content: String,
    pub tokens: Vec<TokenInfo>,
    pub tool: Option<ToolRequest>,
    /// The assistant message as returned, for the next request.
    pub message: Value,
}

#[derive(Debug, Clone)]
pub struct Endpoint {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
    agent: ureq::Agent,
}

impl Endpoint {
    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(600)))
            .build()
            .into();
        Self {
            url: url.into(),
            model: model.into(),
            api_key,
            retry: RetryPolicy::default(),
            agent,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn request_body(&self, messages: &[Value], params: &DecodingParams, user: &str) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
            "logprobs": true,
            "top_logprobs": 10,
            "user": user,
        });
        if params.top_k > 0 {
            body["top_k"] = json!(params.top_k);
        }
        body
    }

    /// Sends one chat request, retrying transport failures and 429/5xx
    /// replies. Returns the completion and the number of retries used.
    pub fn complete(
        &self,
        messages: &[Value],
        params: &DecodingParams,
        user: &str,
    ) -> Result<(Completion, u32), HarvestError> {
        let body = self.request_body(messages, params, user);
        let mut retries = 0;
        loop {
            match self.send_once(&body) {
                Ok(reply) => return Ok((parse_completion(&reply)?, retries)),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transient(reason)) => {
                    if retries >= self.retry.max_retries {
                        return Err(HarvestError::Transport {
                            attempts: retries + 1,
                            reason,
                        });
                    }
                    log::warn!("request to {} failed ({reason}); retrying", self.url);
                    std::thread::sleep(self.retry.delay(retries));
                    retries += 1;
                }
            }
        }
    }

    fn send_once(&self, body: &Value) -> Result<Value, Attempt> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(classify)?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Attempt::Transient(format!("HTTP {status}")));
        }
        let text = resp.body_mut().read_to_string().map_err(classify)?;
        if status >= 400 {
            return Err(Attempt::Fatal(HarvestError::Http { status, body: text }));
        }
        serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(HarvestError::BadReply(format!("invalid JSON: {e}"))))
    }
}

enum Attempt {
    Transient(String),
    Fatal(HarvestError),
}

fn classify(e: ureq::Error) -> Attempt {
    match e {
        ureq::Error::Io(_)
        | ureq::Error::Timeout(_)
        | ureq::Error::ConnectionFailed
        | ureq::Error::Protocol(_) => Attempt::Transient(e.to_string()),
        other => Attempt::Fatal(HarvestError::BadReply(other.to_string())),
    }
}

/// Turns one `top_logprobs` list into descending probabilities.
fn top_probs(entry: &Value) -> Vec<f64> {
    let mut probs: Vec<f64> = entry["top_logprobs"]
        .as_array()
        .map(|alts| alts.iter().filter_map(|a| a["logprob"].as_f64()).map(f64::exp).collect())
        .unwrap_or_default();
    if probs.is_empty() {
        probs.extend(entry["logprob"].as_f64().map(f64::exp));
    }
    probs.retain(|p| *p > 0.0 && p.is_finite());
    probs.sort_by(|a, b| b.total_cmp(a));
    probs.truncate(10);
    for p in probs.iter_mut() {
        *p = p.min(1.0);
    }
    // rounding in reported log-probs can push the sum a hair above one
    let sum: f64 = probs.iter().sum();
    if sum > 1.0 {
        for p in probs.iter_mut() {
            *p /= sum;
        }
    }
    probs
}

fn bbox_from(v: &Value) -> Option<BBox> {
    let a = v.get("bbox")?.as_array()?;
    if a.len() != 4 {
        return None;
    }
    let c: Vec<f64> = a.iter().map(Value::as_f64).collect::<Option<_>>()?;
    Some(BBox::new(c[0], c[1], c[2], c[3]))
}

/// First tool call carrying a box: structured calls win over inline JSON.
pub fn match_tool_call(message: &Value) -> Option<ToolRequest> {
    if let Some(calls) = message["tool_calls"].as_array() {
        for call in calls {
            let args = &call["function"]["arguments"];
            let parsed = match args {
                Value::String(s) => serde_json::from_str(s).ok(),
                Value::Object(_) => Some(args.clone()),
                _ => None,
            };
            if let Some(bbox) = parsed.as_ref().and_then(bbox_from) {
                return Some(ToolRequest {
                    bbox,
                    matcher: Matcher::Structured,
                    call_id: call["id"].as_str().map(String::from),
                });
            }
        }
    }
    let text = message["content"].as_str()?;
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(v)) = stream.next() {
            if let Some(bbox) = bbox_from(&v) {
                return Some(ToolRequest {
                    bbox,
                    matcher: Matcher::Inline,
                    call_id: None,
                });
            }
        }
    }
    None
}

/// Extracts text, per-token probabilities and any tool call from a reply.
pub fn parse_completion(reply: &Value) -> Result<Completion, HarvestError> {
    let choice = &reply["choices"][0];
    let message = choice["message"].clone();
    if !message.is_object() {
        return Err(HarvestError::BadReply("reply has no choices[0].message".into()));
    }
    let Some(entries) = choice["logprobs"]["content"].as_array() else {
        return Err(HarvestError::UnsupportedEndpoint(
            "reply carries no per-token log-probabilities".into(),
        ));
    };
    let tokens: Vec<TokenInfo> = entries
        .iter()
        .map(|e| {
            let p = top_probs(e);
            if p.is_empty() {
                TokenInfo::from_entropy(0.0)
            } else {
                TokenInfo::from_probs(p)
            }
        })
        .collect();
    let tool = match_tool_call(&message);
    Ok(Completion {
        content: message["content"].as_str().unwrap_or_default().to_owned(),
        tokens,
        tool,
        message,
    })
}
