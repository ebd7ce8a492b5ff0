//! Scripted chat-completions server for hermetic tests.
//!
//! Replies are chosen by a script from the request's `user` field (the trace
//! id), the number of assistant messages already in the dialogue, and how
//! many times that exact step has been requested before.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq)]
pub struct MockRequest {
    pub user: String,
    /// Assistant messages already in the dialogue.
    pub step: usize,
    /// Earlier requests for the same (user, step).
    pub attempt: usize,
    pub body: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockReply {
    /// Structured tool call asking for a crop.
    ToolCall { bbox: [f64; 4], text: String },
    /// Tool call written as inline JSON in the text.
    InlineToolCall { bbox: [f64; 4], text: String },
    Text(String),
    /// Same as `Text` but without log-probabilities.
    TextWithoutLogprobs(String),
    Status(u16),
    /// Close the connection without answering.
    Drop,
}

type Script = dyn Fn(&MockRequest) -> MockReply + Send + Sync;

pub struct MockServer {
    pub url: String,
    stop: Arc<AtomicBool>,
    addr: std::net::SocketAddr,
    handle: Option<JoinHandle<()>>,
    requests: Arc<Mutex<Vec<MockRequest>>>,
}

impl MockServer {
    pub fn start<F>(script: F) -> std::io::Result<Self>
    where
        F: Fn(&MockRequest) -> MockReply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(Mutex::new(Vec::new()));
        let script: Arc<Script> = Arc::new(script);
        let handle = {
            let stop = stop.clone();
            let requests = requests.clone();
            std::thread::spawn(move || {
                let seen = Arc::new(Mutex::new(HashMap::<(String, usize), usize>::new()));
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let (script, seen, requests) = (script.clone(), seen.clone(), requests.clone());
                    std::thread::spawn(move || {
                        if let Err(e) = serve(stream, &*script, &seen, &requests) {
                            log::debug!("mock connection error: {e}");
                        }
                    });
                }
            })
        };
        Ok(Self {
            url: format!("http://{addr}/v1/chat/completions"),
            stop,
            addr,
            handle: Some(handle),
            requests,
        })
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<MockRequest> {
        self.requests.lock().expect("request log").clone()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(
    stream: TcpStream,
    script: &Script,
    seen: &Mutex<HashMap<(String, usize), usize>>,
    log: &Mutex<Vec<MockRequest>>,
) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut content_length = 0;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((name, value)) = l.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; content_length];
    reader.read_exact(&mut body)?;
    let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);

    let user = body["user"].as_str().unwrap_or_default().to_owned();
    let step = body["messages"]
        .as_array()
        .map_or(0, |m| m.iter().filter(|m| m["role"] == "assistant").count());
    let attempt = {
        let mut seen = seen.lock().expect("attempt map");
        let n = seen.entry((user.clone(), step)).or_insert(0);
        *n += 1;
        *n - 1
    };
    let request = MockRequest {
        user,
        step,
        attempt,
        body,
    };
    log.lock().expect("request log").push(request.clone());

    let mut stream = stream;
    let (status, payload) = match script(&request) {
        MockReply::Drop => {
            stream.shutdown(Shutdown::Both)?;
            return Ok(());
        }
        MockReply::Status(code) => (code, json!({"error": {"message": "scripted failure"}})),
        MockReply::Text(text) => (200, completion(&text, None, true)),
        MockReply::TextWithoutLogprobs(text) => (200, completion(&text, None, false)),
        MockReply::ToolCall { bbox, text } => (200, completion(&text, Some(bbox), true)),
        MockReply::InlineToolCall { bbox, text } => {
            let text = format!("{text} {}", json!({"name": "crop", "bbox": bbox}));
            (200, completion(&text, None, true))
        }
    };
    let body = payload.to_string();
    write!(
        stream,
        "HTTP/1.1 {status} Scripted\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}

/// Deterministic top-10 alternatives for the `i`-th token.
fn alternatives(i: usize) -> Vec<Value> {
    let lead = 0.55 + 0.4 * ((i * 37 % 11) as f64 / 10.0);
    let rest = (1.0 - lead) / 9.0;
    (0..10)
        .map(|j| {
            let p = if j == 0 { lead } else { rest * 0.99 };
            json!({"token": format!("tok{j}"), "logprob": p.ln()})
        })
        .collect()
}

fn completion(text: &str, bbox: Option<[f64; 4]>, logprobs: bool) -> Value {
    let pieces: Vec<&str> = text.split_inclusive(' ').collect();
    let pieces = if pieces.is_empty() { vec![""] } else { pieces };
    let content: Vec<Value> = pieces
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let alts = alternatives(i);
            json!({"token": p, "logprob": alts[0]["logprob"], "top_logprobs": alts})
        })
        .collect();
    let mut message = json!({"role": "assistant", "content": text});
    if let Some(b) = bbox {
        message["tool_calls"] = json!([{
            "id": "call_0",
            "type": "function",
            "function": {"name": "crop", "arguments": json!({"bbox": b}).to_string()},
        }]);
    }
    json!({
        "id": "mock",
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "message": message,
            "finish_reason": if bbox.is_some() { "tool_calls" } else { "stop" },
            "logprobs": if logprobs { json!({"content": content}) } else { Value::Null },
        }],
    })
}
