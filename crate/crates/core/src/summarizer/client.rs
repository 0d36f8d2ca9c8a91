//! LLM client contract and its implementations.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::http::{post_json, HttpError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientError {
    /// Network-level failure; retried with backoff.
    Transport(String),
    /// The service answered but the answer is unusable; never retried.
    Response(String),
}

impl std::fmt::Display for ClientError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClientError::Transport(m) => write!(f, "transport: {m}"),
            ClientError::Response(m) => write!(f, "response: {m}"),
        }
    }
}

pub trait LlmClient: Send + Sync {
    fn model_name(&self) -> &str;

    /// One completion with `prompt` as the system message and `input` as
    /// the user message.
    fn complete(&self, prompt: &str, input: &str) -> Result<Completion, ClientError>;
}

impl<C: LlmClient + ?Sized> LlmClient for &C {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }
    fn complete(&self, prompt: &str, input: &str) -> Result<Completion, ClientError> {
        (**self).complete(prompt, input)
    }
}

impl<C: LlmClient + ?Sized> LlmClient for Box<C> {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }
    fn complete(&self, prompt: &str, input: &str) -> Result<Completion, ClientError> {
        (**self).complete(prompt, input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 500,
        }
    }
}

/// Calls `client`, retrying transport errors with exponential backoff
/// (`base, 2*base, 4*base, ...`). Response errors return immediately.
pub fn complete_with_retry(
    client: &dyn LlmClient,
    prompt: &str,
    input: &str,
    policy: RetryPolicy,
) -> Result<Completion, ClientError> {
    let attempts = policy.attempts.max(1);
    let mut attempt = 0;
    loop {
        attempt += 1;
        match client.complete(prompt, input) {
            Err(ClientError::Transport(msg)) if attempt < attempts => {
                let delay = policy.base_delay_ms.saturating_mul(1 << (attempt - 1).min(16));
                log::warn!("{}: {msg}; retry {attempt}/{} in {delay} ms", client.model_name(), attempts - 1);
                std::thread::sleep(Duration::from_millis(delay));
            }
            other => return other,
        }
    }
}

/// Chat-completions client: POSTs `{model, messages: [system, user], ..extra}`
/// to `endpoint` and reads `choices[0].message.content` plus `usage`.
#[derive(Debug, Clone)]
pub struct HttpChatClient {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    /// Decoding parameters (temperature etc.) passed through verbatim.
    pub extra: Map<String, Value>,
    pub timeout: Duration,
}

impl HttpChatClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        HttpChatClient {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            extra: Map::new(),
            timeout: Duration::from_secs(120),
        }
    }

    pub fn request_body(&self, prompt: &str, input: &str) -> Value {
        let mut body = Map::new();
        body.insert("model".into(), json!(self.model));
        body.insert(
            "messages".into(),
            json!([
                {"role": "system", "content": prompt},
                {"role": "user", "content": input},
            ]),
        );
        for (k, v) in &self.extra {
            body.insert(k.clone(), v.clone());
        }
        Value::Object(body)
    }
}

/// Extracts text and usage from a chat-completions response body.
pub fn parse_chat_response(v: &Value) -> Result<Completion, ClientError> {
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| ClientError::Response("missing choices[0].message.content".into()))?;
    let usage = Usage {
        input_tokens: v
            .pointer("/usage/prompt_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
        output_tokens: v
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
    };
    Ok(Completion {
        text: text.to_string(),
        usage,
    })
}

impl LlmClient for HttpChatClient {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str, input: &str) -> Result<Completion, ClientError> {
        let body = self.request_body(prompt, input);
        match post_json(&self.endpoint, &body, self.api_key.as_deref(), self.timeout) {
            Ok(v) => parse_chat_response(&v),
            Err(HttpError::Transport(m)) => Err(ClientError::Transport(m)),
            Err(HttpError::Rejected(m)) => Err(ClientError::Response(m)),
        }
    }
}

/// Key of one request in a replay file: SHA-256 over prompt and input.
pub fn replay_key(prompt: &str, input: &str) -> String {
    crate::sha256_hex(&[prompt.as_bytes(), input.as_bytes()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub input_hash: String,
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

fn estimate_usage(prompt: &str, input: &str, output: &str) -> Usage {
    Usage {
        input_tokens: (prompt.len() + input.len()).div_ceil(4) as u64,
        output_tokens: output.len().div_ceil(4) as u64,
    }
}

/// Answers from a JSONL replay file of `{input_hash, output, usage?}` lines.
/// Requests with no entry fail with a response error.
#[derive(Debug, Clone)]
pub struct ReplayClient {
    model: String,
    entries: HashMap<String, ReplayEntry>,
}

impl ReplayClient {
    pub fn new(model: impl Into<String>, entries: impl IntoIterator<Item = ReplayEntry>) -> Self {
        ReplayClient {
            model: model.into(),
            entries: entries
                .into_iter()
                .map(|e| (e.input_hash.clone(), e))
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>, model: impl Into<String>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| Error::Row {
                row: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self::new(model, entries))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn write_replay_file(path: impl AsRef<Path>, entries: &[ReplayEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl LlmClient for ReplayClient {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str, input: &str) -> Result<Completion, ClientError> {
        let key = replay_key(prompt, input);
        let entry = self
            .entries
            .get(&key)
            .ok_or_else(|| ClientError::Response(format!("no replay entry for {key}")))?;
        Ok(Completion {
            text: entry.output.clone(),
            usage: entry
                .usage
                .unwrap_or_else(|| estimate_usage(prompt, input, &entry.output)),
        })
    }
}

/// Returns a fixed sequence of outputs, one per call, repeating the last one
/// once the script runs out. Usage is the byte-length estimate.
#[derive(Debug)]
pub struct ScriptedClient {
    model: String,
    outputs: Vec<String>,
    next: AtomicUsize,
}

impl ScriptedClient {
    pub fn new(model: impl Into<String>, outputs: Vec<String>) -> Self {
        assert!(!outputs.is_empty(), "script needs at least one output");
        ScriptedClient {
            model: model.into(),
            outputs,
            next: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.next.load(Ordering::SeqCst)
    }
}

impl LlmClient for ScriptedClient {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str, input: &str) -> Result<Completion, ClientError> {
        let i = self.next.fetch_add(1, Ordering::SeqCst);
        let text = self.outputs[i.min(self.outputs.len() - 1)].clone();
        let usage = estimate_usage(prompt, input, &text);
        Ok(Completion { text, usage })
    }
}

/// Wraps a client and tallies every call that reaches it.
#[derive(Debug)]
pub struct InstrumentedClient<C> {
    inner: C,
    calls: AtomicUsize,
    input_tokens: AtomicU64,
    output_tokens: AtomicU64,
    prompts: Mutex<Vec<String>>,
}

impl<C: LlmClient> InstrumentedClient<C> {
    pub fn new(inner: C) -> Self {
        InstrumentedClient {
            inner,
            calls: AtomicUsize::new(0),
            input_tokens: AtomicU64::new(0),
            output_tokens: AtomicU64::new(0),
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn usage(&self) -> Usage {
        Usage {
            input_tokens: self.input_tokens.load(Ordering::SeqCst),
            output_tokens: self.output_tokens.load(Ordering::SeqCst),
        }
    }

    /// System prompts seen, in call order.
    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }
}

impl<C: LlmClient> LlmClient for InstrumentedClient<C> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn complete(&self, prompt: &str, input: &str) -> Result<Completion, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.prompts.lock().unwrap().push(prompt.to_string());
        let out = self.inner.complete(prompt, input)?;
        self.input_tokens
            .fetch_add(out.usage.input_tokens, Ordering::SeqCst);
        self.output_tokens
            .fetch_add(out.usage.output_tokens, Ordering::SeqCst);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flaky {
        failures: AtomicUsize,
        kind: ClientError,
        calls: AtomicUsize,
    }

    impl LlmClient for Flaky {
        fn model_name(&self) -> &str {
            "flaky"
        }
        fn complete(&self, _: &str, _: &str) -> Result<Completion, ClientError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(self.kind.clone());
            }
            Ok(Completion {
                text: "ok".into(),
                usage: Usage::default(),
            })
        }
    }

    fn flaky(failures: usize, kind: ClientError) -> Flaky {
        Flaky {
            failures: AtomicUsize::new(failures),
            kind,
            calls: AtomicUsize::new(0),
        }
    }

    const FAST: RetryPolicy = RetryPolicy {
        attempts: 3,
        base_delay_ms: 0,
    };

    #[test]
    fn transport_errors_are_retried() {
        let c = flaky(2, ClientError::Transport("reset".into()));
        assert_eq!(complete_with_retry(&c, "p", "i", FAST).unwrap().text, "ok");
        assert_eq!(c.calls.load(Ordering::SeqCst), 3);

        let c = flaky(3, ClientError::Transport("reset".into()));
        assert!(matches!(
            complete_with_retry(&c, "p", "i", FAST),
            Err(ClientError::Transport(_))
        ));
        assert_eq!(c.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn response_errors_are_not_retried() {
        let c = flaky(1, ClientError::Response("refused".into()));
        assert!(complete_with_retry(&c, "p", "i", FAST).is_err());
        assert_eq!(c.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn chat_wire_shape() {
        let mut c = HttpChatClient::new("http://localhost:1/v1/chat/completions", "m");
        c.extra.insert("temperature".into(), json!(0.0));
        let body = c.request_body("SYS", "ESSAY");
        assert_eq!(body["model"], "m");
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][0]["content"], "SYS");
        assert_eq!(body["messages"][1]["role"], "user");
        assert_eq!(body["messages"][1]["content"], "ESSAY");
        assert_eq!(body["temperature"], 0.0);

        let resp = json!({
            "choices": [{"message": {"role": "assistant", "content": "short"}}],
            "usage": {"prompt_tokens": 900, "completion_tokens": 120}
        });
        let c = parse_chat_response(&resp).unwrap();
        assert_eq!(c.text, "short");
        assert_eq!(c.usage, Usage { input_tokens: 900, output_tokens: 120 });
        assert!(parse_chat_response(&json!({"choices": []})).is_err());
    }

    #[test]
    fn replay_lookup() {
        let e = ReplayEntry {
            input_hash: replay_key("p", "essay"),
            output: "summary".into(),
            usage: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.jsonl");
        write_replay_file(&path, &[e]).unwrap();
        let c = ReplayClient::load(&path, "m").unwrap();
        assert_eq!(c.complete("p", "essay").unwrap().text, "summary");
        assert!(matches!(c.complete("p", "other"), Err(ClientError::Response(_))));
        assert_ne!(replay_key("ab", "c"), replay_key("a", "bc"));
    }

    #[test]
    fn scripted_repeats_last() {
        let c = ScriptedClient::new("m", vec!["a".into(), "b".into()]);
        let texts: Vec<_> = (0..4).map(|_| c.complete("p", "i").unwrap().text).collect();
        assert_eq!(texts, ["a", "b", "b", "b"]);
        assert_eq!(c.calls(), 4);
    }
}
