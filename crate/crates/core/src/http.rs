//! Minimal blocking JSON-over-HTTP helper shared by the LLM client and the
//! HTTP embedding provider. Every outbound request bumps a process-wide
//! counter so offline runs can assert that nothing touched the network.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde_json::Value;

static NETWORK_CALLS: AtomicUsize = AtomicUsize::new(0);

/// Number of HTTP requests attempted by this process so far.
pub fn network_calls() -> usize {
    NETWORK_CALLS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, PartialEq)]
pub enum HttpError {
    /// Connection failure, timeout, 429 or 5xx. Worth retrying.
    Transport(String),
    /// Any other non-success status or an unparseable body.
    Rejected(String),
}

impl std::fmt::Display for HttpError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HttpError::Transport(m) => write!(f, "transport error: {m}"),
            HttpError::Rejected(m) => write!(f, "request rejected: {m}"),
        }
    }
}

pub fn post_json(
    url: &str,
    body: &Value,
    bearer: Option<&str>,
    timeout: Duration,
) -> Result<Value, HttpError> {
    NETWORK_CALLS.fetch_add(1, Ordering::SeqCst);
    let agent = ureq::AgentBuilder::new().timeout(timeout).build();
    let mut req = agent.post(url).set("Content-Type", "application/json");
    if let Some(token) = bearer {
        req = req.set("Authorization", &format!("Bearer {token}"));
    }
    match req.send_json(body.clone()) {
        Ok(resp) => resp
            .into_json::<Value>()
            .map_err(|e| HttpError::Rejected(format!("bad response body: {e}"))),
        Err(ureq::Error::Status(code, resp)) => {
            let text = resp.into_string().unwrap_or_default();
            let msg = format!("HTTP {code}: {}", text.chars().take(300).collect::<String>());
            if code == 429 || code >= 500 {
                Err(HttpError::Transport(msg))
            } else {
                Err(HttpError::Rejected(msg))
            }
        }
        Err(ureq::Error::Transport(t)) => Err(HttpError::Transport(t.to_string())),
    }
}
