//! Minimal JSON-over-HTTP client with retry and exponential backoff.
//!
//! All endpoint modules (teacher, scorer, judge) POST JSON bodies to
//! OpenAI-compatible endpoints. Authentication uses a bearer token taken from
//! the `MORSD_API_KEY` environment variable; secrets never come from config
//! files. 429 and 5xx responses and transport errors are retried with
//! exponential backoff plus jitter until the retry budget is exhausted.

use std::time::Duration;

use rand::Rng;
use serde_json::Value;

use crate::error::{Error, Result};

/// Environment variable holding the bearer token for all endpoints.
pub const API_KEY_ENV: &str = "MORSD_API_KEY";

#[derive(Debug, Clone)]
pub struct HttpClient {
    agent: ureq::Agent,
    api_key: Option<String>,
    retry_budget: u32,
    base_delay_ms: u64,
}

impl HttpClient {
    pub fn new(retry_budget: u32) -> Self {
        HttpClient {
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            retry_budget,
            base_delay_ms: 500,
        }
    }

    /// Shrinks the backoff schedule; used by tests against local mock servers.
    pub fn with_base_delay_ms(mut self, ms: u64) -> Self {
        self.base_delay_ms = ms;
        self
    }

    /// POSTs `body` and returns the parsed JSON response, retrying transient
    /// failures (429, 5xx, transport) up to the retry budget.
    pub fn post_json(&self, url: &str, body: &Value) -> Result<Value> {
        let attempts = self.retry_budget + 1;
        let mut last_err = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.backoff_delay(attempt);
                eprintln!(
                    "morsd: retrying request (attempt {}/{attempts}) after {last_err}",
                    attempt + 1
                );
                std::thread::sleep(delay);
            }
            let mut req = self.agent.post(url);
            if let Some(key) = &self.api_key {
                req = req.set("Authorization", &format!("Bearer {key}"));
            }
            match req.send_json(body.clone()) {
                Ok(resp) => {
                    return resp.into_json::<Value>().map_err(|e| Error::Endpoint {
                        msg: format!("invalid JSON response: {e}"),
                        attempts: attempt + 1,
                    });
                }
                Err(ureq::Error::Status(code, resp)) if code == 429 || code >= 500 => {
                    last_err = format!("status {code}");
                    let _ = resp.into_string();
                }
                Err(ureq::Error::Status(code, resp)) => {
                    let detail = resp.into_string().unwrap_or_default();
                    return Err(Error::Endpoint {
                        msg: format!("status {code}: {}", detail.trim()),
                        attempts: attempt + 1,
                    });
                }
                Err(ureq::Error::Transport(t)) => {
                    last_err = format!("transport error: {t}");
                }
            }
        }
        Err(Error::Endpoint { msg: last_err, attempts })
    }

    fn backoff_delay(&self, attempt: u32) -> Duration {
        let exp = self.base_delay_ms.saturating_mul(1u64 << (attempt - 1).min(8));
        let capped = exp.min(10_000);
        // Jitter in [0.5, 1.5); affects timing only, never outputs.
        let jitter = rand::thread_rng().gen_range(0.5..1.5);
        Duration::from_millis((capped as f64 * jitter) as u64)
    }
}

/// Extracts `choices[0].text` from a completions response.
pub fn completion_text(response: &Value) -> Result<String> {
    response["choices"][0]["text"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Endpoint {
            msg: "response missing choices[0].text".to_string(),
            attempts: 1,
        })
}

/// Extracts `choices[0].message.content` from a chat completions response.
pub fn chat_text(response: &Value) -> Result<String> {
    response["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Endpoint {
            msg: "response missing choices[0].message.content".to_string(),
            attempts: 1,
        })
}
