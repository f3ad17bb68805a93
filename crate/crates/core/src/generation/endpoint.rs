//! OpenAI-compatible chat-completions client.

use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use super::{CallCounter, Generator, GeneratorConfig};
use crate::error::{Error, Result};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "GENERATOR_API_KEY";

const BODY_EXCERPT: usize = 200;

/// Client for a chat-completions endpoint.
#[derive(Debug)]
pub struct EndpointGenerator {
    url: String,
    model: String,
    temperature: f64,
    max_tokens: usize,
    retry_limit: u32,
    api_key: Option<String>,
    agent: ureq::Agent,
    calls: CallCounter,
}

impl EndpointGenerator {
    pub fn new(config: &GeneratorConfig) -> Result<Self> {
        let url = config
            .endpoint_url
            .clone()
            .ok_or_else(|| Error::Config("endpoint backend requires endpoint_url".into()))?;
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(Duration::from_secs(5))
            .timeout(Duration::from_secs(120))
            .build();
        Ok(EndpointGenerator {
            url,
            model: config
                .model_name
                .clone()
                .unwrap_or_else(|| "default".into()),
            temperature: config.temperature,
            max_tokens: config.max_new_tokens,
            retry_limit: config.retry_limit,
            api_key: std::env::var(API_KEY_ENV).ok(),
            agent,
            calls: CallCounter::default(),
        })
    }

    fn request_body(&self, prompt: &str, n: usize) -> Value {
        json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "n": n,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        })
    }

    fn post_once(&self, body: &Value) -> std::result::Result<Value, ureq::Error> {
        let mut req = self
            .agent
            .post(&self.url)
            .set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = req.send_json(body.clone())?;
        resp.into_json::<Value>().map_err(ureq::Error::from)
    }
}

fn excerpt(text: &str) -> String {
    text.chars().take(BODY_EXCERPT).collect()
}

fn parse_choices(body: &Value, n: usize) -> Result<Vec<String>> {
    let choices = body
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Backend {
            status: Some(200),
            message: format!("response has no choices: {}", excerpt(&body.to_string())),
        })?;
    let texts: Vec<String> = choices
        .iter()
        .filter_map(|c| c.pointer("/message/content").and_then(Value::as_str))
        .map(str::to_string)
        .collect();
    if texts.len() != n {
        return Err(Error::Backend {
            status: Some(200),
            message: format!("requested {n} choices, received {}", texts.len()),
        });
    }
    Ok(texts)
}

impl Generator for EndpointGenerator {
    fn generate(&self, prompt: &str, n: usize) -> Result<Vec<String>> {
        let body = self.request_body(prompt, n);
        let mut last_status = None;
        let mut last_message = String::new();
        for attempt in 0..=self.retry_limit {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(100 << attempt.min(6)));
            }
            self.calls.bump();
            match self.post_once(&body) {
                Ok(v) => return parse_choices(&v, n),
                Err(ureq::Error::Status(code, resp)) => {
                    let text = resp.into_string().unwrap_or_default();
                    if code == 429 || code >= 500 {
                        last_status = Some(code);
                        last_message = format!("HTTP {code}: {}", excerpt(&text));
                        continue;
                    }
                    return Err(Error::Backend {
                        status: Some(code),
                        message: format!("HTTP {code}: {}", excerpt(&text)),
                    });
                }
                Err(ureq::Error::Transport(t)) => {
                    last_status = None;
                    last_message = format!("transport: {t}");
                }
            }
        }
        Err(Error::Backend {
            status: last_status,
            message: format!(
                "giving up after {} retries; last error {last_message}",
                self.retry_limit
            ),
        })
    }

    fn calls(&self) -> usize {
        self.calls.get()
    }
}
