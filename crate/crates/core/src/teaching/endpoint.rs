//! Minimal JSON chat-completion client.
//!
//! Request: `{"model", "messages": [{"role", "content"}], "temperature"}`.
//! The response text is read from the first of `text`, `content`,
//! `response`, `message.content`, `choices[0].message.content` or
//! `choices[0].text` that is present.

use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{annotation_from_completion, TeachError, Teacher};
use crate::model::{AnnotationResult, Tuple};
use crate::prompting::{render_select, PromptTemplate};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

/// Attempts and exponential backoff between them (`base`, `2 * base`, ...).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_secs(1),
            timeout: Duration::from_secs(300),
        }
    }
}

impl RetryPolicy {
    pub fn delay_before(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry.saturating_sub(1))
    }
}

pub fn completion_text(body: &Value) -> Option<String> {
    let candidates = [
        body.get("text"),
        body.get("content"),
        body.get("response"),
        body.pointer("/message/content"),
        body.pointer("/choices/0/message/content"),
        body.pointer("/choices/0/text"),
    ];
    candidates
        .into_iter()
        .flatten()
        .find_map(|v| v.as_str().map(str::to_string))
}

enum Failure {
    Retryable(String),
    Fatal(TeachError),
}

pub struct LlmTeacher {
    model_id: String,
    endpoint: String,
    temperature: f64,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl LlmTeacher {
    pub fn new(model_id: &str, endpoint: &str) -> Self {
        let retry = RetryPolicy::default();
        Self {
            model_id: model_id.to_string(),
            endpoint: endpoint.to_string(),
            temperature: 0.0,
            agent: ureq::AgentBuilder::new().timeout(retry.timeout).build(),
            retry,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.agent = ureq::AgentBuilder::new().timeout(retry.timeout).build();
        self.retry = retry;
        self
    }

    fn request_once(&self, request: &ChatRequest) -> Result<String, Failure> {
        let response = match self.agent.post(&self.endpoint).send_json(request) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) => {
                let body = r.into_string().unwrap_or_default();
                let message = format!(
                    "HTTP {code}: {}",
                    body.chars().take(200).collect::<String>()
                );
                return Err(if code >= 500 || code == 429 {
                    Failure::Retryable(message)
                } else {
                    Failure::Fatal(TeachError::EndpointUnreachable {
                        endpoint: self.endpoint.clone(),
                        attempts: 1,
                        message,
                    })
                });
            }
            Err(e) => return Err(Failure::Retryable(e.to_string())),
        };
        let body: Value = response
            .into_json()
            .map_err(|e| Failure::Fatal(TeachError::MalformedResponse(e.to_string())))?;
        completion_text(&body).ok_or_else(|| {
            Failure::Fatal(TeachError::MalformedResponse(format!(
                "no completion text in {}",
                body.to_string().chars().take(200).collect::<String>()
            )))
        })
    }

    /// Sends one prompt, retrying transport errors, 5xx and 429.
    pub fn complete(&self, prompt: &str) -> Result<String, TeachError> {
        let request = ChatRequest {
            model: self.model_id.clone(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: prompt.to_string(),
            }],
            temperature: self.temperature,
        };
        let mut last = String::new();
        for attempt in 1..=self.retry.attempts {
            if attempt > 1 {
                thread::sleep(self.retry.delay_before(attempt - 1));
            }
            match self.request_once(&request) {
                Ok(text) => return Ok(text),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(message)) => {
                    tracing::debug!(attempt, endpoint = %self.endpoint, %message, "retrying");
                    last = message;
                }
            }
        }
        Err(TeachError::EndpointUnreachable {
            endpoint: self.endpoint.clone(),
            attempts: self.retry.attempts,
            message: last,
        })
    }
}

impl Teacher for LlmTeacher {
    fn id(&self) -> &str {
        &self.model_id
    }

    fn annotate(
        &self,
        t: &Tuple,
        template: &PromptTemplate,
    ) -> Result<AnnotationResult, TeachError> {
        let prompt = render_select(t, template);
        let started = Instant::now();
        let completion = self.complete(&prompt.text)?;
        Ok(annotation_from_completion(
            t,
            template,
            &self.model_id,
            completion,
            started.elapsed().as_secs_f64(),
        ))
    }
}
