//! Optional external feedback model reached over an HTTP text-completion
//! endpoint. Disabled unless a client config is supplied.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    ComparisonRecord, Label, PromptRef, ResponseRef, Role, Source, Target, Turn, PARSE_FAILED,
};
use crate::error::{Error, Result};
use crate::prompts::{render, TemplateId, COT_DECISION_MARKER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub credential_env: String,
    pub max_retries: u32,
    pub timeout_secs: f64,
    pub initial_backoff_ms: u64,
    pub max_tokens: u32,
    pub max_in_flight: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            endpoint: String::new(),
            model: "gpt-3.5-turbo-instruct".into(),
            credential_env: "FEEDBACK_API_KEY".into(),
            max_retries: 4,
            timeout_secs: 30.0,
            initial_backoff_ms: 500,
            max_tokens: 512,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError {
    pub transient: bool,
    pub message: String,
}

/// Anything that turns a prompt into a completion. The HTTP client is one
/// implementation; tests use stubs.
pub trait CompletionBackend: Sync {
    fn complete(&self, prompt: &str, idempotency_key: &str) -> std::result::Result<String, TransportError>;
}

pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: String,
    max_tokens: u32,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
}

impl HttpBackend {
    pub fn from_config(config: &ClientConfig) -> Result<Self> {
        if config.endpoint.is_empty() {
            return Err(Error::Feedback("no endpoint configured".into()));
        }
        let api_key = std::env::var(&config.credential_env).map_err(|_| {
            Error::Feedback(format!(
                "missing credentials: environment variable {} is not set",
                config.credential_env
            ))
        })?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend {
            agent,
            endpoint: config.endpoint.clone(),
            model: config.model.clone(),
            api_key,
            max_tokens: config.max_tokens,
        })
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, prompt: &str, idempotency_key: &str) -> std::result::Result<String, TransportError> {
        let body = serde_json::to_string(&CompletionRequest {
            model: &self.model,
            prompt,
            max_tokens: self.max_tokens,
            temperature: 0.0,
        })
        .map_err(|e| TransportError {
            transient: false,
            message: e.to_string(),
        })?;
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .header("Idempotency-Key", idempotency_key)
            .send(body.as_str())
            .map_err(|e| TransportError {
                transient: true,
                message: e.to_string(),
            })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| TransportError {
            transient: true,
            message: e.to_string(),
        })?;
        if status == 429 || status >= 500 {
            return Err(TransportError {
                transient: true,
                message: format!("HTTP {status}"),
            });
        }
        if status >= 400 {
            return Err(TransportError {
                transient: false,
                message: format!("HTTP {status}: {text}"),
            });
        }
        let parsed: CompletionResponse = serde_json::from_str(&text).map_err(|e| TransportError {
            transient: false,
            message: format!("malformed completion body: {e}"),
        })?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .ok_or_else(|| TransportError {
                transient: false,
                message: "completion has no choices".into(),
            })
    }
}

/// Calls the backend, retrying transient failures with exponential backoff.
pub fn complete_with_retry(
    backend: &dyn CompletionBackend,
    prompt: &str,
    idempotency_key: &str,
    max_retries: u32,
    initial_backoff: Duration,
) -> Result<String> {
    let mut backoff = initial_backoff;
    let mut attempt = 0;
    loop {
        match backend.complete(prompt, idempotency_key) {
            Ok(text) => return Ok(text),
            Err(e) if e.transient && attempt < max_retries => {
                attempt += 1;
                thread::sleep(backoff);
                backoff *= 2;
            }
            Err(e) => {
                return Err(Error::Feedback(format!(
                    "request failed after {} attempt(s): {}",
                    attempt + 1,
                    e.message
                )))
            }
        }
    }
}

/// Reads a single A/B decision from a completion. For chain-of-thought
/// replies only the text after the last decision marker counts.
pub fn parse_decision(template: TemplateId, completion: &str) -> Option<Label> {
    let tail = if template.is_chain_of_thought() {
        let at = completion.rfind(COT_DECISION_MARKER)?;
        &completion[at + COT_DECISION_MARKER.len()..]
    } else {
        completion
    };
    let t = tail.trim_start();
    let mut chars = t.chars();
    let label = match chars.next()? {
        'A' => Label::A,
        'B' => Label::B,
        _ => return None,
    };
    match chars.next() {
        Some(c) if c.is_alphanumeric() => None,
        _ => Some(label),
    }
}

/// A text pair to be judged externally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextPair {
    pub pair_id: String,
    pub conversation: Vec<Turn>,
    pub response_a: String,
    pub response_b: String,
}

pub fn format_conversation(turns: &[Turn]) -> String {
    turns
        .iter()
        .map(|t| {
            let who = match t.role {
                Role::Human => "Human",
                Role::Assistant => "Assistant",
            };
            format!("{who}: {}", t.content)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone)]
pub struct ExternalRequest<'a> {
    pub pair: &'a TextPair,
    pub target: Target,
    /// Phrase substituted for `{principle}`, e.g. "more helpful".
    pub principle_phrase: String,
    pub template: TemplateId,
}

pub fn external_feedback_label<R: Rng + ?Sized>(
    backend: &dyn CompletionBackend,
    config: &ClientConfig,
    request: &ExternalRequest<'_>,
    created_at: u64,
    rng: &mut R,
) -> Result<ComparisonRecord> {
    let pair = request.pair;
    let swapped = rng.random::<bool>();
    let (a_id, a_text, b_id, b_text) = if swapped {
        ("b", &pair.response_b, "a", &pair.response_a)
    } else {
        ("a", &pair.response_a, "b", &pair.response_b)
    };
    let prompt = render(
        request.template,
        &request.principle_phrase,
        &format_conversation(&pair.conversation),
        a_text,
        b_text,
    );
    let key = format!("{}:{}:{}", pair.pair_id, request.target, request.template);
    let completion = complete_with_retry(
        backend,
        &prompt,
        &key,
        config.max_retries,
        Duration::from_millis(config.initial_backoff_ms),
    )?;
    let label = parse_decision(request.template, &completion);
    let mut quality_flags = BTreeSet::new();
    if label.is_none() {
        quality_flags.insert(PARSE_FAILED.to_string());
    }
    Ok(ComparisonRecord {
        pair_id: pair.pair_id.clone(),
        prompt_ref: PromptRef::Conversation(pair.conversation.clone()),
        response_a: ResponseRef::Text {
            id: format!("{}:{a_id}", pair.pair_id),
            text: a_text.clone(),
        },
        response_b: ResponseRef::Text {
            id: format!("{}:{b_id}", pair.pair_id),
            text: b_text.clone(),
        },
        target: request.target.clone(),
        label,
        source: Source::External,
        position_swapped: swapped,
        quality_flags,
        created_at,
    })
}

/// Labels many requests with at most `config.max_in_flight` concurrent calls.
/// Output order follows input order; each request gets its own seeded stream.
pub fn external_feedback_batch(
    backend: &dyn CompletionBackend,
    config: &ClientConfig,
    requests: &[ExternalRequest<'_>],
    seed: u64,
    created_at: u64,
) -> Vec<Result<ComparisonRecord>> {
    let results: Mutex<Vec<Option<Result<ComparisonRecord>>>> =
        Mutex::new((0..requests.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = config.max_in_flight.max(1).min(requests.len().max(1));
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= requests.len() {
                    break;
                }
                let mut rng = crate::rng::stream(seed, "external-feedback", i as u64);
                let r = external_feedback_label(backend, config, &requests[i], created_at, &mut rng);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every request processed"))
        .collect()
}
