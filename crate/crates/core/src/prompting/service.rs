//! Client side of the vision-language inference service.
//!
//! Wire format: `POST` JSON `{"task": "task1"|"task2", "prompt": str,
//! "image_base64": str|null}`, reply JSON `{"text": str}`.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{parse_response, Prompt, PromptError};
use crate::dataset::Task;

pub const ENDPOINT_ENV: &str = "XDORA_LVLM_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ServiceError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("service returned {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed reply: {0}")]
    Malformed(String),
}

impl ServiceError {
    /// Transport failures and 5xx replies are worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            ServiceError::Transport(_) => true,
            ServiceError::Status { status, .. } => *status >= 500,
            ServiceError::Malformed(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceRequest {
    pub task: Task,
    pub prompt: String,
    pub image_base64: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ReplyBody {
    text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ServiceResponse {
    pub raw_text: String,
    /// `None` when the reply names no label.
    pub parsed_label: Option<usize>,
}

/// Anything that can answer a request with the model's reply text.
pub trait InferenceService: Send + Sync {
    fn complete(&self, request: &ServiceRequest) -> Result<String, ServiceError>;
}

/// JSON-over-HTTP client.
pub struct HttpService {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpService {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().new_agent();
        Self { endpoint: endpoint.into(), agent }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl InferenceService for HttpService {
    fn complete(&self, request: &ServiceRequest) -> Result<String, ServiceError> {
        let mut resp =
            self.agent.post(&self.endpoint).send_json(request).map_err(|e| ServiceError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| ServiceError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(ServiceError::Status { status, body });
        }
        let reply: ReplyBody =
            serde_json::from_str(&body).map_err(|e| ServiceError::Malformed(format!("{e}: {body}")))?;
        Ok(reply.text)
    }
}

/// Replays canned replies in order and records every request.
#[derive(Default)]
pub struct ScriptedService {
    replies: Mutex<VecDeque<Result<String, ServiceError>>>,
    requests: Mutex<Vec<ServiceRequest>>,
}

impl ScriptedService {
    pub fn new(replies: impl IntoIterator<Item = Result<String, ServiceError>>) -> Self {
        Self { replies: Mutex::new(replies.into_iter().collect()), requests: Mutex::default() }
    }

    /// Successful text replies only.
    pub fn texts<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Self {
        Self::new(texts.into_iter().map(|t| Ok(t.into())))
    }

    pub fn requests(&self) -> Vec<ServiceRequest> {
        self.requests.lock().expect("poisoned").clone()
    }
}

impl InferenceService for ScriptedService {
    fn complete(&self, request: &ServiceRequest) -> Result<String, ServiceError> {
        self.requests.lock().expect("poisoned").push(request.clone());
        self.replies
            .lock()
            .expect("poisoned")
            .pop_front()
            .unwrap_or_else(|| Err(ServiceError::Transport("script exhausted".into())))
    }
}

/// Service backed by a closure.
pub struct FnService<F>(pub F);

impl<F> InferenceService for FnService<F>
where
    F: Fn(&ServiceRequest) -> Result<String, ServiceError> + Send + Sync,
{
    fn complete(&self, request: &ServiceRequest) -> Result<String, ServiceError> {
        (self.0)(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetryPolicy {
    /// Attempts after the first.
    pub retries: usize,
    /// Delay before retry `i` is `base_delay · 2^i`.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { retries: 3, base_delay: Duration::from_millis(250) }
    }
}

pub fn encode_image(path: &Path) -> Result<String, PromptError> {
    let bytes = std::fs::read(path).map_err(|source| PromptError::Image { path: path.to_path_buf(), source })?;
    Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
}

/// Sends one prompt, retrying transport failures and 5xx replies with
/// exponential backoff. An unparseable reply is a successful call with
/// `parsed_label = None`.
pub fn classify_via_service(
    prompt: &Prompt,
    service: &dyn InferenceService,
    policy: &RetryPolicy,
) -> Result<ServiceResponse, PromptError> {
    let image_base64 = prompt.image_ref.as_deref().map(encode_image).transpose()?;
    let request = ServiceRequest { task: prompt.task, prompt: prompt.text.clone(), image_base64 };
    let mut attempt = 0;
    let raw_text = loop {
        match service.complete(&request) {
            Ok(text) => break text,
            Err(e) if e.is_retryable() && attempt < policy.retries => {
                std::thread::sleep(policy.base_delay * 2u32.saturating_pow(attempt as u32));
                attempt += 1;
            }
            Err(e) => return Err(e.into()),
        }
    };
    let parsed_label = parse_response(&raw_text, prompt.task).ok();
    Ok(ServiceResponse { raw_text, parsed_label })
}

/// Classifies every prompt with at most `concurrency` requests in flight.
/// Results keep input order.
pub fn classify_all(
    prompts: &[Prompt],
    service: &dyn InferenceService,
    policy: &RetryPolicy,
    concurrency: usize,
) -> Vec<Result<ServiceResponse, PromptError>> {
    if concurrency <= 1 {
        return prompts.iter().map(|p| classify_via_service(p, service, policy)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(concurrency).build().expect("thread pool");
    pool.install(|| prompts.par_iter().map(|p| classify_via_service(p, service, policy)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::{build_prompt, PromptMode};

    fn fast() -> RetryPolicy {
        RetryPolicy { retries: 2, base_delay: Duration::from_millis(1) }
    }

    fn prompt(task: Task) -> Prompt {
        build_prompt(task, "some caption", vec![], PromptMode::ZeroShot, None).unwrap()
    }

    fn status(code: u16) -> Result<String, ServiceError> {
        Err(ServiceError::Status { status: code, body: "oops".into() })
    }

    #[test]
    fn mock_round_trip() {
        let svc = ScriptedService::texts(["0"]);
        let r = classify_via_service(&prompt(Task::Task1), &svc, &fast()).unwrap();
        assert_eq!(r.parsed_label, Some(0));
        let sent = svc.requests();
        assert_eq!(sent.len(), 1);
        assert_eq!(sent[0].image_base64, None);
        assert_eq!(serde_json::to_value(&sent[0]).unwrap()["task"], "task1");
    }

    #[test]
    fn retries_server_errors() {
        let svc = ScriptedService::new([status(500), status(500), Ok("TC".into())]);
        let r = classify_via_service(&prompt(Task::Task2), &svc, &fast()).unwrap();
        assert_eq!(r.parsed_label, Some(1));
        assert_eq!(svc.requests().len(), 3);

        let svc = ScriptedService::new([status(500), status(503), status(500), Ok("TC".into())]);
        let err = classify_via_service(&prompt(Task::Task2), &svc, &fast()).unwrap_err();
        assert!(matches!(err, PromptError::Service(ServiceError::Status { status: 500, .. })));
    }

    #[test]
    fn client_errors_are_final() {
        let svc = ScriptedService::new([status(400), Ok("0".into())]);
        assert!(classify_via_service(&prompt(Task::Task1), &svc, &fast()).is_err());
        assert_eq!(svc.requests().len(), 1);
        let svc = ScriptedService::new([Err(ServiceError::Transport("reset".into())), Ok("Hate".into())]);
        assert_eq!(classify_via_service(&prompt(Task::Task1), &svc, &fast()).unwrap().parsed_label, Some(1));
    }

    #[test]
    fn free_text_is_recorded_unparsed() {
        let svc = ScriptedService::texts(["I cannot tell."]);
        let r = classify_via_service(&prompt(Task::Task1), &svc, &fast()).unwrap();
        assert_eq!(r.parsed_label, None);
        assert_eq!(r.raw_text, "I cannot tell.");
    }

    #[test]
    fn image_is_base64() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        std::fs::write(&path, b"\x89PNG").unwrap();
        let mut p = prompt(Task::Task1);
        p.image_ref = Some(path);
        let svc = ScriptedService::texts(["1"]);
        classify_via_service(&p, &svc, &fast()).unwrap();
        assert_eq!(svc.requests()[0].image_base64.as_deref(), Some("iVBORw=="));
        p.image_ref = Some(dir.path().join("missing.png"));
        assert!(matches!(classify_via_service(&p, &svc, &fast()), Err(PromptError::Image { .. })));
    }

    #[test]
    fn batch_keeps_order() {
        let prompts: Vec<Prompt> = (0..12)
            .map(|i| {
                build_prompt(Task::Task2, &format!("caption {}", i % 4), vec![], PromptMode::ZeroShot, None).unwrap()
            })
            .collect();
        let svc = FnService(|r: &ServiceRequest| {
            let n = r.prompt.trim_end_matches(" → Label:").chars().last().unwrap();
            Ok(format!("label {n}"))
        });
        let out = classify_all(&prompts, &svc, &fast(), 4);
        let labels: Vec<Option<usize>> = out.into_iter().map(|r| r.unwrap().parsed_label).collect();
        assert_eq!(labels, (0..12).map(|i| Some(i % 4)).collect::<Vec<_>>());
    }
}
