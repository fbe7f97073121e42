//! HTTP adapters: a chat-completion client, a dedicated-OCR endpoint and a
//! text-detector endpoint.
//!
//! Chat wire format: `POST {model, messages[], max_tokens}` with crops as
//! base64 PNG data URLs inside the user message, auth via
//! `Authorization: Bearer $<env var>`. The reply text is read from
//! `choices[0].message.content`.
//!
//! OCR endpoint: `POST {"image": <data url>}` answered by
//! `{"text": ..., "confidence": ...}`. Detector endpoint: `POST {"image":
//! <data url>, "width", "height"}` answered by `{"boxes": [{x, y, w, h}]}`.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use base64::Engine;
use rand::Rng;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    BackendError, CallContext, ChatModel, ChatReply, ChatRequest, CropExtractor, Localization, LocalizedCrop,
    Localizer, OcrOutput,
};
use crate::dataset::Raster;
use crate::domain::{BoundingBox, ImageRecord};

/// Transport retry schedule: exponential backoff from `base`, doubling per
/// attempt, with full jitter. The whole call never exceeds
/// `(retry_limit + 1) * timeout`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { base: Duration::from_millis(250), timeout: Duration::from_secs(60) }
    }
}

impl RetryPolicy {
    /// Upper bound of the jittered sleep before retry number `retry` (1-based).
    pub fn backoff_cap(&self, retry: u32) -> Duration {
        self.base.saturating_mul(1u32 << (retry - 1).min(16))
    }
}

pub fn png_data_url(raster: &Raster) -> Result<String, BackendError> {
    let png = raster.to_png().map_err(|e| BackendError::Config(e.to_string()))?;
    Ok(format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(png)))
}

enum AttemptError {
    /// Could not reach the endpoint at all.
    Unreachable(String),
    /// Reached it but the call failed in a way worth retrying.
    Retryable(String),
    /// Failed in a way retrying cannot fix.
    Fatal { reason: String, unavailable: bool },
}

#[derive(Debug, Clone)]
pub struct HttpTransport {
    backend_id: String,
    endpoint: String,
    auth_env: Option<String>,
    policy: RetryPolicy,
    // built on first use: a blocking client must not be created on an async runtime thread
    client: OnceLock<reqwest::blocking::Client>,
}

impl HttpTransport {
    pub fn new(backend_id: &str, endpoint: &str, auth_env: Option<String>, policy: RetryPolicy) -> Self {
        Self {
            backend_id: backend_id.to_string(),
            endpoint: endpoint.to_string(),
            auth_env,
            policy,
            client: OnceLock::new(),
        }
    }

    fn token(&self) -> Result<Option<String>, BackendError> {
        match &self.auth_env {
            None => Ok(None),
            Some(var) => std::env::var(var).map(Some).map_err(|_| BackendError::Unavailable {
                backend_id: self.backend_id.clone(),
                attempts: 0,
                reason: format!("auth environment variable {var} is not set"),
            }),
        }
    }

    fn attempt(&self, body: &Value, token: Option<&str>, timeout: Duration) -> Result<Value, AttemptError> {
        let client = self.client.get_or_init(reqwest::blocking::Client::new);
        let mut req = client.post(&self.endpoint).timeout(timeout).json(body);
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| {
            if e.is_connect() {
                AttemptError::Unreachable(e.to_string())
            } else {
                AttemptError::Retryable(e.to_string())
            }
        })?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(AttemptError::Retryable(format!("HTTP {status}")));
        }
        if status.is_client_error() {
            let unavailable = matches!(status.as_u16(), 401 | 403 | 404);
            return Err(AttemptError::Fatal { reason: format!("HTTP {status}"), unavailable });
        }
        resp.json::<Value>().map_err(|e| AttemptError::Retryable(format!("unreadable body: {e}")))
    }

    /// Posts `body`, retrying transport failures up to `retry_limit` times.
    /// Returns the decoded JSON reply, the attempt count and elapsed time.
    pub fn post_json(&self, body: &Value, retry_limit: u32) -> Result<(Value, u32, f64), BackendError> {
        let token = self.token()?;
        let start = Instant::now();
        let deadline = start + self.policy.timeout.saturating_mul(retry_limit + 1);
        let mut reachable = false;
        let mut last = String::new();
        let mut attempts = 0;
        for retry in 0..=retry_limit {
            if retry > 0 {
                let cap = self.policy.backoff_cap(retry).as_secs_f64();
                let sleep = Duration::from_secs_f64(rand::rng().random_range(0.0..=cap));
                let remaining = deadline.saturating_duration_since(Instant::now());
                std::thread::sleep(sleep.min(remaining));
            }
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                break;
            }
            attempts += 1;
            match self.attempt(body, token.as_deref(), self.policy.timeout.min(remaining)) {
                Ok(v) => return Ok((v, attempts, start.elapsed().as_secs_f64())),
                Err(AttemptError::Unreachable(r)) => last = r,
                Err(AttemptError::Retryable(r)) => {
                    reachable = true;
                    last = r;
                }
                Err(AttemptError::Fatal { reason, unavailable }) => {
                    let backend_id = self.backend_id.clone();
                    return Err(if unavailable {
                        BackendError::Unavailable { backend_id, attempts, reason }
                    } else {
                        BackendError::CallFailed { backend_id, attempts, reason }
                    });
                }
            }
        }
        let backend_id = self.backend_id.clone();
        Err(if reachable {
            BackendError::CallFailed { backend_id, attempts, reason: last }
        } else {
            BackendError::Unavailable { backend_id, attempts, reason: last }
        })
    }

    fn call_failed(&self, attempts: u32, reason: impl Into<String>) -> BackendError {
        BackendError::CallFailed { backend_id: self.backend_id.clone(), attempts, reason: reason.into() }
    }
}

/// Any chat-completion-compatible endpoint; no model names are built in.
#[derive(Debug, Clone)]
pub struct RemoteChat {
    id: String,
    model: String,
    max_crops: usize,
    transport: HttpTransport,
}

impl RemoteChat {
    pub fn new(
        id: &str,
        endpoint: &str,
        model: &str,
        auth_env: Option<String>,
        max_crops: usize,
        policy: RetryPolicy,
    ) -> Self {
        Self {
            id: id.to_string(),
            model: model.to_string(),
            max_crops: max_crops.max(1),
            transport: HttpTransport::new(id, endpoint, auth_env, policy),
        }
    }

    pub fn request_body(&self, request: &ChatRequest) -> Value {
        let mut messages = Vec::new();
        if let Some(system) = &request.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        let content = if request.images.is_empty() {
            json!(request.prompt)
        } else {
            let mut parts = vec![json!({"type": "text", "text": request.prompt})];
            parts.extend(request.images.iter().map(|url| json!({"type": "image_url", "image_url": {"url": url}})));
            Value::Array(parts)
        };
        messages.push(json!({"role": "user", "content": content}));
        json!({"model": self.model, "messages": messages, "max_tokens": request.max_tokens})
    }

    /// Sends the request with bounded retries and returns the reply text.
    pub fn call_remote(&self, request: &ChatRequest, retry_limit: u32) -> Result<ChatReply, BackendError> {
        let (reply, attempts, latency_s) = self.transport.post_json(&self.request_body(request), retry_limit)?;
        let content = &reply["choices"][0]["message"]["content"];
        let text = match content {
            Value::String(s) => s.clone(),
            Value::Array(parts) => parts.iter().filter_map(|p| p["text"].as_str()).collect::<Vec<_>>().join(""),
            _ => return Err(self.transport.call_failed(attempts, "reply has no choices[0].message.content")),
        };
        Ok(ChatReply { text, attempts, latency_s })
    }
}

impl ChatModel for RemoteChat {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_crops_per_call(&self) -> usize {
        self.max_crops
    }

    fn needs_pixels(&self) -> bool {
        true
    }

    fn complete(&self, request: &ChatRequest, ctx: &CallContext) -> Result<ChatReply, BackendError> {
        self.call_remote(request, ctx.retry_limit)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteOcr {
    id: String,
    transport: HttpTransport,
}

impl RemoteOcr {
    pub fn new(id: &str, endpoint: &str, auth_env: Option<String>, policy: RetryPolicy) -> Self {
        Self { id: id.to_string(), transport: HttpTransport::new(id, endpoint, auth_env, policy) }
    }
}

#[derive(Deserialize)]
struct OcrReply {
    text: String,
    #[serde(default)]
    confidence: Option<f64>,
}

impl CropExtractor for RemoteOcr {
    fn id(&self) -> &str {
        &self.id
    }

    fn needs_pixels(&self) -> bool {
        true
    }

    fn extract(
        &self,
        crop: &LocalizedCrop,
        pixels: Option<&Raster>,
        ctx: &CallContext,
    ) -> Result<OcrOutput, BackendError> {
        let raster = pixels.ok_or_else(|| BackendError::Config("remote OCR needs image pixels".into()))?;
        let body = json!({"image": png_data_url(&raster.crop(&crop.bbox))?});
        let (reply, attempts, latency_s) = self.transport.post_json(&body, ctx.retry_limit)?;
        let reply: OcrReply =
            serde_json::from_value(reply).map_err(|e| self.transport.call_failed(attempts, e.to_string()))?;
        Ok(OcrOutput { text: reply.text, confidence: reply.confidence.unwrap_or(1.0), latency_s, attempts })
    }
}

#[derive(Debug, Clone)]
pub struct RemoteLocalizer {
    id: String,
    transport: HttpTransport,
}

impl RemoteLocalizer {
    pub fn new(id: &str, endpoint: &str, auth_env: Option<String>, policy: RetryPolicy) -> Self {
        Self { id: id.to_string(), transport: HttpTransport::new(id, endpoint, auth_env, policy) }
    }
}

#[derive(Deserialize)]
struct DetectorReply {
    boxes: Vec<BoundingBox>,
}

impl Localizer for RemoteLocalizer {
    fn id(&self) -> &str {
        &self.id
    }

    fn needs_pixels(&self) -> bool {
        true
    }

    fn localize(
        &self,
        image: &ImageRecord,
        pixels: Option<&Raster>,
        ctx: &CallContext,
    ) -> Result<Localization, BackendError> {
        let raster = pixels.ok_or_else(|| BackendError::Config("remote localizer needs image pixels".into()))?;
        let body = json!({"image": png_data_url(raster)?, "width": raster.width, "height": raster.height});
        let (reply, attempts, latency_s) = self.transport.post_json(&body, ctx.retry_limit)?;
        let reply: DetectorReply =
            serde_json::from_value(reply).map_err(|e| self.transport.call_failed(attempts, e.to_string()))?;
        let crops = reply
            .boxes
            .into_iter()
            .filter(|b| b.w > 0 && b.h > 0 && b.fits_within(image.width, image.height))
            .enumerate()
            .map(|(i, bbox)| {
                // best-overlapping ground-truth imprint, for simulated extractors downstream
                let source = image
                    .imprints
                    .iter()
                    .map(|imp| (imp.bbox.iou(&bbox), imp))
                    .filter(|(iou, _)| *iou >= 0.5)
                    .max_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, imp)| imp.clone());
                LocalizedCrop { image_id: image.image_id.clone(), imprint_id: i as u32, bbox, source }
            })
            .collect();
        Ok(Localization { crops, latency_s })
    }
}
