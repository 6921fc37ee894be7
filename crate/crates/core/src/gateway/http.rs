use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};

use super::{BackendError, ChatBackend, ChatRequest, ModelProfile};

/// Chat-completions JSON over HTTP.
///
/// Request: `{"model", "messages": [system?, user], "temperature", "seed"?}`
/// where the user message content is a list of one `text` part and, when an
/// image is attached, one `image_url` part carrying a base64 data URL.
/// Response: `choices[0].message.content`, either a string or a list of
/// `{"type": "text", "text": ...}` parts that are concatenated.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpBackend { client })
    }

    pub fn for_profile(profile: &ModelProfile) -> Result<Self, BackendError> {
        Self::new(Duration::from_secs(profile.timeout_secs))
    }
}

pub fn wire_request_body(profile: &ModelProfile, request: &ChatRequest) -> Value {
    let mut messages = Vec::new();
    if let Some(system) = &request.system_text {
        messages.push(json!({"role": "system", "content": system}));
    }
    let mut parts = vec![json!({"type": "text", "text": request.user_text})];
    if let Some(img) = &request.image {
        let b64 = base64::engine::general_purpose::STANDARD.encode(img.bytes.as_slice());
        parts.push(json!({
            "type": "image_url",
            "image_url": {"url": format!("data:{};base64,{}", img.media_type, b64)}
        }));
    }
    messages.push(json!({"role": "user", "content": parts}));
    let mut body = json!({
        "model": profile.wire_model(),
        "messages": messages,
        "temperature": request.temperature,
    });
    if let Some(seed) = request.seed {
        body["seed"] = json!(seed);
    }
    body
}

pub fn parse_wire_response(body: &Value) -> Result<String, BackendError> {
    let content = body
        .pointer("/choices/0/message/content")
        .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Null => Ok(String::new()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect()),
        other => Err(BackendError::Malformed(format!("unexpected content {other}"))),
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, profile: &ModelProfile, request: &ChatRequest) -> Result<String, BackendError> {
        let mut req = self
            .client
            .post(&profile.endpoint)
            .json(&wire_request_body(profile, request));
        if let Some(var) = &profile.api_key_env {
            if let Ok(key) = std::env::var(var) {
                req = req.bearer_auth(key);
            }
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        if !status.is_success() {
            return Err(BackendError::Status {
                code: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        let body: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))?;
        parse_wire_response(&body)
    }
}
