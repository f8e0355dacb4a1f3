//! Rationale backend for an OpenAI-compatible chat completions endpoint.
//!
//! Settings come from the environment: `COFIPARA_LMM_ENDPOINT` (full URL of
//! the completions route), `COFIPARA_LMM_MODEL`, and optionally
//! `COFIPARA_LMM_API_KEY` and `COFIPARA_LMM_TIMEOUT_SECS`.

use std::path::PathBuf;
use std::time::Duration;

use base64::Engine;
use cofipara_core::rationale::{ClientError, PromptText, RationaleClient};
use cofipara_core::Sample;
use serde_json::{json, Value};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Directory image paths are resolved against.
    pub images: PathBuf,
}

impl HttpConfig {
    pub fn from_env(images: PathBuf) -> Result<Self> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let endpoint = var("COFIPARA_LMM_ENDPOINT").ok_or_else(|| Error::Usage("COFIPARA_LMM_ENDPOINT is not set".into()))?;
        let model = var("COFIPARA_LMM_MODEL").ok_or_else(|| Error::Usage("COFIPARA_LMM_MODEL is not set".into()))?;
        let timeout = var("COFIPARA_LMM_TIMEOUT_SECS").and_then(|s| s.parse().ok()).unwrap_or(60);
        Ok(Self { endpoint, model, api_key: var("COFIPARA_LMM_API_KEY"), timeout: Duration::from_secs(timeout), images })
    }
}

pub struct HttpClient {
    config: HttpConfig,
    backend_id: String,
    client: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(config: HttpConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Usage(format!("http client: {e}")))?;
        Ok(Self { backend_id: format!("http:{}", config.model), config, client })
    }

    fn image_url(&self, sample: &Sample) -> core::result::Result<String, ClientError> {
        let path = self.config.images.join(&sample.image_path);
        let bytes = std::fs::read(&path).map_err(|e| ClientError::Transport(format!("{}: {e}", path.display())))?;
        let mime = if sample.image_path.to_ascii_lowercase().ends_with(".png") { "image/png" } else { "image/jpeg" };
        Ok(format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes)))
    }
}

impl RationaleClient for HttpClient {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn complete(&self, prompt: &PromptText, sample: &Sample) -> core::result::Result<String, ClientError> {
        let body = json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt.text},
                    {"type": "image_url", "image_url": {"url": self.image_url(sample)?}},
                ],
            }],
        });
        let mut req = self.client.post(&self.config.endpoint).json(&body);
        if let Some(k) = &self.config.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                ClientError::Timeout(e.to_string())
            } else {
                ClientError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ClientError::Refused(format!("status {status}")));
        }
        let v: Value = resp.json().map_err(|e| ClientError::Transport(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| ClientError::Refused("response has no message content".into()))
    }
}
