//! OpenAI-compatible `/chat/completions` client (blocking).

use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{Backend, BackendConfig, ChatRequest, ChatResponse, FinishReason, GatewayError, Usage};

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: String,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpBackend {
    /// Resolves the API key from the configured environment variable.
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&cfg.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| GatewayError::Auth(format!("environment variable {} is not set", cfg.api_key_env)))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self {
            client,
            url: format!("{}/chat/completions", cfg.base_url.trim_end_matches('/')),
            model: cfg.model_name.clone(),
            api_key,
        })
    }

    fn body(&self, req: &ChatRequest) -> serde_json::Value {
        let mut body = json!({
            "model": self.model,
            "messages": req.messages,
            "temperature": req.params.temperature,
            "max_tokens": req.params.max_tokens,
        });
        if let Some(seed) = req.params.seed {
            body["seed"] = json!(seed);
        }
        if let Some(stop) = &req.params.stop {
            body["stop"] = json!(stop);
        }
        body
    }
}

impl Backend for HttpBackend {
    fn call(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let started = Instant::now();
        let resp = self
            .client
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(&self.body(req))
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    GatewayError::Timeout { attempts: 1 }
                } else {
                    GatewayError::Transport(e.to_string())
                }
            })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout { attempts: 1 }
            } else {
                GatewayError::Transport(e.to_string())
            }
        })?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(GatewayError::Auth(format!("status {status}"))),
            429 => return Err(GatewayError::RateLimited { attempts: 1 }),
            500..=599 => return Err(GatewayError::Server { status, attempts: 1 }),
            _ => {
                let mut body = text;
                body.truncate(512);
                return Err(GatewayError::Http { status, body });
            }
        }
        let wire: WireResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::MalformedResponse("no choices".into()))?;
        let content = choice.message.content.unwrap_or_default();
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            Some("stop") | None => FinishReason::Stop,
            Some(_) => FinishReason::Stop,
        };
        if finish_reason == FinishReason::Stop && content.trim().is_empty() {
            return Err(GatewayError::MalformedResponse("empty content with finish_reason=stop".into()));
        }
        let usage = wire
            .usage
            .map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(ChatResponse {
            content,
            finish_reason,
            usage,
            latency_ms: started.elapsed().as_millis() as u64,
            attempts: 1,
        })
    }
}
