//! HTTP adapters for chat-completions and messages style endpoints.

use std::fmt;
use std::time::Duration;

use async_trait::async_trait;
use serde_json::{json, Value};

use super::{ChatProvider, ChatRequest, Completion, DispatchError, FinishReason, ProviderConfig, ProviderError, ProviderFamily, TrialContext};
use crate::design::Role;

const ANTHROPIC_VERSION: &str = "2023-06-01";

pub struct HttpProvider {
    config: ProviderConfig,
    client: reqwest::Client,
    api_key: Option<String>,
}

// The key stays out of debug output.
impl fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpProvider")
            .field("provider_id", &self.config.provider_id)
            .field("endpoint", &self.config.endpoint())
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpProvider {
    /// Reads the credential from the configured variable. Fails if it is
    /// unset, so no batch starts without credentials.
    pub fn new(config: ProviderConfig) -> Result<Self, DispatchError> {
        config.validate()?;
        if config.family == ProviderFamily::Mock {
            return Err(DispatchError::InvalidConfig {
                provider: config.provider_id.clone(),
                reason: "mock providers are built in-process, not over HTTP".into(),
            });
        }
        let api_key = match &config.auth_env {
            Some(var) => Some(std::env::var(var).ok().filter(|v| !v.is_empty()).ok_or_else(|| {
                DispatchError::MissingCredential {
                    provider: config.provider_id.clone(),
                    var: var.clone(),
                }
            })?),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| DispatchError::InvalidConfig {
                provider: config.provider_id.clone(),
                reason: e.to_string(),
            })?;
        Ok(HttpProvider { config, client, api_key })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn body(&self, request: &ChatRequest) -> Value {
        let role = |r: Role| match r {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        match self.config.family {
            ProviderFamily::AnthropicMessages => {
                let system: Vec<&str> = request
                    .messages
                    .iter()
                    .filter(|m| m.role == Role::System)
                    .map(|m| m.content.as_str())
                    .collect();
                let messages: Vec<Value> = request
                    .messages
                    .iter()
                    .filter(|m| m.role != Role::System)
                    .map(|m| json!({"role": role(m.role), "content": m.content}))
                    .collect();
                let mut body = json!({
                    "model": request.model,
                    "max_tokens": request.max_tokens,
                    "temperature": request.temperature,
                    "messages": messages,
                });
                if !system.is_empty() {
                    body["system"] = Value::String(system.join("\n\n"));
                }
                body
            }
            _ => {
                let messages: Vec<Value> = request
                    .messages
                    .iter()
                    .map(|m| json!({"role": role(m.role), "content": m.content}))
                    .collect();
                json!({
                    "model": request.model,
                    "messages": messages,
                    "temperature": request.temperature,
                    "max_tokens": request.max_tokens,
                })
            }
        }
    }
}

fn parse_openai(body: &Value) -> Result<Completion, ProviderError> {
    let choice = body["choices"]
        .get(0)
        .ok_or_else(|| ProviderError::Fatal("response has no choices".into()))?;
    let message = &choice["message"];
    if let Some(refusal) = message["refusal"].as_str() {
        return Ok(Completion {
            text: refusal.to_string(),
            finish: FinishReason::Refusal,
        });
    }
    let text = message["content"].as_str().unwrap_or_default().to_string();
    let finish = match choice["finish_reason"].as_str() {
        Some("length") => FinishReason::Length,
        Some("content_filter") => FinishReason::Refusal,
        _ => FinishReason::Stop,
    };
    Ok(Completion { text, finish })
}

fn parse_anthropic(body: &Value) -> Result<Completion, ProviderError> {
    let blocks = body["content"]
        .as_array()
        .ok_or_else(|| ProviderError::Fatal("response has no content".into()))?;
    let text: String = blocks
        .iter()
        .filter(|b| b["type"] == "text")
        .filter_map(|b| b["text"].as_str())
        .collect::<Vec<_>>()
        .join("");
    let finish = match body["stop_reason"].as_str() {
        Some("max_tokens") => FinishReason::Length,
        Some("refusal") => FinishReason::Refusal,
        _ => FinishReason::Stop,
    };
    Ok(Completion { text, finish })
}

fn classify_status(status: reqwest::StatusCode, body: &str) -> ProviderError {
    let snippet: String = body.chars().take(200).collect();
    let message = format!("HTTP {status}: {snippet}");
    if status.as_u16() == 429 || status.as_u16() == 408 || status.is_server_error() {
        ProviderError::Transient(message)
    } else {
        ProviderError::Fatal(message)
    }
}

#[async_trait]
impl ChatProvider for HttpProvider {
    async fn complete(&self, request: &ChatRequest, _context: &TrialContext<'_>) -> Result<Completion, ProviderError> {
        let mut builder = self.client.post(self.config.endpoint()).json(&self.body(request));
        if let Some(key) = &self.api_key {
            builder = match self.config.family {
                ProviderFamily::AnthropicMessages => {
                    builder.header("x-api-key", key).header("anthropic-version", ANTHROPIC_VERSION)
                }
                _ => builder.bearer_auth(key),
            };
        }
        let response = builder.send().await.map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                ProviderError::Transient(e.without_url().to_string())
            } else {
                ProviderError::Fatal(e.without_url().to_string())
            }
        })?;
        let status = response.status();
        let text = response
            .text()
            .await
            .map_err(|e| ProviderError::Transient(e.without_url().to_string()))?;
        if !status.is_success() {
            return Err(classify_status(status, &text));
        }
        let body: Value =
            serde_json::from_str(&text).map_err(|e| ProviderError::Fatal(format!("malformed response body: {e}")))?;
        match self.config.family {
            ProviderFamily::AnthropicMessages => parse_anthropic(&body),
            _ => parse_openai(&body),
        }
    }

    fn uses_network(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::ChatMessage;

    fn config(family: ProviderFamily) -> ProviderConfig {
        ProviderConfig {
            family,
            base_url: "http://127.0.0.1:1".into(),
            auth_env: None,
            ..ProviderConfig::mock("m")
        }
    }

    fn request() -> ChatRequest {
        ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::system("sys"), ChatMessage::user("hi")],
            temperature: 1.0,
            max_tokens: 64,
        }
    }

    #[test]
    fn anthropic_body_lifts_system() {
        let p = HttpProvider::new(config(ProviderFamily::AnthropicMessages)).unwrap();
        let body = p.body(&request());
        assert_eq!(body["system"], "sys");
        assert_eq!(body["messages"].as_array().unwrap().len(), 1);
        assert_eq!(body["temperature"], 1.0);
    }

    #[test]
    fn openai_body_keeps_order() {
        let p = HttpProvider::new(config(ProviderFamily::OpenaiChat)).unwrap();
        let body = p.body(&request());
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "hi");
    }

    #[test]
    fn finish_reasons() {
        let length = json!({"choices": [{"message": {"content": "x"}, "finish_reason": "length"}]});
        assert_eq!(parse_openai(&length).unwrap().finish, FinishReason::Length);
        let refusal = json!({"choices": [{"message": {"content": null, "refusal": "no"}, "finish_reason": "stop"}]});
        assert_eq!(parse_openai(&refusal).unwrap().finish, FinishReason::Refusal);
        let msg = json!({"content": [{"type": "text", "text": "a"}, {"type": "text", "text": "b"}], "stop_reason": "end_turn"});
        assert_eq!(parse_anthropic(&msg).unwrap(), Completion::stop("ab"));
    }

    #[test]
    fn status_classes() {
        use reqwest::StatusCode;
        assert!(matches!(classify_status(StatusCode::TOO_MANY_REQUESTS, ""), ProviderError::Transient(_)));
        assert!(matches!(classify_status(StatusCode::BAD_GATEWAY, ""), ProviderError::Transient(_)));
        assert!(matches!(classify_status(StatusCode::UNAUTHORIZED, ""), ProviderError::Fatal(_)));
    }

    #[test]
    fn missing_credential_is_reported() {
        let mut c = config(ProviderFamily::OpenaiChat);
        c.auth_env = Some("SRCT_TEST_CREDENTIAL_THAT_IS_NEVER_SET".into());
        let err = HttpProvider::new(c).unwrap_err();
        assert!(matches!(err, DispatchError::MissingCredential { var, .. } if var.ends_with("NEVER_SET")));
    }
}
