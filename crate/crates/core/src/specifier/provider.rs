//! Text-in/text-out LLM providers.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider request failed: {0}")]
    Request(String),
    #[error("provider returned an unusable reply: {0}")]
    Reply(String),
    #[error("provider '{0}' does not accept image attachments")]
    ImagesUnsupported(String),
    #[error("no fixture response matches the prompt")]
    NoFixture,
    #[error("provider configuration: {0}")]
    Config(String),
}

/// A PNG image sent alongside a prompt.
#[derive(Debug, Clone)]
pub struct ImageAttachment {
    pub label: String,
    pub png: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct LlmRequest {
    pub prompt: String,
    pub images: Vec<ImageAttachment>,
}

impl LlmRequest {
    pub fn text(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            images: Vec::new(),
        }
    }
}

pub trait LlmProvider: Send + Sync {
    /// Model identifier recorded in caches and manifests.
    fn model_id(&self) -> &str;

    fn supports_images(&self) -> bool;

    fn complete(&self, request: &LlmRequest) -> Result<String, ProviderError>;
}

/// One canned reply, chosen when every `contains` needle occurs in the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRule {
    pub contains: Vec<String>,
    pub response: String,
}

/// Offline provider answering from a list of rules; first match wins.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct FixtureProvider {
    #[serde(default = "default_fixture_model")]
    pub model_id: String,
    #[serde(default)]
    pub rules: Vec<FixtureRule>,
    #[serde(default)]
    pub fallback: Option<String>,
    #[serde(skip)]
    calls: AtomicUsize,
}

fn default_fixture_model() -> String {
    "fixture".into()
}

impl FixtureProvider {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            ..Self::default()
        }
    }

    pub fn with_rule<I, S>(mut self, contains: I, response: impl Into<String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.rules.push(FixtureRule {
            contains: contains.into_iter().map(Into::into).collect(),
            response: response.into(),
        });
        self
    }

    pub fn with_fallback(mut self, response: impl Into<String>) -> Self {
        self.fallback = Some(response.into());
        self
    }

    /// Loads rules from a JSON document `{ "model_id": ..., "rules": [...] }`.
    pub fn from_file(path: &Path) -> Result<Self, ProviderError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ProviderError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ProviderError::Config(format!("{}: {e}", path.display())))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmProvider for FixtureProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn supports_images(&self) -> bool {
        true
    }

    fn complete(&self, request: &LlmRequest) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.rules
            .iter()
            .find(|r| r.contains.iter().all(|needle| request.prompt.contains(needle.as_str())))
            .map(|r| r.response.clone())
            .or_else(|| self.fallback.clone())
            .ok_or(ProviderError::NoFixture)
    }
}

#[cfg(feature = "openai")]
pub use openai::OpenAiProvider;

#[cfg(feature = "openai")]
mod openai {
    use base64::Engine;
    use serde_json::{json, Value};

    use super::{LlmProvider, LlmRequest, ProviderError};

    pub const API_KEY_VARS: [&str; 2] = ["SANE_LLM_API_KEY", "OPENAI_API_KEY"];
    pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

    /// Client for OpenAI-compatible `/chat/completions` endpoints.
    #[derive(Debug)]
    pub struct OpenAiProvider {
        model: String,
        base_url: String,
        api_key: String,
        temperature: Option<f32>,
        client: reqwest::blocking::Client,
    }

    impl OpenAiProvider {
        pub fn new(
            model: impl Into<String>,
            base_url: Option<String>,
            api_key: String,
            temperature: Option<f32>,
        ) -> Result<Self, ProviderError> {
            let client = reqwest::blocking::Client::builder()
                .timeout(std::time::Duration::from_secs(120))
                .build()
                .map_err(|e| ProviderError::Config(e.to_string()))?;
            Ok(Self {
                model: model.into(),
                base_url: base_url.unwrap_or_else(|| DEFAULT_BASE_URL.into()),
                api_key,
                temperature,
                client,
            })
        }

        /// Reads the key from `SANE_LLM_API_KEY`, falling back to `OPENAI_API_KEY`.
        pub fn from_env(
            model: impl Into<String>,
            base_url: Option<String>,
            temperature: Option<f32>,
        ) -> Result<Self, ProviderError> {
            let key = API_KEY_VARS
                .iter()
                .find_map(|v| std::env::var(v).ok().filter(|k| !k.is_empty()))
                .ok_or_else(|| {
                    ProviderError::Config(format!("set one of {API_KEY_VARS:?} to use the openai provider"))
                })?;
            Self::new(model, base_url, key, temperature)
        }

        pub fn request_body(&self, request: &LlmRequest) -> Value {
            let mut content = vec![json!({ "type": "text", "text": request.prompt })];
            for img in &request.images {
                let data = base64::engine::general_purpose::STANDARD.encode(&img.png);
                content.push(json!({
                    "type": "image_url",
                    "image_url": { "url": format!("data:image/png;base64,{data}") }
                }));
            }
            let mut body = json!({
                "model": self.model,
                "messages": [{ "role": "user", "content": content }],
            });
            if let Some(t) = self.temperature {
                body["temperature"] = json!(t);
            }
            body
        }
    }

    impl LlmProvider for OpenAiProvider {
        fn model_id(&self) -> &str {
            &self.model
        }

        fn supports_images(&self) -> bool {
            true
        }

        fn complete(&self, request: &LlmRequest) -> Result<String, ProviderError> {
            let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
            let resp = self
                .client
                .post(url)
                .bearer_auth(&self.api_key)
                .json(&self.request_body(request))
                .send()
                .map_err(|e| ProviderError::Request(e.to_string()))?;
            let status = resp.status();
            let value: Value = resp.json().map_err(|e| ProviderError::Reply(e.to_string()))?;
            if !status.is_success() {
                return Err(ProviderError::Request(format!("HTTP {status}: {value}")));
            }
            value["choices"][0]["message"]["content"]
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| ProviderError::Reply(value.to_string()))
        }
    }

}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_rules_match_in_order() {
        let p = FixtureProvider::new("fx")
            .with_rule(["funny", "cat"], "add a hat to the cat.")
            .with_rule(["funny"], "add a clown nose")
            .with_fallback("Response: specific.");
        assert_eq!(
            p.complete(&LlmRequest::text("make the cat look funny")).unwrap(),
            "add a hat to the cat."
        );
        assert_eq!(
            p.complete(&LlmRequest::text("a funny dog")).unwrap(),
            "add a clown nose"
        );
        assert_eq!(p.complete(&LlmRequest::text("other")).unwrap(), "Response: specific.");
        assert_eq!(p.calls(), 3);
        let strict = FixtureProvider::new("fx");
        assert!(matches!(
            strict.complete(&LlmRequest::text("x")),
            Err(ProviderError::NoFixture)
        ));
    }

    #[test]
    fn fixture_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.json");
        std::fs::write(
            &path,
            r#"{"model_id":"gpt-4o-fixture","rules":[{"contains":["snowy"],"response":"Cover the ground with snow"}]}"#,
        )
        .unwrap();
        let p = FixtureProvider::from_file(&path).unwrap();
        assert_eq!(p.model_id(), "gpt-4o-fixture");
        assert_eq!(
            p.complete(&LlmRequest::text("make it snowy")).unwrap(),
            "Cover the ground with snow"
        );
        assert!(FixtureProvider::from_file(&dir.path().join("missing.json")).is_err());
    }
}
