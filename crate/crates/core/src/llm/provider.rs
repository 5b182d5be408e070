//! Per-provider request shapes. Every adapter sends a single user message and
//! returns the assistant text.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    /// `POST {base}/chat/completions`, bearer auth, `choices[0].message.content`.
    #[default]
    OpenAiCompatible,
    /// `POST {base}/messages`, `x-api-key` auth, `content[0].text`.
    Anthropic,
}

pub(crate) struct WireRequest {
    pub url: String,
    pub body: Value,
    pub headers: Vec<(&'static str, String)>,
}

const ANTHROPIC_VERSION: &str = "2023-06-01";
const ANTHROPIC_MAX_TOKENS: u32 = 1024;

impl Provider {
    pub(crate) fn request(
        self,
        base_url: &str,
        model: &str,
        prompt: &str,
        temperature: Option<f64>,
        api_key: Option<&str>,
    ) -> WireRequest {
        let base = base_url.trim_end_matches('/');
        let messages = json!([{ "role": "user", "content": prompt }]);
        match self {
            Provider::OpenAiCompatible => {
                let url = if base.ends_with("/chat/completions") {
                    base.to_string()
                } else {
                    format!("{base}/chat/completions")
                };
                let mut body = json!({ "model": model, "messages": messages });
                if let Some(t) = temperature {
                    body["temperature"] = json!(t);
                }
                let headers = api_key
                    .map(|k| vec![("authorization", format!("Bearer {k}"))])
                    .unwrap_or_default();
                WireRequest { url, body, headers }
            }
            Provider::Anthropic => {
                let url = if base.ends_with("/messages") {
                    base.to_string()
                } else {
                    format!("{base}/messages")
                };
                let mut body = json!({
                    "model": model,
                    "max_tokens": ANTHROPIC_MAX_TOKENS,
                    "messages": messages,
                });
                if let Some(t) = temperature {
                    body["temperature"] = json!(t);
                }
                let mut headers = vec![("anthropic-version", ANTHROPIC_VERSION.to_string())];
                if let Some(k) = api_key {
                    headers.push(("x-api-key", k.to_string()));
                }
                WireRequest { url, body, headers }
            }
        }
    }

    pub(crate) fn extract_text(self, body: &Value) -> Option<String> {
        match self {
            Provider::OpenAiCompatible => body
                .pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .map(str::to_string),
            Provider::Anthropic => body.get("content").and_then(Value::as_array).map(|blocks| {
                blocks
                    .iter()
                    .filter_map(|b| b.get("text").and_then(Value::as_str))
                    .collect::<Vec<_>>()
                    .join("")
            }),
        }
    }
}
