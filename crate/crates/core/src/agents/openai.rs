//! OpenAI-compatible `/chat/completions` client.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::llm::{ChatMessage, ChatRequest, ChatResponse, LlmClient, TokenLogprob};
use crate::error::{Error, Result};
use crate::transport::{call_json, HttpRequest, Transport};

pub const CHAT_PATH: &str = "/chat/completions";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<u8>,
}

impl WireRequest {
    pub fn from_chat(model: &str, req: &ChatRequest) -> Self {
        Self {
            model: model.to_string(),
            messages: req.messages.clone(),
            temperature: req.temperature,
            max_tokens: req.max_tokens,
            logprobs: req.top_logprobs.map(|_| true),
            top_logprobs: req.top_logprobs,
        }
    }

    pub fn to_chat(&self) -> ChatRequest {
        ChatRequest {
            messages: self.messages.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            top_logprobs: self.top_logprobs,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireResponse {
    #[serde(default)]
    pub id: String,
    #[serde(default)]
    pub model: String,
    pub choices: Vec<WireChoice>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireChoice {
    #[serde(default)]
    pub index: u32,
    pub message: WireMessage,
    #[serde(default)]
    pub logprobs: Option<WireLogprobs>,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireMessage {
    pub role: String,
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireLogprobs {
    #[serde(default)]
    pub content: Option<Vec<TokenLogprob>>,
}

impl WireResponse {
    pub fn from_chat(model: &str, resp: &ChatResponse) -> Self {
        Self {
            id: "chatcmpl-stub".into(),
            model: model.to_string(),
            choices: vec![WireChoice {
                index: 0,
                message: WireMessage {
                    role: "assistant".into(),
                    content: Some(resp.text.clone()),
                },
                logprobs: resp.logprobs.clone().map(|c| WireLogprobs { content: Some(c) }),
                finish_reason: Some("stop".into()),
            }],
        }
    }
}

pub struct OpenAiClient {
    transport: Arc<dyn Transport>,
    model: String,
}

impl OpenAiClient {
    pub fn new(transport: Arc<dyn Transport>, model: impl Into<String>) -> Self {
        Self {
            transport,
            model: model.into(),
        }
    }
}

impl LlmClient for OpenAiClient {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        req.validate()?;
        let body = serde_json::to_value(WireRequest::from_chat(&self.model, req))?;
        let value: Value = call_json(self.transport.as_ref(), &HttpRequest::post(CHAT_PATH, body))?;
        let wire: WireResponse = serde_json::from_value(value)
            .map_err(|e| Error::transport(format!("malformed chat response: {e}"), false))?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::transport("chat response has no choices", false))?;
        let resp = ChatResponse {
            text: choice.message.content.unwrap_or_default(),
            logprobs: choice.logprobs.and_then(|l| l.content),
        };
        resp.validate()?;
        Ok(resp)
    }
}
