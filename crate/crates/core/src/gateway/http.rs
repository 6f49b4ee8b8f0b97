//! HTTP backend speaking the OpenAI-style chat-completions protocol, with a
//! pluggable reward endpoint.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, Completion, CompletionRequest, FinishReason, PromptRole, RewardRequest, ThinkMode};

/// How think mode reaches the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThinkToggle {
    /// `chat_template_kwargs.enable_thinking` in the request body.
    #[default]
    TemplateKwargs,
    /// Appends a `/think` or `/no_think` directive to the prompt.
    Directive,
    /// Think mode is not forwarded.
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RewardEndpoint {
    /// POST `{"prompt", "response"}` to `url`, read `{"score": f64}`.
    Classifier { url: String },
    /// Ask a chat model to grade the response; `template` must contain
    /// `{prompt}` and `{response}`. The first number in the reply is the score.
    Judge { template: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL up to and including the API version, e.g. `http://host:8000/v1`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub think_toggle: ThinkToggle,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub reward: Option<RewardEndpoint>,
}

fn default_timeout() -> u64 {
    600
}

pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| BackendError::Fatal(format!("environment variable {var} is not set")))?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Fatal(e.to_string()))?;
        Ok(HttpBackend { config, api_key, client })
    }

    fn chat_body(&self, request: &CompletionRequest) -> Value {
        let mut content = request.prompt.clone();
        if self.config.think_toggle == ThinkToggle::Directive {
            match request.think_mode {
                ThinkMode::On => content.push_str(" /think"),
                ThinkMode::Off => content.push_str(" /no_think"),
                ThinkMode::NotApplicable => {}
            }
        }
        let role = match request.role {
            PromptRole::User => "user",
            PromptRole::System => "system",
        };
        let s = &request.sampling;
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": role, "content": content}],
            "temperature": s.temperature,
            "top_p": s.top_p,
            "max_tokens": s.max_tokens,
            "n": s.n,
            "seed": s.rng_seed,
        });
        if self.config.think_toggle == ThinkToggle::TemplateKwargs && request.think_mode != ThinkMode::NotApplicable {
            body["chat_template_kwargs"] = json!({"enable_thinking": request.think_mode == ThinkMode::On});
        }
        body
    }

    fn post(&self, url: &str, body: &Value) -> Result<Value, BackendError> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Http { status: status.as_u16(), body: text });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Data(format!("invalid JSON from {url}: {e}")))
    }

    fn chat(&self, request: &CompletionRequest) -> Result<Vec<Completion>, BackendError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        parse_choices(&self.post(&url, &self.chat_body(request))?)
    }
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    index: usize,
    message: Message,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    reasoning_content: Option<String>,
}

fn parse_choices(body: &Value) -> Result<Vec<Completion>, BackendError> {
    let choices = body.get("choices").cloned().ok_or_else(|| BackendError::Data("response has no choices".into()))?;
    let mut choices: Vec<Choice> =
        serde_json::from_value(choices).map_err(|e| BackendError::Data(format!("bad choices: {e}")))?;
    choices.sort_by_key(|c| c.index);
    Ok(choices
        .into_iter()
        .map(|c| {
            let content = c.message.content.unwrap_or_default();
            let text = match c.message.reasoning_content {
                Some(r) if !r.is_empty() => format!("<think>{r}</think>{content}"),
                _ => content,
            };
            let finish_reason = match c.finish_reason.as_deref() {
                Some("length") => FinishReason::Length,
                _ => FinishReason::Stop,
            };
            Completion { text, finish_reason }
        })
        .collect())
}

/// First decimal number in `text`.
fn first_number(text: &str) -> Option<f64> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let starts = c.is_ascii_digit() || (c == b'-' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit));
        if starts {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_digit() || bytes[j] == b'.') {
                j += 1;
            }
            return text[i..j].trim_end_matches('.').parse().ok();
        }
        i += 1;
    }
    None
}

impl Backend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<Completion>, BackendError> {
        self.chat(request)
    }

    fn score(&self, request: &RewardRequest) -> Result<f64, BackendError> {
        match &self.config.reward {
            None => Err(BackendError::Fatal("no reward endpoint configured".into())),
            Some(RewardEndpoint::Classifier { url }) => {
                let body = self.post(url, &json!({"prompt": request.prompt_text, "response": request.response_text}))?;
                body.get("score")
                    .and_then(Value::as_f64)
                    .ok_or_else(|| BackendError::Data(format!("reward response lacks a numeric score: {body}")))
            }
            Some(RewardEndpoint::Judge { template }) => {
                let prompt =
                    template.replace("{prompt}", &request.prompt_text).replace("{response}", &request.response_text);
                let sampling = crate::dataset::SamplingParams { temperature: 0.0, top_p: 1.0, max_tokens: 16, n: 1, rng_seed: 0 };
                let out = self.chat(&CompletionRequest::new(prompt, sampling))?;
                let text = out.first().map(|c| c.text.as_str()).unwrap_or("");
                first_number(text).ok_or_else(|| BackendError::Data(format!("judge reply has no score: {text:?}")))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn choices_are_ordered_and_flagged() {
        let body = json!({"choices": [
            {"index": 1, "message": {"content": "b"}, "finish_reason": "length"},
            {"index": 0, "message": {"content": "a", "reasoning_content": "hm"}, "finish_reason": "stop"}
        ]});
        let out = parse_choices(&body).unwrap();
        assert_eq!(out[0].text, "<think>hm</think>a");
        assert_eq!(out[1].finish_reason, FinishReason::Length);
        assert!(parse_choices(&json!({})).is_err());
    }

    #[test]
    fn judge_number() {
        assert_eq!(first_number("Score: 7.5/10"), Some(7.5));
        assert_eq!(first_number("-2."), Some(-2.0));
        assert_eq!(first_number("none"), None);
    }
}
