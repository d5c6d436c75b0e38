use std::collections::BTreeMap;
use std::time::Duration;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::curation::templates::{prompt_input, MCQ_SUFFIX};

/// A fully-resolved chat request.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub prompt: String,
    pub params: BTreeMap<String, Value>,
}

impl ChatRequest {
    /// Chat-completions request body.
    pub fn body(&self) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": self.prompt }],
        });
        let obj = body.as_object_mut().unwrap();
        for (k, v) in &self.params {
            obj.insert(k.clone(), v.clone());
        }
        body
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Status { status: u16, body: String },
    Network(String),
}

impl TransportError {
    pub fn is_transient(&self) -> bool {
        match self {
            TransportError::Status { status, .. } => *status == 408 || *status == 429 || *status >= 500,
            TransportError::Network(_) => true,
        }
    }
}

pub trait Transport: Send + Sync {
    fn send(&self, req: &ChatRequest, api_key: Option<&str>, timeout: Duration) -> Result<String, TransportError>;
}

/// HTTP transport speaking the chat-completions wire format.
pub struct HttpTransport {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl Transport for HttpTransport {
    fn send(&self, req: &ChatRequest, api_key: Option<&str>, timeout: Duration) -> Result<String, TransportError> {
        let mut builder = self.client.post(&self.endpoint).timeout(timeout).json(&req.body());
        if let Some(key) = api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| TransportError::Network(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(TransportError::Status { status, body: text });
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| TransportError::Status {
            status,
            body: format!("unparseable completion body: {e}"),
        })?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or(TransportError::Status {
                status,
                body: "completion body lacks choices[0].message.content".into(),
            })
    }
}

/// Offline deterministic backends addressed as `mock://<behavior>[/<arg>]`.
///
/// * `echo` returns the prompt's input section.
/// * `constant/<text>` always returns `<text>`.
/// * `extractive` returns the first sentence of the input section.
/// * `lexical/<salt>` returns a salt-dependent pseudo-answer: an option
///   letter for multiple-choice prompts, otherwise a subset of input words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockTransport {
    Echo,
    Constant(String),
    Extractive,
    Lexical(String),
}

impl MockTransport {
    pub fn parse(url: &str) -> Option<Self> {
        let rest = url.strip_prefix("mock://")?;
        let (kind, arg) = match rest.split_once('/') {
            Some((k, a)) => (k, a),
            None => (rest, ""),
        };
        match kind {
            "echo" => Some(MockTransport::Echo),
            "constant" => Some(MockTransport::Constant(arg.to_string())),
            "extractive" => Some(MockTransport::Extractive),
            "lexical" => Some(MockTransport::Lexical(arg.to_string())),
            _ => None,
        }
    }

    pub fn respond(&self, prompt: &str) -> String {
        let input = prompt_input(prompt).unwrap_or(prompt);
        match self {
            MockTransport::Echo => input.to_string(),
            MockTransport::Constant(t) => t.clone(),
            MockTransport::Extractive => {
                let end = input
                    .char_indices()
                    .find(|(i, c)| matches!(c, '.' | '?' | '!') && input[i + 1..].starts_with(char::is_whitespace))
                    .map(|(i, _)| i + 1)
                    .unwrap_or(input.len());
                input[..end].trim().to_string()
            }
            MockTransport::Lexical(salt) => {
                let h = Sha256::new().chain_update(salt.as_bytes()).chain_update(prompt.as_bytes()).finalize();
                if input.ends_with(MCQ_SUFFIX) {
                    let letter = ["A", "B", "C", "D"][(h[0] % 4) as usize];
                    return match h[1] % 3 {
                        0 => letter.to_string(),
                        1 => format!("The correct answer is {letter}."),
                        _ => format!("{letter}. I believe this is right."),
                    };
                }
                let keep_mod = 2 + (h[2] % 3) as usize;
                let words: Vec<&str> = input
                    .split_whitespace()
                    .enumerate()
                    .filter(|(i, _)| !(i + h[3] as usize).is_multiple_of(keep_mod))
                    .map(|(_, w)| w)
                    .collect();
                words.join(" ")
            }
        }
    }
}

impl Transport for MockTransport {
    fn send(&self, req: &ChatRequest, _api_key: Option<&str>, _timeout: Duration) -> Result<String, TransportError> {
        Ok(self.respond(&req.prompt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::templates::build_prompt;

    #[test]
    fn parses_mock_urls() {
        assert_eq!(MockTransport::parse("mock://echo"), Some(MockTransport::Echo));
        assert_eq!(
            MockTransport::parse("mock://constant/OK"),
            Some(MockTransport::Constant("OK".into()))
        );
        assert_eq!(MockTransport::parse("https://x"), None);
        assert_eq!(MockTransport::parse("mock://nope"), None);
    }

    #[test]
    fn mock_behaviors() {
        let p = build_prompt("t", "First one. Second one.");
        assert_eq!(MockTransport::Echo.respond(&p), "First one. Second one.");
        assert_eq!(MockTransport::Extractive.respond(&p), "First one.");
        let mcq = build_prompt("t", &format!("Q\nA. a\nB. b\nC. c\nD. d\n{MCQ_SUFFIX}"));
        let r = MockTransport::Lexical("x".into()).respond(&mcq);
        assert!(["A", "B", "C", "D"].iter().any(|l| r.contains(l)));
        assert_eq!(r, MockTransport::Lexical("x".into()).respond(&mcq));
    }

    #[test]
    fn request_body_carries_params() {
        let req = ChatRequest {
            model: "m".into(),
            prompt: "hi".into(),
            params: [("temperature".to_string(), json!(0))].into_iter().collect(),
        };
        let b = req.body();
        assert_eq!(b["temperature"], json!(0));
        assert_eq!(b["messages"][0]["content"], json!("hi"));
    }
}
