// SPDX-License-Identifier: Apache-2.0

//! Vendor HTTP adapters. Each adapter maps a [`ChatRequest`] (text + optional
//! PNG) onto one vendor's JSON payload and pulls the reply text back out.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adapter {
    /// OpenAI-style chat completions (`choices[0].message.content`).
    OpenaiChat,
    /// Anthropic messages API.
    Anthropic,
    /// Google `generateContent`.
    Gemini,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub text: String,
    pub image_png: Option<Vec<u8>>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Network failure, 429 or 5xx.
    Retryable(String),
    /// 401/403: do not retry.
    Auth(String),
    /// Anything else that retrying cannot fix.
    Fatal(String),
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

/// Header name/value pairs plus JSON body for one request.
#[derive(Debug, Clone, PartialEq)]
pub struct HttpPayload {
    pub headers: Vec<(String, String)>,
    pub body: Value,
}

pub fn build_payload(adapter: Adapter, api_key: &str, req: &ChatRequest) -> HttpPayload {
    let b64 = req
        .image_png
        .as_ref()
        .map(|png| base64::engine::general_purpose::STANDARD.encode(png));
    match adapter {
        Adapter::OpenaiChat => {
            let mut content = vec![json!({"type": "text", "text": req.text})];
            if let Some(data) = &b64 {
                content.push(json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:image/png;base64,{data}")}
                }));
            }
            let mut body = json!({
                "model": req.model,
                "messages": [{"role": "user", "content": content}],
            });
            if let Some(t) = req.temperature {
                body["temperature"] = json!(t);
            }
            if let Some(m) = req.max_tokens {
                body["max_tokens"] = json!(m);
            }
            HttpPayload {
                headers: vec![("Authorization".into(), format!("Bearer {api_key}"))],
                body,
            }
        }
        Adapter::Anthropic => {
            let mut content = Vec::new();
            if let Some(data) = &b64 {
                content.push(json!({
                    "type": "image",
                    "source": {"type": "base64", "media_type": "image/png", "data": data}
                }));
            }
            content.push(json!({"type": "text", "text": req.text}));
            let mut body = json!({
                "model": req.model,
                "max_tokens": req.max_tokens.unwrap_or(1024),
                "messages": [{"role": "user", "content": content}],
            });
            if let Some(t) = req.temperature {
                body["temperature"] = json!(t);
            }
            HttpPayload {
                headers: vec![
                    ("x-api-key".into(), api_key.to_string()),
                    ("anthropic-version".into(), "2023-06-01".into()),
                ],
                body,
            }
        }
        Adapter::Gemini => {
            let mut parts = vec![json!({"text": req.text})];
            if let Some(data) = &b64 {
                parts.push(json!({"inline_data": {"mime_type": "image/png", "data": data}}));
            }
            let mut generation = serde_json::Map::new();
            if let Some(t) = req.temperature {
                generation.insert("temperature".into(), json!(t));
            }
            if let Some(m) = req.max_tokens {
                generation.insert("maxOutputTokens".into(), json!(m));
            }
            let mut body = json!({"contents": [{"role": "user", "parts": parts}]});
            if !generation.is_empty() {
                body["generationConfig"] = Value::Object(generation);
            }
            HttpPayload {
                headers: vec![("x-goog-api-key".into(), api_key.to_string())],
                body,
            }
        }
    }
}

pub fn parse_reply(adapter: Adapter, body: &Value) -> Result<String, TransportError> {
    let text = match adapter {
        Adapter::OpenaiChat => body["choices"][0]["message"]["content"].as_str().map(str::to_string),
        Adapter::Anthropic => body["content"].as_array().map(|blocks| {
            blocks
                .iter()
                .filter_map(|b| b["text"].as_str())
                .collect::<Vec<_>>()
                .join("")
        }),
        Adapter::Gemini => body["candidates"][0]["content"]["parts"].as_array().map(|parts| {
            parts
                .iter()
                .filter_map(|p| p["text"].as_str())
                .collect::<Vec<_>>()
                .join("")
        }),
    };
    text.ok_or_else(|| TransportError::Fatal(format!("unexpected response shape: {body}")))
}

pub fn classify_status(status: u16, body: &str) -> TransportError {
    let snippet: String = body.chars().take(300).collect();
    match status {
        401 | 403 => TransportError::Auth(format!("HTTP {status}: {snippet}")),
        408 | 429 | 500..=599 => TransportError::Retryable(format!("HTTP {status}: {snippet}")),
        _ => TransportError::Fatal(format!("HTTP {status}: {snippet}")),
    }
}

/// Blocking HTTPS transport.
pub struct HttpTransport {
    adapter: Adapter,
    endpoint: String,
    api_key: String,
}

impl HttpTransport {
    pub fn new(adapter: Adapter, endpoint: impl Into<String>, api_key: impl Into<String>) -> Self {
        HttpTransport {
            adapter,
            endpoint: endpoint.into(),
            api_key: api_key.into(),
        }
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let payload = build_payload(self.adapter, &self.api_key, request);
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(request.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(&self.endpoint).header("content-type", "application/json");
        for (k, v) in &payload.headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let mut resp = req
            .send_json(&payload.body)
            .map_err(|e| TransportError::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Retryable(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, &text));
        }
        let body: Value = serde_json::from_str(&text)
            .map_err(|e| TransportError::Fatal(format!("invalid JSON reply: {e}")))?;
        parse_reply(self.adapter, &body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn req() -> ChatRequest {
        ChatRequest {
            model: "m".into(),
            text: "hello".into(),
            image_png: Some(vec![1, 2, 3]),
            temperature: Some(0.0),
            max_tokens: None,
            timeout: Duration::from_secs(5),
        }
    }

    #[test]
    fn payload_shapes() {
        let p = build_payload(Adapter::OpenaiChat, "k", &req());
        assert_eq!(p.body["messages"][0]["content"][1]["image_url"]["url"], "data:image/png;base64,AQID");
        assert_eq!(p.headers[0].1, "Bearer k");
        let p = build_payload(Adapter::Anthropic, "k", &req());
        assert_eq!(p.body["messages"][0]["content"][0]["source"]["data"], "AQID");
        assert_eq!(p.body["max_tokens"], 1024);
        let p = build_payload(Adapter::Gemini, "k", &req());
        assert_eq!(p.body["contents"][0]["parts"][1]["inline_data"]["data"], "AQID");
        assert_eq!(p.body["generationConfig"]["temperature"], 0.0);
    }

    #[test]
    fn reply_parsing() {
        let openai = json!({"choices": [{"message": {"content": "42 mL/min/1.73m²"}}]});
        assert_eq!(parse_reply(Adapter::OpenaiChat, &openai).unwrap(), "42 mL/min/1.73m²");
        let anthropic = json!({"content": [{"type": "text", "text": "a"}, {"type": "text", "text": "b"}]});
        assert_eq!(parse_reply(Adapter::Anthropic, &anthropic).unwrap(), "ab");
        let gemini = json!({"candidates": [{"content": {"parts": [{"text": "x"}]}}]});
        assert_eq!(parse_reply(Adapter::Gemini, &gemini).unwrap(), "x");
        assert!(matches!(parse_reply(Adapter::Gemini, &json!({})), Err(TransportError::Fatal(_))));
    }

    #[test]
    fn status_classes() {
        assert!(matches!(classify_status(401, ""), TransportError::Auth(_)));
        assert!(matches!(classify_status(429, ""), TransportError::Retryable(_)));
        assert!(matches!(classify_status(503, ""), TransportError::Retryable(_)));
        assert!(matches!(classify_status(400, ""), TransportError::Fatal(_)));
    }

    /// Serves the given (status, body) responses, one per connection.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (format!("http://{addr}/v1/chat/completions"), handle)
    }

    #[test]
    fn http_round_trip_against_local_server() {
        let reply = json!({"choices": [{"message": {"content": "The most likely predicted value is 41.5 mL/min/1.73m²."}}]});
        let (url, handle) = serve(vec![(200, reply.to_string()), (401, "{}".into()), (503, "{}".into())]);
        let t = HttpTransport::new(Adapter::OpenaiChat, url, "secret");
        assert!(t.send(&req()).unwrap().contains("41.5"));
        assert!(matches!(t.send(&req()), Err(TransportError::Auth(_))));
        assert!(matches!(t.send(&req()), Err(TransportError::Retryable(_))));
        let bodies = handle.join().unwrap();
        let sent: Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(sent["model"], "m");
        assert_eq!(sent["messages"][0]["content"][0]["text"], "hello");
    }
}
