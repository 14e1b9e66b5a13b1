use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, BackendConfig, GenerationRequest, RawReply};
use crate::error::{Error, Result};

/// Chat-completions JSON over HTTP POST.
pub struct HttpChatBackend {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    supports_seed: bool,
}

impl HttpChatBackend {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self> {
        let endpoint = cfg
            .endpoint
            .clone()
            .ok_or_else(|| Error::Config("http_chat backend requires `endpoint`".into()))?;
        let model = cfg
            .model_name
            .clone()
            .ok_or_else(|| Error::Config("http_chat backend requires `model_name`".into()))?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            if cfg.require_auth {
                return Err(Error::MissingAuth(cfg.api_key_env.clone()));
            }
            log::warn!("{} is not set; sending requests without credentials", cfg.api_key_env);
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpChatBackend {
            agent,
            endpoint,
            model,
            api_key,
            supports_seed: cfg.supports_seed,
        })
    }

    pub fn request_body(&self, request: &GenerationRequest) -> Value {
        let mut messages = Vec::new();
        if !request.system_prompt.is_empty() {
            messages.push(json!({"role": "system", "content": request.system_prompt}));
        }
        messages.push(json!({"role": "user", "content": request.user_prompt}));
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        });
        if let Some(seed) = request.seed {
            if self.supports_seed {
                body["seed"] = json!(seed);
            } else {
                log::warn!("backend does not accept a seed; ignoring seed {seed}");
            }
        }
        body
    }
}

/// Extracts text and finish reason from a chat-completions response.
pub(crate) fn parse_response(body: &Value) -> Result<RawReply> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| Error::Backend(format!("malformed response: no choices in {body}")))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .or_else(|| choice.get("text").and_then(Value::as_str))
        .ok_or_else(|| Error::Backend("malformed response: no message content".into()))?;
    let hit_max_tokens = choice
        .get("finish_reason")
        .and_then(Value::as_str)
        .map(|r| r == "length");
    Ok(RawReply {
        text: text.to_string(),
        hit_max_tokens,
    })
}

impl Backend for HttpChatBackend {
    fn tag(&self) -> String {
        format!("http_chat:{}", self.model)
    }

    fn call(&self, request: &GenerationRequest) -> Result<RawReply> {
        let mut req = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(self.request_body(request)) {
            Ok(r) => r,
            Err(e) => return Err(Error::Transient(format!("request failed: {e}"))),
        };
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transient(format!("reading response body: {e}")))?;
        if status == 429 || status >= 500 {
            return Err(Error::Transient(format!("HTTP {status}: {text}")));
        }
        if !(200..300).contains(&status) {
            return Err(Error::Backend(format!("HTTP {status}: {text}")));
        }
        let body: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Backend(format!("malformed response JSON: {e}")))?;
        parse_response(&body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{BackendKind, Gateway, RetryPolicy};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;

    #[test]
    fn parses_chat_responses() {
        let ok = json!({"choices": [{"message": {"content": "hi"}, "finish_reason": "length"}]});
        assert_eq!(
            parse_response(&ok).unwrap(),
            RawReply {
                text: "hi".into(),
                hit_max_tokens: Some(true)
            }
        );
        let no_reason = json!({"choices": [{"message": {"content": "hi"}}]});
        assert_eq!(parse_response(&no_reason).unwrap().hit_max_tokens, None);
        assert!(parse_response(&json!({"error": "x"})).is_err());
    }

    fn config(endpoint: String) -> BackendConfig {
        BackendConfig {
            kind: BackendKind::HttpChat,
            endpoint: Some(endpoint),
            model_name: Some("test-model".into()),
            api_key_env: "SYNTHNOTE_TEST_UNSET_KEY".into(),
            retry: RetryPolicy {
                max_attempts: 3,
                base_backoff_ms: 1,
            },
            ..Default::default()
        }
    }

    #[test]
    fn body_shape() {
        let b = HttpChatBackend::from_config(&config("http://127.0.0.1:9/v1".into())).unwrap();
        let mut r = GenerationRequest::new("sys", "user", 64);
        r.seed = Some(7);
        let body = b.request_body(&r);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "user");
        assert_eq!(body["temperature"], 0.75);
        assert_eq!(body["top_p"], 0.9);
        assert_eq!(body["max_tokens"], 64);
        assert_eq!(body["seed"], 7);
    }

    #[test]
    fn missing_auth_is_reported() {
        let mut c = config("http://127.0.0.1:9/v1".into());
        c.require_auth = true;
        assert!(matches!(
            HttpChatBackend::from_config(&c),
            Err(Error::MissingAuth(_))
        ));
    }

    /// Serves the given `(status, body)` responses, one per connection.
    fn serve(responses: Vec<(u16, &'static str)>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        format!("http://{addr}/v1/chat/completions")
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let url = serve(vec![
            (503, "{}"),
            (429, "{}"),
            (200, r#"{"choices":[{"message":{"content":"rephrased"},"finish_reason":"stop"}]}"#),
        ]);
        let gw: Gateway = config(url).build().unwrap();
        let out = gw.generate(&GenerationRequest::new("s", "u", 16)).unwrap();
        assert_eq!(out.text, "rephrased");
        assert!(!out.truncated);
        assert_eq!(out.backend_tag, "http_chat:test-model");
    }

    #[test]
    fn client_errors_are_not_retried() {
        let url = serve(vec![(400, r#"{"error":"bad"}"#)]);
        let gw = Gateway::new(Arc::new(HttpChatBackend::from_config(&config(url)).unwrap()));
        assert!(matches!(
            gw.generate(&GenerationRequest::new("s", "u", 16)),
            Err(Error::Backend(_))
        ));
    }
}
