use std::time::Duration;

use serde_json::{json, Value};

use super::{check_embed_input, ChatGateway, ChatRequest, Embedder, EmbeddingVector, GatewayError};

pub const ENV_CHAT_URL: &str = "SKILLKB_CHAT_URL";
pub const ENV_EMBED_URL: &str = "SKILLKB_EMBED_URL";
pub const ENV_API_KEY: &str = "SKILLKB_API_KEY";

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into()
}

fn post_json(agent: &ureq::Agent, url: &str, key: Option<&str>, body: &Value) -> Result<Value, GatewayError> {
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Some(k) = key {
        req = req.header("Authorization", format!("Bearer {k}"));
    }
    let mut resp = req.send_json(body).map_err(|e| match e {
        ureq::Error::StatusCode(code) if (400..500).contains(&code) && code != 429 => {
            GatewayError::MalformedResponse(format!("HTTP {code}"))
        }
        other => GatewayError::Transport(other.to_string()),
    })?;
    resp.body_mut().read_json::<Value>().map_err(|e| GatewayError::MalformedResponse(e.to_string()))
}

/// OpenAI-style chat-completion client.
pub struct HttpChat {
    pub url: String,
    pub model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChat {
    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        Self { url: url.into(), model: model.into(), api_key, agent: agent(Duration::from_secs(120)) }
    }

    /// Endpoint from `SKILLKB_CHAT_URL`, key from `SKILLKB_API_KEY`.
    pub fn from_env(model: impl Into<String>) -> Option<Self> {
        let url = std::env::var(ENV_CHAT_URL).ok().filter(|u| !u.is_empty())?;
        Some(Self::new(url, model, std::env::var(ENV_API_KEY).ok()))
    }

    pub fn body(&self, request: &ChatRequest) -> Value {
        json!({
            "model": self.model,
            "messages": request.messages.iter().map(|m| json!({"role": m.role, "content": m.content})).collect::<Vec<_>>(),
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        })
    }
}

pub(crate) fn parse_chat_reply(reply: &Value) -> Result<String, GatewayError> {
    reply
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| GatewayError::MalformedResponse("no choices[0].message.content".into()))
}

impl ChatGateway for HttpChat {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let reply = post_json(&self.agent, &self.url, self.api_key.as_deref(), &self.body(request))?;
        parse_chat_reply(&reply)
    }
}

/// OpenAI-style embedding client.
pub struct HttpEmbedder {
    pub url: String,
    pub model: String,
    pub dimension: usize,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, model: impl Into<String>, dimension: usize, api_key: Option<String>) -> Self {
        Self { url: url.into(), model: model.into(), dimension, api_key, agent: agent(Duration::from_secs(60)) }
    }

    pub fn from_env(model: impl Into<String>, dimension: usize) -> Option<Self> {
        let url = std::env::var(ENV_EMBED_URL).ok().filter(|u| !u.is_empty())?;
        Some(Self::new(url, model, dimension, std::env::var(ENV_API_KEY).ok()))
    }
}

pub(crate) fn parse_embedding_reply(reply: &Value, n: usize, dimension: usize) -> Result<Vec<EmbeddingVector>, GatewayError> {
    let data = reply
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::MalformedResponse("no data array".into()))?;
    if data.len() != n {
        return Err(GatewayError::MalformedResponse(format!("expected {n} embeddings, got {}", data.len())));
    }
    data.iter()
        .map(|item| {
            let values = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| GatewayError::MalformedResponse("item without embedding".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| GatewayError::MalformedResponse("non-numeric entry".into())))
                .collect::<Result<Vec<f64>, _>>()?;
            if values.len() != dimension {
                return Err(GatewayError::DimensionMismatch { expected: dimension, got: values.len() });
            }
            if values.iter().any(|x| !x.is_finite()) {
                return Err(GatewayError::MalformedResponse("non-finite entry".into()));
            }
            let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(GatewayError::MalformedResponse("zero vector".into()));
            }
            Ok(EmbeddingVector(values.into_iter().map(|x| x / norm).collect()))
        })
        .collect()
}

impl Embedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        check_embed_input(texts)?;
        let reply = post_json(&self.agent, &self.url, self.api_key.as_deref(), &json!({"model": self.model, "input": texts}))?;
        parse_embedding_reply(&reply, texts.len(), self.dimension)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatMessage, RetryPolicy, Retrying};

    #[test]
    fn chat_wire_shape() {
        let c = HttpChat::new("http://localhost", "m", None);
        let mut r = ChatRequest::new(vec![ChatMessage::system("s"), ChatMessage::user("u")]);
        r.temperature = 0.9;
        r.max_output_tokens = 64;
        let body = c.body(&r);
        assert_eq!(
            body,
            json!({"model": "m", "messages": [{"role": "system", "content": "s"}, {"role": "user", "content": "u"}], "temperature": 0.9, "max_tokens": 64})
        );
        let reply = json!({"choices": [{"message": {"role": "assistant", "content": "hello"}}]});
        assert_eq!(parse_chat_reply(&reply).unwrap(), "hello");
        assert!(matches!(parse_chat_reply(&json!({"choices": []})), Err(GatewayError::MalformedResponse(_))));
    }

    #[test]
    fn embedding_reply_checks_width() {
        let reply = json!({"data": [{"embedding": [3.0, 4.0]}]});
        let v = parse_embedding_reply(&reply, 1, 2).unwrap();
        assert!((v[0].0[0] - 0.6).abs() < 1e-12);
        assert_eq!(parse_embedding_reply(&reply, 1, 3), Err(GatewayError::DimensionMismatch { expected: 3, got: 2 }));
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let chat = Retrying {
            inner: HttpChat::new("http://127.0.0.1:9/v1/chat/completions", "m", None),
            policy: RetryPolicy { attempts: 2, base_backoff_ms: 0 },
        };
        let r = ChatRequest::new(vec![ChatMessage::user("hi")]);
        assert!(matches!(chat.complete(&r), Err(GatewayError::Transport(_))));
    }
}
