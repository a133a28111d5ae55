use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::scripted::ScriptedResponder;
use super::{check_embed_input, ChatGateway, ChatRequest, Embedder, EmbeddingVector, GatewayError};

/// One canned reply. A rule matches when every present selector matches:
/// exact fingerprint, template tag, and all `contains` substrings (searched
/// in the user messages).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    pub reply: String,
}

impl MockRule {
    fn matches(&self, req: &ChatRequest, fingerprint: &str) -> bool {
        if self.fingerprint.as_deref().is_some_and(|f| f != fingerprint) {
            return false;
        }
        if self.tag.is_some() && self.tag != req.tag {
            return false;
        }
        self.contains.iter().all(|needle| {
            req.messages
                .iter()
                .filter(|m| m.role == super::Role::User)
                .any(|m| m.content.contains(needle.as_str()))
        })
    }
}

/// What to answer when no rule matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fallback {
    /// Return the last user message.
    Echo,
    /// Deterministic offline responder that understands the bundled prompts.
    Scripted,
    /// A fixed reply.
    Reply(String),
    /// Fail with a transport error (useful for error-path tests).
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockTable {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default = "default_fallback")]
    pub fallback: Fallback,
}

fn default_fallback() -> Fallback {
    Fallback::Echo
}

impl Default for MockTable {
    fn default() -> Self {
        Self { rules: Vec::new(), fallback: Fallback::Echo }
    }
}

impl MockTable {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

/// Table-driven chat mock. Rules are evaluated in order; the table is read
/// only after construction, the call log is the only mutable state.
pub struct MockChat {
    table: MockTable,
    scripted: ScriptedResponder,
    calls: Mutex<BTreeMap<String, usize>>,
}

impl MockChat {
    pub fn new(table: MockTable) -> Self {
        Self { table, scripted: ScriptedResponder, calls: Mutex::new(BTreeMap::new()) }
    }

    pub fn echo() -> Self {
        Self::new(MockTable::default())
    }

    pub fn scripted() -> Self {
        Self::new(MockTable { rules: Vec::new(), fallback: Fallback::Scripted })
    }

    pub fn with_rules(rules: Vec<MockRule>, fallback: Fallback) -> Self {
        Self::new(MockTable { rules, fallback })
    }

    /// Number of calls made with the given template tag (`""` for untagged).
    pub fn calls_for(&self, tag: &str) -> usize {
        self.calls.lock().expect("mock call log").get(tag).copied().unwrap_or(0)
    }

    pub fn total_calls(&self) -> usize {
        self.calls.lock().expect("mock call log").values().sum()
    }
}

impl ChatGateway for MockChat {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        request.validate()?;
        *self.calls.lock().expect("mock call log").entry(request.tag.clone().unwrap_or_default()).or_insert(0) += 1;
        let fp = request.fingerprint();
        if let Some(rule) = self.table.rules.iter().find(|r| r.matches(request, &fp)) {
            return Ok(rule.reply.clone());
        }
        match &self.table.fallback {
            Fallback::Echo => request
                .last_user()
                .map(str::to_string)
                .ok_or_else(|| GatewayError::MalformedResponse("no user message to echo".into())),
            Fallback::Scripted => self.scripted.respond(request),
            Fallback::Reply(r) => Ok(r.clone()),
            Fallback::Fail => Err(GatewayError::Transport("mock endpoint unreachable".into())),
        }
    }
}

/// Feature-hashing embedder over character 3-grams, unit-normalized.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dimension: usize,
    pub seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dimension: 1024, seed: 0x5eed }
    }
}

impl HashEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension, seed }
    }

    fn fnv1a(&self, bytes: &[u8]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        // final avalanche so low bits depend on every byte
        h ^= h >> 33;
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h ^= h >> 33;
        h
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let normalized: Vec<char> = format!(" {} ", text.trim().to_lowercase()).chars().collect();
        let mut v = vec![0.0f64; self.dimension];
        let mut buf = [0u8; 16];
        for gram in normalized.windows(3) {
            let mut len = 0;
            for c in gram {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let h = self.fnv1a(&buf[..len]);
            let idx = (h % self.dimension as u64) as usize;
            let sign = if (h >> 63) == 1 { -1.0 } else { 1.0 };
            v[idx] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // all trigram contributions cancelled; fall back to a fixed axis
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        EmbeddingVector(v)
    }
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        check_embed_input(texts)?;
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ChatMessage;

    fn norm(v: &EmbeddingVector) -> f64 {
        v.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn echo_returns_last_user_message() {
        let chat = MockChat::echo();
        let r = ChatRequest::new(vec![ChatMessage::system("echo"), ChatMessage::user("hi")]);
        assert_eq!(chat.complete(&r).unwrap(), "hi");
    }

    #[test]
    fn fingerprint_rule_wins() {
        let r = ChatRequest::new(vec![ChatMessage::system("plan"), ChatMessage::user("task")]);
        let chat = MockChat::with_rules(
            vec![MockRule { fingerprint: Some(r.fingerprint()), reply: "<plan>\n# step 1: a\n</plan>".into(), ..Default::default() }],
            Fallback::Echo,
        );
        assert_eq!(chat.complete(&r).unwrap(), "<plan>\n# step 1: a\n</plan>");
        let other = ChatRequest::new(vec![ChatMessage::system("plan"), ChatMessage::user("other")]);
        assert_eq!(chat.complete(&other).unwrap(), "other");
        assert_eq!(chat.total_calls(), 2);
    }

    #[test]
    fn failing_fallback_is_transport_error() {
        let chat = MockChat::with_rules(vec![], Fallback::Fail);
        let r = ChatRequest::new(vec![ChatMessage::user("x")]);
        assert!(matches!(chat.complete(&r), Err(GatewayError::Transport(_))));
    }

    #[test]
    fn hash_embedder_determinism_and_norm() {
        let e = HashEmbedder::default();
        let a1 = e.embed(&["abc".into()]).unwrap();
        let a2 = e.embed(&["abc".into()]).unwrap();
        assert_eq!(a1, a2);
        let pair = e.embed(&["abc".into(), "abc".into()]).unwrap();
        assert_eq!(pair[0], pair[1]);
        let two = e.embed(&["abc".into(), "xyz".into()]).unwrap();
        for v in &two {
            assert!((norm(v) - 1.0).abs() < 1e-9);
            assert_eq!(v.dimension(), 1024);
        }
        let cos: f64 = two[0].0.iter().zip(&two[1].0).map(|(a, b)| a * b).sum();
        assert!(cos < 1.0);
    }

    #[test]
    fn embed_rejects_blank_text() {
        let e = HashEmbedder::default();
        assert!(e.embed(&[]).is_err());
        assert!(e.embed(&["  ".into()]).is_err());
    }
}
