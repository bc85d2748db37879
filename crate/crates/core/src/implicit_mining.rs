//! Implicit relation mining and deep triplet embedding.
//!
//! A prompt is sent to a chat model together with a chain-of-thought system
//! template; the final JSON array of `[head, relation, tail]` triplets in the
//! answer is parsed, deduplicated, and later embedded by three role-specific
//! linear projections followed by self-attention over the stacked triple with
//! a row-wise residual.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::embedding::PhraseEmbedder;
use crate::error::{json_parse_error, Error, Result};
use crate::numerics::{self_attention, self_attention_backward, AttentionParams, LinearLayer, Parameters, Tensor};
use crate::rng::substream;

/// Chain-of-thought system prompt.
pub const TEMPLATE: &str = include_str!("../resources/cot_template_v1.txt");
pub const TEMPLATE_VERSION: &str = "cot-v1";
/// Default mock rule table.
pub const DEFAULT_MOCK_RULES: &str = include_str!("../resources/mock_rules.json");

pub const API_KEY_ENV: &str = "CEIDM_LLM_API_KEY";
pub const ENDPOINT_ENV: &str = "CEIDM_LLM_ENDPOINT";
pub const DEFAULT_ENDPOINT: &str = "https://dashscope.aliyuncs.com/compatible-mode/v1/chat/completions";
pub const DEFAULT_MODEL: &str = "qwen-turbo";

/// A `(head, relation, tail)` relation; fields are trimmed and non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Triplet {
    pub h: String,
    pub r: String,
    pub t: String,
}

impl Triplet {
    pub fn new(h: &str, r: &str, t: &str) -> Result<Self> {
        let (h, r, t) = (h.trim(), r.trim(), t.trim());
        if h.is_empty() || r.is_empty() || t.is_empty() {
            return Err(Error::validation(format!("triplet ({h:?}, {r:?}, {t:?}) has an empty field")));
        }
        Ok(Triplet { h: h.into(), r: r.into(), t: t.into() })
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    pub pattern: String,
    pub triplets: Vec<[String; 3]>,
}

/// Case-insensitive substring rules standing in for a chat model.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRules {
    pub rules: Vec<MockRule>,
}

impl MockRules {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| json_parse_error(text, &e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn builtin() -> Self {
        Self::from_json(DEFAULT_MOCK_RULES).expect("bundled mock rules are valid")
    }

    /// Renders a chat-style answer: some reasoning, then the JSON array.
    pub fn respond(&self, prompt: &str) -> String {
        let lowered = prompt.to_lowercase();
        let matched: Vec<&MockRule> =
            self.rules.iter().filter(|r| lowered.contains(&r.pattern.to_lowercase())).collect();
        let mut text = String::from("Step 1: identify the entities in the prompt.\n");
        for rule in &matched {
            text.push_str(&format!("Step: the phrase \"{}\" implies related contact and spatial relations.\n", rule.pattern));
        }
        let all: Vec<&[String; 3]> = matched.iter().flat_map(|r| r.triplets.iter()).collect();
        text.push_str(&serde_json::to_string(&all).expect("strings serialize"));
        text
    }
}

#[derive(Debug, Clone)]
pub enum LlmMode {
    /// OpenAI-compatible chat-completions endpoint.
    Http { endpoint: String, api_key: Option<String> },
    Mock(MockRules),
}

/// Chat client with a response cache keyed by SHA-256(model ‖ prompt).
#[derive(Debug)]
pub struct LlmClient {
    mode: LlmMode,
    model: String,
    timeout: Duration,
    max_retries: u32,
    retry_backoff: Duration,
    cache: Mutex<BTreeMap<String, String>>,
    invocations: AtomicUsize,
}

impl LlmClient {
    pub fn new(mode: LlmMode, model: impl Into<String>, timeout: Duration, max_retries: u32) -> Self {
        LlmClient {
            mode,
            model: model.into(),
            timeout,
            max_retries,
            retry_backoff: Duration::from_millis(250),
            cache: Mutex::new(BTreeMap::new()),
            invocations: AtomicUsize::new(0),
        }
    }

    pub fn mock(rules: MockRules) -> Self {
        Self::new(LlmMode::Mock(rules), DEFAULT_MODEL, Duration::from_secs(30), 0)
    }

    /// HTTP client configured from `CEIDM_LLM_ENDPOINT` / `CEIDM_LLM_API_KEY`.
    pub fn http_from_env(model: impl Into<String>, timeout: Duration, max_retries: u32) -> Self {
        let endpoint = std::env::var(ENDPOINT_ENV).unwrap_or_else(|_| DEFAULT_ENDPOINT.to_string());
        let api_key = std::env::var(API_KEY_ENV).ok();
        Self::new(LlmMode::Http { endpoint, api_key }, model, timeout, max_retries)
    }

    pub fn with_retry_backoff(mut self, backoff: Duration) -> Self {
        self.retry_backoff = backoff;
        self
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn mode(&self) -> &LlmMode {
        &self.mode
    }

    /// Number of times the backend (mock or network) was actually called.
    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::SeqCst)
    }

    pub fn cache_key(&self, prompt: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.model.as_bytes());
        h.update(prompt.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn load_cache(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Ok(());
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: BTreeMap<String, String> =
            serde_json::from_str(&text).map_err(|e| json_parse_error(&text, &e))?;
        self.cache.lock().expect("cache lock").extend(entries);
        Ok(())
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let snapshot = self.cache.lock().expect("cache lock").clone();
        let text = serde_json::to_string_pretty(&snapshot).expect("string map serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Raw model answer for `prompt`, served from cache when possible.
    pub fn complete(&self, prompt: &str) -> Result<String> {
        let key = self.cache_key(prompt);
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        self.invocations.fetch_add(1, Ordering::SeqCst);
        let fresh = match &self.mode {
            LlmMode::Mock(rules) => rules.respond(prompt),
            LlmMode::Http { endpoint, api_key } => self.http_complete(endpoint, api_key.as_deref(), prompt)?,
        };
        // first writer wins so concurrent callers agree on one answer
        let mut cache = self.cache.lock().expect("cache lock");
        Ok(cache.entry(key).or_insert(fresh).clone())
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": TEMPLATE},
                {"role": "user", "content": prompt},
            ],
            "temperature": 0,
        })
    }

    fn http_complete(&self, endpoint: &str, api_key: Option<&str>, prompt: &str) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let body = self.request_body(prompt);
        let mut last_error = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.retry_backoff * 2u32.pow(attempt - 1));
            }
            let mut req = agent.post(endpoint).header("Content-Type", "application/json");
            if let Some(key) = api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            match req.send_json(&body) {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    let text = resp
                        .into_body()
                        .read_to_string()
                        .map_err(|e| Error::Transport(format!("reading response body: {e}")))?;
                    if status == 429 || status >= 500 {
                        last_error = format!("HTTP {status}: {text}");
                        continue;
                    }
                    if !(200..300).contains(&status) {
                        return Err(Error::Transport(format!("HTTP {status} from {endpoint}: {text}")));
                    }
                    return extract_message_content(&text);
                }
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(Error::Transport(format!(
            "{endpoint}: giving up after {} attempt(s): {last_error}",
            self.max_retries + 1
        )))
    }
}

fn extract_message_content(body: &str) -> Result<String> {
    let v: Value = serde_json::from_str(body).map_err(|e| Error::Format {
        message: format!("response is not JSON: {e}"),
        raw: body.to_string(),
    })?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::Format { message: "missing choices[0].message.content".into(), raw: body.to_string() })
}

/// Mines implicit triplets for `prompt`, deduplicated in first-seen order.
pub fn mine_implicit(client: &LlmClient, prompt: &str) -> Result<Vec<Triplet>> {
    if prompt.trim().is_empty() {
        return Err(Error::argument("cannot mine an empty prompt"));
    }
    let answer = client.complete(prompt)?;
    let mut seen = HashSet::new();
    Ok(parse_triplet_response(&answer)?.into_iter().filter(|t| seen.insert(t.clone())).collect())
}

/// Extracts the last top-level JSON array in `text` and reads it as triplets.
pub fn parse_triplet_response(text: &str) -> Result<Vec<Triplet>> {
    let format_err = |message: String| Error::Format { message, raw: text.to_string() };
    let mut last: Option<Value> = None;
    let mut pos = 0;
    while let Some(rel) = text[pos..].find('[') {
        let start = pos + rel;
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(v @ Value::Array(_))) => {
                last = Some(v);
                pos = start + stream.byte_offset();
            }
            _ => pos = start + 1,
        }
    }
    let Some(Value::Array(items)) = last else {
        return Err(format_err("no JSON array found in answer".into()));
    };
    items
        .iter()
        .enumerate()
        .map(|(i, item)| match item.as_array().map(Vec::as_slice) {
            Some([Value::String(h), Value::String(r), Value::String(t)]) => {
                Triplet::new(h, r, t).map_err(|e| format_err(format!("element {i}: {e}")))
            }
            _ => Err(format_err(format!("element {i} is not a [head, relation, tail] string triple: {item}"))),
        })
        .collect()
}

/// Role projections and the self-attention used to embed mined triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletEncoder {
    pub head: LinearLayer,
    pub relation: LinearLayer,
    pub tail: LinearLayer,
    pub attention: AttentionParams,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImplicitTokens {
    pub triplet: Triplet,
    pub e_h: Vec<f64>,
    pub e_r: Vec<f64>,
    pub e_t: Vec<f64>,
    pub h_emb: Vec<f64>,
    pub r_emb: Vec<f64>,
    pub t_emb: Vec<f64>,
    pub resi_h: Vec<f64>,
    pub resi_r: Vec<f64>,
    pub resi_t: Vec<f64>,
}

impl ImplicitTokens {
    pub fn triple(&self) -> [&[f64]; 3] {
        [&self.e_h, &self.e_r, &self.e_t]
    }
}

impl TripletEncoder {
    pub fn seeded(seed: u64, text_dim: usize, token_dim: usize) -> Self {
        TripletEncoder {
            head: LinearLayer::seeded(text_dim, token_dim, &mut substream(seed, "triplet-head")),
            relation: LinearLayer::seeded(text_dim, token_dim, &mut substream(seed, "triplet-relation")),
            tail: LinearLayer::seeded(text_dim, token_dim, &mut substream(seed, "triplet-tail")),
            attention: AttentionParams::seeded(token_dim, &mut substream(seed, "triplet-attention")),
        }
    }

    fn check_dims(&self) -> Result<()> {
        let d = self.attention.dim();
        for (name, l) in [("head", &self.head), ("relation", &self.relation), ("tail", &self.tail)] {
            if l.out_dim() != d {
                return Err(Error::argument(format!(
                    "{name} projection outputs {} values but attention dim is {d}",
                    l.out_dim()
                )));
            }
        }
        Ok(())
    }

    /// Stacked role embeddings `[3×d]` for phrase vectors `(h, r, t)`.
    fn stack(&self, phrases: [&[f64]; 3]) -> Result<Tensor> {
        self.check_dims()?;
        let h = self.head.apply(phrases[0])?;
        let r = self.relation.apply(phrases[1])?;
        let t = self.tail.apply(phrases[2])?;
        Tensor::stack_rows([h.as_slice(), r.as_slice(), t.as_slice()])
    }

    /// Embeds already-encoded phrase vectors; returns the three output rows.
    pub fn embed_vectors(&self, phrases: [&[f64]; 3]) -> Result<[Vec<f64>; 9]> {
        let x = self.stack(phrases)?;
        let (resi, _) = self_attention(&x, &self.attention)?;
        let out = x.add(&resi)?;
        Ok([
            out.row(0).to_vec(),
            out.row(1).to_vec(),
            out.row(2).to_vec(),
            x.row(0).to_vec(),
            x.row(1).to_vec(),
            x.row(2).to_vec(),
            resi.row(0).to_vec(),
            resi.row(1).to_vec(),
            resi.row(2).to_vec(),
        ])
    }

    /// Gradient of `Σ upstream ⊙ [e_h; e_r; e_t]` with respect to every
    /// parameter, in [`Parameters::flatten`] order.
    pub fn parameter_gradient(&self, phrases: [&[f64]; 3], upstream: &Tensor) -> Result<Vec<f64>> {
        let x = self.stack(phrases)?;
        if upstream.shape() != x.shape() {
            return Err(Error::argument("upstream gradient must be [3×d]"));
        }
        let (_, cache) = self_attention(&x, &self.attention)?;
        let attn = self_attention_backward(&x, &self.attention, &cache, upstream)?;
        let mut d_x = upstream.clone();
        d_x.add_assign(&attn.d_x)?;
        let mut grad = Vec::with_capacity(self.param_count());
        for (row, layer) in [&self.head, &self.relation, &self.tail].into_iter().enumerate() {
            let (_, g) = layer.backward(phrases[row], d_x.row(row));
            grad.extend(g.flatten());
        }
        grad.extend(attn.flatten_params());
        Ok(grad)
    }
}

impl Parameters for TripletEncoder {
    fn flatten(&self) -> Vec<f64> {
        let mut v = self.head.flatten();
        v.extend(self.relation.flatten());
        v.extend(self.tail.flatten());
        v.extend(self.attention.flatten());
        v
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for layer in [&mut self.head, &mut self.relation, &mut self.tail] {
            let n = layer.param_count();
            layer.load_flat(&flat[off..off + n]);
            off += n;
        }
        self.attention.load_flat(&flat[off..]);
    }
}

/// Deep embedding of one mined triplet.
pub fn deep_embed_triplet(t: &Triplet, embedder: &PhraseEmbedder, encoder: &TripletEncoder) -> Result<ImplicitTokens> {
    let h = embedder.embed_phrase(&t.h)?;
    let r = embedder.embed_phrase(&t.r)?;
    let tail = embedder.embed_phrase(&t.t)?;
    let [e_h, e_r, e_t, h_emb, r_emb, t_emb, resi_h, resi_r, resi_t] = encoder.embed_vectors([&h, &r, &tail])?;
    Ok(ImplicitTokens { triplet: t.clone(), e_h, e_r, e_t, h_emb, r_emb, t_emb, resi_h, resi_r, resi_t })
}
