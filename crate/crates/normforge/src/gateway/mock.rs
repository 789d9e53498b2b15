//! Deterministic scripted backend for offline runs and tests.
//!
//! A script is an ordered list of (matcher, canned response) entries; the
//! first matching entry wins. Prompts no entry covers fail loudly with
//! [`GatewayError::UnscriptedPrompt`]. Embeddings are derived from a
//! seeded hash of the input text (identical texts always embed identically),
//! with optional per-text overrides for scripting near-duplicates.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, ChatRequest, ChatResponse, EmbeddingVector, GatewayError};

/// Default dimension for hash-derived mock embeddings. High enough that two
/// random unit vectors essentially never clear a 0.75 similarity threshold.
pub const MOCK_EMBED_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum ScriptMatcher {
    /// Prompt contains the substring.
    Substring(String),
    /// Prompt contains every listed substring.
    All(Vec<String>),
    /// Hex SHA-256 of the full prompt equals the digest.
    Hash(String),
}

impl ScriptMatcher {
    fn matches(&self, prompt: &str) -> bool {
        match self {
            ScriptMatcher::Substring(s) => prompt.contains(s),
            ScriptMatcher::All(parts) => parts.iter().all(|s| prompt.contains(s)),
            ScriptMatcher::Hash(hex) => sha256_hex(prompt).eq_ignore_ascii_case(hex),
        }
    }
}

fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct ScriptEntry {
    pub matcher: ScriptMatcher,
    /// Successive matches of this entry consume successive responses; the
    /// last one repeats. Lets a script emit "malformed once, then valid".
    pub responses: Vec<String>,
    /// Number of leading matches that fail with a transient transport error
    /// before any response is served (fault injection for retry tests).
    pub transient_failures: u32,
}

impl ScriptEntry {
    pub fn new(matcher: ScriptMatcher, response: impl Into<String>) -> Self {
        Self { matcher, responses: vec![response.into()], transient_failures: 0 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockEmbeddings {
    pub dim: usize,
    pub overrides: BTreeMap<String, Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct MockScript {
    pub entries: Vec<ScriptEntry>,
    pub embeddings: MockEmbeddings,
}

// Serialized form: either a bare JSON array of entries, or an object with
// `chat` and optional `embeddings` sections.
#[derive(Deserialize)]
#[serde(untagged)]
enum ScriptFile {
    Entries(Vec<ScriptEntryFile>),
    Full {
        chat: Vec<ScriptEntryFile>,
        #[serde(default)]
        embeddings: Option<EmbeddingsFile>,
    },
}

#[derive(Serialize, Deserialize)]
struct ScriptEntryFile {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    r#match: Option<MatchField>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    match_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    response: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    responses: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    transient_failures: Option<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MatchField {
    One(String),
    Many(Vec<String>),
}

#[derive(Deserialize)]
struct EmbeddingsFile {
    #[serde(default)]
    dim: Option<usize>,
    #[serde(default)]
    overrides: Vec<EmbeddingOverride>,
}

#[derive(Deserialize)]
struct EmbeddingOverride {
    text: String,
    vector: Vec<f32>,
}

impl MockScript {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self { entries, embeddings: MockEmbeddings { dim: MOCK_EMBED_DIM, overrides: BTreeMap::new() } }
    }

    pub fn parse(json: &str) -> Result<Self, String> {
        let file: ScriptFile = serde_json::from_str(json).map_err(|e| format!("mock script: {e}"))?;
        let (raw_entries, embeddings) = match file {
            ScriptFile::Entries(entries) => (entries, None),
            ScriptFile::Full { chat, embeddings } => (chat, embeddings),
        };
        let mut entries = Vec::with_capacity(raw_entries.len());
        for (i, raw) in raw_entries.into_iter().enumerate() {
            let matcher = match (raw.r#match, raw.match_hash) {
                (Some(MatchField::One(s)), None) => ScriptMatcher::Substring(s),
                (Some(MatchField::Many(v)), None) => ScriptMatcher::All(v),
                (None, Some(hex)) => ScriptMatcher::Hash(hex),
                (None, None) => return Err(format!("entry {i}: needs match or match_hash")),
                (Some(_), Some(_)) => return Err(format!("entry {i}: match and match_hash are exclusive")),
            };
            let responses = match (raw.response, raw.responses) {
                (Some(r), None) => vec![r],
                (None, Some(rs)) if !rs.is_empty() => rs,
                _ => return Err(format!("entry {i}: needs response or non-empty responses")),
            };
            entries.push(ScriptEntry {
                matcher,
                responses,
                transient_failures: raw.transient_failures.unwrap_or(0),
            });
        }
        let embeddings = match embeddings {
            Some(e) => MockEmbeddings {
                dim: e.dim.unwrap_or(MOCK_EMBED_DIM),
                overrides: e.overrides.into_iter().map(|o| (o.text, o.vector)).collect(),
            },
            None => MockEmbeddings { dim: MOCK_EMBED_DIM, overrides: BTreeMap::new() },
        };
        Ok(Self { entries, embeddings })
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let json = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&json)
    }
}

/// One observed request, for assertions in tests.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRequest {
    pub prompt: String,
    pub temperature: f32,
    pub model_id: String,
}

pub struct ScriptedBackend {
    script: MockScript,
    served: Mutex<Vec<usize>>,
    faults_left: Mutex<Vec<u32>>,
    requests: Mutex<Vec<RecordedRequest>>,
    embedded: Mutex<Vec<String>>,
}

impl ScriptedBackend {
    pub fn new(script: MockScript) -> Self {
        let n = script.entries.len();
        let faults = script.entries.iter().map(|e| e.transient_failures).collect();
        Self {
            script,
            served: Mutex::new(vec![0; n]),
            faults_left: Mutex::new(faults),
            requests: Mutex::new(Vec::new()),
            embedded: Mutex::new(Vec::new()),
        }
    }

    /// Every chat request observed so far, in arrival order.
    pub fn recorded_requests(&self) -> Vec<RecordedRequest> {
        self.requests.lock().unwrap().clone()
    }

    /// Every text sent for embedding so far.
    pub fn embedded_texts(&self) -> Vec<String> {
        self.embedded.lock().unwrap().clone()
    }

    fn hash_vector(&self, text: &str) -> Vec<f32> {
        if let Some(v) = self.script.embeddings.overrides.get(text) {
            return v.clone();
        }
        let dim = self.script.embeddings.dim.max(1);
        let seed: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            let mut unit = vec![0.0f32; dim];
            unit[0] = 1.0;
            return unit;
        }
        raw.iter().map(|x| (x / norm) as f32).collect()
    }
}

#[async_trait::async_trait]
impl Backend for ScriptedBackend {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.requests.lock().unwrap().push(RecordedRequest {
            prompt: request.user_text.clone(),
            temperature: request.temperature,
            model_id: request.model_id.clone(),
        });
        let hit = self
            .script
            .entries
            .iter()
            .position(|e| e.matcher.matches(&request.user_text));
        let Some(i) = hit else {
            let preview: String = request.user_text.chars().take(120).collect();
            return Err(GatewayError::UnscriptedPrompt { preview });
        };
        {
            let mut faults = self.faults_left.lock().unwrap();
            if faults[i] > 0 {
                faults[i] -= 1;
                return Err(GatewayError::Transport { attempts: 1, reason: "scripted 429".into() });
            }
        }
        let text = {
            let mut served = self.served.lock().unwrap();
            let responses = &self.script.entries[i].responses;
            let idx = served[i].min(responses.len() - 1);
            served[i] += 1;
            responses[idx].clone()
        };
        let prompt_tokens = request.user_text.split_whitespace().count() as u64;
        let completion_tokens = text.split_whitespace().count() as u64;
        Ok(ChatResponse { text, prompt_tokens, completion_tokens })
    }

    async fn embed_batch(&self, _model: &str, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        self.embedded.lock().unwrap().extend(texts.iter().cloned());
        Ok(texts.iter().map(|t| EmbeddingVector { values: self.hash_vector(t) }).collect())
    }
}
