//! Chat completion against an OpenAI-compatible endpoint, a deterministic
//! mock, or a replay of stored responses.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::http::{duration_millis, HttpError, JsonEndpoint, RetryPolicy};
use crate::prompts::{test_candidates_from_prompt, PromptBundle};
use crate::seed::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("chat request failed: {0}")]
    Http(#[from] HttpError),
    #[error("chat response malformed: {0}")]
    BadResponse(String),
    #[error("no stored response for prompt {0}")]
    ReplayMiss(String),
    #[error("{path}: {message}")]
    Store { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, LlmError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_timeout", with = "duration_millis", rename = "timeout_ms")]
    pub timeout: Duration,
}

fn default_max_tokens() -> u32 {
    1024
}

fn default_timeout() -> Duration {
    Duration::from_secs(120)
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self {
            model: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            max_output_tokens: default_max_tokens(),
            timeout: default_timeout(),
        }
    }
}

/// One completion, stored verbatim for audit and replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub prompt_hash: String,
    pub response: String,
    /// Wall-clock latency; absent for backends whose timing is not meaningful
    /// (mock, replay, cache hits), which keeps their records reproducible.
    pub latency_ms: Option<u64>,
    pub retry_count: u32,
    pub provider: String,
    #[serde(default)]
    pub cached: bool,
}

pub fn prompt_hash(bundle: &PromptBundle) -> String {
    sha256_hex(serde_json::to_vec(&bundle.messages).expect("messages serialize"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub text: String,
    pub retries: u32,
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> String;

    fn send(&self, bundle: &PromptBundle, params: &CompletionParams) -> Result<BackendReply>;

    fn measures_latency(&self) -> bool {
        true
    }
}

/// `POST {base_url}/chat/completions` with `{model, messages, temperature, max_tokens}`.
#[derive(Debug)]
pub struct HttpChatBackend {
    endpoint: JsonEndpoint,
}

impl HttpChatBackend {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration, retry: RetryPolicy) -> Result<Self> {
        let url = format!("{}/chat/completions", base_url.trim_end_matches('/'));
        Ok(Self {
            endpoint: JsonEndpoint::new(url, api_key, timeout, retry)?,
        })
    }
}

impl ChatBackend for HttpChatBackend {
    fn id(&self) -> String {
        format!("http:{}", self.endpoint.url())
    }

    fn send(&self, bundle: &PromptBundle, params: &CompletionParams) -> Result<BackendReply> {
        let payload = json!({
            "model": params.model,
            "messages": bundle.messages,
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        });
        let response = self.endpoint.post(&payload)?;
        let text = response.body["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| LlmError::BadResponse("missing choices[0].message.content".into()))?;
        Ok(BackendReply {
            text: text.to_owned(),
            retries: response.retries,
        })
    }
}

/// Knobs for the mock ranker's output.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockOutput {
    /// Non-candidate lines appended after the ranking.
    #[serde(default)]
    pub hallucinations: usize,
    /// Repeats of the top-ranked lines appended after any hallucinations.
    #[serde(default)]
    pub duplicates: usize,
    /// Seed for breaking score ties; ties keep presentation order when absent.
    #[serde(default)]
    pub tie_seed: Option<u64>,
}

/// Ranks the test candidates found in `bundle` by descending oracle score
/// (titles missing from the oracle score 0) and emits `i. Title` lines.
pub fn mock_rank(bundle: &PromptBundle, oracle: &HashMap<String, f64>, output: &MockOutput) -> String {
    let Some(mut titles) = test_candidates_from_prompt(bundle) else {
        return "I could not find any candidate movies to rank.".into();
    };
    if let Some(seed) = output.tie_seed {
        titles.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let score = |t: &String| oracle.get(t).copied().unwrap_or(0.0);
    titles.sort_by(|a, b| score(b).total_cmp(&score(a)));

    let mut lines: Vec<String> = titles.clone();
    lines.extend((1..=output.hallucinations).map(|j| format!("Nonexistent Feature Presentation No. {j}")));
    lines.extend(titles.iter().take(output.duplicates).cloned());
    lines
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {t}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Test double that answers with [`mock_rank`] under a fixed oracle.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    pub oracle: HashMap<String, f64>,
    pub output: MockOutput,
}

impl MockBackend {
    /// Ranks `truth_title` first and keeps the remaining presentation order.
    pub fn truth_first(truth_title: &str, output: MockOutput) -> Self {
        Self {
            oracle: HashMap::from([(truth_title.to_owned(), 1.0)]),
            output,
        }
    }
}

impl ChatBackend for MockBackend {
    fn id(&self) -> String {
        "mock".into()
    }

    fn send(&self, bundle: &PromptBundle, _params: &CompletionParams) -> Result<BackendReply> {
        Ok(BackendReply {
            text: mock_rank(bundle, &self.oracle, &self.output),
            retries: 0,
        })
    }

    fn measures_latency(&self) -> bool {
        false
    }
}

/// Answers from previously stored completions, keyed by prompt hash.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    responses: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn new(records: impl IntoIterator<Item = CompletionRecord>) -> Self {
        Self {
            responses: records
                .into_iter()
                .map(|r| (r.prompt_hash, r.response))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn id(&self) -> String {
        "replay".into()
    }

    fn send(&self, bundle: &PromptBundle, _params: &CompletionParams) -> Result<BackendReply> {
        let hash = prompt_hash(bundle);
        self.responses
            .get(&hash)
            .map(|text| BackendReply {
                text: text.clone(),
                retries: 0,
            })
            .ok_or(LlmError::ReplayMiss(hash))
    }

    fn measures_latency(&self) -> bool {
        false
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CachedResponse {
    key: String,
    response: String,
}

/// Responses keyed by `sha256(prompt hash + params)`, persisted as JSONL.
pub struct ResponseCache {
    path: PathBuf,
    state: Mutex<(HashMap<String, String>, BufWriter<File>)>,
}

impl ResponseCache {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_owned();
        let err = |message: String| LlmError::Store {
            path: path.clone(),
            message,
        };
        let mut map = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| err(e.to_string()))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| err(e.to_string()))?;
                match serde_json::from_str::<CachedResponse>(&line) {
                    Ok(c) => {
                        map.insert(c.key, c.response);
                    }
                    Err(e) if !line.trim().is_empty() => log::warn!("{}: skipping bad cache line: {e}", path.display()),
                    Err(_) => {}
                }
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| err(e.to_string()))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| err(e.to_string()))?;
        Ok(Self {
            path,
            state: Mutex::new((map, BufWriter::new(file))),
        })
    }

    pub fn key(prompt_hash: &str, params: &CompletionParams) -> String {
        sha256_hex(format!(
            "{prompt_hash}{}",
            serde_json::to_string(params).expect("params serialize")
        ))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.state.lock().expect("cache lock poisoned").0.get(key).cloned()
    }

    pub fn insert(&self, key: String, response: String) -> Result<()> {
        let mut guard = self.state.lock().expect("cache lock poisoned");
        let (map, writer) = &mut *guard;
        let line = serde_json::to_string(&CachedResponse {
            key: key.clone(),
            response: response.clone(),
        })
        .expect("cache line serializes");
        writeln!(writer, "{line}")
            .and_then(|_| writer.flush())
            .map_err(|e| LlmError::Store {
                path: self.path.clone(),
                message: e.to_string(),
            })?;
        map.insert(key, response);
        Ok(())
    }
}

/// Runs one completion. Transport retries happen inside the backend; the
/// returned record carries how many were needed.
pub fn complete(
    bundle: &PromptBundle,
    params: &CompletionParams,
    backend: &dyn ChatBackend,
    cache: Option<&ResponseCache>,
) -> Result<CompletionRecord> {
    let hash = prompt_hash(bundle);
    let cache_key = cache.map(|_| ResponseCache::key(&hash, params));
    if let (Some(cache), Some(key)) = (cache, &cache_key) {
        if let Some(response) = cache.get(key) {
            return Ok(CompletionRecord {
                prompt_hash: hash,
                response,
                latency_ms: None,
                retry_count: 0,
                provider: backend.id(),
                cached: true,
            });
        }
    }
    let started = Instant::now();
    let reply = backend.send(bundle, params)?;
    let latency_ms = backend
        .measures_latency()
        .then(|| started.elapsed().as_millis() as u64);
    if let (Some(cache), Some(key)) = (cache, cache_key) {
        cache.insert(key, reply.text.clone())?;
    }
    Ok(CompletionRecord {
        prompt_hash: hash,
        response: reply.text,
        latency_ms,
        retry_count: reply.retries,
        provider: backend.id(),
        cached: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{ChatMessage, Role};

    fn bundle(titles: &[&str]) -> PromptBundle {
        PromptBundle {
            messages: vec![ChatMessage {
                role: Role::User,
                content: format!(
                    "- Watched Movies: ['0. Old']\n- Candidate Movies: {}\nAnswer:",
                    crate::prompts::indexed_title_list(titles)
                ),
            }],
            token_estimate: 0,
            presented_candidates: Vec::new(),
        }
    }

    #[test]
    fn truth_first_mock() {
        let b = bundle(&["A", "B", "Truth", "C"]);
        let out = MockBackend::truth_first("Truth", MockOutput::default())
            .send(&b, &CompletionParams::default())
            .unwrap();
        assert_eq!(out.text, "1. Truth\n2. A\n3. B\n4. C");
    }

    #[test]
    fn hallucinations_and_duplicates_extend_output() {
        let titles: Vec<String> = (0..20).map(|i| format!("T{i}")).collect();
        let refs: Vec<&str> = titles.iter().map(String::as_str).collect();
        let out = mock_rank(
            &bundle(&refs),
            &HashMap::new(),
            &MockOutput {
                hallucinations: 2,
                duplicates: 1,
                tie_seed: None,
            },
        );
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 23);
        assert_eq!(lines[0], "1. T0");
        assert_eq!(lines[22], "23. T0");
        assert!(lines[20].starts_with("21. Nonexistent"));
    }

    #[test]
    fn seeded_ties_are_stable() {
        let b = bundle(&["A", "B", "C", "D", "E", "F"]);
        let out = MockOutput {
            tie_seed: Some(11),
            ..Default::default()
        };
        let first = mock_rank(&b, &HashMap::new(), &out);
        assert_eq!(first, mock_rank(&b, &HashMap::new(), &out));
    }

    #[test]
    fn replay_serves_stored_response() {
        let b = bundle(&["A"]);
        let record = complete(&b, &CompletionParams::default(), &MockBackend::default(), None).unwrap();
        assert_eq!(record.latency_ms, None);
        let replay = ReplayBackend::new([record.clone()]);
        let again = complete(&b, &CompletionParams::default(), &replay, None).unwrap();
        assert_eq!(again.response, record.response);
        let other = bundle(&["B"]);
        assert!(matches!(
            complete(&other, &CompletionParams::default(), &replay, None),
            Err(LlmError::ReplayMiss(_))
        ));
    }

    #[test]
    fn response_cache_persists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("responses.jsonl");
        let b = bundle(&["A", "B"]);
        let params = CompletionParams::default();
        {
            let cache = ResponseCache::open(&path).unwrap();
            let first = complete(&b, &params, &MockBackend::truth_first("B", MockOutput::default()), Some(&cache)).unwrap();
            assert!(!first.cached);
        }
        let cache = ResponseCache::open(&path).unwrap();
        // A different backend would answer differently; the cache wins.
        let second = complete(&b, &params, &MockBackend::default(), Some(&cache)).unwrap();
        assert!(second.cached);
        assert_eq!(second.response, "1. B\n2. A");
    }

    #[test]
    fn complete_leaves_bundle_untouched() {
        let b = bundle(&["A", "B"]);
        let before = b.clone();
        complete(&b, &CompletionParams::default(), &MockBackend::default(), None).unwrap();
        assert_eq!(b, before);
    }
}
