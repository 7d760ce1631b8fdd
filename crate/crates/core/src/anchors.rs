//! Row-level textual anchors: protocol synthesis, per-row generation through a
//! chat endpoint, a content-addressed cache, the serialization fallback and
//! anchor swapping for robustness probes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::thread;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{FeatureKind, RawRow, RawTable, Schema};
use crate::http::{blocking_client, post_json, EndpointConfig, RetryPolicy, TransportError};

pub const TEMPLATE_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("model returned an empty response")]
    EmptyResponse,
    #[error("schema fingerprint mismatch: protocol has {expected}, row schema has {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("row {0} has missing values")]
    MissingValue(usize),
    #[error("epsilon must lie in [0, 1], got {0}")]
    EpsilonOutOfRange(f64),
    #[error("anchor file error: {0}")]
    Format(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnchorError + '_ {
    move |source| AnchorError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Prompt wording; the defaults ship with the crate and may be overridden from a directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub version: String,
    pub horizontal: String,
    pub vertical: String,
    pub protocol_request: String,
    pub row_request: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            version: TEMPLATE_VERSION.to_string(),
            horizontal: include_str!("../templates/meta_horizontal.txt").trim().to_string(),
            vertical: include_str!("../templates/meta_vertical.txt").trim().to_string(),
            protocol_request: include_str!("../templates/protocol_request.txt").to_string(),
            row_request: include_str!("../templates/row_request.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    /// Reads the four template files from `dir`, tagging the set with `version`.
    pub fn from_dir(dir: impl AsRef<Path>, version: &str) -> Result<Self, AnchorError> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(io_err(&path))
        };
        Ok(Self {
            version: version.to_string(),
            horizontal: read("meta_horizontal.txt")?.trim().to_string(),
            vertical: read("meta_vertical.txt")?.trim().to_string(),
            protocol_request: read("protocol_request.txt")?,
            row_request: read("row_request.txt")?,
        })
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("templates serialize"))
    }

    /// Request asking the model to write a dataset-specific protocol.
    pub fn render_protocol_request(&self, schema: &Schema) -> String {
        let columns: Vec<String> = schema
            .features
            .iter()
            .map(|f| {
                let kind = match f.kind {
                    FeatureKind::Numeric => "numeric",
                    FeatureKind::Categorical => "categorical",
                };
                let mut line = format!("- {} ({kind})", f.name);
                if !f.categories.is_empty() {
                    line.push_str(&format!(", values: {}", f.categories.join(", ")));
                }
                if !f.description.is_empty() {
                    line.push_str(&format!(": {}", f.description));
                }
                line
            })
            .collect();
        self.protocol_request
            .replace("{dataset_name}", &schema.dataset_name)
            .replace("{context}", &schema.context)
            .replace("{columns}", &columns.join("\n"))
            .replace("{horizontal}", &self.horizontal)
            .replace("{vertical}", &self.vertical)
    }

    pub fn render_row_request(&self, row_block: &str) -> String {
        self.row_request.replace("{row}", row_block)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformationProtocol {
    pub instruction_text: String,
    pub schema_fingerprint: String,
    pub meta_principles: Vec<String>,
    pub template_version: String,
}

impl TransformationProtocol {
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("protocol serializes"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorSource {
    Llm,
    Fallback,
    /// Written by an external tool rather than generated here.
    Fixture,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    pub row_id: usize,
    pub text: String,
    pub source: AnchorSource,
}

/// One chat completion request: protocol as system message, row as user message.
#[derive(Clone, Debug, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub system: String,
    pub user: String,
    pub temperature: f64,
}

pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

/// OpenAI-compatible `chat/completions` endpoint.
pub struct HttpChatTransport {
    endpoint: EndpointConfig,
    client: reqwest::blocking::Client,
}

impl HttpChatTransport {
    pub fn new(endpoint: EndpointConfig) -> Self {
        Self {
            endpoint,
            client: blocking_client(),
        }
    }
}

impl ChatTransport for HttpChatTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let mut messages = Vec::new();
        if !request.system.is_empty() {
            messages.push(serde_json::json!({"role": "system", "content": request.system}));
        }
        messages.push(serde_json::json!({"role": "user", "content": request.user}));
        let body = serde_json::json!({
            "model": request.model,
            "temperature": request.temperature,
            "messages": messages,
        });
        let reply = post_json(&self.client, &self.endpoint, &body)?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| TransportError::Decode("missing choices[0].message.content".into()))
    }
}

pub struct ChatClient {
    pub transport: Box<dyn ChatTransport>,
    pub model: String,
    pub retry: RetryPolicy,
    pub concurrency: usize,
}

impl ChatClient {
    pub fn new(transport: Box<dyn ChatTransport>, model: impl Into<String>) -> Self {
        Self {
            transport,
            model: model.into(),
            retry: RetryPolicy::default(),
            concurrency: 4,
        }
    }

    /// HTTP client configured from `TAGCC_LLM_URL`, `TAGCC_LLM_MODEL` and `TAGCC_LLM_KEY`.
    pub fn from_env() -> Result<Self, String> {
        let endpoint = EndpointConfig::from_env("TAGCC_LLM")?;
        let model = endpoint.model.clone();
        Ok(Self::new(Box::new(HttpChatTransport::new(endpoint)), model))
    }

    fn ask(&self, system: &str, user: &str) -> Result<String, AnchorError> {
        let request = ChatRequest {
            model: self.model.clone(),
            system: system.to_string(),
            user: user.to_string(),
            temperature: 0.0,
        };
        let text = self.retry.run(|| self.transport.complete(&request))?;
        let text = text.trim().to_string();
        if text.is_empty() {
            return Err(AnchorError::EmptyResponse);
        }
        Ok(text)
    }
}

/// Cache key: schema fingerprint, content hash and protocol (or template) hash.
pub type CacheKey = (String, String, String);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub schema_fingerprint: String,
    pub row_hash: String,
    pub protocol_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_id: Option<usize>,
    pub source: AnchorSource,
    pub text: String,
}

impl CacheRecord {
    fn key(&self) -> CacheKey {
        (self.schema_fingerprint.clone(), self.row_hash.clone(), self.protocol_hash.clone())
    }
}

/// Content-addressed store for protocols and anchors, persisted as sorted JSON lines.
#[derive(Debug, Default)]
pub struct AnchorCache {
    entries: RwLock<BTreeMap<CacheKey, CacheRecord>>,
    path: Option<PathBuf>,
    write_lock: Mutex<()>,
}

/// Row hash used for protocol entries, which are not tied to a row.
const PROTOCOL_ROW: &str = "protocol";

impl AnchorCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or starts) a cache backed by `path`.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, AnchorError> {
        let path = path.into();
        let mut entries = BTreeMap::new();
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let record: CacheRecord = serde_json::from_str(line)
                    .map_err(|e| AnchorError::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
                entries.insert(record.key(), record);
            }
        }
        Ok(Self {
            entries: RwLock::new(entries),
            path: Some(path),
            write_lock: Mutex::new(()),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<CacheRecord> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    pub fn insert(&self, record: CacheRecord) {
        self.entries.write().expect("cache lock").insert(record.key(), record);
    }

    /// Rewrites the backing file in key order; a no-op for in-memory caches.
    pub fn flush(&self) -> Result<(), AnchorError> {
        let Some(path) = &self.path else { return Ok(()) };
        let _guard = self.write_lock.lock().expect("cache write lock");
        let mut out = String::new();
        for record in self.entries.read().expect("cache lock").values() {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        let tmp = path.with_extension("jsonl.tmp");
        fs::write(&tmp, out).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }
}

/// Asks the model for a dataset-specific protocol; cached per schema and template set.
pub fn synthesize_protocol(
    schema: &Schema,
    templates: &PromptTemplates,
    client: &ChatClient,
    cache: &AnchorCache,
) -> Result<TransformationProtocol, AnchorError> {
    let key = (schema.fingerprint(), PROTOCOL_ROW.to_string(), templates.fingerprint());
    let instruction_text = match cache.get(&key) {
        Some(hit) => hit.text,
        None => {
            let text = client.ask("", &templates.render_protocol_request(schema))?;
            cache.insert(CacheRecord {
                schema_fingerprint: key.0.clone(),
                row_hash: key.1.clone(),
                protocol_hash: key.2.clone(),
                row_id: None,
                source: AnchorSource::Llm,
                text: text.clone(),
            });
            text
        }
    };
    Ok(TransformationProtocol {
        instruction_text,
        schema_fingerprint: schema.fingerprint(),
        meta_principles: vec![templates.horizontal.clone(), templates.vertical.clone()],
        template_version: templates.version.clone(),
    })
}

/// `name: value` lines with the original cell strings.
pub fn render_row(row: &RawRow, schema: &Schema) -> String {
    schema
        .features
        .iter()
        .zip(&row.cells)
        .map(|(f, v)| format!("{}: {}", f.name, v))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn row_hash(row: &RawRow, schema: &Schema) -> String {
    sha256_hex(render_row(row, schema))
}

pub fn generate_anchor(
    row: &RawRow,
    schema: &Schema,
    protocol: &TransformationProtocol,
    templates: &PromptTemplates,
    client: &ChatClient,
    cache: &AnchorCache,
) -> Result<Anchor, AnchorError> {
    let found = schema.fingerprint();
    if protocol.schema_fingerprint != found {
        return Err(AnchorError::FingerprintMismatch {
            expected: protocol.schema_fingerprint.clone(),
            found,
        });
    }
    if row.is_missing() {
        return Err(AnchorError::MissingValue(row.row_id));
    }
    let key = (found, row_hash(row, schema), protocol.hash());
    if let Some(hit) = cache.get(&key) {
        return Ok(Anchor {
            row_id: row.row_id,
            text: hit.text,
            source: hit.source,
        });
    }
    let user = templates.render_row_request(&render_row(row, schema));
    let text = client.ask(&protocol.instruction_text, &user)?;
    cache.insert(CacheRecord {
        schema_fingerprint: key.0,
        row_hash: key.1,
        protocol_hash: key.2,
        row_id: Some(row.row_id),
        source: AnchorSource::Llm,
        text: text.clone(),
    });
    Ok(Anchor {
        row_id: row.row_id,
        text,
        source: AnchorSource::Llm,
    })
}

/// Generates anchors for every row with up to `client.concurrency` requests in
/// flight. Output follows table order.
pub fn generate_anchors(
    table: &RawTable,
    schema: &Schema,
    protocol: &TransformationProtocol,
    templates: &PromptTemplates,
    client: &ChatClient,
    cache: &AnchorCache,
) -> Result<Vec<Anchor>, AnchorError> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Anchor, AnchorError>>>> = Mutex::new((0..table.len()).map(|_| None).collect());
    let workers = client.concurrency.clamp(1, table.len().max(1));
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= table.len() {
                    break;
                }
                let r = generate_anchor(&table.rows[i], schema, protocol, templates, client, cache);
                let failed = r.is_err();
                results.lock().expect("results lock")[i] = Some(r);
                if failed {
                    next.store(table.len(), Ordering::SeqCst);
                }
            });
        }
    });
    let mut anchors = Vec::with_capacity(table.len());
    for r in results.into_inner().expect("results lock") {
        match r {
            Some(r) => anchors.push(r?),
            None => continue,
        }
    }
    if anchors.len() != table.len() {
        return Err(AnchorError::Format("anchor generation stopped early".into()));
    }
    Ok(anchors)
}

/// Template serialization used by the naive-text ablation.
pub fn serialize_fallback(row: &RawRow, schema: &Schema) -> Anchor {
    let text = schema
        .features
        .iter()
        .zip(&row.cells)
        .map(|(f, v)| format!("The {} is {}.", f.name, v))
        .collect::<Vec<_>>()
        .join(" ");
    Anchor {
        row_id: row.row_id,
        text,
        source: AnchorSource::Fallback,
    }
}

pub fn fallback_anchors(table: &RawTable, schema: &Schema) -> Vec<Anchor> {
    table.rows.iter().map(|r| serialize_fallback(r, schema)).collect()
}

/// Source position for every slot after swapping a random `⌈εn⌉` subset along a
/// cycle. A single chosen row is widened to two so the swap is never a no-op.
pub fn swap_permutation(n: usize, epsilon: f64, seed: u64) -> Result<Vec<usize>, AnchorError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(AnchorError::EpsilonOutOfRange(epsilon));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut m = (epsilon * n as f64 - 1e-9).ceil().max(0.0) as usize;
    if m == 1 && n >= 2 {
        m = 2;
    }
    if m < 2 {
        return Ok(perm);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let chosen = sample(&mut rng, n, m).into_vec();
    for (i, &slot) in chosen.iter().enumerate() {
        perm[slot] = chosen[(i + 1) % m];
    }
    Ok(perm)
}

/// Moves anchor texts between rows; row ids stay in place.
pub fn perturb_anchors(anchors: &[Anchor], epsilon: f64, seed: u64) -> Result<Vec<Anchor>, AnchorError> {
    let perm = swap_permutation(anchors.len(), epsilon, seed)?;
    Ok(perm
        .iter()
        .zip(anchors)
        .map(|(&src, a)| Anchor {
            row_id: a.row_id,
            text: anchors[src].text.clone(),
            source: anchors[src].source,
        })
        .collect())
}

/// Header line of an anchor file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorFileHeader {
    pub schema_fingerprint: String,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<TransformationProtocol>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorSet {
    pub header: AnchorFileHeader,
    pub anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn texts(&self) -> Vec<String> {
        self.anchors.iter().map(|a| a.text.clone()).collect()
    }

    /// Hash over row ids and texts in order.
    pub fn text_fingerprint(&self) -> String {
        texts_fingerprint(&self.anchors)
    }

    pub fn source_tag(&self) -> String {
        let mut sources: Vec<AnchorSource> = self.anchors.iter().map(|a| a.source).collect();
        sources.sort();
        sources.dedup();
        sources
            .iter()
            .map(|s| serde_json::to_value(s).expect("source").as_str().expect("string").to_string())
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AnchorError> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        let mut write = |v: String| writeln!(f, "{v}").map_err(io_err(path));
        write(serde_json::to_string(&self.header).expect("header serializes"))?;
        for a in &self.anchors {
            write(serde_json::to_string(a).expect("anchor serializes"))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AnchorError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: AnchorFileHeader = serde_json::from_str(lines.next().ok_or_else(|| AnchorError::Format("empty anchor file".into()))?)
            .map_err(|e| AnchorError::Format(format!("header: {e}")))?;
        let anchors = lines
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| AnchorError::Format(format!("record {}: {e}", i + 1))))
            .collect::<Result<Vec<Anchor>, _>>()?;
        if anchors.len() != header.n {
            return Err(AnchorError::Format(format!("header says {} anchors, file has {}", header.n, anchors.len())));
        }
        if anchors.iter().any(|a| a.text.is_empty()) {
            return Err(AnchorError::Format("empty anchor text".into()));
        }
        Ok(Self { header, anchors })
    }

    /// Fails unless the set matches the schema and covers exactly `row_ids` in order.
    pub fn check_alignment(&self, schema: &Schema, row_ids: &[usize]) -> Result<(), AnchorError> {
        let fp = schema.fingerprint();
        if self.header.schema_fingerprint != fp {
            return Err(AnchorError::FingerprintMismatch {
                expected: self.header.schema_fingerprint.clone(),
                found: fp,
            });
        }
        let ids: Vec<usize> = self.anchors.iter().map(|a| a.row_id).collect();
        if ids != row_ids {
            return Err(AnchorError::Format("anchor row ids do not match the dataset rows".into()));
        }
        Ok(())
    }
}

pub fn texts_fingerprint(anchors: &[Anchor]) -> String {
    let mut h = Sha256::new();
    for a in anchors {
        h.update(a.row_id.to_le_bytes());
        h.update((a.text.len() as u64).to_le_bytes());
        h.update(a.text.as_bytes());
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_table;
    use std::sync::atomic::AtomicUsize;
    use std::time::Duration;

    fn schema() -> Schema {
        Schema::from_json(
            r#"{"dataset_name":"weather","context":"daily observations","k_star":2,"features":[
                {"name":"Outlook","kind":"categorical","categories":["sunny","rain"]},
                {"name":"Windy","kind":"categorical","categories":["yes","no"]},
                {"name":"Temp","kind":"numeric","description":"celsius"}
            ]}"#,
        )
        .unwrap()
    }

    #[derive(Default)]
    struct Recorder {
        calls: AtomicUsize,
        requests: Mutex<Vec<ChatRequest>>,
        fail: bool,
    }

    impl ChatTransport for &'static Recorder {
        fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.requests.lock().unwrap().push(request.clone());
            if self.fail {
                return Err(TransportError::Request("connection refused".into()));
            }
            Ok(format!("reply to {}", sha256_hex(&request.user)))
        }
    }

    fn client(rec: &'static Recorder) -> ChatClient {
        let mut c = ChatClient::new(Box::new(rec), "test-model");
        c.retry = RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::ZERO,
        };
        c
    }

    fn leak() -> &'static Recorder {
        Box::leak(Box::default())
    }

    #[test]
    fn fallback_template() {
        let s = Schema::from_json(
            r#"{"dataset_name":"w","k_star":2,"features":[
                {"name":"Outlook","kind":"categorical","categories":["sunny"]},
                {"name":"Windy","kind":"categorical","categories":["no"]}]}"#,
        )
        .unwrap();
        let t = parse_table("sunny,no\nsunny,no\n", &s).unwrap();
        let a = serialize_fallback(&t.rows[0], &s);
        assert_eq!(a.text, "The Outlook is sunny. The Windy is no.");
        assert_eq!(a.source, AnchorSource::Fallback);
        assert_eq!(a.text, serialize_fallback(&t.rows[1], &s).text);
        let t = parse_table("sunny,no,3.50\n", &schema()).unwrap();
        assert!(serialize_fallback(&t.rows[0], &schema()).text.ends_with("The Temp is 3.50."));
    }

    #[test]
    fn protocol_prompt_contains_both_principles_and_is_cached() {
        let rec = leak();
        let c = client(rec);
        let cache = AnchorCache::in_memory();
        let templates = PromptTemplates::default();
        let p1 = synthesize_protocol(&schema(), &templates, &c, &cache).unwrap();
        let p2 = synthesize_protocol(&schema(), &templates, &c, &cache).unwrap();
        assert_eq!(p1, p2);
        assert!(!p1.instruction_text.is_empty());
        assert_eq!(rec.calls.load(Ordering::SeqCst), 1);
        let sent = &rec.requests.lock().unwrap()[0];
        assert!(sent.user.contains(&templates.horizontal));
        assert!(sent.user.contains(&templates.vertical));
        assert!(sent.user.contains("Temp (numeric): celsius"));
        assert_eq!(sent.temperature, 0.0);
    }

    #[test]
    fn unreachable_endpoint_fails_after_retries() {
        let rec: &'static Recorder = Box::leak(Box::new(Recorder {
            fail: true,
            ..Default::default()
        }));
        let c = client(rec);
        let err = synthesize_protocol(&schema(), &PromptTemplates::default(), &c, &AnchorCache::in_memory()).unwrap_err();
        assert!(matches!(err, AnchorError::Transport(TransportError::Exhausted { attempts: 3, .. })));
        assert_eq!(rec.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn anchors_use_cache_and_differ_only_in_row_block() {
        let rec = leak();
        let mut c = client(rec);
        // Serial so the duplicate row is always a cache hit.
        c.concurrency = 1;
        let cache = AnchorCache::in_memory();
        let templates = PromptTemplates::default();
        let s = schema();
        let protocol = synthesize_protocol(&s, &templates, &c, &cache).unwrap();
        let t = parse_table("sunny,yes,20\nrain,no,12\nsunny,yes,20\n", &s).unwrap();
        let first = generate_anchors(&t, &s, &protocol, &templates, &c, &cache).unwrap();
        // One protocol call plus one per distinct row.
        assert_eq!(rec.calls.load(Ordering::SeqCst), 1 + 2);
        assert_eq!(first.iter().map(|a| a.row_id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(first[0].text, first[2].text);
        let again = generate_anchors(&t, &s, &protocol, &templates, &c, &cache).unwrap();
        assert_eq!(first, again);
        assert_eq!(rec.calls.load(Ordering::SeqCst), 3);

        let reqs = rec.requests.lock().unwrap();
        let (a, b) = (&reqs[1], &reqs[2]);
        assert_eq!(a.system, protocol.instruction_text);
        assert_eq!(a.system, b.system);
        let strip = |r: &ChatRequest| r.user.replace(&render_row(&t.rows[0], &s), "").replace(&render_row(&t.rows[1], &s), "");
        assert_eq!(strip(a), strip(b));
        assert!(a.user.contains("Outlook: sunny\nWindy: yes\nTemp: 20") || b.user.contains("Outlook: sunny\nWindy: yes\nTemp: 20"));
    }

    #[test]
    fn fingerprint_mismatch_precedes_network() {
        let rec = leak();
        let c = client(rec);
        let s = schema();
        let protocol = TransformationProtocol {
            instruction_text: "x".into(),
            schema_fingerprint: "other".into(),
            meta_principles: vec![],
            template_version: "v1".into(),
        };
        let t = parse_table("sunny,yes,20\n", &s).unwrap();
        let err = generate_anchor(&t.rows[0], &s, &protocol, &PromptTemplates::default(), &c, &AnchorCache::in_memory()).unwrap_err();
        assert!(matches!(err, AnchorError::FingerprintMismatch { .. }));
        assert_eq!(rec.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn cache_file_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cache = AnchorCache::open(&path).unwrap();
        for i in [3usize, 1, 2] {
            cache.insert(CacheRecord {
                schema_fingerprint: "s".into(),
                row_hash: format!("r{i}"),
                protocol_hash: "p".into(),
                row_id: Some(i),
                source: AnchorSource::Llm,
                text: format!("text {i}"),
            });
        }
        cache.flush().unwrap();
        let first = fs::read(&path).unwrap();
        let reopened = AnchorCache::open(&path).unwrap();
        assert_eq!(reopened.len(), 3);
        reopened.flush().unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        let hit = reopened.get(&("s".into(), "r2".into(), "p".into())).unwrap();
        assert_eq!(hit.text, "text 2");
    }

    fn anchors(n: usize) -> Vec<Anchor> {
        (0..n)
            .map(|i| Anchor {
                row_id: i,
                text: format!("anchor {i}"),
                source: AnchorSource::Fallback,
            })
            .collect()
    }

    #[test]
    fn perturbation_examples() {
        let a = anchors(10);
        assert_eq!(perturb_anchors(&a, 0.0, 1).unwrap(), a);
        let two = anchors(2);
        let swapped = perturb_anchors(&two, 1.0, 5).unwrap();
        assert_eq!(swapped[0].text, "anchor 1");
        assert_eq!(swapped[1].text, "anchor 0");
        assert_eq!(perturb_anchors(&a, 0.5, 9).unwrap(), perturb_anchors(&a, 0.5, 9).unwrap());
        assert!(matches!(perturb_anchors(&a, 1.5, 0), Err(AnchorError::EpsilonOutOfRange(_))));
        // A single selected row is widened to a swap of two.
        let moved = perturb_anchors(&a, 0.1, 3).unwrap().iter().zip(&a).filter(|(x, y)| x.text != y.text).count();
        assert_eq!(moved, 2);
    }

    #[test]
    fn anchor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("anchors.jsonl");
        let set = AnchorSet {
            header: AnchorFileHeader {
                schema_fingerprint: schema().fingerprint(),
                n: 3,
                protocol: None,
            },
            anchors: anchors(3),
        };
        set.save(&path).unwrap();
        let back = AnchorSet::load(&path).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.source_tag(), "fallback");
        assert!(back.check_alignment(&schema(), &[0, 1, 2]).is_ok());
        assert!(back.check_alignment(&schema(), &[0, 1]).is_err());
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn perturbation_permutes_without_inventing(n in 1usize..40, eps in 0.0..=1.0f64, seed in any::<u64>()) {
            let a = anchors(n);
            let p = perturb_anchors(&a, eps, seed).unwrap();
            let mut before: Vec<_> = a.iter().map(|x| x.text.clone()).collect();
            let mut after: Vec<_> = p.iter().map(|x| x.text.clone()).collect();
            before.sort();
            after.sort();
            prop_assert_eq!(before, after);
            let moved = p.iter().zip(&a).filter(|(x, y)| x.text != y.text).count();
            let target = (eps * n as f64 - 1e-9).ceil().max(0.0) as usize;
            let expected = if n < 2 { 0 } else if target == 1 { 2 } else { target };
            prop_assert_eq!(moved, expected);
        }
    }
}
