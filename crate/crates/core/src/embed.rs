//! Frozen sentence embeddings for anchors, fetched from an embeddings endpoint
//! or read from a precomputed file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::anchors::{texts_fingerprint, Anchor};
use crate::http::{blocking_client, post_json, EndpointConfig, RetryPolicy, TransportError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("embedding dimension changed from {first} to {found}")]
    DimensionMismatch { first: usize, found: usize },
    #[error("expected {expected} vectors, got {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("row id mismatch at position {position}: expected {expected}, found {found}")]
    RowMismatch { position: usize, expected: usize, found: usize },
    #[error("non-finite value in row {row_id}")]
    NonFinite { row_id: usize },
    #[error("embedding file does not match the anchor texts")]
    TextMismatch,
    #[error("nothing to embed")]
    Empty,
    #[error("embedding file error: {0}")]
    Format(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One vector per anchor, in anchor order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub vectors: Tensor,
    pub row_ids: Vec<usize>,
    pub provider_id: String,
}

impl EmbeddingMatrix {
    pub fn new(vectors: Tensor, row_ids: Vec<usize>, provider_id: impl Into<String>) -> Result<Self, EmbedError> {
        if vectors.rows() != row_ids.len() {
            return Err(EmbedError::CountMismatch {
                expected: row_ids.len(),
                found: vectors.rows(),
            });
        }
        for (i, row) in vectors.iter_rows().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(EmbedError::NonFinite { row_id: row_ids[i] });
            }
        }
        Ok(Self {
            dim: vectors.cols(),
            vectors,
            row_ids,
            provider_id: provider_id.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.row_ids.len()
    }

    /// SHA-256 over the shape, row ids and the exact bits of every entry.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n() as u64).to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        for id in &self.row_ids {
            h.update((*id as u64).to_le_bytes());
        }
        for v in self.vectors.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Rows reordered so that slot `i` holds the vector previously at `perm[i]`; row ids stay.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            dim: self.dim,
            vectors: self.vectors.select_rows(perm).expect("permutation in range"),
            row_ids: self.row_ids.clone(),
            provider_id: self.provider_id.clone(),
        }
    }

    /// Rows in the listed order, e.g. after dropping rows from the dataset.
    pub fn select(&self, row_ids: &[usize]) -> Result<Self, EmbedError> {
        let index: BTreeMap<usize, usize> = self.row_ids.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        let positions = row_ids
            .iter()
            .enumerate()
            .map(|(p, r)| {
                index.get(r).copied().ok_or(EmbedError::RowMismatch {
                    position: p,
                    expected: *r,
                    found: usize::MAX,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            dim: self.dim,
            vectors: self.vectors.select_rows(&positions).expect("positions in range"),
            row_ids: row_ids.to_vec(),
            provider_id: self.provider_id.clone(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, text_fingerprint: Option<String>) -> Result<(), EmbedError> {
        let path = path.as_ref();
        let io = |source| EmbedError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
        let header = EmbeddingFileHeader {
            dim: self.dim,
            provider_id: self.provider_id.clone(),
            n: self.n(),
            text_fingerprint,
        };
        writeln!(f, "{}", serde_json::to_string(&header).expect("header")).map_err(io)?;
        for (i, &row_id) in self.row_ids.iter().enumerate() {
            let record = EmbeddingRecord {
                row_id,
                vector: self.vectors.row(i).to_vec(),
            };
            writeln!(f, "{}", serde_json::to_string(&record).expect("record")).map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingFileHeader {
    pub dim: usize,
    pub provider_id: String,
    pub n: usize,
    /// Hash of the anchor texts the vectors were computed from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_fingerprint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub row_id: usize,
    pub vector: Vec<f64>,
}

/// Reads a precomputed embedding file and checks it against `anchors`.
pub fn load_precomputed(path: impl AsRef<Path>, anchors: &[Anchor]) -> Result<EmbeddingMatrix, EmbedError> {
    let (header, matrix) = read_embedding_file(path)?;
    let expected: Vec<usize> = anchors.iter().map(|a| a.row_id).collect();
    check_rows(&matrix.row_ids, &expected)?;
    if let Some(fp) = header.text_fingerprint {
        if fp != texts_fingerprint(anchors) {
            return Err(EmbedError::TextMismatch);
        }
    }
    Ok(matrix)
}

fn check_rows(found: &[usize], expected: &[usize]) -> Result<(), EmbedError> {
    if found.len() != expected.len() {
        return Err(EmbedError::CountMismatch {
            expected: expected.len(),
            found: found.len(),
        });
    }
    for (position, (&f, &e)) in found.iter().zip(expected).enumerate() {
        if f != e {
            return Err(EmbedError::RowMismatch {
                position,
                expected: e,
                found: f,
            });
        }
    }
    Ok(())
}

/// Parses an embedding file without checking it against anchors.
pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<(EmbeddingFileHeader, EmbeddingMatrix), EmbedError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| EmbedError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: EmbeddingFileHeader = serde_json::from_str(lines.next().ok_or_else(|| EmbedError::Format("empty file".into()))?)
        .map_err(|e| EmbedError::Format(format!("header: {e}")))?;
    let mut row_ids = Vec::with_capacity(header.n);
    let mut data = Vec::with_capacity(header.n * header.dim);
    for (i, line) in lines.enumerate() {
        let record: EmbeddingRecord =
            serde_json::from_str(line).map_err(|e| EmbedError::Format(format!("record {}: {e}", i + 1)))?;
        if record.vector.len() != header.dim {
            return Err(EmbedError::DimensionMismatch {
                first: header.dim,
                found: record.vector.len(),
            });
        }
        if record.vector.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite { row_id: record.row_id });
        }
        row_ids.push(record.row_id);
        data.extend(record.vector);
    }
    if row_ids.len() != header.n {
        return Err(EmbedError::CountMismatch {
            expected: header.n,
            found: row_ids.len(),
        });
    }
    let vectors = Tensor::matrix(row_ids.len(), header.dim, data).map_err(|e| EmbedError::Format(e.to_string()))?;
    let matrix = EmbeddingMatrix::new(vectors, row_ids, header.provider_id.clone())?;
    Ok((header, matrix))
}

pub trait EmbeddingTransport: Send + Sync {
    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, TransportError>;
}

/// OpenAI-compatible `embeddings` endpoint.
pub struct HttpEmbeddingTransport {
    endpoint: EndpointConfig,
    client: reqwest::blocking::Client,
}

impl HttpEmbeddingTransport {
    pub fn new(endpoint: EndpointConfig) -> Self {
        Self {
            endpoint,
            client: blocking_client(),
        }
    }
}

impl EmbeddingTransport for HttpEmbeddingTransport {
    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, TransportError> {
        let body = serde_json::json!({"model": model, "input": texts});
        let reply = post_json(&self.client, &self.endpoint, &body)?;
        let items = reply["data"]
            .as_array()
            .ok_or_else(|| TransportError::Decode("missing data array".into()))?;
        let mut out = vec![None; texts.len()];
        for (pos, item) in items.iter().enumerate() {
            let index = item["index"].as_u64().map_or(pos, |i| i as usize);
            let vector = item["embedding"]
                .as_array()
                .ok_or_else(|| TransportError::Decode("missing embedding".into()))?
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| TransportError::Decode("non-numeric entry".into())))
                .collect::<Result<Vec<f64>, _>>()?;
            let slot = out.get_mut(index).ok_or_else(|| TransportError::Decode(format!("index {index} out of range")))?;
            *slot = Some(vector);
        }
        out.into_iter()
            .map(|v| v.ok_or_else(|| TransportError::Decode("response is missing an input".into())))
            .collect()
    }
}

pub struct EmbeddingClient {
    pub transport: Box<dyn EmbeddingTransport>,
    pub model: String,
    pub retry: RetryPolicy,
    pub batch_size: usize,
    pub concurrency: usize,
}

impl EmbeddingClient {
    pub fn new(transport: Box<dyn EmbeddingTransport>, model: impl Into<String>) -> Self {
        Self {
            transport,
            model: model.into(),
            retry: RetryPolicy::default(),
            batch_size: 32,
            concurrency: 4,
        }
    }

    /// HTTP client configured from `TAGCC_EMB_URL`, `TAGCC_EMB_MODEL` and `TAGCC_EMB_KEY`.
    pub fn from_env() -> Result<Self, String> {
        let endpoint = EndpointConfig::from_env("TAGCC_EMB")?;
        let model = endpoint.model.clone();
        Ok(Self::new(Box::new(HttpEmbeddingTransport::new(endpoint)), model))
    }
}

/// Embeds each distinct anchor text once, in batches, and lays the vectors out in anchor order.
pub fn embed_texts(anchors: &[Anchor], client: &EmbeddingClient) -> Result<EmbeddingMatrix, EmbedError> {
    if anchors.is_empty() {
        return Err(EmbedError::Empty);
    }
    let mut unique: Vec<String> = anchors.iter().map(|a| a.text.clone()).collect();
    unique.sort();
    unique.dedup();
    let batches: Vec<&[String]> = unique.chunks(client.batch_size.max(1)).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Vec<Vec<f64>>, TransportError>>>> = Mutex::new(vec![None; batches.len()]);
    thread::scope(|scope| {
        for _ in 0..client.concurrency.clamp(1, batches.len()) {
            scope.spawn(|| loop {
                let b = next.fetch_add(1, Ordering::SeqCst);
                if b >= batches.len() {
                    break;
                }
                let r = client.retry.run(|| client.transport.embed(&client.model, batches[b]));
                results.lock().expect("results lock")[b] = Some(r);
            });
        }
    });

    let mut by_text: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut dim = None;
    for (batch, r) in batches.iter().zip(results.into_inner().expect("results lock")) {
        let vectors = r.expect("every batch ran")?;
        if vectors.len() != batch.len() {
            return Err(EmbedError::CountMismatch {
                expected: batch.len(),
                found: vectors.len(),
            });
        }
        for (text, v) in batch.iter().zip(vectors) {
            let first = *dim.get_or_insert(v.len());
            if v.len() != first {
                return Err(EmbedError::DimensionMismatch { first, found: v.len() });
            }
            by_text.insert(text, v);
        }
    }
    let dim = dim.expect("at least one vector");
    let mut data = Vec::with_capacity(anchors.len() * dim);
    for a in anchors {
        data.extend_from_slice(&by_text[a.text.as_str()]);
    }
    let vectors = Tensor::matrix(anchors.len(), dim, data).map_err(|e| EmbedError::Format(e.to_string()))?;
    EmbeddingMatrix::new(vectors, anchors.iter().map(|a| a.row_id).collect(), client.model.clone())
}
