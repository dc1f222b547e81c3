//! Token embedding storage, corpus manifests and the document/token id space.
//!
//! Embedding file layout (all integers little-endian):
//!
//! ```text
//! "XTRE" | u32 version = 1 | u8 normalized | u32 dim | u64 rows | rows*dim f32
//! ```
//!
//! Manifests are JSON lines, one object per document (or query); document
//! order defines token offsets into the embedding matrix.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"XTRE";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 4 + 8;

/// Tolerance on row norms for stores flagged `normalized`.
pub const NORM_TOLERANCE: f64 = 1e-4;

/// Row-major matrix of token embeddings. Always non-empty and finite.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

/// Borrowed view of consecutive rows of a [`TokenMatrix`].
#[derive(Clone, Copy, Debug)]
pub struct TokenSlice<'a> {
    dim: usize,
    data: &'a [f32],
}

impl TokenMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "matrix must have rows >= 1 and dim >= 1, got {rows}x{dim}"
            )));
        }
        if data.len() != rows * dim {
            return Err(Error::Shape(format!(
                "data length {} != {rows}x{dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::Shape(format!(
                    "row {i} has length {} but row 0 has {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn view(&self) -> TokenSlice<'_> {
        TokenSlice {
            dim: self.dim,
            data: &self.data,
        }
    }

    /// Rows `start..start + count` as a borrowed view.
    pub fn rows_view(&self, start: usize, count: usize) -> TokenSlice<'_> {
        TokenSlice {
            dim: self.dim,
            data: &self.data[start * self.dim..(start + count) * self.dim],
        }
    }

    pub fn row_norms(&self) -> impl Iterator<Item = f64> + '_ {
        self.data
            .chunks_exact(self.dim)
            .map(|r| crate::dot(r, r).sqrt())
    }

    /// First row whose L2 norm is outside `1 ± NORM_TOLERANCE`, if any.
    pub fn first_unnormalized_row(&self) -> Option<(usize, f64)> {
        self.row_norms()
            .enumerate()
            .find(|(_, n)| (n - 1.0).abs() > NORM_TOLERANCE)
    }

    /// Scales every row to unit L2 norm. Zero rows are left untouched.
    pub fn normalize_rows(&mut self) {
        for r in self.data.chunks_exact_mut(self.dim) {
            let n = crate::dot(r, r).sqrt();
            if n > 0.0 {
                for v in r.iter_mut() {
                    *v = (f64::from(*v) / n) as f32;
                }
            }
        }
    }
}

impl<'a> TokenSlice<'a> {
    pub fn new(dim: usize, data: &'a [f32]) -> Result<Self> {
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "slice of length {} is not a non-empty multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &'a [f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'a, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &'a [f32] {
        self.data
    }
}

impl<'a> From<&'a TokenMatrix> for TokenSlice<'a> {
    fn from(m: &'a TokenMatrix) -> Self {
        m.view()
    }
}

/// Decoded embedding file.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    pub matrix: TokenMatrix,
    pub normalized: bool,
}

pub fn encode_embeddings(matrix: &TokenMatrix, normalized: bool) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + matrix.data.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(u8::from(normalized));
    buf.extend_from_slice(&(matrix.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(matrix.rows as u64).to_le_bytes());
    for v in &matrix.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingFile> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::MalformedHeader("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported version {version}"
        )));
    }
    let normalized = match bytes[8] {
        0 => false,
        1 => true,
        other => {
            return Err(Error::MalformedHeader(format!(
                "normalized flag must be 0 or 1, got {other}"
            )))
        }
    };
    let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let rows = u64::from_le_bytes(bytes[13..21].try_into().unwrap());
    if dim == 0 || rows == 0 {
        return Err(Error::MalformedHeader(format!(
            "rows and dim must be positive, got rows={rows} dim={dim}"
        )));
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = (rows as u128) * (dim as u128) * 4;
    if (payload.len() as u128) < expected {
        return Err(Error::TruncatedPayload {
            expected: expected.min(u64::MAX as u128) as u64,
            found: payload.len() as u64,
        });
    }
    if payload.len() as u128 > expected {
        return Err(Error::MalformedHeader(format!(
            "{} trailing bytes after payload",
            payload.len() as u128 - expected
        )));
    }
    let rows = rows as usize;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let matrix = TokenMatrix::new(rows, dim, data)?;
    if normalized {
        if let Some((row, norm)) = matrix.first_unnormalized_row() {
            return Err(Error::NotNormalized { row, norm });
        }
    }
    Ok(EmbeddingFile { matrix, normalized })
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

pub fn write_embeddings(
    path: impl AsRef<Path>,
    matrix: &TokenMatrix,
    normalized: bool,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_embeddings(matrix, normalized)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub doc_id: String,
    pub token_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_texts: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryManifestEntry {
    pub query_id: String,
    pub token_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_texts: Option<Vec<String>>,
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(reader: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Manifest {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(entry);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, entries: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn parse_manifest(reader: impl BufRead) -> Result<Vec<ManifestEntry>> {
    parse_jsonl(reader)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(BufReader::new(f))
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    write_jsonl(path.as_ref(), entries)
}

pub fn read_query_manifest(path: impl AsRef<Path>) -> Result<Vec<QueryManifestEntry>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(f))
}

pub fn write_query_manifest(path: impl AsRef<Path>, entries: &[QueryManifestEntry]) -> Result<()> {
    write_jsonl(path.as_ref(), entries)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DocumentRecord {
    pub doc_id: Arc<str>,
    pub token_offset: usize,
    pub token_count: usize,
    pub token_texts: Option<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    /// L: number of documents.
    pub num_docs: usize,
    /// M: total document tokens.
    pub total_tokens: usize,
    /// m̄ = M / L.
    pub mean_doc_len: f64,
}

/// Immutable corpus: embeddings plus a partition of token rows into documents.
#[derive(Clone, Debug)]
pub struct Corpus {
    embeddings: TokenMatrix,
    normalized: bool,
    docs: Vec<DocumentRecord>,
    token_doc: Vec<u32>,
    stats: CorpusStats,
}

impl Corpus {
    pub fn build(
        manifest: Vec<ManifestEntry>,
        embeddings: TokenMatrix,
        normalized: bool,
    ) -> Result<Self> {
        let mut seen = HashSet::with_capacity(manifest.len());
        let mut total = 0usize;
        for e in &manifest {
            if !seen.insert(e.doc_id.as_str()) {
                return Err(Error::DuplicateId(e.doc_id.clone()));
            }
            if e.token_count == 0 {
                return Err(Error::EmptyDocument(e.doc_id.clone()));
            }
            if let Some(t) = &e.token_texts {
                if t.len() != e.token_count {
                    return Err(Error::Shape(format!(
                        "document {:?} has {} token texts for {} tokens",
                        e.doc_id,
                        t.len(),
                        e.token_count
                    )));
                }
            }
            total += e.token_count;
        }
        if manifest.is_empty() || total != embeddings.rows() {
            return Err(Error::TokenCountMismatch {
                manifest: total,
                embeddings: embeddings.rows(),
            });
        }
        if normalized {
            if let Some((row, norm)) = embeddings.first_unnormalized_row() {
                return Err(Error::NotNormalized { row, norm });
            }
        }

        let mut docs = Vec::with_capacity(manifest.len());
        let mut token_doc = Vec::with_capacity(total);
        let mut offset = 0;
        for (idx, e) in manifest.into_iter().enumerate() {
            token_doc.extend(std::iter::repeat_n(idx as u32, e.token_count));
            docs.push(DocumentRecord {
                doc_id: Arc::from(e.doc_id),
                token_offset: offset,
                token_count: e.token_count,
                token_texts: e.token_texts,
            });
            offset += e.token_count;
        }
        let stats = CorpusStats {
            num_docs: docs.len(),
            total_tokens: total,
            mean_doc_len: total as f64 / docs.len() as f64,
        };
        Ok(Self {
            embeddings,
            normalized,
            docs,
            token_doc,
            stats,
        })
    }

    pub fn load(embeddings: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<Self> {
        let EmbeddingFile { matrix, normalized } = load_embeddings(embeddings)?;
        Self::build(read_manifest(manifest)?, matrix, normalized)
    }

    pub fn save(&self, embeddings: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<()> {
        write_embeddings(embeddings, &self.embeddings, self.normalized)?;
        write_manifest(manifest, &self.manifest())
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.docs
            .iter()
            .map(|d| ManifestEntry {
                doc_id: d.doc_id.to_string(),
                token_count: d.token_count,
                token_texts: d.token_texts.clone(),
            })
            .collect()
    }

    pub fn stats(&self) -> CorpusStats {
        self.stats
    }

    pub fn docs(&self) -> &[DocumentRecord] {
        &self.docs
    }

    pub fn doc(&self, idx: usize) -> &DocumentRecord {
        &self.docs[idx]
    }

    pub fn num_tokens(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn embeddings(&self) -> &TokenMatrix {
        &self.embeddings
    }

    /// Document index and in-document position of a global token index.
    pub fn locate(&self, token: usize) -> (usize, usize) {
        let doc = self.token_doc[token] as usize;
        (doc, token - self.docs[doc].token_offset)
    }

    pub fn doc_tokens(&self, doc: usize) -> TokenSlice<'_> {
        let d = &self.docs[doc];
        self.embeddings.rows_view(d.token_offset, d.token_count)
    }

    pub fn token_text(&self, token: usize) -> Option<&str> {
        let (doc, pos) = self.locate(token);
        self.docs[doc]
            .token_texts
            .as_ref()
            .map(|t| t[pos].as_str())
    }

    pub fn has_token_texts(&self) -> bool {
        self.docs.iter().all(|d| d.token_texts.is_some())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub query_id: String,
    pub tokens: TokenMatrix,
    pub token_texts: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub queries: Vec<Query>,
    pub normalized: bool,
}

impl QuerySet {
    pub fn build(
        manifest: Vec<QueryManifestEntry>,
        embeddings: TokenMatrix,
        normalized: bool,
    ) -> Result<Self> {
        let total: usize = manifest.iter().map(|e| e.token_count).sum();
        if total != embeddings.rows() {
            return Err(Error::TokenCountMismatch {
                manifest: total,
                embeddings: embeddings.rows(),
            });
        }
        let mut seen = HashSet::new();
        let mut queries = Vec::with_capacity(manifest.len());
        let mut offset = 0;
        for e in manifest {
            if !seen.insert(e.query_id.clone()) {
                return Err(Error::DuplicateId(e.query_id));
            }
            if e.token_count == 0 {
                return Err(Error::EmptyDocument(e.query_id));
            }
            if let Some(t) = &e.token_texts {
                if t.len() != e.token_count {
                    return Err(Error::Shape(format!(
                        "query {:?} has {} token texts for {} tokens",
                        e.query_id,
                        t.len(),
                        e.token_count
                    )));
                }
            }
            let d = embeddings.dim();
            let data = embeddings.as_slice()[offset * d..(offset + e.token_count) * d].to_vec();
            queries.push(Query {
                query_id: e.query_id,
                tokens: TokenMatrix::new(e.token_count, d, data)?,
                token_texts: e.token_texts,
            });
            offset += e.token_count;
        }
        Ok(Self {
            queries,
            normalized,
        })
    }

    pub fn load(embeddings: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<Self> {
        let EmbeddingFile { matrix, normalized } = load_embeddings(embeddings)?;
        Self::build(read_query_manifest(manifest)?, matrix, normalized)
    }

    pub fn save(&self, embeddings: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<()> {
        let rows: Vec<&[f32]> = self
            .queries
            .iter()
            .flat_map(|q| q.tokens.as_slice().chunks_exact(q.tokens.dim()))
            .collect();
        write_embeddings(embeddings, &TokenMatrix::from_rows(&rows)?, self.normalized)?;
        let entries: Vec<_> = self
            .queries
            .iter()
            .map(|q| QueryManifestEntry {
                query_id: q.query_id.clone(),
                token_count: q.tokens.rows(),
                token_texts: q.token_texts.clone(),
            })
            .collect();
        write_query_manifest(manifest, &entries)
    }
}
