//! Sentence embeddings behind a uniform provider contract.
//!
//! Three providers are available: a deterministic reference embedder
//! (seeded per-token class vectors, mean pooling, zero mask vector), a
//! file-backed store of precomputed vectors, and a line-protocol client
//! for an external embedding service.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::{Mutex, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub const DEFAULT_MASK_TOKEN: &str = "[MASK]";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("empty token sequence")]
    EmptyInput,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("no embedding for: {0}")]
    MissingKey(String),
    #[error("line {line}: malformed embedding entry: {msg}")]
    MalformedEntry { line: usize, msg: String },
    #[error("service: {0}")]
    Service(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A d-dimensional real vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn negated(&self) -> EmbeddingVector {
        EmbeddingVector(self.0.iter().map(|x| -x).collect())
    }
}

/// Cosine distance 1 - u.v/(|u||v|), plus a flag marking zero-norm
/// inputs, for which the distance is defined as 1.0.
pub fn cosine_distance_flagged(
    u: &EmbeddingVector,
    v: &EmbeddingVector,
) -> Result<(f64, bool), EmbedError> {
    if u.dim() != v.dim() {
        return Err(EmbedError::DimensionMismatch {
            left: u.dim(),
            right: v.dim(),
        });
    }
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Ok((1.0, true));
    }
    let cos = u.dot(v) / (nu * nv);
    // clamp against fp drift so the result stays in [0, 2]
    Ok(((1.0 - cos).clamp(0.0, 2.0), false))
}

pub fn cosine_distance(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EmbedError> {
    cosine_distance_flagged(u, v).map(|(d, _)| d)
}

/// The embedding contract: a fixed dimension and a pure mapping from
/// token sequences to vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, tokens: &[String]) -> Result<EmbeddingVector, EmbedError>;
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic reference embedder. Each token maps to a class id
/// (via the synonym lexicon, falling back to the token itself); each
/// class gets a standard-normal vector seeded by (seed, class id); the
/// sentence vector is the mean of its token vectors. The mask token
/// embeds to zeros.
pub struct ReferenceProvider {
    dim: usize,
    seed: u64,
    lexicon: HashMap<String, String>,
    mask_token: String,
    cache: RwLock<HashMap<String, Vec<f64>>>,
}

impl ReferenceProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 1, "dim must be >= 1");
        ReferenceProvider {
            dim,
            seed,
            lexicon: HashMap::new(),
            mask_token: DEFAULT_MASK_TOKEN.to_string(),
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn with_lexicon(mut self, lexicon: HashMap<String, String>) -> Self {
        self.lexicon = lexicon;
        self
    }

    pub fn with_mask_token(mut self, mask: &str) -> Self {
        self.mask_token = mask.to_string();
        self
    }

    pub fn mask_token(&self) -> &str {
        &self.mask_token
    }

    fn class_of<'a>(&'a self, token: &'a str) -> &'a str {
        self.lexicon.get(token).map(String::as_str).unwrap_or(token)
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        if token == self.mask_token {
            return vec![0.0; self.dim];
        }
        let class = self.class_of(token);
        if let Some(v) = self.cache.read().unwrap().get(class) {
            return v.clone();
        }
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&fnv1a(class.as_bytes()).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        let v: Vec<f64> = (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        self.cache
            .write()
            .unwrap()
            .insert(class.to_string(), v.clone());
        v
    }
}

impl EmbeddingProvider for ReferenceProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &[String]) -> Result<EmbeddingVector, EmbedError> {
        if tokens.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        // accumulate per class in sorted order so the result is a
        // bit-exact function of the bag of token classes
        let mut counts: std::collections::BTreeMap<&str, usize> = std::collections::BTreeMap::new();
        for tok in tokens {
            if tok == &self.mask_token {
                continue; // zero vector contributes nothing to the sum
            }
            *counts.entry(self.class_of(tok)).or_insert(0) += 1;
        }
        let mut acc = vec![0.0; self.dim];
        for (class, count) in counts {
            let v = self.token_vector(class);
            let c = count as f64;
            for (a, x) in acc.iter_mut().zip(v) {
                *a += c * x;
            }
        }
        let n = tokens.len() as f64;
        for a in &mut acc {
            *a /= n;
        }
        Ok(EmbeddingVector(acc))
    }
}

/// Parse a synonym lexicon file: one `word class` pair per line, `#`
/// comments and blank lines ignored.
pub fn load_synonym_lexicon(path: &Path) -> Result<HashMap<String, String>, EmbedError> {
    let text = std::fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(word), Some(class), None) => {
                map.insert(word.to_string(), class.to_string());
            }
            _ => {
                return Err(EmbedError::MalformedEntry {
                    line: i + 1,
                    msg: format!("expected 'word class', got '{line}'"),
                })
            }
        }
    }
    Ok(map)
}

/// Provider backed by a file of precomputed vectors, keyed by the
/// space-joined token sequence.
pub struct FileProvider {
    dim: usize,
    entries: HashMap<String, EmbeddingVector>,
}

impl FileProvider {
    /// Format: header `dim <d>`, then `<tokens>\t<v1> <v2> ... <vd>`
    /// per line.
    pub fn load(path: &Path) -> Result<FileProvider, EmbedError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<FileProvider, EmbedError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(EmbedError::MalformedEntry {
            line: 1,
            msg: "empty file".into(),
        })?;
        let dim: usize = header
            .strip_prefix("dim ")
            .and_then(|d| d.trim().parse().ok())
            .ok_or_else(|| EmbedError::MalformedEntry {
                line: 1,
                msg: format!("expected 'dim <d>' header, got '{header}'"),
            })?;
        let mut entries = HashMap::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (key, vals) = line.split_once('\t').ok_or_else(|| EmbedError::MalformedEntry {
                line: i + 1,
                msg: "missing tab separator".into(),
            })?;
            let vec: Vec<f64> = vals
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| EmbedError::MalformedEntry {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            if vec.len() != dim {
                return Err(EmbedError::MalformedEntry {
                    line: i + 1,
                    msg: format!("expected {dim} values, got {}", vec.len()),
                });
            }
            entries.insert(key.to_string(), EmbeddingVector(vec));
        }
        Ok(FileProvider { dim, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl EmbeddingProvider for FileProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &[String]) -> Result<EmbeddingVector, EmbedError> {
        if tokens.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        let key = tokens.join(" ");
        self.entries
            .get(&key)
            .cloned()
            .ok_or(EmbedError::MissingKey(key))
    }
}

/// Client for the line-oriented embedding service protocol.
///
/// Handshake: client sends `HELLO`, server answers `DIM <d>`. Then each
/// `EMBED <tokens>` request gets `OK <v1> ... <vd>` or `ERR <message>`.
pub struct ServiceProvider {
    dim: usize,
    conn: Mutex<(BufReader<TcpStream>, TcpStream)>,
}

impl ServiceProvider {
    pub fn connect(endpoint: &str) -> Result<ServiceProvider, EmbedError> {
        let stream = TcpStream::connect(endpoint)
            .map_err(|e| EmbedError::Service(format!("connect {endpoint}: {e}")))?;
        let write = stream
            .try_clone()
            .map_err(|e| EmbedError::Service(e.to_string()))?;
        let mut reader = BufReader::new(stream);
        let mut w = write;
        w.write_all(b"HELLO\n")?;
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let dim: usize = line
            .trim()
            .strip_prefix("DIM ")
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| EmbedError::Service(format!("bad handshake reply: {line:?}")))?;
        Ok(ServiceProvider {
            dim,
            conn: Mutex::new((reader, w)),
        })
    }
}

impl EmbeddingProvider for ServiceProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &[String]) -> Result<EmbeddingVector, EmbedError> {
        if tokens.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        let mut conn = self.conn.lock().unwrap();
        let (reader, writer) = &mut *conn;
        writeln!(writer, "EMBED {}", tokens.join(" "))?;
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let line = line.trim_end();
        if let Some(msg) = line.strip_prefix("ERR ") {
            return Err(EmbedError::Service(msg.to_string()));
        }
        let vals = line
            .strip_prefix("OK ")
            .ok_or_else(|| EmbedError::Service(format!("bad reply: {line:?}")))?;
        let vec: Vec<f64> = vals
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| EmbedError::Service(e.to_string()))?;
        if vec.len() != self.dim {
            return Err(EmbedError::DimensionMismatch {
                left: self.dim,
                right: vec.len(),
            });
        }
        Ok(EmbeddingVector(vec))
    }
}

/// Serve the embedding protocol over `listener`, answering each
/// connection sequentially with vectors from `provider`. Runs until the
/// listener errors; intended for tests, examples, and ad-hoc tooling.
pub fn serve_embeddings(listener: TcpListener, provider: &dyn EmbeddingProvider) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let mut writer = stream.try_clone()?;
        let reader = BufReader::new(stream);
        for line in reader.lines() {
            let line = line?;
            let line = line.trim_end();
            if line == "HELLO" {
                writeln!(writer, "DIM {}", provider.dim())?;
            } else if let Some(sentence) = line.strip_prefix("EMBED ") {
                let tokens: Vec<String> =
                    sentence.split_whitespace().map(str::to_string).collect();
                match provider.embed(&tokens) {
                    Ok(v) => {
                        let vals: Vec<String> =
                            v.as_slice().iter().map(|x| format!("{x:?}")).collect();
                        writeln!(writer, "OK {}", vals.join(" "))?;
                    }
                    Err(e) => writeln!(writer, "ERR {e}")?,
                }
            } else {
                writeln!(writer, "ERR unknown command")?;
            }
        }
    }
    Ok(())
}
