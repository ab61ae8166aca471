//! SimHash fingerprinting and a bucketed index over embedded sentences.
//!
//! Fingerprints are signs of dot products against seeded random
//! hyperplanes; queries probe every bucket within a Hamming radius of
//! the query fingerprint.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::{EmbedError, EmbeddingProvider, EmbeddingVector};
use crate::grammar::SyntheticSentence;

pub const MAX_BITS: u32 = 64;

#[derive(Debug, Error)]
pub enum LshError {
    #[error("fingerprint length {0} exceeds {MAX_BITS} bits")]
    TooManyBits(u32),
    #[error("dimension mismatch: index dim {index} vs vector dim {vector}")]
    DimensionMismatch { index: usize, vector: usize },
    #[error("no entries to index")]
    NoEntries,
    #[error("failed to embed \"{text}\": {source}")]
    Embed {
        text: String,
        #[source]
        source: EmbedError,
    },
    #[error("unsupported index version {0}")]
    Version(u32),
    #[error("index checksum mismatch (corrupted or truncated file)")]
    Checksum,
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct IndexEntry {
    pub id: usize,
    pub text: String,
    pub program: String,
    pub vector: EmbeddingVector,
}

#[derive(Debug)]
pub struct LshIndex {
    bits: u32,
    seed: u64,
    dim: usize,
    hyperplanes: Vec<EmbeddingVector>,
    buckets: HashMap<u64, Vec<usize>>,
    entries: Vec<IndexEntry>,
}

fn make_hyperplanes(seed: u64, bits: u32, dim: usize) -> Vec<EmbeddingVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..bits)
        .map(|_| {
            EmbeddingVector(
                (0..dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect(),
            )
        })
        .collect()
}

impl LshIndex {
    /// Embed, fingerprint, and bucket every sentence. Entry ids follow
    /// input order.
    pub fn build(
        sentences: &[SyntheticSentence],
        provider: &dyn EmbeddingProvider,
        bits: u32,
        seed: u64,
    ) -> Result<LshIndex, LshError> {
        let embedded: Result<Vec<(String, String, EmbeddingVector)>, LshError> = sentences
            .iter()
            .map(|s| {
                let text = s.text_joined();
                let v = provider.embed(&s.text).map_err(|e| LshError::Embed {
                    text: text.clone(),
                    source: e,
                })?;
                Ok((text, s.program.clone(), v))
            })
            .collect();
        Self::from_embedded(embedded?, bits, seed, provider.dim())
    }

    /// Build from already-embedded (text, program, vector) triples.
    pub fn from_embedded(
        items: Vec<(String, String, EmbeddingVector)>,
        bits: u32,
        seed: u64,
        dim: usize,
    ) -> Result<LshIndex, LshError> {
        if bits > MAX_BITS {
            return Err(LshError::TooManyBits(bits));
        }
        if items.is_empty() {
            return Err(LshError::NoEntries);
        }
        let hyperplanes = make_hyperplanes(seed, bits, dim);
        let mut index = LshIndex {
            bits,
            seed,
            dim,
            hyperplanes,
            buckets: HashMap::new(),
            entries: Vec::with_capacity(items.len()),
        };
        for (id, (text, program, vector)) in items.into_iter().enumerate() {
            if vector.dim() != dim {
                return Err(LshError::DimensionMismatch {
                    index: dim,
                    vector: vector.dim(),
                });
            }
            let fp = index.fingerprint(&vector)?;
            index.buckets.entry(fp).or_default().push(id);
            index.entries.push(IndexEntry {
                id,
                text,
                program,
                vector,
            });
        }
        Ok(index)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    pub fn max_bucket_size(&self) -> usize {
        self.buckets.values().map(Vec::len).max().unwrap_or(0)
    }

    /// Bit i is 1 iff hyperplane_i . v >= 0 (sign of 0 counts as +).
    pub fn fingerprint(&self, v: &EmbeddingVector) -> Result<u64, LshError> {
        if v.dim() != self.dim {
            return Err(LshError::DimensionMismatch {
                index: self.dim,
                vector: v.dim(),
            });
        }
        let mut fp = 0u64;
        for (i, plane) in self.hyperplanes.iter().enumerate() {
            if plane.dot(v) >= 0.0 {
                fp |= 1 << i;
            }
        }
        Ok(fp)
    }

    /// Entry ids in every bucket whose fingerprint is within Hamming
    /// distance `radius` of `fingerprint(v)`, ascending.
    pub fn query(&self, v: &EmbeddingVector, radius: u32) -> Result<Vec<usize>, LshError> {
        let fp = self.fingerprint(v)?;
        Ok(self.query_fingerprint(fp, radius))
    }

    pub fn query_fingerprint(&self, fp: u64, radius: u32) -> Vec<usize> {
        if radius >= self.bits {
            return (0..self.entries.len()).collect();
        }
        let mut ids = Vec::new();
        // probe by flip enumeration only while the Hamming ball is
        // smaller than the number of occupied buckets
        if ball_size(self.bits, radius) <= self.buckets.len() as u128 {
            let mut flips: Vec<u32> = Vec::new();
            self.enumerate_ball(fp, 0, radius, &mut flips, &mut ids);
        } else {
            for (&key, bucket) in &self.buckets {
                if (key ^ fp).count_ones() <= radius {
                    ids.extend_from_slice(bucket);
                }
            }
        }
        ids.sort_unstable();
        ids
    }

    fn enumerate_ball(
        &self,
        fp: u64,
        start_bit: u32,
        remaining: u32,
        flips: &mut Vec<u32>,
        ids: &mut Vec<usize>,
    ) {
        if let Some(bucket) = self.buckets.get(&fp) {
            ids.extend_from_slice(bucket);
        }
        if remaining == 0 {
            return;
        }
        for bit in start_bit..self.bits {
            flips.push(bit);
            self.enumerate_ball(fp ^ (1 << bit), bit + 1, remaining - 1, flips, ids);
            flips.pop();
        }
    }

    /// Structured-text container with a checksum over the entry lines.
    /// Vector components are stored as f64 bit patterns, so round-trips
    /// are bit-exact.
    pub fn save(&self, path: &Path) -> Result<(), LshError> {
        let mut body = String::new();
        for e in &self.entries {
            let hex: Vec<String> = e
                .vector
                .as_slice()
                .iter()
                .map(|x| format!("{:016x}", x.to_bits()))
                .collect();
            body.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.id,
                e.text,
                e.program,
                hex.join(" ")
            ));
        }
        let checksum = hex_sha256(body.as_bytes());
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "lshindex version: 1")?;
        writeln!(f, "bits: {}", self.bits)?;
        writeln!(f, "seed: {}", self.seed)?;
        writeln!(f, "dim: {}", self.dim)?;
        writeln!(f, "count: {}", self.entries.len())?;
        writeln!(f, "checksum: {checksum}")?;
        f.write_all(body.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<LshIndex, LshError> {
        let f = std::fs::File::open(path)?;
        let mut reader = BufReader::new(f);

        let mut header = HashMap::new();
        for _ in 0..6 {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Err(LshError::Corrupt("truncated header".into()));
            }
            let (key, val) = line
                .trim_end()
                .split_once(": ")
                .ok_or_else(|| LshError::Corrupt(format!("bad header line: {line:?}")))?;
            header.insert(key.to_string(), val.to_string());
        }
        let version: u32 = header
            .get("lshindex version")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| LshError::Corrupt("missing version".into()))?;
        if version != 1 {
            return Err(LshError::Version(version));
        }
        let get = |k: &str| -> Result<&String, LshError> {
            header
                .get(k)
                .ok_or_else(|| LshError::Corrupt(format!("missing header field '{k}'")))
        };
        let bits: u32 = get("bits")?.parse().map_err(|_| LshError::Corrupt("bad bits".into()))?;
        let seed: u64 = get("seed")?.parse().map_err(|_| LshError::Corrupt("bad seed".into()))?;
        let dim: usize = get("dim")?.parse().map_err(|_| LshError::Corrupt("bad dim".into()))?;
        let count: usize = get("count")?
            .parse()
            .map_err(|_| LshError::Corrupt("bad count".into()))?;
        let checksum = get("checksum")?.clone();

        let mut body = String::new();
        std::io::Read::read_to_string(&mut reader, &mut body)?;
        if hex_sha256(body.as_bytes()) != checksum {
            return Err(LshError::Checksum);
        }

        let mut items = Vec::with_capacity(count);
        for (i, line) in body.lines().enumerate() {
            let mut parts = line.splitn(4, '\t');
            let (id, text, program, hex) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
                _ => return Err(LshError::Corrupt(format!("entry {i}: bad field count"))),
            };
            let id: usize = id
                .parse()
                .map_err(|_| LshError::Corrupt(format!("entry {i}: bad id")))?;
            if id != i {
                return Err(LshError::Corrupt(format!("entry {i}: id out of order")));
            }
            let vector: Vec<f64> = hex
                .split_whitespace()
                .map(|h| u64::from_str_radix(h, 16).map(f64::from_bits))
                .collect::<Result<_, _>>()
                .map_err(|_| LshError::Corrupt(format!("entry {i}: bad vector")))?;
            items.push((text.to_string(), program.to_string(), EmbeddingVector(vector)));
        }
        if items.len() != count {
            return Err(LshError::Corrupt(format!(
                "expected {count} entries, found {}",
                items.len()
            )));
        }
        Self::from_embedded(items, bits, seed, dim)
    }
}

fn ball_size(bits: u32, radius: u32) -> u128 {
    let mut total: u128 = 0;
    let mut c: u128 = 1;
    for i in 0..=radius.min(bits) {
        total += c;
        c = c * (bits - i) as u128 / (i + 1) as u128;
    }
    total
}

fn hex_sha256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ReferenceProvider;
    use crate::grammar::{parse_grammar, G1};
    use rand::Rng;

    fn g1_index(bits: u32) -> LshIndex {
        let g = parse_grammar(G1).unwrap();
        let sents = g.enumerate(None).unwrap();
        let provider = ReferenceProvider::new(16, 0);
        LshIndex::build(&sents, &provider, bits, 1).unwrap()
    }

    #[test]
    fn build_partitions_entries() {
        let idx = g1_index(8);
        assert_eq!(idx.len(), 8);
        let total: usize = idx.buckets.values().map(Vec::len).sum();
        assert_eq!(total, 8);
        let mut all: Vec<usize> = idx.buckets.values().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn zero_bits_is_one_bucket() {
        let idx = g1_index(0);
        assert_eq!(idx.bucket_count(), 1);
        assert_eq!(idx.buckets[&0].len(), 8);
    }

    #[test]
    fn build_is_deterministic() {
        let a = g1_index(12);
        let b = g1_index(12);
        let mut ka: Vec<_> = a.buckets.iter().collect();
        let mut kb: Vec<_> = b.buckets.iter().collect();
        ka.sort();
        kb.sort();
        assert_eq!(ka, kb);
    }

    #[test]
    fn fingerprint_deterministic_and_antisymmetric() {
        let idx = g1_index(16);
        let provider = ReferenceProvider::new(16, 0);
        let v = provider
            .embed(&["red".to_string(), "ball".to_string()])
            .unwrap();
        let fp = idx.fingerprint(&v).unwrap();
        assert_eq!(fp, idx.fingerprint(&v).unwrap());
        let neg = idx.fingerprint(&v.negated()).unwrap();
        assert_eq!(fp ^ neg, (1u64 << 16) - 1);
    }

    #[test]
    fn fingerprint_dim_mismatch() {
        let idx = g1_index(16);
        let v = EmbeddingVector(vec![1.0; 3]);
        assert!(matches!(
            idx.fingerprint(&v),
            Err(LshError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn full_radius_returns_everything() {
        let idx = g1_index(16);
        let v = EmbeddingVector(vec![1.0; 16]);
        let ids = idx.query(&v, 16).unwrap();
        assert_eq!(ids, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn radius_zero_is_single_bucket() {
        let idx = g1_index(16);
        let entry = &idx.entries()[3];
        let fp = idx.fingerprint(&entry.vector).unwrap();
        let ids = idx.query(&entry.vector, 0).unwrap();
        assert_eq!(ids, idx.buckets[&fp].clone());
        assert!(ids.contains(&3));
    }

    #[test]
    fn query_monotone_in_radius() {
        let idx = g1_index(16);
        let provider = ReferenceProvider::new(16, 0);
        let v = provider
            .embed(&["yellow".to_string(), "door".to_string()])
            .unwrap();
        let mut prev: Vec<usize> = Vec::new();
        for r in 0..=16 {
            let ids = idx.query(&v, r).unwrap();
            assert!(prev.iter().all(|id| ids.contains(id)), "radius {r} dropped ids");
            prev = ids;
        }
        assert_eq!(prev.len(), 8);
    }

    #[test]
    fn flip_enumeration_and_bucket_scan_agree() {
        let idx = g1_index(10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let v = EmbeddingVector((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let fp = idx.fingerprint(&v).unwrap();
            for r in 0..10 {
                let mut by_flip = Vec::new();
                let mut flips = Vec::new();
                idx.enumerate_ball(fp, 0, r, &mut flips, &mut by_flip);
                by_flip.sort_unstable();
                let mut by_scan = Vec::new();
                for (&key, bucket) in &idx.buckets {
                    if (key ^ fp).count_ones() <= r {
                        by_scan.extend_from_slice(bucket);
                    }
                }
                by_scan.sort_unstable();
                assert_eq!(by_flip, by_scan);
            }
        }
    }

    #[test]
    fn hyperplanes_are_pure_function_of_seed() {
        let a = make_hyperplanes(9, 8, 12);
        let b = make_hyperplanes(9, 8, 12);
        assert_eq!(a, b);
        let c = make_hyperplanes(10, 8, 12);
        assert_ne!(a, c);
    }

    #[test]
    fn save_load_round_trip() {
        let idx = g1_index(16);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.lsh");
        idx.save(&path).unwrap();
        let loaded = LshIndex::load(&path).unwrap();
        assert_eq!(loaded.len(), idx.len());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let v = EmbeddingVector((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
            for r in [0, 1, 2, 16] {
                assert_eq!(idx.query(&v, r).unwrap(), loaded.query(&v, r).unwrap());
            }
        }
    }

    #[test]
    fn load_rejects_bad_version() {
        let idx = g1_index(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.lsh");
        idx.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let hacked = text.replace("lshindex version: 1", "lshindex version: 99");
        std::fs::write(&path, hacked).unwrap();
        assert!(matches!(LshIndex::load(&path), Err(LshError::Version(99))));
    }

    #[test]
    fn load_rejects_truncated_file() {
        let idx = g1_index(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.lsh");
        idx.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
        assert!(matches!(LshIndex::load(&path), Err(LshError::Checksum)));
    }
}
