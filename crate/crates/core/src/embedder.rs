//! Fusion vectors for (text, caption) pairs and token representations.
//!
//! Two backends sit behind [`Embedder`]:
//!
//! * `hashed` derives every vector from a seeded SHA-256 of the token, so the
//!   whole pipeline runs without pretrained weights. A token vector is built
//!   by seeding ChaCha8 with `sha256(seed_le || domain || 0x00 || token)`,
//!   drawing `dim` values uniform in `[-1, 1)` and normalizing to unit length.
//!   Fusion vectors are the weighted mean of text-token vectors (weight 1)
//!   and whitespace-split caption-token vectors (weight 0.5).
//! * `file` reads precomputed fusion vectors from a `PGIMVEC1` store keyed by
//!   sentence id.
//!
//! Token representations are bucket references into a trainable table owned
//! by the CRF model, whose initial rows come from the same seeded hash. An
//! optional `PGIMVEC1` store keyed by token string supplies frozen vectors.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::AnnotatedSentence;
use crate::error::{Error, Result};

pub const VEC_MAGIC: &[u8; 8] = b"PGIMVEC1";

/// Reserved token that separates the original text from knowledge tokens.
pub const KNOWLEDGE_SEPARATOR: &str = "<knowledge>";

pub const CAPTION_WEIGHT: f64 = 0.5;

const DOMAIN_TOKEN: &[u8] = b"token";
const DOMAIN_BUCKET: &[u8] = b"bucket";
const DOMAIN_ROW: &[u8] = b"row";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Hashed,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub backend: Backend,
    /// Fusion dimension.
    pub d: usize,
    /// Token dimension.
    pub e: usize,
    pub seed: Option<u64>,
    /// Fusion store for the `file` backend.
    pub path: Option<PathBuf>,
    /// Optional frozen token vectors keyed by token string.
    #[serde(default)]
    pub token_path: Option<PathBuf>,
    pub buckets: usize,
    pub max_length: usize,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec {
            backend: Backend::Hashed,
            d: 128,
            e: 32,
            seed: Some(0),
            path: None,
            token_path: None,
            buckets: 1 << 16,
            max_length: 256,
        }
    }
}

impl EmbedderSpec {
    pub fn hashed(seed: u64, d: usize, e: usize) -> Self {
        EmbedderSpec {
            seed: Some(seed),
            d,
            e,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.e == 0 || self.buckets == 0 || self.max_length == 0 {
            return Err(Error::Config(
                "d, e, buckets and max_length must be positive".into(),
            ));
        }
        match self.backend {
            Backend::Hashed if self.seed.is_none() => {
                Err(Error::Config("hashed backend requires a seed".into()))
            }
            Backend::File if self.path.is_none() => {
                Err(Error::Config("file backend requires a path".into()))
            }
            _ => Ok(()),
        }
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionVector {
    values: Vec<f64>,
    norm: f64,
}

impl FusionVector {
    pub fn new(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        FusionVector { values, norm }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        FusionVector::new(self.values.iter().map(|v| v * factor).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TokenRepr {
    /// Row of the model's trainable embedding table.
    Bucket(u32),
    /// Frozen, externally supplied vector.
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenReprSequence {
    items: Vec<TokenRepr>,
    boundary: usize,
}

impl TokenReprSequence {
    pub fn new(items: Vec<TokenRepr>, boundary: usize) -> Result<Self> {
        if boundary == 0 || boundary > items.len() {
            return Err(Error::InvalidInput(format!(
                "boundary {boundary} outside 1..={}",
                items.len()
            )));
        }
        Ok(TokenReprSequence { items, boundary })
    }

    pub fn items(&self) -> &[TokenRepr] {
        &self.items
    }

    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn with_boundary(self, boundary: usize) -> Result<Self> {
        TokenReprSequence::new(self.items, boundary)
    }
}

fn seeded_digest(seed: u64, domain: &[u8], data: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain);
    h.update([0u8]);
    h.update(data);
    h.finalize().into()
}

fn unit_vector(digest: [u8; 32], dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::from_seed(digest);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Seeded unit vector for a token string.
pub fn hash_vector(seed: u64, token: &str, dim: usize) -> Vec<f64> {
    unit_vector(seeded_digest(seed, DOMAIN_TOKEN, token.as_bytes()), dim)
}

/// Ordered id → vector map persisted as `PGIMVEC1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionStore {
    dim: usize,
    records: Vec<(String, Vec<f32>)>,
    index: HashMap<String, usize>,
}

impl FusionStore {
    pub fn new(dim: usize) -> Self {
        FusionStore {
            dim,
            records: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, values: Vec<f32>) -> Result<()> {
        let id = id.into();
        if values.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: values.len(),
            });
        }
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.records.len());
        self.records.push((id, values));
        Ok(())
    }

    /// Mean-pools a token matrix (rows of equal width) into one record.
    pub fn insert_pooled(&mut self, id: impl Into<String>, rows: &[Vec<f32>]) -> Result<()> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("cannot pool an empty matrix".into()));
        }
        let mut acc = vec![0f64; self.dim];
        for row in rows {
            if row.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    actual: row.len(),
                });
            }
            acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
        }
        let n = rows.len() as f64;
        self.insert(id, acc.into_iter().map(|a| (a / n) as f32).collect())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.records[i].1.as_slice())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(id, _)| id.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.records.len() * (8 + 4 * self.dim));
        out.extend_from_slice(VEC_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (id, values) in &self.records {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != VEC_MAGIC {
            return Err(bad("bad magic, expected PGIMVEC1"));
        }
        let dim = read_u32(&mut r).ok_or_else(|| bad("truncated header"))? as usize;
        let mut store = FusionStore::new(dim);
        while !r.is_empty() {
            let len = read_u32(&mut r).ok_or_else(|| bad("truncated record"))? as usize;
            if r.len() < len {
                return Err(bad("truncated record id"));
            }
            let (id, rest) = r.split_at(len);
            let id = std::str::from_utf8(id).map_err(|_| bad("record id is not UTF-8"))?;
            r = rest;
            if r.len() < 4 * dim {
                return Err(bad("truncated record values"));
            }
            let (vals, rest) = r.split_at(4 * dim);
            r = rest;
            let values = vals
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert(id, values)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        FusionStore::from_bytes(&bytes, path)
    }
}

fn read_u32(r: &mut &[u8]) -> Option<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}

#[derive(Debug, Clone)]
pub struct Embedder {
    spec: EmbedderSpec,
    fusion: Option<FusionStore>,
    token_vectors: Option<FusionStore>,
}

impl Embedder {
    pub fn new(spec: EmbedderSpec) -> Result<Self> {
        spec.validate()?;
        let fusion = match spec.backend {
            Backend::File => {
                let path = spec.path.as_deref().expect("validated");
                let store = FusionStore::load(path)?;
                if store.dim() != spec.d {
                    return Err(Error::DimensionMismatch {
                        expected: spec.d,
                        actual: store.dim(),
                    });
                }
                Some(store)
            }
            Backend::Hashed => None,
        };
        let token_vectors = match &spec.token_path {
            Some(path) => {
                let store = FusionStore::load(path)?;
                if store.dim() != spec.e {
                    return Err(Error::DimensionMismatch {
                        expected: spec.e,
                        actual: store.dim(),
                    });
                }
                Some(store)
            }
            None => None,
        };
        Ok(Embedder {
            spec,
            fusion,
            token_vectors,
        })
    }

    /// File-backed embedder over an in-memory store.
    pub fn from_store(mut spec: EmbedderSpec, store: FusionStore) -> Result<Self> {
        if store.dim() != spec.d {
            return Err(Error::DimensionMismatch {
                expected: spec.d,
                actual: store.dim(),
            });
        }
        spec.backend = Backend::File;
        Ok(Embedder {
            spec,
            fusion: Some(store),
            token_vectors: None,
        })
    }

    pub fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    /// Fusion vector for a sample. `id` is only consulted by the file backend.
    pub fn fuse(&self, id: &str, text: &[String], caption: Option<&str>) -> Result<FusionVector> {
        if text.is_empty() {
            return Err(Error::InvalidInput(format!("sample {id} has no tokens")));
        }
        match &self.fusion {
            Some(store) => {
                let v = store.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
                Ok(FusionVector::new(v.iter().map(|&x| x as f64).collect()))
            }
            None => Ok(self.hashed_fusion(text, caption)),
        }
    }

    fn hashed_fusion(&self, text: &[String], caption: Option<&str>) -> FusionVector {
        let seed = self.spec.seed();
        let d = self.spec.d;
        let mut acc = vec![0f64; d];
        let mut weight = 0f64;
        let mut add = |tok: &str, w: f64| {
            for (a, v) in acc.iter_mut().zip(hash_vector(seed, tok, d)) {
                *a += w * v;
            }
            weight += w;
        };
        for tok in text {
            add(tok, 1.0);
        }
        for tok in caption.unwrap_or("").split_whitespace() {
            add(tok, CAPTION_WEIGHT);
        }
        FusionVector::new(acc.into_iter().map(|a| a / weight).collect())
    }

    /// Bucket of a token in the trainable table; the separator owns the last row.
    pub fn bucket(&self, token: &str) -> u32 {
        if token == KNOWLEDGE_SEPARATOR {
            return self.spec.buckets as u32;
        }
        let digest = seeded_digest(self.spec.seed(), DOMAIN_BUCKET, token.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        (u64::from_le_bytes(b) % self.spec.buckets as u64) as u32
    }

    /// Number of rows in the trainable table, including the separator row.
    pub fn table_rows(&self) -> usize {
        self.spec.buckets + 1
    }

    /// Initial value of a table row.
    pub fn initial_row(&self, bucket: u32) -> Vec<f64> {
        unit_vector(
            seeded_digest(self.spec.seed(), DOMAIN_ROW, &bucket.to_le_bytes()),
            self.spec.e,
        )
    }

    pub fn embed_tokens(&self, tokens: &[String]) -> Result<TokenReprSequence> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("cannot embed an empty token list".into()));
        }
        if tokens.len() > self.spec.max_length {
            return Err(Error::InvalidInput(format!(
                "{} tokens exceed max length {}",
                tokens.len(),
                self.spec.max_length
            )));
        }
        let items = tokens
            .iter()
            .map(|t| {
                match self.token_vectors.as_ref().and_then(|s| s.get(t)) {
                    Some(v) => TokenRepr::Fixed(v.iter().map(|&x| x as f64).collect()),
                    None => TokenRepr::Bucket(self.bucket(t)),
                }
            })
            .collect();
        TokenReprSequence::new(items, tokens.len())
    }

    /// Materializes the initial vectors of a sequence.
    pub fn vectors(&self, seq: &TokenReprSequence) -> Vec<Vec<f64>> {
        seq.items()
            .iter()
            .map(|item| match item {
                TokenRepr::Bucket(b) => self.initial_row(*b),
                TokenRepr::Fixed(v) => v.clone(),
            })
            .collect()
    }
}

/// Fusion vectors for every sentence, in corpus order.
pub fn precompute_store(corpus: &[AnnotatedSentence], embedder: &Embedder) -> Result<FusionStore> {
    let mut store = FusionStore::new(embedder.spec().d);
    for s in corpus {
        let v = embedder.fuse(&s.id, &s.tokens, s.caption.as_deref())?;
        store.insert(s.id.clone(), v.values().iter().map(|&x| x as f32).collect())?;
    }
    Ok(store)
}
