//! Frozen hashed-token text embedder.

use std::collections::HashMap;
use std::sync::RwLock;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::ModelError;
use crate::prompting::stable_hash;

/// Maps a title to the mean of fixed random vectors, one per hashed token,
/// then L2-normalizes. The table is generated from a seed and never
/// trained. Encodings are memoised per title.
#[derive(Debug)]
pub struct TextEmbedder {
    seed: u64,
    table: Array2<f64>,
    cache: RwLock<HashMap<String, Array1<f64>>>,
}

impl Clone for TextEmbedder {
    fn clone(&self) -> Self {
        Self { seed: self.seed, table: self.table.clone(), cache: RwLock::default() }
    }
}

impl PartialEq for TextEmbedder {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.table == other.table
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(title: &str) -> Vec<String> {
    title
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl TextEmbedder {
    pub fn new(dim: usize, vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = Array2::from_shape_simple_fn((vocab.max(1), dim), || StandardNormal.sample(&mut rng));
        Self { seed, table, cache: RwLock::default() }
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn vocab(&self) -> usize {
        self.table.nrows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn bucket(&self, token: &str) -> usize {
        (stable_hash(token.as_bytes()) % self.vocab() as u64) as usize
    }

    pub fn encode(&self, title: &str) -> Result<Array1<f64>, ModelError> {
        if let Some(v) = self.cache.read().expect("cache lock").get(title) {
            return Ok(v.clone());
        }
        let v = self.encode_uncached(title)?;
        self.cache.write().expect("cache lock").insert(title.to_string(), v.clone());
        Ok(v)
    }

    fn encode_uncached(&self, title: &str) -> Result<Array1<f64>, ModelError> {
        let trimmed = title.trim();
        if trimmed.is_empty() {
            return Err(ModelError::EmptyTitle);
        }
        let mut tokens = tokenize(trimmed);
        if tokens.is_empty() {
            tokens.push(trimmed.to_string());
        }
        let mut v = Array1::zeros(self.dim());
        for t in &tokens {
            v += &self.table.row(self.bucket(t));
        }
        let norm = v.dot(&v).sqrt();
        if norm > 0.0 {
            v /= norm;
        }
        Ok(v)
    }

    /// SHA-256 over the table's little-endian bytes.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for x in self.table.iter() {
            hasher.update(x.to_le_bytes());
        }
        hasher.finalize().into()
    }
}
