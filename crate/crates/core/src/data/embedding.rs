//! Text embedding providers and the on-disk embedding cache.
//!
//! The cache is a binary matrix file (u64 LE row count, u64 LE dim, then row-major f32 LE)
//! plus a JSON sidecar `<file>.json` mapping the SHA-256 hex of each text to its row.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TEXT_EMBEDDING_DIM: usize = 768;

pub trait EmbeddingProvider {
    fn provider_id(&self) -> &str;

    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

pub fn text_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic hash-seeded embedder with components uniform in [-1, 1].
///
/// Components are f32-representable so they survive the cache round trip exactly.
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    seed: u64,
    dim: usize,
    id: String,
}

impl StubEmbedder {
    pub fn new(seed: u64) -> Self {
        Self::with_dim(seed, TEXT_EMBEDDING_DIM)
    }

    pub fn with_dim(seed: u64, dim: usize) -> Self {
        StubEmbedder {
            seed,
            dim,
            id: format!("stub-sha256-chacha8/seed={seed}/dim={dim}"),
        }
    }
}

impl EmbeddingProvider for StubEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&hasher.finalize());
        let mut rng = ChaCha8Rng::from_seed(seed);
        Ok((0..self.dim)
            .map(|_| rng.random_range(-1.0f32..=1.0) as f64)
            .collect())
    }
}

/// Precomputed embeddings keyed by text hash.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    dim: usize,
    rows: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingCache {
    pub fn new(dim: usize) -> Self {
        EmbeddingCache {
            dim,
            rows: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn insert(&mut self, text: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "embedding has {} components, cache dim is {}",
                vector.len(),
                self.dim
            )));
        }
        let hash = text_hash(text);
        if let Some(&row) = self.index.get(&hash) {
            let start = row * self.dim;
            for (dst, &v) in self.rows[start..start + self.dim].iter_mut().zip(vector) {
                *dst = v as f32;
            }
        } else {
            self.index.insert(hash, self.index.len());
            self.rows.extend(vector.iter().map(|&v| v as f32));
        }
        Ok(())
    }

    pub fn get(&self, text: &str) -> Option<Vec<f64>> {
        let row = *self.index.get(&text_hash(text))?;
        let start = row * self.dim;
        Some(self.rows[start..start + self.dim].iter().map(|&v| v as f64).collect())
    }

    /// Fills the cache from `provider` for every distinct text.
    pub fn populate<'a>(
        &mut self,
        provider: &dyn EmbeddingProvider,
        texts: impl IntoIterator<Item = &'a str>,
    ) -> Result<()> {
        for t in texts {
            if !self.index.contains_key(&text_hash(t)) {
                let v = provider.embed(t)?;
                self.insert(t, &v)?;
            }
        }
        Ok(())
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut os = path.as_os_str().to_owned();
        os.push(".json");
        PathBuf::from(os)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&(self.index.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        for v in &self.rows {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        let sidecar = Self::sidecar_path(path);
        let ordered: std::collections::BTreeMap<_, _> = self.index.iter().collect();
        fs::write(&sidecar, serde_json::to_vec_pretty(&ordered)?).map_err(|e| Error::file(&sidecar, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::file(path, e))?;
        let mut r = BufReader::new(file);
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let n_rows = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let dim = u64::from_le_bytes(word) as usize;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n_rows * dim * 4 {
            return Err(Error::invalid(format!(
                "embedding cache {}: expected {} float bytes, found {}",
                path.display(),
                n_rows * dim * 4,
                bytes.len()
            )));
        }
        let rows = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let sidecar = Self::sidecar_path(path);
        let text = fs::read(&sidecar).map_err(|e| Error::file(&sidecar, e))?;
        let index: HashMap<String, usize> = serde_json::from_slice(&text)?;
        if index.values().any(|&row| row >= n_rows) {
            return Err(Error::invalid("embedding sidecar points past the last row"));
        }
        Ok(EmbeddingCache { dim, rows, index })
    }
}

/// Serves embeddings from a cache, falling back to another provider on a miss.
pub struct CachedEmbedder {
    cache: EmbeddingCache,
    fallback: Option<Box<dyn EmbeddingProvider + Send + Sync>>,
    id: String,
}

impl CachedEmbedder {
    pub fn new(cache: EmbeddingCache, fallback: Option<Box<dyn EmbeddingProvider + Send + Sync>>) -> Self {
        let id = match &fallback {
            Some(f) => format!("cache+{}", f.provider_id()),
            None => "cache".to_owned(),
        };
        CachedEmbedder { cache, fallback, id }
    }
}

impl EmbeddingProvider for CachedEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.cache.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.cache.get(text) {
            return Ok(v);
        }
        match &self.fallback {
            Some(f) => f.embed(text),
            None => Err(Error::invalid(format!("text {:?} missing from embedding cache", text))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_is_deterministic_and_bounded() {
        let e = StubEmbedder::new(7);
        let a = e.embed("play now").unwrap();
        assert_eq!(a, e.embed("play now").unwrap());
        assert_eq!(a.len(), TEXT_EMBEDDING_DIM);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_ne!(a, e.embed("play later").unwrap());
        assert_ne!(a, StubEmbedder::new(8).embed("play now").unwrap());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let stub = StubEmbedder::with_dim(1, 16);
        let mut cache = EmbeddingCache::new(16);
        cache.populate(&stub, ["a", "b", "a", "c"]).unwrap();
        assert_eq!(cache.len(), 3);
        cache.save(&path).unwrap();

        let bytes = fs::read(&path).unwrap();
        assert_eq!(u64::from_le_bytes(bytes[0..8].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 16);
        assert_eq!(bytes.len(), 16 + 3 * 16 * 4);

        let loaded = EmbeddingCache::load(&path).unwrap();
        assert_eq!(loaded, cache);
        let served = CachedEmbedder::new(loaded, None);
        assert_eq!(served.embed("b").unwrap(), stub.embed("b").unwrap());
        assert!(served.embed("zzz").is_err());
    }
}
