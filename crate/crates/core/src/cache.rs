//! Precomputed speaker embeddings keyed by corpus utterance id.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::sha256_hex;
use crate::error::{Error, Result};
use crate::format::Container;
use crate::speaker::LayeredFeatures;
use crate::tensor::Tensor;

pub const CACHE_KIND: &str = "embedding_cache";

/// Hash of the reference features an embedding was computed from.
pub fn reference_hash(reference: &LayeredFeatures) -> String {
    let t = reference.tensor();
    let mut bytes = Vec::with_capacity(t.numel() * 8 + 24);
    for d in t.shape() {
        bytes.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sha256_hex(&bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EntryHeader {
    utterance_id: String,
    reference_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub reference_sha256: String,
    pub embedding: Vec<f64>,
}

/// Embeddings produced by one checkpoint (identified by `model_sha256`).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCache {
    pub model_sha256: String,
    pub d_emb: usize,
    entries: BTreeMap<String, CacheEntry>,
}

impl EmbeddingCache {
    pub fn new(model_sha256: impl Into<String>, d_emb: usize) -> Self {
        Self {
            model_sha256: model_sha256.into(),
            d_emb,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Hit only if the stored reference hash matches.
    pub fn get(&self, utterance_id: &str, reference_sha256: &str) -> Option<&[f64]> {
        self.entries
            .get(utterance_id)
            .filter(|e| e.reference_sha256 == reference_sha256)
            .map(|e| e.embedding.as_slice())
    }

    pub fn insert(&mut self, utterance_id: impl Into<String>, reference_sha256: impl Into<String>, embedding: Vec<f64>) -> Result<()> {
        if embedding.len() != self.d_emb {
            return Err(Error::dim("cache insert", &[self.d_emb], &[embedding.len()]));
        }
        self.entries.insert(
            utterance_id.into(),
            CacheEntry {
                reference_sha256: reference_sha256.into(),
                embedding,
            },
        );
        Ok(())
    }

    pub fn to_container(&self, provenance: &Value) -> Result<Container> {
        let headers: Vec<EntryHeader> = self
            .entries
            .iter()
            .map(|(id, e)| EntryHeader {
                utterance_id: id.clone(),
                reference_sha256: e.reference_sha256.clone(),
            })
            .collect();
        let mut c = Container::new(
            CACHE_KIND,
            json!({
                "model_sha256": self.model_sha256,
                "d_emb": self.d_emb,
                "entries": headers,
                "provenance": provenance,
            }),
        );
        if !self.entries.is_empty() {
            let data: Vec<f64> = self.entries.values().flat_map(|e| e.embedding.iter().copied()).collect();
            c.push("embeddings", Tensor::new([self.entries.len(), self.d_emb], data)?);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(CACHE_KIND)?;
        let model_sha256: String = serde_json::from_value(c.meta.get("model_sha256").cloned().unwrap_or(Value::Null))
            .map_err(|e| Error::Format(format!("cache model_sha256: {e}")))?;
        let d_emb: usize = serde_json::from_value(c.meta.get("d_emb").cloned().unwrap_or(Value::Null))
            .map_err(|e| Error::Format(format!("cache d_emb: {e}")))?;
        let headers: Vec<EntryHeader> = serde_json::from_value(c.meta.get("entries").cloned().unwrap_or(Value::Null))
            .map_err(|e| Error::Format(format!("cache entries: {e}")))?;
        if d_emb == 0 {
            return Err(Error::Format("cache d_emb must be positive".into()));
        }
        let mut cache = Self::new(model_sha256, d_emb);
        if headers.is_empty() {
            return match c.sections.is_empty() {
                true => Ok(cache),
                false => Err(Error::Format("empty cache carries a payload".into())),
            };
        }
        let t = c.section("embeddings")?;
        if t.shape() != [headers.len(), d_emb] {
            return Err(Error::Format(format!(
                "cache embeddings shape {:?} does not match {} entries of width {d_emb}",
                t.shape(),
                headers.len()
            )));
        }
        if !t.is_finite() {
            return Err(Error::Format("cache holds non-finite values".into()));
        }
        for (i, h) in headers.into_iter().enumerate() {
            let row = t.data()[i * d_emb..(i + 1) * d_emb].to_vec();
            if cache.entries.contains_key(&h.utterance_id) {
                return Err(Error::Format(format!("duplicate cache key {}", h.utterance_id)));
            }
            cache.entries.insert(
                h.utterance_id,
                CacheEntry {
                    reference_sha256: h.reference_sha256,
                    embedding: row,
                },
            );
        }
        Ok(cache)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::decode(bytes)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    /// Atomic write.
    pub fn write(&self, path: &Path, provenance: &Value) -> Result<()> {
        self.to_container(provenance)?.write(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_stale_miss() {
        let mut c = EmbeddingCache::new("abc", 2);
        c.insert("u1", "h1", vec![0.5, -1.0]).unwrap();
        c.insert("u0", "h0", vec![1.0, 2.0]).unwrap();
        assert!(c.insert("u2", "h2", vec![1.0]).is_err());
        let bytes = c.to_container(&json!({"seed": 1})).unwrap().encode().unwrap();
        let back = EmbeddingCache::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get("u1", "h1"), Some(&[0.5, -1.0][..]));
        assert_eq!(back.get("u1", "other"), None);
        assert_eq!(back.get("missing", "h1"), None);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut cache = EmbeddingCache::new("abc", 2);
        cache.insert("u0", "h0", vec![1.0, 2.0]).unwrap();
        let mut c = cache.to_container(&Value::Null).unwrap();
        c.meta["d_emb"] = json!(1);
        assert!(EmbeddingCache::from_container(&c).is_err());
        let empty = EmbeddingCache::new("abc", 2);
        let back = EmbeddingCache::decode(&empty.to_container(&Value::Null).unwrap().encode().unwrap()).unwrap();
        assert_eq!(back, empty);
    }
}
