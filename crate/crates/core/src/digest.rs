//! SHA-256 identity helpers.
//!
//! Every deterministic identifier (bronze_id, silver_id, gold_key, cache keys,
//! dedup keys, registry hashes) is a hex SHA-256 over length-prefixed parts, so
//! `("ab", "c")` and `("a", "bc")` never collide.

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Incremental digest over a tuple of fields.
#[derive(Default)]
pub struct KeyHasher {
    inner: Sha256,
}

impl KeyHasher {
    pub fn new(domain: &str) -> Self {
        let mut h = KeyHasher::default();
        h.bytes(domain.as_bytes());
        h
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.inner.update((b.len() as u64).to_le_bytes());
        self.inner.update(b);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn finish(&self) -> String {
        hex::encode(self.inner.clone().finalize())
    }
}
