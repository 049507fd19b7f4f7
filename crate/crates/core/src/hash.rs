use sha2::{Digest, Sha256};

/// Hex SHA-256 truncated to 16 hex chars, used to stamp artifacts.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}

pub fn hash_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    short_hash(&bytes)
}
