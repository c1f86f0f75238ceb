//! SHA-256 helpers shared by the cache, manifests and versioned assets.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Hash of the canonical JSON encoding of `value`.
///
/// Struct fields serialize in declaration order and all maps used in hashed
/// values are `BTreeMap`s, so the encoding is stable.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("hashed values are always serializable");
    sha256_hex(bytes)
}
