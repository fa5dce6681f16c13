//! Content hashes used to tie artifacts to the configuration that made them.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the canonical JSON encoding of `value`.
pub fn hash_json<S: Serialize + ?Sized>(value: &S) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("serializable value"))
}
