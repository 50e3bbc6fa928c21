//! SHA-256 digests of canonical JSON.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex SHA-256 of the value serialized as JSON with sorted object keys.
pub fn json_digest<T: Serialize + ?Sized>(value: &T) -> String {
    // Going through `Value` sorts map keys (serde_json's default map is ordered).
    let v = serde_json::to_value(value).expect("serializable value");
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

pub fn bytes_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn digest_ignores_map_insertion_order() {
        let mut a = HashMap::new();
        a.insert("x", 1);
        a.insert("y", 2);
        let mut b = HashMap::new();
        b.insert("y", 2);
        b.insert("x", 1);
        assert_eq!(json_digest(&a), json_digest(&b));
        assert_eq!(json_digest(&a).len(), 64);
    }

    #[test]
    fn empty_bytes_digest() {
        assert_eq!(
            bytes_digest(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
