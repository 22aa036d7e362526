use serde::Serialize;
use sha2::{Digest, Sha256};

/// 64-bit FNV-1a. Stable across platforms and releases, so hashed feature
/// indices in saved checkpoints stay valid.
pub fn fnv1a(parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            h ^= 0x1f;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        for b in part.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Lowercased whitespace tokens with surrounding punctuation removed.
/// Square brackets are kept so slot tags stay distinct from words.
pub fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| c.is_ascii_punctuation() && c != '[' && c != ']')
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn json_hash<T: Serialize + ?Sized>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("serializable"))
}

/// Mean that does not depend on the order of `values`: the terms are summed
/// in ascending order.
pub fn order_free_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum::<f64>() / sorted.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_separates_parts() {
        assert_ne!(fnv1a(&["ab", "c"]), fnv1a(&["a", "bc"]));
        assert_eq!(fnv1a(&[""]), 0xcbf2_9ce4_8422_2325);
    }

    #[test]
    fn tokens_keep_tags() {
        assert_eq!(
            tokens("[rationale] Hello, World. [baseline]"),
            vec!["[rationale]", "hello", "world", "[baseline]"]
        );
    }

    #[test]
    fn mean_is_order_free() {
        let a = [0.1, 1e16, -1e16, 0.3];
        let b = [-1e16, 0.3, 0.1, 1e16];
        assert_eq!(order_free_mean(&a).to_bits(), order_free_mean(&b).to_bits());
    }
}
