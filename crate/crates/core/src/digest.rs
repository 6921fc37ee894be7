//! Stable content digests and seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Length-prefixed SHA-256 over several parts, so `["ab", "c"]` and
/// `["a", "bc"]` differ.
pub fn digest_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

pub fn digest_parts_hex(parts: &[&[u8]]) -> String {
    hex::encode(digest_parts(parts))
}

/// First eight bytes of [`digest_parts`] as a little-endian u64.
pub fn stable_u64(parts: &[&[u8]]) -> u64 {
    let d = digest_parts(parts);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// RNG seeded from a base seed and a context path. Independent of call order,
/// so per-item randomness survives parallel or resumed execution.
pub fn rng_for(seed: u64, context: &[&str]) -> ChaCha8Rng {
    let seed_bytes = seed.to_le_bytes();
    let mut parts: Vec<&[u8]> = vec![&seed_bytes];
    parts.extend(context.iter().map(|s| s.as_bytes()));
    ChaCha8Rng::seed_from_u64(stable_u64(&parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn parts_are_length_prefixed() {
        assert_ne!(digest_parts(&[b"ab", b"c"]), digest_parts(&[b"a", b"bc"]));
    }

    #[test]
    fn rng_for_is_deterministic() {
        let a: u64 = rng_for(3, &["img", "joy"]).random();
        let b: u64 = rng_for(3, &["img", "joy"]).random();
        let c: u64 = rng_for(4, &["img", "joy"]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
