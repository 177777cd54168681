//! Deterministic seed derivation.
//!
//! Every random stream in a run (bank init, weight init, shuffling,
//! augmentation, k-means restarts) derives from one root seed plus a purpose
//! tag, so reruns with the same root seed replay bit-identically and streams
//! never alias across purposes.

/// Derives a child seed from `(root, tag, index)`.
///
/// Stable across platforms and releases: FNV-1a over the tag, then two
/// splitmix64 rounds to mix in root and index.
pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(splitmix64(root ^ h).wrapping_add(index))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_tags_give_distinct_streams() {
        let a = derive_seed(7, "augment-bg", 0);
        let b = derive_seed(7, "augment-tg", 0);
        let c = derive_seed(7, "augment-bg", 1);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn derivation_is_deterministic() {
        assert_eq!(derive_seed(42, "shuffle", 3), derive_seed(42, "shuffle", 3));
    }
}
