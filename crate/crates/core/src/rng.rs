//! Counter-based splittable random streams.
//!
//! Every consumer of randomness receives a [`Stream`]: a 256-bit key derived
//! from a root seed by hashing a path of `u64` tags (experiment id, replica
//! index, trajectory index, ...). Streams are cheap to derive, cannot collide
//! unless the tag paths collide, and are independent of thread scheduling, so
//! replica farms can run in any order and still reduce deterministically.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; the standard constants.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A node in the seed tree. `key` already encodes the whole path from the
/// root, so children derived with distinct tags are distinct streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stream {
    key: u64,
}

impl Stream {
    pub fn root(seed: u64) -> Self {
        Stream { key: mix64(seed) }
    }

    /// Derive a child stream. Not commutative: `child(a).child(b)` differs
    /// from `child(b).child(a)`.
    pub fn child(&self, tag: u64) -> Self {
        Stream {
            key: mix64(self.key ^ mix64(tag.wrapping_add(0xa076_1d64_78bd_642f))),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Materialize the stream as a ChaCha8 generator. The 256-bit seed is
    /// expanded from the key by iterated mixing.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        let mut s = self.key;
        for chunk in seed.chunks_exact_mut(8) {
            s = mix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

/// Well-known top-level tags so call sites stay readable. Values are
/// arbitrary but frozen: changing them changes every downstream sample.
pub mod tags {
    pub const REPLICA: u64 = 1;
    pub const TRAJECTORY: u64 = 2;
    pub const FIELD: u64 = 3;
    pub const LABELS: u64 = 4;
    pub const EDGE_MARKS: u64 = 5;
    pub const COUNTS: u64 = 6;
    pub const BOOTSTRAP: u64 = 7;
    pub const HOLDING: u64 = 8;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible() {
        let a = Stream::root(42).child(7).child(3).rng().next_u64();
        let b = Stream::root(42).child(7).child(3).rng().next_u64();
        assert_eq!(a, b);
    }

    #[test]
    fn sibling_streams_differ() {
        let root = Stream::root(42);
        let a = root.child(0).rng().next_u64();
        let b = root.child(1).rng().next_u64();
        assert_ne!(a, b);
    }

    #[test]
    fn path_order_matters() {
        let root = Stream::root(9);
        assert_ne!(root.child(1).child(2).key(), root.child(2).child(1).key());
    }

    #[test]
    fn distinct_seeds_decorrelate() {
        // Crude but effective: first outputs of 1024 consecutive seeds should
        // not repeat.
        let mut seen = std::collections::HashSet::new();
        for seed in 0..1024u64 {
            assert!(seen.insert(Stream::root(seed).rng().next_u64()));
        }
    }
}
