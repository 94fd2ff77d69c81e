//! Stable seed derivation.
//!
//! Every random stream in the toolkit is keyed by a 64-bit value derived from a
//! global seed and a list of key parts (labels, ids, counters). The derivation
//! is FNV-1a over the parts followed by a SplitMix64 finalizer, so keys are
//! stable across releases and platforms and independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// One component of a derived key.
#[derive(Debug, Clone, Copy)]
pub enum KeyPart<'a> {
    Str(&'a str),
    Int(u64),
}

impl<'a> From<&'a str> for KeyPart<'a> {
    fn from(s: &'a str) -> Self {
        KeyPart::Str(s)
    }
}

impl<'a> From<&'a String> for KeyPart<'a> {
    fn from(s: &'a String) -> Self {
        KeyPart::Str(s.as_str())
    }
}

impl From<u64> for KeyPart<'_> {
    fn from(v: u64) -> Self {
        KeyPart::Int(v)
    }
}

impl From<usize> for KeyPart<'_> {
    fn from(v: usize) -> Self {
        KeyPart::Int(v as u64)
    }
}

impl From<u32> for KeyPart<'_> {
    fn from(v: u32) -> Self {
        KeyPart::Int(u64::from(v))
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv_bytes(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hash an ordered list of key parts. Strings and integers are tagged so that
/// `Str("1")` and `Int(1)` never collide trivially.
pub fn hash_parts(parts: &[KeyPart<'_>]) -> u64 {
    let mut h = FNV_OFFSET;
    for part in parts {
        match part {
            KeyPart::Str(s) => {
                h = fnv_bytes(h, b"s");
                h = fnv_bytes(h, &(s.len() as u64).to_le_bytes());
                h = fnv_bytes(h, s.as_bytes());
            }
            KeyPart::Int(v) => {
                h = fnv_bytes(h, b"i");
                h = fnv_bytes(h, &v.to_le_bytes());
            }
        }
    }
    mix64(h)
}

/// `seed ⊕ hash(parts)`, finalized.
pub fn derive(seed: u64, parts: &[KeyPart<'_>]) -> u64 {
    mix64(seed ^ hash_parts(parts))
}

/// A ChaCha8 stream keyed by `(seed, parts)`.
pub fn keyed_rng(seed: u64, parts: &[KeyPart<'_>]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}

/// Uniform value in `[0, 1)` from a counter position, without any RNG state.
pub fn unit_from(key: u64, counter: u64) -> f64 {
    (mix64(key ^ mix64(counter)) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[macro_export]
macro_rules! key {
    ($($part:expr),* $(,)?) => {
        &[$($crate::seed::KeyPart::from($part)),*]
    };
}
