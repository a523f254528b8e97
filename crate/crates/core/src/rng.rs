//! SplitMix64 (Steele, Lea & Flood; the generator behind Java's
//! `SplittableRandom` seeding). Tiny, fully specified and splittable, so any
//! reimplementation reproduces our measurement counts bit for bit.
//!
//! `next_u64`: `state += 0x9E3779B97F4A7C15`, then the `mix64` finalizer.
//! `next_f64`: top 53 bits scaled by `2^-53`, uniform on `[0, 1)`.
//! `split`: a child seeded with `mix64(next_u64())`.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// The SplitMix64 output finalizer.
pub const fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub const fn new(seed: u64) -> SplitMix64 {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn split(&mut self) -> SplitMix64 {
        SplitMix64::new(mix64(self.next_u64()))
    }
}

/// FNV-1a over `bytes`; used to turn task identifiers into seed material.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Deterministic per-stream seed: `mix64(base ^ mix64(stream))`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    mix64(base ^ mix64(stream.wrapping_add(GOLDEN_GAMMA)))
}
