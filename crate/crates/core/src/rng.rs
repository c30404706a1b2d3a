//! Splittable seeding on top of a counter-based stream cipher generator.
//!
//! Every random stream in the crate is addressed by a [`StreamKey`]. Keys are
//! split deterministically (`key.split(i)`), so a vertex stream depends only
//! on the master seed and the vertex's path word, and a draw stream depends
//! only on the master seed and the global draw index. Visit order and
//! replica layout never change the numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream generator used everywhere in the crate.
pub type StreamRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A 64-bit key naming one independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey(mix64(seed ^ 0x5851_F42D_4C95_7F2D))
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    /// Child key for index `i`. Distinct indices give unrelated keys.
    #[inline]
    pub fn split(self, i: u64) -> Self {
        StreamKey(mix64(self.0 ^ mix64(i.wrapping_add(1).wrapping_mul(GOLDEN))))
    }

    /// Key for a labelled sub-domain ("walk", "env", ...).
    pub fn domain(self, label: &str) -> Self {
        let h = label
            .bytes()
            .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3));
        self.split(h)
    }

    pub fn rng(self) -> StreamRng {
        StreamRng::seed_from_u64(self.0)
    }
}

/// Seed for the `index`-th draw of a run with the given master seed.
pub fn draw_seed(master: u64, domain: &str, index: u64) -> u64 {
    StreamKey::new(master).domain(domain).split(index).raw()
}
