//! Splittable seeding: every consumer derives its stream from the root seed
//! and a stable label, so adding or reordering consumers never shifts the
//! streams of the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeedTree(u64);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl SeedTree {
    pub const fn new(root: u64) -> Self {
        Self(root)
    }

    pub fn root(self) -> u64 {
        self.0
    }

    pub fn child(self, label: &str) -> Self {
        Self(splitmix64(self.0 ^ splitmix64(fnv1a(label))))
    }

    pub fn indexed(self, label: &str, index: u64) -> Self {
        self.child(label).child(&index.to_string())
    }

    pub fn rng(self, label: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.child(label).0)
    }
}
