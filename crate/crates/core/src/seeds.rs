//! Deterministic seed derivation.
//!
//! All randomness in the crate flows from one master seed through a tree of
//! labelled children, e.g. `master / "run" / 3 / "forest" / "tree" / 17`.
//! A node's seed is a pure function of the master seed and the path, so the
//! order in which workers visit nodes has no effect on the draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedTree(u64);

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        SeedTree(splitmix64(master))
    }

    /// Child node addressed by a stage label.
    pub fn child(&self, label: &str) -> Self {
        let mut h = splitmix64(self.0 ^ 0x5851_F42D_4C95_7F2D);
        for b in label.bytes() {
            h = splitmix64(h ^ u64::from(b));
        }
        SeedTree(splitmix64(h ^ label.len() as u64))
    }

    /// Child node addressed by an index.
    pub fn index(&self, i: u64) -> Self {
        SeedTree(splitmix64(splitmix64(self.0 ^ 0x2545_F491_4F6C_DD1D).wrapping_add(i)))
    }

    pub fn seed(&self) -> u64 {
        self.0
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn paths_are_pure_and_distinct() {
        let a = SeedTree::new(7).child("run").index(3);
        let b = SeedTree::new(7).child("run").index(3);
        assert_eq!(a, b);
        assert_ne!(a, SeedTree::new(7).child("run").index(4));
        assert_ne!(a, SeedTree::new(8).child("run").index(3));
        assert_ne!(SeedTree::new(7).child("ab"), SeedTree::new(7).child("ba"));
        let x: u64 = a.rng().random();
        let y: u64 = b.rng().random();
        assert_eq!(x, y);
    }
}
