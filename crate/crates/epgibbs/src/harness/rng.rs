//! Counter-based seed derivation: one root seed, independent streams per
//! purpose and index. Chains and generators never share a stream, so the
//! draw order is immune to evaluation order and thread count.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// Stream purposes, kept stable across versions since they define the
/// reproducible output byte-for-byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    DataGen,
    Init,
    Chain,
    Diagnostic,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::DataGen => 0x9e3779b97f4a7c15,
            Purpose::Init => 0xbf58476d1ce4e5b9,
            Purpose::Chain => 0x94d049bb133111eb,
            Purpose::Diagnostic => 0xd6e8feb86659fd93,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Child seed for `(root, purpose, index)`.
pub fn derive_seed(root: u64, purpose: Purpose, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ purpose.tag()) ^ index)
}

/// Deterministic generator for `(root, purpose, index)`.
pub fn derive_rng(root: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, purpose, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = derive_rng(7, Purpose::Chain, 0);
        let mut b = derive_rng(7, Purpose::Chain, 0);
        let mut c = derive_rng(7, Purpose::Chain, 1);
        let mut d = derive_rng(7, Purpose::DataGen, 0);
        let xa: u64 = a.random();
        assert_eq!(xa, b.random::<u64>());
        assert_ne!(xa, c.random::<u64>());
        assert_ne!(xa, d.random::<u64>());
    }
}
