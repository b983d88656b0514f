//! Seed plumbing. Every stochastic stage derives its own stream from a root
//! seed and a label, so runs are reproducible and adding a consumer never
//! shifts the draws of another.

use rand_chacha::ChaCha12Rng;

/// The stream cipher generator used everywhere. Counter-based, portable,
/// identical output on every platform.
pub type Rng = ChaCha12Rng;

/// Derives a child seed from a root seed and a stage label using a
/// splitmix64-style finalizer over the label hash. Distinct labels give
/// decorrelated streams; the mapping is stable and documented in run
/// manifests.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut z = root ^ crate::hash::fnv1a_bytes(label.as_bytes());
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Builds the generator for a derived stream.
pub fn stream(root: u64, label: &str) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(derive_seed(root, label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible() {
        let mut a = stream(7, "scene");
        let mut b = stream(7, "scene");
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn labels_decorrelate() {
        assert_ne!(derive_seed(7, "scene"), derive_seed(7, "noise"));
        assert_ne!(derive_seed(7, "scene"), derive_seed(8, "scene"));
    }
}
