//! Seed derivation. Every random draw in the crate comes from a ChaCha stream
//! keyed by a base seed plus a purpose tag, so results do not depend on call
//! order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a child seed from a base seed and a list of string/integer parts.
pub fn derive_seed(base: u64, parts: &[&dyn SeedPart]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        p.feed(&mut h);
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest has 32 bytes"))
}

pub fn stream(base: u64, parts: &[&dyn SeedPart]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, parts))
}

pub trait SeedPart {
    fn feed(&self, h: &mut Sha256);
}

impl SeedPart for &str {
    fn feed(&self, h: &mut Sha256) {
        h.update((self.len() as u64).to_le_bytes());
        h.update(self.as_bytes());
    }
}

impl SeedPart for String {
    fn feed(&self, h: &mut Sha256) {
        self.as_str().feed(h)
    }
}

impl SeedPart for u64 {
    fn feed(&self, h: &mut Sha256) {
        h.update([0xff]);
        h.update(self.to_le_bytes());
    }
}

impl SeedPart for usize {
    fn feed(&self, h: &mut Sha256) {
        (*self as u64).feed(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_tag_sensitive() {
        let a = derive_seed(7, &[&"pairing", &3u64]);
        let b = derive_seed(7, &[&"pairing", &3u64]);
        let c = derive_seed(7, &[&"pairing", &4u64]);
        let d = derive_seed(8, &[&"pairing", &3u64]);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
