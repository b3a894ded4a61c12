//! Named, position-keyed random streams.
//!
//! Every random draw in a run comes from a stream addressed by
//! `(master_seed, label, indices...)`. A stream is a ChaCha8 generator whose
//! key is the SHA-256 digest of that address, so opening a stream never
//! depends on how many values other streams have produced. Hooks open their
//! own `hook/<name>` labels and therefore cannot perturb training randomness.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub const INIT: &str = "init";
pub const DATA: &str = "data";
pub const DROPOUT: &str = "dropout";
pub const SHUFFLE: &str = "shuffle";
pub const FIXED_ORDER: &str = "fixed_order";
pub const EVAL: &str = "eval";

pub fn hook_label(hook: &str) -> String {
    format!("hook/{hook}")
}

/// Opens the stream at `(seed, label, indices)`.
pub fn stream(seed: u64, label: &str, indices: &[u64]) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(b"ordlab-stream-v1");
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    for &i in indices {
        hasher.update(i.to_le_bytes());
    }
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Unbiased draw from `[0, n)` by rejection on 64-bit words.
pub fn below(rng: &mut impl RngCore, n: u64) -> u64 {
    assert!(n > 0, "below(0)");
    let zone = u64::MAX - (u64::MAX % n + 1) % n;
    loop {
        let x = rng.next_u64();
        if x <= zone {
            return x % n;
        }
    }
}

/// Uniform draw from `[0, 1)` with 53 bits of resolution.
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Durstenfeld shuffle, walking from the last index down.
pub fn fisher_yates<T>(items: &mut [T], rng: &mut impl RngCore) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}
