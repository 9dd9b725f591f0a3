//! Keyed random streams.
//!
//! Every stream is a ChaCha8 generator seeded from `(run_seed, purpose tag,
//! indices)`, so the stream for scene 17 or rollout (3, 5) does not depend on
//! how many other streams were drawn before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// 64-bit key derived from a seed, a tag and any number of indices.
pub fn derive_key(seed: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut k = splitmix(seed ^ splitmix(fnv1a(tag)));
    for &i in indices {
        k = splitmix(k ^ splitmix(i.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    k
}

pub fn stream(seed: u64, tag: &str, indices: &[u64]) -> StreamRng {
    let key = derive_key(seed, tag, indices);
    let mut bytes = [0u8; 32];
    for (j, chunk) in bytes.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix(key.wrapping_add(j as u64)).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
