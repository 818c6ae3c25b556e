//! Reproducible random streams.
//!
//! Every random quantity is drawn from a ChaCha20 stream keyed by the root
//! seed. The 64-bit ChaCha stream id is derived from a text label naming the
//! variable (`"x"`, `"beta_xa"`, ...) and an integer index (run, batch item,
//! ensemble member). Because ChaCha is counter-based, a stream's output depends
//! only on `(seed, label, index)` and never on how many values other streams
//! consumed, so adding a draw to one variable leaves every other variable
//! bit-for-bit unchanged.
//!
//! Key expansion: the 32-byte key is `seed` as little-endian in bytes 0..8
//! followed by zeros. Stream id: `fnv1a64(label) ^ splitmix64(index)`.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type StreamRng = ChaCha20Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Root of a family of independent named streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The stream for variable `label`, instance `index`.
    pub fn stream(&self, label: &str, index: u64) -> StreamRng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        let mut rng = ChaCha20Rng::from_seed(key);
        rng.set_stream(fnv1a64(label.as_bytes()) ^ splitmix64(index));
        rng
    }

    /// A child seed for a nested component (one Table-1 run, one ensemble member).
    pub fn child_seed(&self, label: &str, index: u64) -> u64 {
        splitmix64(self.seed ^ splitmix64(fnv1a64(label.as_bytes()) ^ splitmix64(index)))
    }
}
