use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RngAlgorithm {
    ChaCha20,
}

/// A splittable, counter-based random stream.
///
/// `derive(label, index)` yields an independent child stream whose key is read
/// from the parent's keystream at `(stream = hash(label), position = index)`,
/// so children never depend on how much of the parent was consumed and the
/// same tree of labels reproduces bit-identically on any thread layout.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    algorithm: RngAlgorithm,
    key: [u8; 32],
    rng: ChaCha20Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let key = ChaCha20Rng::seed_from_u64(seed).get_seed();
        Self::from_key(seed, key)
    }

    fn from_key(seed: u64, key: [u8; 32]) -> Self {
        SeededRng {
            seed,
            algorithm: RngAlgorithm::ChaCha20,
            key,
            rng: ChaCha20Rng::from_seed(key),
        }
    }

    /// Master seed this stream descends from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> RngAlgorithm {
        self.algorithm
    }

    pub fn derive(&self, label: &str, index: u64) -> SeededRng {
        let mut keygen = ChaCha20Rng::from_seed(self.key);
        keygen.set_stream(fnv1a64(label.as_bytes()));
        // 8 words (32 bytes) per child key
        keygen.set_word_pos(u128::from(index) * 8);
        let mut key = [0u8; 32];
        keygen.fill_bytes(&mut key);
        Self::from_key(self.seed, key)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
