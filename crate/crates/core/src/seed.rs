//! Named seed streams. Every random draw in the engine comes from a stream
//! derived from the master seed, so any stage can be re-run on its own and
//! still see the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// `master ^ H(stream)` where `H` is the first 8 bytes of SHA-256.
pub fn derive_seed(master: u64, stream: &str) -> u64 {
    let digest = Sha256::digest(stream.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    master ^ u64::from_le_bytes(bytes)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(master: u64, stream: &str) -> Rng {
    rng(derive_seed(master, stream))
}

/// Hex SHA-256 of arbitrary bytes; used for config fingerprints.
pub fn fingerprint(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(16)
        .map(|b| format!("{b:02x}"))
        .collect()
}
