//! Counter-based path substreams.
//!
//! Every Monte Carlo path owns an RNG derived from `(seed, path_index)`, so
//! the noise a path sees is independent of scheduling, thread count, and the
//! order in which paths are simulated. Re-simulating with the same seed
//! reproduces the increments bit for bit, which is what the common random
//! number contracts rely on.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// RNG for one path substream.
pub fn path_rng(seed: u64, path: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Brownian increments for one path: `n_steps * m` values laid out
/// step-major (`dw[step * m + k]`), each N(0, dt).
pub fn brownian_increments(seed: u64, path: usize, n_steps: usize, m: usize, dt: f64) -> Vec<f64> {
    let mut rng = path_rng(seed, path);
    let sqrt_dt = dt.sqrt();
    let normal = StandardNormal;
    (0..n_steps * m)
        .map(|_| {
            let z: f64 = normal.sample(&mut rng);
            z * sqrt_dt
        })
        .collect()
}

/// SHA-256 digest of a float slice (little-endian bit patterns), hex-encoded.
/// Used to assert that paired simulations consumed identical noise.
pub fn noise_checksum(values: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
